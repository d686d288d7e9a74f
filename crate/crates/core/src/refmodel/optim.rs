use serde::{Deserialize, Serialize};

use super::network::{Dense, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Adagrad,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Optimizer state, laid out per layer like the parameters it updates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    params: OptimizerParams,
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: OptimizerParams, layers: &[Dense]) -> Self {
        Self {
            kind,
            params,
            first: Gradients::zeros_like(layers),
            second: Gradients::zeros_like(layers),
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, layers: &mut [Dense], grads: &Gradients, lr: f64) {
        self.step += 1;
        let OptimizerParams { beta1, beta2, epsilon } = self.params;
        let kind = self.kind;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (li, layer) in layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.first.layers[li];
            let v = &mut self.second.layers[li];
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| match kind {
                OptimizerKind::Sgd => *p -= lr * g,
                OptimizerKind::Adagrad => {
                    *v += g * g;
                    *p -= lr * g / (v.sqrt() + epsilon);
                }
                OptimizerKind::Adam => {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            };
            for i in 0..layer.weights.len() {
                update(&mut layer.weights[i], g.weights[i], &mut m.weights[i], &mut v.weights[i]);
            }
            if layer.has_bias {
                for i in 0..layer.bias.len() {
                    update(&mut layer.bias[i], g.bias[i], &mut m.bias[i], &mut v.bias[i]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::network::LayerGradient;

    fn layer() -> Dense {
        Dense { inputs: 2, outputs: 2, weights: vec![0.5, -0.5, 1.0, 0.0], bias: vec![0.0, 0.0], has_bias: true }
    }

    fn grads() -> Gradients {
        Gradients {
            layers: vec![LayerGradient { weights: vec![0.3, -2.0, 1e-3, -7.0], bias: vec![-0.1, 4.0] }],
        }
    }

    #[test]
    fn adam_with_vanishing_betas_moves_against_gradient_sign() {
        let mut layers = vec![layer()];
        let before = layers.clone();
        let params = OptimizerParams { beta1: 1e-12, beta2: 1e-12, epsilon: 1e-12 };
        let mut opt = Optimizer::new(OptimizerKind::Adam, params, &layers);
        let lr = 0.01;
        opt.step(&mut layers, &grads(), lr);
        let g = grads();
        for i in 0..4 {
            let moved = layers[0].weights[i] - before[0].weights[i];
            assert_eq!(moved.signum(), -g.layers[0].weights[i].signum());
            // sign-scaled: every step has magnitude ~lr regardless of |g|
            assert!((moved.abs() - lr).abs() < 1e-6);
        }
        for i in 0..2 {
            let moved = layers[0].bias[i] - before[0].bias[i];
            assert_eq!(moved.signum(), -g.layers[0].bias[i].signum());
        }
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut layers = vec![layer()];
        let params = OptimizerParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, params, &layers);
        opt.step(&mut layers, &grads(), 0.1);
        assert!((layers[0].weights[1] - (-0.5 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn disabled_bias_is_never_updated() {
        let mut l = layer();
        l.has_bias = false;
        let mut layers = vec![l];
        let params = OptimizerParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let mut opt = Optimizer::new(OptimizerKind::Adagrad, params, &layers);
        opt.step(&mut layers, &grads(), 0.1);
        assert_eq!(layers[0].bias, vec![0.0, 0.0]);
    }
}
