//! Dense layers, activations and manual backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    LogSigmoid,
    LeakyRelu,
}

const LEAKY_SLOPE: f64 = 0.01;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            // -ln(1 + e^-z), written to avoid overflow for large |z|
            Activation::LogSigmoid => z.min(0.0) - (-z.abs()).exp().ln_1p(),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::LogSigmoid => sigmoid(-z),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::LogSigmoid => "log_sigmoid",
            Activation::LeakyRelu => "leaky_relu",
        }
    }
}

/// Fully connected layer. `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub has_bias: bool,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, has_bias: bool) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            has_bias,
        }
    }

    /// Uniform Glorot initialization; biases start at zero.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, has_bias: bool, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Self { inputs, outputs, weights, bias: vec![0.0; outputs], has_bias }
    }

    pub fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = if self.has_bias { self.bias[o] } else { 0.0 };
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(layers: &[Dense]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| LayerGradient { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.outputs] })
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|g| *g = 0.0);
            l.bias.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|g| *g *= s);
            l.bias.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

/// Values kept from a forward pass for backpropagation.
pub(crate) struct ForwardCache {
    /// Input of each layer; `inputs[0]` is the network input.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer; the last entry is the linear output.
    pub pre: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers for each hidden layer output.
    pub masks: Vec<Option<Vec<f64>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("network has at least one layer")
    }
}

/// Multilayer perceptron: hidden layers use `activation`, the final layer is
/// linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Post-activation outputs of every hidden layer followed by the linear
    /// output layer.
    pub fn layer_outputs(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::new();
            layer.affine(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            outs.push(next.clone());
            cur = next;
        }
        outs
    }

    pub(crate) fn forward_cached<R: Rng>(&self, x: &[f64], dropout: Option<(f64, &mut R)>) -> ForwardCache {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n.saturating_sub(1));
        let mut cur = x.to_vec();
        let mut dropout = dropout.filter(|(rate, _)| *rate > 0.0);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(&cur, &mut z);
            inputs.push(cur);
            if i + 1 < n {
                let mut a: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
                let mask = dropout.as_mut().map(|(rate, rng)| {
                    let keep = 1.0 - *rate;
                    (0..a.len())
                        .map(|_| if rng.random::<f64>() >= *rate { 1.0 / keep } else { 0.0 })
                        .collect::<Vec<f64>>()
                });
                if let Some(m) = &mask {
                    a.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                }
                masks.push(mask);
                cur = a;
            } else {
                cur = Vec::new();
            }
            pre.push(z);
        }
        ForwardCache { inputs, pre, masks }
    }

    /// Accumulates parameter gradients given dLoss/dOutput.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_out: &[f64], grads: &mut Gradients) {
        let mut delta = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let g = &mut grads.layers[l];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
                if layer.has_bias {
                    g.bias[o] += d;
                }
            }
            if l == 0 {
                break;
            }
            let mut d_prev = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                d_prev.iter_mut().zip(row).for_each(|(dp, w)| *dp += w * d);
            }
            if let Some(mask) = &cache.masks[l - 1] {
                d_prev.iter_mut().zip(mask).for_each(|(dp, m)| *dp *= m);
            }
            for (dp, &z) in d_prev.iter_mut().zip(&cache.pre[l - 1]) {
                *dp *= self.activation.derivative(z);
            }
            delta = d_prev;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_derivatives_match_finite_difference() {
        let h = 1e-6;
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::LogSigmoid] {
            for &z in &[-3.0, -0.4, 0.3, 2.2] {
                let fd = (act.apply(z + h) - act.apply(z - h)) / (2.0 * h);
                assert!((act.derivative(z) - fd).abs() < 1e-8, "{act:?} at {z}");
            }
        }
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::LeakyRelu.apply(-1.0), -0.01);
        assert!((Activation::LogSigmoid.apply(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(Activation::LogSigmoid.apply(-800.0).is_finite());
    }

    #[test]
    fn forward_matches_manual_product() {
        let net = Network {
            layers: vec![
                Dense {
                    inputs: 2,
                    outputs: 2,
                    weights: vec![1.0, -1.0, 0.5, 2.0],
                    bias: vec![0.1, -0.2],
                    has_bias: true,
                },
                Dense { inputs: 2, outputs: 1, weights: vec![3.0, -1.0], bias: vec![0.0], has_bias: false },
            ],
            activation: Activation::Relu,
        };
        let x = [0.3, 0.7];
        let h0 = (0.3 - 0.7 + 0.1f64).max(0.0);
        let h1 = (0.15 + 1.4 - 0.2f64).max(0.0);
        let out = net.forward(&x);
        assert!((out[0] - (3.0 * h0 - h1)).abs() < 1e-15);
        let layers = net.layer_outputs(&x);
        assert_eq!(layers.len(), 2);
        assert!((layers[0][1] - h1).abs() < 1e-15);
    }
}
