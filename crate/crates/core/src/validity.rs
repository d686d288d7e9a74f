//! Input validity oracle: an autoencoder trained on the training inputs, a
//! Gamma distribution fitted to its reconstruction errors, and a threshold at
//! a chosen false-alarm rate. Inputs reconstructing worse than the threshold
//! are flagged invalid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{self, digamma, ln_gamma, reg_lower_incomplete_gamma, trigamma, NumError};
use crate::refmodel::{Activation, Dense, Gradients, LabeledDataset, Network, Optimizer, OptimizerKind, OptimizerParams};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const MIN_GAMMA_SAMPLES: usize = 30;

#[derive(Debug, Error)]
pub enum ValidityError {
    #[error("invalid autoencoder config: {0}")]
    InvalidConfig(String),
    #[error("input has {found} values, autoencoder expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("autoencoder training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("gamma fit needs at least {MIN_GAMMA_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("gamma fit needs positive finite samples; sample {index} is {value}")]
    NonPositiveSample { index: usize, value: f64 },
    #[error("false-alarm rate {0} not in (0, 1)")]
    InvalidEpsilon(f64),
    #[error("gamma shape estimate did not converge after {0} Newton steps")]
    NoConvergence(usize),
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub bottleneck_dim: usize,
    /// Width of the layer on either side of the bottleneck; `None` gives a
    /// single hidden (bottleneck) layer.
    pub hidden_dim: Option<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl AutoencoderConfig {
    /// Bottleneck `max(2, d / 4)`, 100 epochs at learning rate 0.001.
    pub fn for_input_dim(input_dim: usize, seed: u64) -> Self {
        Self {
            bottleneck_dim: (input_dim / 4).max(2),
            hidden_dim: None,
            activation: Activation::Relu,
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 16,
            seed,
        }
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        match self.hidden_dim {
            Some(h) => vec![input_dim, h, self.bottleneck_dim, h, input_dim],
            None => vec![input_dim, self.bottleneck_dim, input_dim],
        }
    }

    fn validate(&self) -> Result<(), ValidityError> {
        let bad = |m: String| Err(ValidityError::InvalidConfig(m));
        if self.bottleneck_dim == 0 || self.hidden_dim == Some(0) {
            return bad("layer widths must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    pub network: Network,
    pub config: AutoencoderConfig,
    /// Mean training reconstruction error per epoch.
    pub loss_history: Vec<f64>,
}

impl AutoencoderModel {
    pub fn initialize(input_dim: usize, config: &AutoencoderConfig) -> Result<Self, ValidityError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(ValidityError::InvalidConfig("input_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_sizes(input_dim)
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], true, &mut rng))
            .collect();
        Ok(Self { network: Network { layers, activation: config.activation }, config: config.clone(), loss_history: Vec::new() })
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn reconstruct(&self, input: &[f64]) -> Result<Vec<f64>, ValidityError> {
        if input.len() != self.input_dim() {
            return Err(ValidityError::DimensionMismatch { expected: self.input_dim(), found: input.len() });
        }
        Ok(self.network.forward(input))
    }

    /// Mean squared error between `input` and its reconstruction.
    pub fn reconstruction_error(&self, input: &[f64]) -> Result<f64, ValidityError> {
        let out = self.reconstruct(input)?;
        Ok(mse(input, &out))
    }

    pub fn mean_error(&self, data: &LabeledDataset) -> Result<f64, ValidityError> {
        let mut total = 0.0;
        for row in data.rows() {
            total += self.reconstruction_error(row)?;
        }
        Ok(total / data.len() as f64)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mini-batch Adam on the mean squared reconstruction error.
pub fn train_autoencoder(train: &LabeledDataset, config: &AutoencoderConfig) -> Result<AutoencoderModel, ValidityError> {
    let mut model = AutoencoderModel::initialize(train.dim(), config)?;
    let params = OptimizerParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, params, &model.network.layers);
    let mut grads = Gradients::zeros_like(&model.network.layers);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let d = train.dim() as f64;
    let mut d_out = Vec::with_capacity(train.dim());
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.zero();
            for &i in batch {
                let x = train.row(i);
                let cache = model.network.forward_cached::<ChaCha8Rng>(x, None);
                let out = cache.output();
                epoch_loss += mse(x, out);
                d_out.clear();
                d_out.extend(out.iter().zip(x).map(|(o, t)| 2.0 * (o - t) / d));
                model.network.backward(&cache, &d_out, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            optimizer.step(&mut model.network.layers, &grads, config.learning_rate);
        }
        epoch_loss /= train.len() as f64;
        if !epoch_loss.is_finite() || !model.network.is_finite() {
            return Err(ValidityError::Diverged { epoch });
        }
        model.loss_history.push(epoch_loss);
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
    pub threshold: f64,
    pub false_alarm_rate: f64,
}

impl GammaFit {
    pub fn cdf(&self, x: f64) -> Result<f64, ValidityError> {
        gamma_cdf(self.shape, self.scale, x)
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        gamma_log_likelihood(self.shape, self.scale, samples)
    }
}

pub fn gamma_cdf(shape: f64, scale: f64, x: f64) -> Result<f64, ValidityError> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    Ok(reg_lower_incomplete_gamma(shape, x / scale)?)
}

pub fn gamma_log_likelihood(shape: f64, scale: f64, samples: &[f64]) -> f64 {
    samples
        .iter()
        .map(|&x| (shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln())
        .sum()
}

const NEWTON_MAX_STEPS: usize = 100;

/// Maximum-likelihood Gamma fit and the `1 - epsilon` quantile threshold.
pub fn fit_gamma(samples: &[f64], epsilon: f64) -> Result<GammaFit, ValidityError> {
    if samples.len() < MIN_GAMMA_SAMPLES {
        return Err(ValidityError::TooFewSamples(samples.len()));
    }
    if let Some((index, &value)) = samples.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(ValidityError::NonPositiveSample { index, value });
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(ValidityError::InvalidEpsilon(epsilon));
    }
    let mut stats = numkit::RunningStats::new();
    let mut log_sum = 0.0;
    for &x in samples {
        stats.push(x);
        log_sum += x.ln();
    }
    let mean = stats.mean();
    let s = mean.ln() - log_sum / samples.len() as f64;
    let shape = if stats.variance() > 0.0 && s > 0.0 {
        // method of moments start, then Newton on ln k - digamma(k) = s
        let mut k = mean * mean / stats.variance();
        let mut converged = false;
        for _ in 0..NEWTON_MAX_STEPS {
            let f = k.ln() - digamma(k)? - s;
            let df = 1.0 / k - trigamma(k)?;
            let mut next = k - f / df;
            if !(next > 0.0) {
                next = k / 2.0;
            }
            let step = (next - k).abs();
            k = next;
            if step <= 1e-12 * k {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(ValidityError::NoConvergence(NEWTON_MAX_STEPS));
        }
        k
    } else {
        return Err(ValidityError::NoConvergence(0));
    };
    let scale = mean / shape;
    let threshold = gamma_quantile(shape, scale, 1.0 - epsilon)?;
    Ok(GammaFit { shape, scale, threshold, false_alarm_rate: epsilon })
}

/// Bisection for `CDF(x) = p`.
pub fn gamma_quantile(shape: f64, scale: f64, p: f64) -> Result<f64, ValidityError> {
    let mut lo = 0.0;
    let mut hi = shape * scale;
    while gamma_cdf(shape, scale, hi)? < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_cdf(shape, scale, mid)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidityReport {
    pub total: usize,
    pub valid: usize,
    pub invalid: usize,
    pub validity_pct: f64,
    pub threshold: f64,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    pub epsilon: f64,
    #[serde(skip)]
    pub flags: Vec<bool>,
    #[serde(skip)]
    pub errors: Vec<f64>,
}

/// Scores every row; a row is valid when its error does not exceed the threshold.
pub fn validate_corpus<'a, I>(model: &AutoencoderModel, fit: &GammaFit, rows: I) -> Result<ValidityReport, ValidityError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let errors = rows.into_iter().map(|r| model.reconstruction_error(r)).collect::<Result<Vec<_>, _>>()?;
    if errors.is_empty() {
        return Err(ValidityError::EmptyCorpus);
    }
    let flags: Vec<bool> = errors.iter().map(|&e| e <= fit.threshold).collect();
    let valid = flags.iter().filter(|&&f| f).count();
    Ok(ValidityReport {
        total: flags.len(),
        valid,
        invalid: flags.len() - valid,
        validity_pct: 100.0 * valid as f64 / flags.len() as f64,
        threshold: fit.threshold,
        gamma_shape: fit.shape,
        gamma_scale: fit.scale,
        epsilon: fit.false_alarm_rate,
        flags,
        errors,
    })
}

#[derive(Debug, Clone)]
pub struct ValidityOracle {
    pub autoencoder: AutoencoderModel,
    pub fit: GammaFit,
}

impl ValidityOracle {
    /// Trains the autoencoder on `train` and fits the threshold to its
    /// training reconstruction errors.
    pub fn fit(train: &LabeledDataset, config: &AutoencoderConfig, epsilon: f64) -> Result<Self, ValidityError> {
        let autoencoder = train_autoencoder(train, config)?;
        let errors = train.rows().map(|r| autoencoder.reconstruction_error(r)).collect::<Result<Vec<_>, _>>()?;
        let fit = fit_gamma(&errors, epsilon)?;
        Ok(Self { autoencoder, fit })
    }

    pub fn validate<'a, I>(&self, rows: I) -> Result<ValidityReport, ValidityError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        validate_corpus(&self.autoencoder, &self.fit, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Gamma};

    fn draws(shape: f64, scale: f64, n: usize, seed: u64) -> Vec<f64> {
        let g = Gamma::new(shape, scale).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| g.sample(&mut rng)).collect()
    }

    #[test]
    fn exponential_recovery() {
        let fit = fit_gamma(&draws(1.0, 3.0, 10_000, 1), 0.01).unwrap();
        assert!((0.95..=1.05).contains(&fit.shape), "{fit:?}");
        assert!((fit.scale - 3.0).abs() < 0.15, "{fit:?}");
    }

    #[test]
    fn mle_beats_neighbours() {
        let xs = draws(2.0, 3.0, 2000, 7);
        let fit = fit_gamma(&xs, 0.01).unwrap();
        let best = fit.log_likelihood(&xs);
        for (dk, ds) in [(0.02, 0.0), (-0.02, 0.0), (0.0, 0.05), (0.0, -0.05)] {
            assert!(gamma_log_likelihood(fit.shape + dk, fit.scale + ds, &xs) < best);
        }
    }

    #[test]
    fn median_threshold() {
        let fit = fit_gamma(&draws(2.0, 3.0, 500, 3), 0.5).unwrap();
        assert!((fit.cdf(fit.threshold).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn threshold_monotone_in_epsilon() {
        let xs = draws(3.0, 0.01, 400, 4);
        let t: Vec<f64> = [0.1, 0.01, 1e-4].iter().map(|&e| fit_gamma(&xs, e).unwrap().threshold).collect();
        assert!(t[0] < t[1] && t[1] < t[2]);
        let far = fit_gamma(&xs, 1e-4).unwrap();
        assert!((far.cdf(far.threshold).unwrap() - (1.0 - 1e-4)).abs() < 1e-6);
    }

    #[test]
    fn fit_input_errors() {
        assert!(matches!(fit_gamma(&[1.0; 10], 0.1), Err(ValidityError::TooFewSamples(10))));
        let mut xs = draws(2.0, 1.0, 40, 1);
        xs[5] = 0.0;
        assert!(matches!(fit_gamma(&xs, 0.1), Err(ValidityError::NonPositiveSample { index: 5, .. })));
        assert!(matches!(fit_gamma(&draws(2.0, 1.0, 40, 1), 1.0), Err(ValidityError::InvalidEpsilon(_))));
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let data = LabeledDataset::new(vec![0.5; 40], 4, vec![0; 10], 1).unwrap();
        let cfg = AutoencoderConfig { epochs: 0, ..AutoencoderConfig::for_input_dim(4, 3) };
        let trained = train_autoencoder(&data, &cfg).unwrap();
        assert_eq!(trained.network, AutoencoderModel::initialize(4, &cfg).unwrap().network);
    }

    #[test]
    fn closed_form_errors() {
        let cfg = AutoencoderConfig::for_input_dim(3, 0);
        let mut ae = AutoencoderModel::initialize(3, &cfg).unwrap();
        for l in &mut ae.network.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = [0.2, 0.4, 0.8];
        assert!((ae.reconstruction_error(&x).unwrap() - (0.04 + 0.16 + 0.64) / 3.0).abs() < 1e-15);
        assert!(matches!(ae.reconstruction_error(&[0.1]), Err(ValidityError::DimensionMismatch { .. })));

        // identity: bottleneck 3, relu, positive inputs pass through unchanged
        let id = AutoencoderConfig { bottleneck_dim: 3, ..cfg };
        let mut ae = AutoencoderModel::initialize(3, &id).unwrap();
        for l in &mut ae.network.layers {
            l.weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            l.bias = vec![0.0; 3];
        }
        assert_eq!(ae.reconstruction_error(&x).unwrap(), 0.0);
    }

    #[test]
    fn manual_forward_pass() {
        // 2-1-2 with relu: h = relu(0.5 a - 0.25 b + 0.1), out = (2h, -h + 0.3)
        let cfg = AutoencoderConfig { bottleneck_dim: 1, ..AutoencoderConfig::for_input_dim(2, 0) };
        let mut ae = AutoencoderModel::initialize(2, &cfg).unwrap();
        ae.network.layers[0].weights = vec![0.5, -0.25];
        ae.network.layers[0].bias = vec![0.1];
        ae.network.layers[1].weights = vec![2.0, -1.0];
        ae.network.layers[1].bias = vec![0.0, 0.3];
        let (a, b) = (0.6f64, 0.4f64);
        let h = (0.5 * a - 0.25 * b + 0.1f64).max(0.0);
        let out = [2.0 * h, -h + 0.3];
        let expected = ((a - out[0]).powi(2) + (b - out[1]).powi(2)) / 2.0;
        assert!((ae.reconstruction_error(&[a, b]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn identity_capable_autoencoder_learns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<f64> = (0..20 * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let data = LabeledDataset::new(inputs, 4, vec![0; 20], 1).unwrap();
        let cfg = AutoencoderConfig {
            bottleneck_dim: 6,
            epochs: 400,
            learning_rate: 0.01,
            batch_size: 4,
            ..AutoencoderConfig::for_input_dim(4, 5)
        };
        let init = AutoencoderModel::initialize(4, &cfg).unwrap().mean_error(&data).unwrap();
        let ae = train_autoencoder(&data, &cfg).unwrap();
        let fin = ae.mean_error(&data).unwrap();
        assert!(fin < init && fin < 0.01, "{init} -> {fin}");
        assert_eq!(train_autoencoder(&data, &cfg).unwrap().network, ae.network);
    }

    #[test]
    fn report_counts() {
        let data = LabeledDataset::new(vec![0.5; 8], 2, vec![0; 4], 1).unwrap();
        let ae = AutoencoderModel::initialize(2, &AutoencoderConfig::for_input_dim(2, 1)).unwrap();
        let err = ae.reconstruction_error(data.row(0)).unwrap();
        let fit = GammaFit { shape: 2.0, scale: 1.0, threshold: err * 2.0, false_alarm_rate: 1e-4 };
        let one = validate_corpus(&ae, &fit, [data.row(0)]).unwrap();
        assert_eq!((one.total, one.valid, one.validity_pct), (1, 1, 100.0));
        assert!(matches!(validate_corpus(&ae, &fit, std::iter::empty()), Err(ValidityError::EmptyCorpus)));
        let json = serde_json::to_value(&one).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 8);
    }
}
