//! Reference classifier: a small multilayer perceptron trained with softmax
//! cross-entropy. It produces the logit-layer traces and per-neuron
//! activations the metrics consume, and it is the substrate that mutation
//! operators perturb before retraining.

mod data;
mod network;
mod optim;
mod persist;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::DenseVector;
use crate::traces::{LatentTrace, SplitTag, TraceError, TraceSet};

pub use data::{make_dataset, read_digits_file, DatasetKind, DatasetSpec, DatasetSplits, LabeledDataset};
pub use network::{Activation, Dense, Gradients, LayerGradient, Network};
pub use optim::{Optimizer, OptimizerKind, OptimizerParams};
pub use persist::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};


#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("shape mismatch: expected input dim {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("training diverged at epoch {epoch}: loss became {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset file {path}: {message}")]
    DatasetFile { path: PathBuf, message: String },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Traces(#[from] TraceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
    /// One flag per weight layer; an empty list means every layer has a bias.
    #[serde(default)]
    pub use_bias_per_layer: Vec<bool>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Self {
        let n = layer_sizes.len().saturating_sub(1);
        Self { layer_sizes, activation, dropout_rate: 0.0, use_bias_per_layer: vec![true; n], seed }
    }

    pub fn weight_layers(&self) -> usize {
        self.layer_sizes.len().saturating_sub(1)
    }

    pub fn has_bias(&self, layer: usize) -> bool {
        self.use_bias_per_layer.get(layer).copied().unwrap_or(true)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::InvalidConfig("layer_sizes needs at least input and output sizes".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(ModelError::InvalidConfig("layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        if !self.use_bias_per_layer.is_empty() && self.use_bias_per_layer.len() != self.weight_layers() {
            return Err(ModelError::InvalidConfig(format!(
                "use_bias_per_layer has {} entries for {} weight layers",
                self.use_bias_per_layer.len(),
                self.weight_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
    /// When set, gradients accumulate across batches instead of being reset.
    #[serde(default)]
    pub skip_zero_grad: bool,
    #[serde(default)]
    pub seed: u64,
    /// Halve the learning rate after 3 epochs without improvement.
    #[serde(default = "default_true")]
    pub lr_scheduler: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

pub const SCHEDULER_PATIENCE: usize = 3;
pub const EARLY_STOP_PATIENCE: usize = 6;

impl TrainConfig {
    pub fn adam(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            optimizer: OptimizerKind::Adam,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            skip_zero_grad: false,
            seed,
            lr_scheduler: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
        }
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) {
            return Err(ModelError::InvalidConfig("adam betas must lie in (0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(ModelError::InvalidConfig("adam_epsilon must be positive".into()));
        }
        Ok(())
    }

    fn optimizer_params(&self) -> OptimizerParams {
        OptimizerParams { beta1: self.adam_beta1, beta2: self.adam_beta2, epsilon: self.adam_epsilon }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub config: ModelConfig,
    pub train_config: TrainConfig,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
}

impl TrainedModel {
    /// Seeded Glorot initialization without any training.
    pub fn initialize(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self, ModelError> {
        model_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(model_cfg.seed);
        let layers = model_cfg
            .layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::glorot(w[0], w[1], model_cfg.has_bias(i), &mut rng))
            .collect();
        Ok(Self {
            network: Network { layers, activation: model_cfg.activation },
            config: model_cfg.clone(),
            train_config: train_cfg.clone(),
            loss_history: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.network.output_dim()
    }

    fn check_dim(&self, found: usize) -> Result<(), ModelError> {
        if found != self.input_dim() {
            return Err(ModelError::ShapeMismatch { expected: self.input_dim(), found });
        }
        Ok(())
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(input.len())?;
        Ok(self.network.forward(input))
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.logits(input)?))
    }

    /// Post-activation values of every hidden layer, then the logits.
    pub fn layer_activations(&self, input: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_dim(input.len())?;
        Ok(self.network.layer_outputs(input))
    }

    /// Number of neurons reported by [`Self::layer_activations`].
    pub fn neuron_count(&self) -> usize {
        self.network.layers.iter().map(|l| l.outputs).sum()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &TrainedModel, inputs: &LabeledDataset) -> Result<Vec<usize>, ModelError> {
    model.check_dim(inputs.dim())?;
    Ok(inputs.rows().map(|r| argmax(&model.network.forward(r))).collect())
}

pub fn accuracy(model: &TrainedModel, data: &LabeledDataset) -> Result<f64, ModelError> {
    let preds = predict(model, data)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// One trace per input: the pre-softmax logits and their argmax.
pub fn extract_traces(
    model: &TrainedModel,
    data: &LabeledDataset,
    split_tag: SplitTag,
) -> Result<TraceSet, ModelError> {
    model.check_dim(data.dim())?;
    if data.class_count() != model.class_count() {
        return Err(ModelError::InvalidData(format!(
            "dataset has {} classes but the model emits {} logits",
            data.class_count(),
            model.class_count()
        )));
    }
    let traces = data
        .rows()
        .enumerate()
        .map(|(i, row)| {
            let logits = model.network.forward(row);
            let predicted = argmax(&logits);
            let latent = DenseVector::new(logits)
                .map_err(|e| ModelError::InvalidData(format!("input {i}: {e}")))?;
            Ok(LatentTrace { input_id: i as u32, ground_truth: data.label(i), predicted, latent })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(TraceSet::new(split_tag, model.class_count(), traces)?)
}

fn softmax_cross_entropy(logits: &[f64], label: usize, d_logits: &mut Vec<f64>) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_sum = max + sum.ln();
    d_logits.clear();
    d_logits.extend(logits.iter().map(|z| (z - log_sum).exp()));
    d_logits[label] -= 1.0;
    log_sum - logits[label]
}

/// Mean cross-entropy over `data` with dropout disabled.
pub fn loss(model: &TrainedModel, data: &LabeledDataset) -> Result<f64, ModelError> {
    model.check_dim(data.dim())?;
    let mut scratch = Vec::new();
    let total: f64 = data
        .rows()
        .enumerate()
        .map(|(i, r)| softmax_cross_entropy(&model.network.forward(r), data.label(i), &mut scratch))
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean cross-entropy and its exact gradient with dropout disabled.
pub fn loss_and_gradients(
    model: &TrainedModel,
    data: &LabeledDataset,
) -> Result<(f64, Gradients), ModelError> {
    model.check_dim(data.dim())?;
    let mut grads = Gradients::zeros_like(&model.network.layers);
    let mut d_logits = Vec::new();
    let mut total = 0.0;
    for (i, row) in data.rows().enumerate() {
        let cache = model.network.forward_cached::<ChaCha8Rng>(row, None);
        total += softmax_cross_entropy(cache.output(), data.label(i), &mut d_logits);
        model.network.backward(&cache, &d_logits, &mut grads);
    }
    let scale = 1.0 / data.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

pub fn train(
    data: &LabeledDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainedModel, ModelError> {
    train_with_validation(data, None, model_cfg, train_cfg)
}

/// Mini-batch training. The monitored loss for the scheduler and early
/// stopping is the validation loss when a validation set is given, the
/// epoch training loss otherwise.
pub fn train_with_validation(
    data: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainedModel, ModelError> {
    train_cfg.validate()?;
    let mut model = TrainedModel::initialize(model_cfg, train_cfg)?;
    model.check_dim(data.dim())?;
    if data.class_count() != model.class_count() {
        return Err(ModelError::InvalidConfig(format!(
            "output layer has {} units but data has {} classes",
            model.class_count(),
            data.class_count()
        )));
    }
    if let Some(v) = validation {
        model.check_dim(v.dim())?;
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut optimizer =
        Optimizer::new(train_cfg.optimizer, train_cfg.optimizer_params(), &model.network.layers);
    let mut grads = Gradients::zeros_like(&model.network.layers);
    let mut batch_grads = Gradients::zeros_like(&model.network.layers);
    let mut d_logits = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = train_cfg.learning_rate;
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            batch_grads.zero();
            for &i in batch {
                let cache = model
                    .network
                    .forward_cached(data.row(i), Some((model_cfg.dropout_rate, &mut dropout_rng)));
                epoch_loss += softmax_cross_entropy(cache.output(), data.label(i), &mut d_logits);
                model.network.backward(&cache, &d_logits, &mut batch_grads);
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            if !train_cfg.skip_zero_grad {
                grads.zero();
            }
            grads.add(&batch_grads);
            optimizer.step(&mut model.network.layers, &grads, lr);
        }
        epoch_loss /= data.len() as f64;
        if !epoch_loss.is_finite() || !model.network.is_finite() {
            return Err(ModelError::Diverged { epoch, loss: epoch_loss });
        }
        model.loss_history.push(epoch_loss);

        let monitored = match validation {
            Some(v) => loss(&model, v)?,
            None => epoch_loss,
        };
        if !monitored.is_finite() {
            return Err(ModelError::Diverged { epoch, loss: monitored });
        }
        if monitored < best {
            best = monitored;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= EARLY_STOP_PATIENCE {
                break;
            }
            if train_cfg.lr_scheduler && since_best % SCHEDULER_PATIENCE == 0 {
                lr *= 0.5;
            }
        }
    }
    Ok(model)
}
