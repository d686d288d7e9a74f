//! Pre-training mutation operators, mutant generation by retraining, and the
//! per-mutant mutation score.
//!
//! Every operator changes exactly one aspect of the original training setup:
//! a hyperparameter, an optional training-loop call, the training data, or the
//! architecture. The mutant is then trained from the same initialization and
//! shuffle seeds as the original, so prediction differences come from the
//! injected fault alone.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adequacy::{self, AdequacyError, DscConfig};
use crate::refmodel::{
    self, Activation, LabeledDataset, ModelConfig, ModelError, OptimizerKind, TrainConfig, TrainedModel,
};
use crate::traces::{SplitTag, TraceSet};

#[derive(Debug, Error)]
pub enum MutationError {
    #[error("operator {operator}: {message}")]
    InvalidParams { operator: &'static str, message: String },
    #[error("every mutant failed to train ({0} skipped)")]
    AllFailed(usize),
    #[error("empty mutant catalogue")]
    EmptyCatalogue,
    #[error("mutation score needs a non-empty test set")]
    EmptyTestSet,
    #[error("prediction vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adequacy(#[from] AdequacyError),
}

fn default_noise_std() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "operator", content = "params", rename_all = "snake_case")]
pub enum MutationOperator {
    IncreaseBatch { batch_size: usize },
    DecreaseBatch { batch_size: usize },
    DecreaseLr { learning_rate: f64 },
    IncreaseLr { learning_rate: f64 },
    ChangeOptimizer { optimizer: OptimizerKind },
    RemoveZeroGrad,
    /// Drops the learning-rate scheduler step.
    RemoveCall,
    /// Gaussian pixel noise on a fraction of the training samples.
    AddTrainingNoise {
        fraction: f64,
        #[serde(default = "default_noise_std")]
        std: f64,
    },
    /// Stratified removal of a fraction of the training samples.
    RemoveSamples { fraction: f64 },
    /// Relabels a fraction of class `(class + 1) mod C` as `class`.
    MakeClassesOverlap {
        fraction: f64,
        #[serde(default)]
        class: usize,
    },
    ChangeLabels { percentage: f64 },
    ChangeActivation { activation: Activation },
    /// Scales every hidden layer width.
    LayerSize { factor: f64 },
    /// Removes the bias of one weight layer, or of all when `layer` is absent.
    RemoveBias {
        #[serde(default)]
        layer: Option<usize>,
    },
    AddDropout { rate: f64 },
}

impl MutationOperator {
    pub fn name(&self) -> &'static str {
        match self {
            MutationOperator::IncreaseBatch { .. } => "increase_batch",
            MutationOperator::DecreaseBatch { .. } => "decrease_batch",
            MutationOperator::DecreaseLr { .. } => "decrease_lr",
            MutationOperator::IncreaseLr { .. } => "increase_lr",
            MutationOperator::ChangeOptimizer { .. } => "change_optimizer",
            MutationOperator::RemoveZeroGrad => "remove_zero_grad",
            MutationOperator::RemoveCall => "remove_call",
            MutationOperator::AddTrainingNoise { .. } => "add_training_noise",
            MutationOperator::RemoveSamples { .. } => "remove_samples",
            MutationOperator::MakeClassesOverlap { .. } => "make_classes_overlap",
            MutationOperator::ChangeLabels { .. } => "change_labels",
            MutationOperator::ChangeActivation { .. } => "change_activation",
            MutationOperator::LayerSize { .. } => "layer_size",
            MutationOperator::RemoveBias { .. } => "remove_bias",
            MutationOperator::AddDropout { .. } => "add_dropout",
        }
    }

    pub fn params_label(&self) -> String {
        match self {
            MutationOperator::IncreaseBatch { batch_size } | MutationOperator::DecreaseBatch { batch_size } => {
                batch_size.to_string()
            }
            MutationOperator::DecreaseLr { learning_rate } | MutationOperator::IncreaseLr { learning_rate } => {
                learning_rate.to_string()
            }
            MutationOperator::ChangeOptimizer { optimizer } => format!("{optimizer:?}").to_lowercase(),
            MutationOperator::RemoveZeroGrad | MutationOperator::RemoveCall => String::new(),
            MutationOperator::AddTrainingNoise { fraction, .. }
            | MutationOperator::RemoveSamples { fraction }
            | MutationOperator::MakeClassesOverlap { fraction, .. } => fraction.to_string(),
            MutationOperator::ChangeLabels { percentage } => percentage.to_string(),
            MutationOperator::ChangeActivation { activation } => activation.as_str().to_string(),
            MutationOperator::LayerSize { factor } => factor.to_string(),
            MutationOperator::RemoveBias { layer } => layer.map_or("all".into(), |l| l.to_string()),
            MutationOperator::AddDropout { rate } => rate.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutantSpec {
    #[serde(flatten)]
    pub operator: MutationOperator,
    #[serde(default)]
    pub seed: u64,
}

impl MutantSpec {
    pub fn new(operator: MutationOperator, seed: u64) -> Self {
        Self { operator, seed }
    }

    /// Stable identifier such as `remove_samples(0.25)#3`.
    pub fn id(&self) -> String {
        format!("{}({})#{}", self.operator.name(), self.operator.params_label(), self.seed)
    }

    /// Checks parameter ranges against the base setup. A dropout rate of 0
    /// is only accepted with `allow_noop`, for degenerate-mutant tests.
    pub fn validate(&self, base: &MutationBase, allow_noop: bool) -> Result<(), MutationError> {
        let op = self.operator.name();
        let bad = |message: String| Err(MutationError::InvalidParams { operator: op, message });
        let fraction_ok = |f: f64| f > 0.0 && f < 1.0;
        let t = &base.train_config;
        let m = &base.model_config;
        match &self.operator {
            MutationOperator::IncreaseBatch { batch_size } if *batch_size <= t.batch_size => {
                bad(format!("batch size {batch_size} is not larger than {}", t.batch_size))
            }
            MutationOperator::DecreaseBatch { batch_size } if *batch_size >= t.batch_size || *batch_size == 0 => {
                bad(format!("batch size {batch_size} is not a smaller positive size than {}", t.batch_size))
            }
            MutationOperator::DecreaseLr { learning_rate }
                if !(*learning_rate > 0.0 && *learning_rate < t.learning_rate) =>
            {
                bad(format!("learning rate {learning_rate} is not in (0, {}))", t.learning_rate))
            }
            MutationOperator::IncreaseLr { learning_rate } if !(*learning_rate > t.learning_rate) => {
                bad(format!("learning rate {learning_rate} is not above {}", t.learning_rate))
            }
            MutationOperator::ChangeOptimizer { optimizer } if *optimizer == t.optimizer => {
                bad("optimizer must differ from the original".into())
            }
            MutationOperator::AddTrainingNoise { fraction, std } if !fraction_ok(*fraction) || !(*std > 0.0) => {
                bad(format!("fraction {fraction} must be in (0, 1) and std {std} positive"))
            }
            MutationOperator::RemoveSamples { fraction } if !fraction_ok(*fraction) => {
                bad(format!("fraction {fraction} not in (0, 1)"))
            }
            MutationOperator::MakeClassesOverlap { fraction, class } => {
                if !fraction_ok(*fraction) {
                    bad(format!("fraction {fraction} not in (0, 1)"))
                } else if *class >= base.data.class_count() {
                    bad(format!("class {class} out of range"))
                } else {
                    Ok(())
                }
            }
            MutationOperator::ChangeLabels { percentage } if !(*percentage > 0.0 && *percentage < 100.0) => {
                bad(format!("percentage {percentage} not in (0, 100)"))
            }
            MutationOperator::ChangeLabels { .. } if base.data.class_count() < 2 => {
                bad("need at least two classes".into())
            }
            MutationOperator::ChangeActivation { activation } if *activation == m.activation => {
                bad("activation must differ from the original".into())
            }
            MutationOperator::LayerSize { factor } => {
                if m.layer_sizes.len() < 3 {
                    bad("model has no hidden layer".into())
                } else if !(*factor > 0.0) || scaled_sizes(&m.layer_sizes, *factor) == m.layer_sizes {
                    bad(format!("factor {factor} leaves the layer sizes unchanged"))
                } else {
                    Ok(())
                }
            }
            MutationOperator::RemoveBias { layer: Some(l) } if *l >= m.weight_layers() => {
                bad(format!("layer {l} out of range ({} weight layers)", m.weight_layers()))
            }
            MutationOperator::RemoveBias { layer } => {
                let any = match layer {
                    Some(l) => m.has_bias(*l),
                    None => (0..m.weight_layers()).any(|l| m.has_bias(l)),
                };
                if any {
                    Ok(())
                } else {
                    bad("bias already absent".into())
                }
            }
            MutationOperator::AddDropout { rate } => {
                let ok = if allow_noop { (0.0..1.0).contains(rate) } else { fraction_ok(*rate) };
                if ok {
                    Ok(())
                } else {
                    bad(format!("dropout rate {rate} not in (0, 1)"))
                }
            }
            MutationOperator::RemoveZeroGrad if t.skip_zero_grad => bad("already skipping zero_grad".into()),
            MutationOperator::RemoveCall if !t.lr_scheduler => bad("scheduler already disabled".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MutantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// The original training setup that operators perturb.
#[derive(Debug, Clone)]
pub struct MutationBase {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub data: LabeledDataset,
    pub validation: Option<LabeledDataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutatedSetup {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub data: LabeledDataset,
}

fn scaled_sizes(sizes: &[usize], factor: f64) -> Vec<usize> {
    let last = sizes.len() - 1;
    sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| if i == 0 || i == last { s } else { ((s as f64 * factor).round() as usize).max(1) })
        .collect()
}

pub fn apply_operator(base: &MutationBase, spec: &MutantSpec) -> Result<MutatedSetup, MutationError> {
    apply_operator_with(base, spec, false)
}

pub fn apply_operator_with(
    base: &MutationBase,
    spec: &MutantSpec,
    allow_noop: bool,
) -> Result<MutatedSetup, MutationError> {
    spec.validate(base, allow_noop)?;
    let mut model_config = base.model_config.clone();
    let mut train_config = base.train_config.clone();
    let mut data = base.data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.operator {
        MutationOperator::IncreaseBatch { batch_size } | MutationOperator::DecreaseBatch { batch_size } => {
            train_config.batch_size = *batch_size;
        }
        MutationOperator::DecreaseLr { learning_rate } | MutationOperator::IncreaseLr { learning_rate } => {
            train_config.learning_rate = *learning_rate;
        }
        MutationOperator::ChangeOptimizer { optimizer } => train_config.optimizer = *optimizer,
        MutationOperator::RemoveZeroGrad => train_config.skip_zero_grad = true,
        MutationOperator::RemoveCall => train_config.lr_scheduler = false,
        MutationOperator::AddTrainingNoise { fraction, std } => {
            data = add_training_noise(&base.data, *fraction, *std, &mut rng)?;
        }
        MutationOperator::RemoveSamples { fraction } => data = remove_samples(&base.data, *fraction, &mut rng)?,
        MutationOperator::MakeClassesOverlap { fraction, class } => {
            data = make_classes_overlap(&base.data, *fraction, *class, &mut rng)?;
        }
        MutationOperator::ChangeLabels { percentage } => {
            data = change_labels(&base.data, *percentage, &mut rng)?;
        }
        MutationOperator::ChangeActivation { activation } => model_config.activation = *activation,
        MutationOperator::LayerSize { factor } => {
            model_config.layer_sizes = scaled_sizes(&model_config.layer_sizes, *factor);
        }
        MutationOperator::RemoveBias { layer } => {
            let n = model_config.weight_layers();
            let mut flags: Vec<bool> = (0..n).map(|l| model_config.has_bias(l)).collect();
            match layer {
                Some(l) => flags[*l] = false,
                None => flags.iter_mut().for_each(|f| *f = false),
            }
            model_config.use_bias_per_layer = flags;
        }
        MutationOperator::AddDropout { rate } => model_config.dropout_rate = *rate,
    }
    Ok(MutatedSetup { model_config, train_config, data })
}

/// Indices of `floor(fraction * n)` samples chosen uniformly without replacement.
fn choose(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn add_training_noise(
    data: &LabeledDataset,
    fraction: f64,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset, MutationError> {
    let count = (fraction * data.len() as f64).floor() as usize;
    let chosen = choose(data.len(), count, rng);
    let noise = Normal::new(0.0, std).expect("std validated");
    let mut inputs = data.inputs().to_vec();
    let d = data.dim();
    for i in chosen {
        for v in &mut inputs[i * d..(i + 1) * d] {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(data.with_parts(inputs, data.labels().to_vec())?)
}

fn remove_samples(
    data: &LabeledDataset,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset, MutationError> {
    let total = (fraction * data.len() as f64).floor() as usize;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, &l) in data.labels().iter().enumerate() {
        per_class[l].push(i);
    }
    // largest-remainder allocation keeps class proportions within one sample
    let exact: Vec<f64> = per_class.iter().map(|m| m.len() as f64 * total as f64 / data.len() as f64).collect();
    let mut remove: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..remove.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = total - remove.iter().sum::<usize>();
    for c in order {
        if missing == 0 {
            break;
        }
        if remove[c] < per_class[c].len() {
            remove[c] += 1;
            missing -= 1;
        }
    }
    let mut keep = Vec::with_capacity(data.len() - total);
    for (c, members) in per_class.iter_mut().enumerate() {
        members.shuffle(rng);
        keep.extend_from_slice(&members[remove[c]..]);
    }
    keep.sort_unstable();
    if keep.is_empty() {
        return Err(MutationError::InvalidParams {
            operator: "remove_samples",
            message: "no samples left".into(),
        });
    }
    Ok(data.subset(&keep)?)
}

fn make_classes_overlap(
    data: &LabeledDataset,
    fraction: f64,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset, MutationError> {
    let source = (class + 1) % data.class_count();
    let mut members: Vec<usize> =
        data.labels().iter().enumerate().filter(|(_, &l)| l == source).map(|(i, _)| i).collect();
    members.shuffle(rng);
    let count = (fraction * members.len() as f64).floor() as usize;
    let mut labels = data.labels().to_vec();
    for &i in &members[..count] {
        labels[i] = class;
    }
    Ok(data.with_parts(data.inputs().to_vec(), labels)?)
}

fn change_labels(
    data: &LabeledDataset,
    percentage: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset, MutationError> {
    let count = (percentage / 100.0 * data.len() as f64).floor() as usize;
    let c = data.class_count();
    let mut labels = data.labels().to_vec();
    for i in choose(data.len(), count, rng) {
        labels[i] = (labels[i] + 1 + rng.random_range(0..c - 1)) % c;
    }
    Ok(data.with_parts(data.inputs().to_vec(), labels)?)
}

#[derive(Debug, Clone)]
pub struct TrainedMutant {
    pub spec: MutantSpec,
    pub model: TrainedModel,
}

#[derive(Debug, Clone)]
pub enum MutantOutcome {
    Trained(TrainedMutant),
    Skipped { spec: MutantSpec, reason: String },
}

impl MutantOutcome {
    pub fn spec(&self) -> &MutantSpec {
        match self {
            MutantOutcome::Trained(m) => &m.spec,
            MutantOutcome::Skipped { spec, .. } => spec,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    pub workers: usize,
    pub allow_noop: bool,
}

fn train_one(base: &MutationBase, spec: &MutantSpec, allow_noop: bool) -> MutantOutcome {
    let result = apply_operator_with(base, spec, allow_noop).and_then(|setup| {
        Ok(refmodel::train_with_validation(
            &setup.data,
            base.validation.as_ref(),
            &setup.model_config,
            &setup.train_config,
        )?)
    });
    match result {
        Ok(model) => MutantOutcome::Trained(TrainedMutant { spec: spec.clone(), model }),
        Err(e) => MutantOutcome::Skipped { spec: spec.clone(), reason: e.to_string() },
    }
}

/// Trains one mutant per spec, `options.workers` jobs at a time. Failed
/// trainings are kept as skips with their reason; the result preserves
/// catalogue order.
pub fn build_mutants(
    base: &MutationBase,
    catalogue: &[MutantSpec],
    options: BuildOptions,
) -> Result<Vec<MutantOutcome>, MutationError> {
    if catalogue.is_empty() {
        return Err(MutationError::EmptyCatalogue);
    }
    let workers = options.workers.max(1).min(catalogue.len());
    let outcomes: Vec<MutantOutcome> = if workers == 1 {
        catalogue.iter().map(|s| train_one(base, s, options.allow_noop)).collect()
    } else {
        let mut slots: Vec<Option<MutantOutcome>> = vec![None; catalogue.len()];
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        (w..catalogue.len())
                            .step_by(workers)
                            .map(|i| (i, train_one(base, &catalogue[i], options.allow_noop)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, o) in h.join().expect("mutant worker panicked") {
                    slots[i] = Some(o);
                }
            }
        });
        slots.into_iter().map(|o| o.expect("every job reports")).collect()
    };
    let skipped = outcomes.iter().filter(|o| matches!(o, MutantOutcome::Skipped { .. })).count();
    if skipped == outcomes.len() {
        return Err(MutationError::AllFailed(skipped));
    }
    Ok(outcomes)
}

/// Fraction of positions where the two prediction vectors disagree.
pub fn mutation_score_from_predictions(original: &[usize], mutant: &[usize]) -> Result<f64, MutationError> {
    if original.len() != mutant.len() {
        return Err(MutationError::LengthMismatch(original.len(), mutant.len()));
    }
    if original.is_empty() {
        return Err(MutationError::EmptyTestSet);
    }
    let differ = original.iter().zip(mutant).filter(|(a, b)| a != b).count();
    Ok(differ as f64 / original.len() as f64)
}

pub fn mutation_score(
    original: &TrainedModel,
    mutant: &TrainedModel,
    tests: &LabeledDataset,
) -> Result<f64, MutationError> {
    let a = refmodel::predict(original, tests)?;
    let b = refmodel::predict(mutant, tests)?;
    mutation_score_from_predictions(&a, &b)
}

/// Metrics of one mutant on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct MutantResult {
    pub spec: MutantSpec,
    pub dataset: String,
    pub mutation_score: f64,
    pub accuracy: f64,
    pub lscd: f64,
    /// DSC at the configured bucket count.
    pub dsc: f64,
    /// DSC per bucket count of the sweep, `(k, coverage)`.
    pub dsc_sweep: Vec<(usize, f64)>,
}

/// Settings for filling in per-mutant metrics.
#[derive(Debug, Clone)]
pub struct EvaluationSettings {
    pub dsc: DscConfig,
    pub sweep_k: Vec<usize>,
    pub workers: usize,
}

/// An evaluation set with the original model's predictions on it.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationSet<'a> {
    pub name: &'a str,
    pub data: &'a LabeledDataset,
    pub original_predictions: &'a [usize],
}

/// For each evaluation set: MS against the original's predictions, and
/// accuracy, LSCD and DSC in the mutant's own latent space (centroids and
/// DSA reference from the mutant's traces of `train`).
pub fn evaluate_mutant(
    mutant: &TrainedMutant,
    train: &LabeledDataset,
    evals: &[EvaluationSet<'_>],
    settings: &EvaluationSettings,
) -> Result<Vec<MutantResult>, MutationError> {
    let train_traces = refmodel::extract_traces(&mutant.model, train, SplitTag::Train)?;
    let mut out = Vec::with_capacity(evals.len());
    for set in evals {
        let traces = refmodel::extract_traces(&mutant.model, set.data, SplitTag::Test)?;
        let predictions: Vec<usize> = traces.traces().iter().map(|t| t.predicted).collect();
        let mutation_score = mutation_score_from_predictions(set.original_predictions, &predictions)?;
        let metrics = latent_metrics(&train_traces, &traces, settings)?;
        out.push(MutantResult {
            spec: mutant.spec.clone(),
            dataset: set.name.to_string(),
            mutation_score,
            accuracy: traces.accuracy(),
            lscd: metrics.lscd,
            dsc: metrics.dsc,
            dsc_sweep: metrics.dsc_sweep,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentMetrics {
    pub lscd: f64,
    pub dsc: f64,
    pub dsc_sweep: Vec<(usize, f64)>,
}

/// LSCD plus DSC at the configured k and over the sweep, with DSA computed
/// once. When no input has a computable DSA (for instance a model that
/// predicts a single class) no bucket is hit and every DSC is 0.
pub fn latent_metrics(
    train: &TraceSet,
    eval: &TraceSet,
    settings: &EvaluationSettings,
) -> Result<LatentMetrics, MutationError> {
    let lscd = adequacy::lscd(train, eval)?.aggregate;
    let outcomes = adequacy::dsa_values_parallel(eval, train, settings.workers);
    let report = match adequacy::dsc_from_outcomes(&outcomes, &settings.dsc) {
        Ok(r) => r,
        Err(AdequacyError::NoComputableDsa { .. }) => {
            return Ok(LatentMetrics { lscd, dsc: 0.0, dsc_sweep: settings.sweep_k.iter().map(|&k| (k, 0.0)).collect() })
        }
        Err(e) => return Err(e.into()),
    };
    let values = report.values();
    let u = report.buckets.upper_bound;
    let dsc_sweep = settings
        .sweep_k
        .iter()
        .map(|&k| (k, adequacy::bucket_coverage(&values, k, u).coverage))
        .collect();
    Ok(LatentMetrics { lscd, dsc: report.coverage(), dsc_sweep })
}

/// Desk-scale catalogue covering every operator, with hyperparameter values
/// rescaled for a few hundred training samples.
pub fn desk_catalogue(base_model: &ModelConfig, seed: u64) -> Vec<MutantSpec> {
    use MutationOperator as Op;
    let alt_activation = if base_model.activation == Activation::Tanh { Activation::Sigmoid } else { Activation::Tanh };
    let ops = vec![
        Op::IncreaseBatch { batch_size: 256 },
        Op::DecreaseBatch { batch_size: 4 },
        Op::DecreaseLr { learning_rate: 1e-5 },
        Op::IncreaseLr { learning_rate: 0.05 },
        Op::IncreaseLr { learning_rate: 0.5 },
        Op::ChangeOptimizer { optimizer: OptimizerKind::Adagrad },
        Op::RemoveZeroGrad,
        Op::RemoveCall,
        Op::AddTrainingNoise { fraction: 0.25, std: default_noise_std() },
        Op::AddTrainingNoise { fraction: 0.75, std: default_noise_std() },
        Op::AddTrainingNoise { fraction: 0.9, std: default_noise_std() },
        Op::RemoveSamples { fraction: 0.25 },
        Op::RemoveSamples { fraction: 0.75 },
        Op::RemoveSamples { fraction: 0.9 },
        Op::MakeClassesOverlap { fraction: 0.25, class: 0 },
        Op::MakeClassesOverlap { fraction: 0.75, class: 0 },
        Op::MakeClassesOverlap { fraction: 0.9, class: 0 },
        Op::ChangeLabels { percentage: 25.0 },
        Op::ChangeLabels { percentage: 60.0 },
        Op::ChangeActivation { activation: alt_activation },
        Op::ChangeActivation { activation: Activation::LogSigmoid },
        Op::ChangeActivation { activation: Activation::Sigmoid },
        Op::LayerSize { factor: 0.25 },
        Op::RemoveBias { layer: None },
        Op::AddDropout { rate: 0.25 },
        Op::AddDropout { rate: 0.8 },
    ];
    let mut seen = std::collections::HashSet::new();
    ops.into_iter()
        .filter(|op| !matches!(op, Op::ChangeActivation { activation } if *activation == base_model.activation))
        .filter(|op| seen.insert(format!("{op:?}")))
        .enumerate()
        .map(|(i, op)| MutantSpec::new(op, seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::{make_dataset, DatasetKind, DatasetSpec};

    fn base() -> MutationBase {
        let split = make_dataset(
            &DatasetSpec::new(DatasetKind::Blobs { classes: 4, samples: 572, dim: 4, spread: 0.05 }),
            1,
        )
        .unwrap();
        MutationBase {
            model_config: ModelConfig::mlp(vec![4, 8, 4], Activation::Relu, 2),
            train_config: TrainConfig::adam(5, 32, 0.01, 3),
            data: split.train,
            validation: Some(split.validation),
        }
    }

    #[test]
    fn remove_samples_quarter() {
        let b = base();
        let full = b.data.subset(&(0..400).collect::<Vec<_>>()).unwrap();
        let b = MutationBase { data: full, ..b };
        let out = apply_operator(&b, &MutantSpec::new(MutationOperator::RemoveSamples { fraction: 0.25 }, 4)).unwrap();
        assert_eq!(out.data.len(), 300);
        let before = b.data.class_histogram();
        let after = out.data.class_histogram();
        for (x, y) in before.iter().zip(&after) {
            let expected = *x as f64 * 0.75;
            assert!((*y as f64 - expected).abs() <= 1.0, "{before:?} -> {after:?}");
        }
        assert_eq!(out.model_config, b.model_config);
        assert_eq!(out.train_config, b.train_config);
    }

    #[test]
    fn change_labels_exact_count() {
        let b = base();
        for pct in [25.0, 60.0] {
            let out =
                apply_operator(&b, &MutantSpec::new(MutationOperator::ChangeLabels { percentage: pct }, 8)).unwrap();
            let differ = out.data.labels().iter().zip(b.data.labels()).filter(|(a, b)| a != b).count();
            assert_eq!(differ, (pct / 100.0 * b.data.len() as f64).floor() as usize);
        }
    }

    #[test]
    fn training_noise_matches_recomputation() {
        let b = base();
        let spec = MutantSpec::new(MutationOperator::AddTrainingNoise { fraction: 0.25, std: 0.3 }, 21);
        let out = apply_operator(&b, &spec).unwrap();
        assert!(out.data.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out.data.inputs(), b.data.inputs());
        // independent recomputation from the same seed
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = b.data.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut chosen = idx[..n / 4].to_vec();
        chosen.sort_unstable();
        let normal = Normal::new(0.0, 0.3).unwrap();
        let mut expected = b.data.inputs().to_vec();
        for &i in &chosen {
            for j in 0..b.data.dim() {
                let v = &mut expected[i * b.data.dim() + j];
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        assert_eq!(out.data.inputs(), expected.as_slice());
        let unchanged_rows = (0..n).filter(|&i| out.data.row(i) == b.data.row(i)).count();
        assert_eq!(unchanged_rows, n - n / 4);
    }

    #[test]
    fn overlap_relabels_neighbour_class() {
        let b = base();
        let spec = MutantSpec::new(MutationOperator::MakeClassesOverlap { fraction: 0.5, class: 3 }, 2);
        let out = apply_operator(&b, &spec).unwrap();
        let src = b.data.class_histogram()[0];
        let moved = out
            .data
            .labels()
            .iter()
            .zip(b.data.labels())
            .filter(|(new, old)| **old == 0 && **new == 3)
            .count();
        assert_eq!(moved, src / 2);
        assert_eq!(out.data.inputs(), b.data.inputs());
    }

    #[test]
    fn config_operators_change_exactly_one_field() {
        let b = base();
        let cases = vec![
            MutationOperator::IncreaseBatch { batch_size: 256 },
            MutationOperator::DecreaseBatch { batch_size: 4 },
            MutationOperator::DecreaseLr { learning_rate: 1e-5 },
            MutationOperator::IncreaseLr { learning_rate: 0.5 },
            MutationOperator::ChangeOptimizer { optimizer: OptimizerKind::Adagrad },
            MutationOperator::RemoveZeroGrad,
            MutationOperator::RemoveCall,
            MutationOperator::ChangeActivation { activation: Activation::Tanh },
            MutationOperator::LayerSize { factor: 2.0 },
            MutationOperator::RemoveBias { layer: Some(0) },
            MutationOperator::AddDropout { rate: 0.25 },
        ];
        for op in cases {
            let out = apply_operator(&b, &MutantSpec::new(op.clone(), 1)).unwrap();
            let m = serde_json::to_value(&out.model_config).unwrap();
            let mb = serde_json::to_value(&b.model_config).unwrap();
            let t = serde_json::to_value(&out.train_config).unwrap();
            let tb = serde_json::to_value(&b.train_config).unwrap();
            let changed = |x: &serde_json::Value, y: &serde_json::Value| {
                x.as_object().unwrap().iter().filter(|(k, v)| y.get(k.as_str()) != Some(v)).count()
            };
            assert_eq!(changed(&m, &mb) + changed(&t, &tb), 1, "{op:?}");
            assert_eq!(out.data, b.data);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let b = base();
        let bad = [
            MutationOperator::IncreaseBatch { batch_size: 8 },
            MutationOperator::DecreaseLr { learning_rate: 0.5 },
            MutationOperator::RemoveSamples { fraction: 1.0 },
            MutationOperator::ChangeLabels { percentage: 0.0 },
            MutationOperator::ChangeActivation { activation: Activation::Relu },
            MutationOperator::AddDropout { rate: 0.0 },
            MutationOperator::RemoveBias { layer: Some(7) },
            MutationOperator::ChangeOptimizer { optimizer: OptimizerKind::Adam },
        ];
        for op in bad {
            assert!(
                matches!(apply_operator(&b, &MutantSpec::new(op.clone(), 0)), Err(MutationError::InvalidParams { .. })),
                "{op:?}"
            );
        }
        let noop = MutantSpec::new(MutationOperator::AddDropout { rate: 0.0 }, 0);
        assert!(apply_operator_with(&b, &noop, true).is_ok());
    }

    #[test]
    fn spec_json_shape() {
        let spec = MutantSpec::new(MutationOperator::RemoveSamples { fraction: 0.25 }, 3);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"operator":"remove_samples","params":{"fraction":0.25},"seed":3}"#);
        let back: MutantSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let unit: MutantSpec = serde_json::from_str(r#"{"operator":"remove_zero_grad","seed":1}"#).unwrap();
        assert_eq!(unit.operator, MutationOperator::RemoveZeroGrad);
        let list: Vec<MutantSpec> = serde_json::from_str(
            r#"[{"operator":"add_dropout","params":{"rate":0.8}},{"operator":"remove_bias","params":{}}]"#,
        )
        .unwrap();
        assert_eq!(list[1].operator, MutationOperator::RemoveBias { layer: None });
    }

    #[test]
    fn mutation_score_hand_counts() {
        let a = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        assert_eq!(mutation_score_from_predictions(&a, &a).unwrap(), 0.0);
        let shifted: Vec<usize> = a.iter().map(|p| (p + 1) % 3).collect();
        assert_eq!(mutation_score_from_predictions(&a, &shifted).unwrap(), 1.0);
        let mut three = a;
        three[0] = 1;
        three[4] = 0;
        three[9] = 2;
        assert!((mutation_score_from_predictions(&a, &three).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(mutation_score_from_predictions(&[], &[]), Err(MutationError::EmptyTestSet)));
    }

    #[test]
    fn noop_mutant_agrees_with_original() {
        let b = base();
        let original = refmodel::train_with_validation(&b.data, b.validation.as_ref(), &b.model_config, &b.train_config)
            .unwrap();
        let catalogue = [MutantSpec::new(MutationOperator::AddDropout { rate: 0.0 }, 5)];
        let out = build_mutants(&b, &catalogue, BuildOptions { workers: 1, allow_noop: true }).unwrap();
        let MutantOutcome::Trained(m) = &out[0] else { panic!("skipped") };
        assert_eq!(mutation_score(&original, &m.model, &b.data).unwrap(), 0.0);
        assert_eq!(m.model.network, original.network);
    }

    #[test]
    fn parallel_build_matches_serial() {
        let b = base();
        let catalogue: Vec<MutantSpec> = desk_catalogue(&b.model_config, 10).into_iter().take(6).collect();
        let serial = build_mutants(&b, &catalogue, BuildOptions { workers: 1, allow_noop: false }).unwrap();
        let parallel = build_mutants(&b, &catalogue, BuildOptions { workers: 3, allow_noop: false }).unwrap();
        for (s, p) in serial.iter().zip(&parallel) {
            assert_eq!(s.spec(), p.spec());
            match (s, p) {
                (MutantOutcome::Trained(a), MutantOutcome::Trained(b)) => assert_eq!(a.model.network, b.model.network),
                (MutantOutcome::Skipped { reason: a, .. }, MutantOutcome::Skipped { reason: b, .. }) => assert_eq!(a, b),
                _ => panic!("outcome kinds differ"),
            }
        }
    }

    #[test]
    fn desk_catalogue_is_valid_for_base() {
        let b = base();
        let cat = desk_catalogue(&b.model_config, 0);
        assert!(cat.len() >= 15);
        for spec in &cat {
            spec.validate(&b, false).unwrap_or_else(|e| panic!("{spec}: {e}"));
        }
    }
}
