//! End-to-end study: train the base model, measure the test set, fuzz corner
//! cases per coverage criterion, build and measure mutants, correlate, and
//! check corpus validity.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adequacy::{self, AdequacyError, DscConfig, UpperBound};
use crate::analysis::{self, AnalysisError, CorrelationTable, DatasetRow, Report, StudyRecord, ValidityRow};
use crate::fuzzing::{self, CoverageConfig, Criterion, FuzzConfig, FuzzError, FuzzOutcome, Mutator};
use crate::mutation::{self, BuildOptions, EvaluationSet, EvaluationSettings, MutantOutcome, MutantSpec, MutationBase, MutationError};
use crate::refmodel::{
    self, Activation, DatasetSpec, DatasetSplits, LabeledDataset, ModelConfig, ModelError, OptimizerKind, TrainConfig, TrainedModel,
};
use crate::traces::{self, SplitTag, TraceError, TraceSet};
use crate::validity::{self, AutoencoderConfig, ValidityError, ValidityOracle};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Traces(#[from] TraceError),
    #[error(transparent)]
    Adequacy(#[from] AdequacyError),
    #[error(transparent)]
    Mutation(#[from] MutationError),
    #[error(transparent)]
    Fuzz(#[from] FuzzError),
    #[error(transparent)]
    Validity(#[from] ValidityError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![32], activation: Activation::Relu, dropout_rate: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 32, learning_rate: 0.005, optimizer: OptimizerKind::Adam }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CatalogueSource {
    Path(PathBuf),
    Inline(Vec<MutantSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuzzSection {
    pub iterations: usize,
    pub criteria: Vec<Criterion>,
    pub mutators: Option<Vec<Mutator>>,
    pub nc_threshold: f64,
    pub kmnc_sections: usize,
    pub nbc_margin_multiplier: f64,
    pub per_seed_mutation_budget: usize,
}

impl Default for FuzzSection {
    fn default() -> Self {
        let desk = CoverageConfig::desk(Criterion::Nc);
        Self {
            iterations: 2000,
            criteria: Criterion::ALL.to_vec(),
            mutators: None,
            nc_threshold: desk.nc_threshold,
            kmnc_sections: desk.kmnc_sections,
            nbc_margin_multiplier: desk.nbc_margin_multiplier,
            per_seed_mutation_budget: 1,
        }
    }
}

impl FuzzSection {
    pub fn coverage(&self, criterion: Criterion) -> CoverageConfig {
        CoverageConfig {
            criterion,
            nc_threshold: self.nc_threshold,
            kmnc_sections: self.kmnc_sections,
            nbc_margin_multiplier: self.nbc_margin_multiplier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValiditySection {
    pub epsilon: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub bottleneck_dim: Option<usize>,
}

impl Default for ValiditySection {
    fn default() -> Self {
        Self { epsilon: validity::DEFAULT_EPSILON, epochs: 100, learning_rate: 0.001, bottleneck_dim: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Mutant catalogue; the built-in desk catalogue when absent.
    #[serde(default)]
    pub catalogue: Option<CatalogueSource>,
    #[serde(default)]
    pub fuzz: FuzzSection,
    #[serde(default)]
    pub dsc: DscConfig,
    #[serde(default = "analysis::default_sweep_k")]
    pub sweep_k: Vec<usize>,
    #[serde(default)]
    pub validity: ValiditySection,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub study_set: StudySet,
    #[serde(default)]
    pub seed: u64,
}

/// Which inputs each mutant is scored on. Either way there is one study record per mutant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudySet {
    /// The original test split only.
    Test,
    /// The test split followed by every corner case from every criterion.
    #[default]
    Augmented,
}

impl StudySet {
    pub fn as_str(self) -> &'static str {
        match self {
            StudySet::Test => "test",
            StudySet::Augmented => "augmented",
        }
    }
}

fn default_workers() -> usize {
    1
}

/// Offsets added to the global seed for each randomized stage.
pub mod seed_offsets {
    pub const DATA: u64 = 0;
    pub const MODEL_INIT: u64 = 1;
    pub const TRAIN_SHUFFLE: u64 = 2;
    pub const FUZZ: u64 = 10;
    pub const AUTOENCODER: u64 = 20;
    pub const MUTANTS: u64 = 100;
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_json(&text)?;
        // relative catalogue and dataset paths resolve against the config file
        let Some(dir) = path.parent() else { return Ok(cfg) };
        if let Some(CatalogueSource::Path(p)) = &mut cfg.catalogue {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let refmodel::DatasetKind::DigitsFile { path: p, .. } = &mut cfg.dataset.kind {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be >= 1".into()));
        }
        if self.model.hidden.is_empty() {
            return Err(PipelineError::Config("model.hidden needs at least one layer".into()));
        }
        if self.fuzz.criteria.is_empty() {
            return Err(PipelineError::Config("fuzz.criteria is empty".into()));
        }
        if let Some(CatalogueSource::Path(p)) = &self.catalogue {
            if !p.exists() {
                return Err(PipelineError::Config(format!("catalogue file {} does not exist", p.display())));
            }
        }
        self.dsc.validate()?;
        for c in &self.fuzz.criteria {
            self.fuzz.coverage(*c).validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, class_count: usize) -> ModelConfig {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.model.hidden);
        sizes.push(class_count);
        let mut cfg = ModelConfig::mlp(sizes, self.model.activation, self.seed + seed_offsets::MODEL_INIT);
        cfg.dropout_rate = self.model.dropout_rate;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig::adam(t.epochs, t.batch_size, t.learning_rate, self.seed + seed_offsets::TRAIN_SHUFFLE);
        cfg.optimizer = t.optimizer;
        cfg
    }

    pub fn catalogue(&self, model: &ModelConfig) -> Result<Vec<MutantSpec>, PipelineError> {
        match &self.catalogue {
            None => Ok(mutation::desk_catalogue(model, self.seed + seed_offsets::MUTANTS)),
            Some(CatalogueSource::Inline(list)) => Ok(list.clone()),
            Some(CatalogueSource::Path(p)) => load_catalogue(p),
        }
    }
}

pub fn load_catalogue(path: &Path) -> Result<Vec<MutantSpec>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("catalogue {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetMetrics {
    pub size: usize,
    pub accuracy: f64,
    pub lscd: f64,
    pub dsc: Option<f64>,
}

/// Accuracy, LSCD and DSC of `eval` against the reference `train` traces.
pub fn set_metrics(train: &TraceSet, eval: &TraceSet, dsc: &DscConfig, workers: usize) -> Result<SetMetrics, PipelineError> {
    let lscd = adequacy::lscd(train, eval)?.aggregate;
    let dsc = match adequacy::dsc_parallel(eval, train, dsc, workers) {
        Ok(r) => Some(r.coverage()),
        Err(AdequacyError::NoComputableDsa { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(SetMetrics { size: eval.len(), accuracy: eval.accuracy(), lscd, dsc })
}

#[derive(Debug, Clone)]
pub struct CornerCaseRun {
    pub outcome: FuzzOutcome,
    pub metrics: Option<SetMetrics>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub splits: DatasetSplits,
    pub model: TrainedModel,
    pub train_traces: TraceSet,
    pub test_traces: TraceSet,
    pub baseline: SetMetrics,
    pub corner_cases: Vec<CornerCaseRun>,
    pub mutants: Vec<StudyRecord>,
    pub skipped_mutants: Vec<(String, String)>,
    pub correlations: Option<CorrelationTable>,
    pub validity: Vec<ValidityRow>,
    pub report: Report,
}

/// Base model, its data and its traces.
#[derive(Debug, Clone)]
pub struct BaseRun {
    pub splits: DatasetSplits,
    pub model: TrainedModel,
    pub train_traces: TraceSet,
    pub test_traces: TraceSet,
}

pub fn train_base(cfg: &PipelineConfig) -> Result<BaseRun, PipelineError> {
    cfg.validate()?;
    let splits = refmodel::make_dataset(&cfg.dataset, cfg.seed + seed_offsets::DATA)?;
    let model_cfg = cfg.model_config(splits.train.dim(), splits.train.class_count());
    log::info!("training base model {:?}", model_cfg.layer_sizes);
    let model = refmodel::train_with_validation(&splits.train, Some(&splits.validation), &model_cfg, &cfg.train_config())?;
    let train_traces = refmodel::extract_traces(&model, &splits.train, SplitTag::Train)?;
    let test_traces = refmodel::extract_traces(&model, &splits.test, SplitTag::Test)?;
    Ok(BaseRun { splits, model, train_traces, test_traces })
}

/// Trains the catalogue against `base` and scores every mutant on `data`,
/// where `original_predictions` are the base model's labels for those inputs.
pub fn mutation_study(
    cfg: &PipelineConfig,
    base: &BaseRun,
    data: &LabeledDataset,
    original_predictions: &[usize],
    set_name: &str,
) -> Result<(Vec<StudyRecord>, Vec<(String, String)>), PipelineError> {
    let model_cfg = base.model.config.clone();
    let mutation_base = MutationBase {
        model_config: model_cfg.clone(),
        train_config: base.model.train_config.clone(),
        data: base.splits.train.clone(),
        validation: Some(base.splits.validation.clone()),
    };
    let catalogue = cfg.catalogue(&model_cfg)?;
    log::info!("training {} mutants", catalogue.len());
    let built =
        mutation::build_mutants(&mutation_base, &catalogue, BuildOptions { workers: cfg.workers, allow_noop: false })?;
    let settings = EvaluationSettings { dsc: cfg.dsc, sweep_k: cfg.sweep_k.clone(), workers: cfg.workers };
    let evals = [EvaluationSet { name: set_name, data, original_predictions }];
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for outcome in built {
        match outcome {
            MutantOutcome::Trained(m) => match mutation::evaluate_mutant(&m, &base.splits.train, &evals, &settings) {
                Ok(results) => records.extend(results.into_iter().map(|r| StudyRecord {
                    mutant_id: r.spec.id(),
                    dataset: r.dataset,
                    accuracy: r.accuracy,
                    dsc: r.dsc,
                    lscd: r.lscd,
                    mutation_score: r.mutation_score,
                    dsc_sweep: r.dsc_sweep,
                })),
                Err(e) => skipped.push((m.spec.id(), e.to_string())),
            },
            MutantOutcome::Skipped { spec, reason } => skipped.push((spec.id(), reason)),
        }
    }
    Ok((records, skipped))
}

/// Runs the study. Everything in the outcome is a function of the config.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    let BaseRun { splits, model, train_traces, test_traces } = train_base(cfg)?;
    let model_cfg = model.config.clone();
    let baseline = set_metrics(&train_traces, &test_traces, &cfg.dsc, cfg.workers)?;

    let profile = fuzzing::profile_neurons(&model, &splits.train)?;
    let mut corner_cases = Vec::new();
    for (i, &criterion) in cfg.fuzz.criteria.iter().enumerate() {
        log::info!("fuzzing with {criterion}");
        let mut fuzz_cfg = FuzzConfig::new(cfg.fuzz.iterations, cfg.seed + seed_offsets::FUZZ + i as u64);
        fuzz_cfg.per_seed_mutation_budget = cfg.fuzz.per_seed_mutation_budget;
        fuzz_cfg.mutators = match &cfg.fuzz.mutators {
            Some(m) => m.clone(),
            None => Mutator::ALL.into_iter().filter(|m| splits.test.grid().is_some() || !m.needs_grid()).collect(),
        };
        let outcome = fuzzing::fuzz(&model, &splits.test, &profile, &cfg.fuzz.coverage(criterion), &fuzz_cfg)?;
        let metrics = match &outcome.corpus.traces {
            Some(t) => Some(set_metrics(&train_traces, t, &cfg.dsc, cfg.workers)?),
            None => None,
        };
        corner_cases.push(CornerCaseRun { outcome, metrics });
    }

    let mut study_predictions: Vec<usize> = test_traces.traces().iter().map(|t| t.predicted).collect();
    let study_data = match cfg.study_set {
        StudySet::Test => splits.test.clone(),
        StudySet::Augmented => {
            let mut inputs = splits.test.inputs().to_vec();
            let mut labels = splits.test.labels().to_vec();
            for run in &corner_cases {
                for item in &run.outcome.corpus.items {
                    inputs.extend_from_slice(&item.input);
                    labels.push(item.ground_truth);
                    study_predictions.push(item.predicted);
                }
            }
            splits.test.with_parts(inputs, labels)?
        }
    };
    let base = BaseRun { splits, model, train_traces, test_traces };
    let (mutants, skipped_mutants) =
        mutation_study(cfg, &base, &study_data, &study_predictions, cfg.study_set.as_str())?;
    let BaseRun { splits, model, train_traces, test_traces } = base;
    let correlations = match analysis::correlation_study(&mutants) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("correlation study skipped: {e}");
            None
        }
    };

    let ae_cfg = AutoencoderConfig {
        bottleneck_dim: cfg.validity.bottleneck_dim.unwrap_or((splits.train.dim() / 4).max(2)),
        epochs: cfg.validity.epochs,
        learning_rate: cfg.validity.learning_rate,
        ..AutoencoderConfig::for_input_dim(splits.train.dim(), cfg.seed + seed_offsets::AUTOENCODER)
    };
    let oracle = ValidityOracle::fit(&splits.train, &ae_cfg, cfg.validity.epsilon)?;
    let mut validity_rows =
        vec![ValidityRow { name: "train".into(), report: oracle.validate(splits.train.rows())? }];
    validity_rows.push(ValidityRow { name: "test".into(), report: oracle.validate(splits.test.rows())? });
    for run in &corner_cases {
        if let Some(ds) = run.outcome.corpus.dataset() {
            validity_rows.push(ValidityRow {
                name: format!("corner_case_{}", run.outcome.criterion),
                report: oracle.validate(ds.rows())?,
            });
        }
    }

    let mut datasets = vec![DatasetRow {
        name: "test".into(),
        size: baseline.size,
        accuracy: Some(baseline.accuracy),
        lscd: Some(baseline.lscd),
        dsc: baseline.dsc,
    }];
    for run in &corner_cases {
        let name = format!("corner_case_{}", run.outcome.criterion);
        datasets.push(match &run.metrics {
            Some(m) => DatasetRow { name, size: m.size, accuracy: Some(m.accuracy), lscd: Some(m.lscd), dsc: m.dsc },
            None => DatasetRow { name, size: 0, accuracy: None, lscd: None, dsc: None },
        });
    }
    let mut notes = vec![
        format!("seed: {}", cfg.seed),
        format!(
            "base model: layers {:?}, activation {}, train accuracy {:.4}",
            model_cfg.layer_sizes,
            model_cfg.activation.as_str(),
            train_traces.accuracy()
        ),
        format!("dsc: k = {}, upper bound = {}", cfg.dsc.bucket_count, cfg.dsc.upper_bound),
        "fuzz queue policy: cyclic_fifo".into(),
    ];
    for run in &corner_cases {
        notes.push(format!(
            "fuzz {}: {} iterations, {} seeds, final coverage {:.4}, {} corner cases",
            run.outcome.criterion,
            run.outcome.iterations,
            run.outcome.seed_count,
            run.outcome.final_coverage(),
            run.outcome.corpus.len()
        ));
    }
    notes.push(format!(
        "mutants: {} study records on the {} set ({} inputs), {} mutants skipped",
        mutants.len(),
        cfg.study_set.as_str(),
        study_data.len(),
        skipped_mutants.len()
    ));
    for (id, reason) in &skipped_mutants {
        notes.push(format!("  skipped {id}: {reason}"));
    }
    let report = Report {
        title: "Test adequacy study".into(),
        datasets,
        mutants: mutants.clone(),
        correlations: correlations.clone(),
        validity: validity_rows.clone(),
        timing: Vec::new(),
        notes,
    };
    Ok(PipelineOutcome {
        splits,
        model,
        train_traces,
        test_traces,
        baseline,
        corner_cases,
        mutants,
        skipped_mutants,
        correlations,
        validity: validity_rows,
        report,
    })
}

/// Writes the report, traces, model, corpora and study table under `dir`.
pub fn write_outputs(outcome: &PipelineOutcome, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(io_err(&p))
    };
    write("report.txt", analysis::render_text(&outcome.report).as_bytes())?;
    let json = serde_json::to_string_pretty(&analysis::render_json(&outcome.report)).expect("report serializes");
    write("report.json", (json + "\n").as_bytes())?;
    write("train.lstr", &traces::encode_binary(&outcome.train_traces))?;
    write("test.lstr", &traces::encode_binary(&outcome.test_traces))?;
    write("model.lmdl", &refmodel::encode_model(&outcome.model))?;
    write_study_json(&outcome.mutants, &dir.join("study.json"))?;
    write_study_csv(&outcome.mutants, &dir.join("study.csv"))?;
    for run in &outcome.corner_cases {
        fuzzing::save_corpus(&run.outcome, dir, &format!("corner_case_{}", run.outcome.criterion))?;
    }
    Ok(())
}

pub fn write_study_csv(records: &[StudyRecord], path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Config(e.to_string()))?;
    let row_err = |e: csv::Error| PipelineError::Config(format!("{}: {e}", path.display()));
    w.write_record(["mutant_id", "dataset", "accuracy", "dsc", "lscd", "mutation_score"]).map_err(row_err)?;
    for r in records {
        w.write_record([
            r.mutant_id.clone(),
            r.dataset.clone(),
            r.accuracy.to_string(),
            r.dsc.to_string(),
            r.lscd.to_string(),
            r.mutation_score.to_string(),
        ])
        .map_err(row_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_study_json(records: &[StudyRecord], path: &Path) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, json + "\n").map_err(io_err(path))
}

/// Reads a study table written as JSON (a list of records).
pub fn read_study(path: &Path) -> Result<Vec<StudyRecord>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("study {}: {e}", path.display())))
}

/// Non-pipeline DSC config helper for callers that only have flags.
pub fn dsc_config(k: usize, upper_bound: UpperBound) -> DscConfig {
    DscConfig { bucket_count: k, upper_bound }
}
