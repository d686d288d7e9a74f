//! `adequacy-lab` command-line front end. Every subcommand is a thin adapter
//! over the library; results go to stdout as JSON (or text where noted) and
//! failures go to stderr as a JSON object with a distinct exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adequacy_lab::adequacy::{self, UpperBound};
use adequacy_lab::analysis::{self, StudyRecord};
use adequacy_lab::fuzzing::{self, CoverageConfig, Criterion, FuzzConfig, FuzzError, Mutator};
use adequacy_lab::pipeline::{self, PipelineConfig, PipelineError};
use adequacy_lab::refmodel::{self, LabeledDataset, ModelError, TrainedModel};
use adequacy_lab::traces::{self, SplitTag, TraceError, TraceFormat, TraceSet};
use adequacy_lab::validity::{AutoencoderConfig, ValidityOracle};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "adequacy-lab", version, about = "Latent-space test adequacy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base model described by a config and export its data and traces
    Train(TrainArgs),
    /// Extract logit traces of a saved model over a dataset file
    Traces(TracesArgs),
    /// Latent space class dispersion of an evaluation trace set
    Lscd(LscdArgs),
    /// Distance-based surprise coverage of an evaluation trace set
    Dsc(DscArgs),
    /// Train the mutant catalogue and score every mutant on the test split
    Mutate(ConfigArgs),
    /// Coverage-guided fuzzing for corner cases
    Fuzz(FuzzArgs),
    /// Autoencoder validity of a set of inputs
    Validate(ValidateArgs),
    /// Pearson correlation study over a study table
    Correlate(CorrelateArgs),
    /// LSCD vs DSC wall-time comparison
    Bench(BenchArgs),
    /// Full study: train, fuzz, mutate, correlate, validate, bench
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FileFormat {
    Binary,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Validation,
    Test,
    CornerCase,
}

impl From<Split> for SplitTag {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitTag::Train,
            Split::Validation => SplitTag::Validation,
            Split::Test => SplitTag::Test,
            Split::CornerCase => SplitTag::CornerCase,
        }
    }
}

#[derive(Args, Debug)]
struct TraceInputs {
    /// Training trace file (centroids and nearest-neighbour reference)
    #[arg(long)]
    train: PathBuf,
    /// Evaluation trace file
    #[arg(long)]
    eval: PathBuf,
    /// Trace file format
    #[arg(long, value_enum, default_value = "binary")]
    format: FileFormat,
    /// Class count for csv traces (binary files carry it in the header)
    #[arg(long)]
    class_count: Option<usize>,
}

#[derive(Args, Debug)]
struct Workers {
    /// Worker threads
    #[arg(long, env = "ADEQUACY_LAB_THREADS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Pipeline config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Global seed; overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; overrides the config
    #[arg(long, env = "ADEQUACY_LAB_THREADS")]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args, Debug)]
struct TracesArgs {
    /// Saved model (.lmdl)
    #[arg(long)]
    model: PathBuf,
    /// Dataset file with `label,v0,...` rows
    #[arg(long)]
    data: PathBuf,
    /// Split tag written into the trace header
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Output trace file
    #[arg(long)]
    out: PathBuf,
    /// Output trace format
    #[arg(long, value_enum, default_value = "binary")]
    format: FileFormat,
}

#[derive(Args, Debug)]
struct LscdArgs {
    #[command(flatten)]
    inputs: TraceInputs,
    /// Include wall time in the output
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct DscArgs {
    #[command(flatten)]
    inputs: TraceInputs,
    /// Bucket count
    #[arg(long, default_value_t = 1000)]
    k: usize,
    /// Upper bound U of the bucketed interval (0, U], or `auto` for the largest observed DSA
    #[arg(long, default_value = "auto")]
    upper_bound: UpperBound,
    #[command(flatten)]
    workers: Workers,
    /// Include wall time in the output
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct FuzzArgs {
    /// Saved model (.lmdl)
    #[arg(long)]
    model: PathBuf,
    /// Training inputs used to profile neuron ranges (`label,v0,...` rows)
    #[arg(long)]
    train: PathBuf,
    /// Seed inputs (`label,v0,...` rows); misclassified ones are dropped
    #[arg(long)]
    eval: PathBuf,
    /// Coverage criterion
    #[arg(long, value_enum, default_value = "nc")]
    criterion: CriterionArg,
    /// Fuzzing iterations
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    /// Neuron activation threshold for nc
    #[arg(long, default_value_t = 0.75)]
    nc_threshold: f64,
    /// Sections per neuron for kmnc
    #[arg(long, default_value_t = 100)]
    kmnc_sections: usize,
    /// Boundary margin for nbc, in training standard deviations
    #[arg(long, default_value_t = 0.0)]
    nbc_margin: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CriterionArg {
    Nc,
    Kmnc,
    Nbc,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Nc => Criterion::Nc,
            CriterionArg::Kmnc => Criterion::Kmnc,
            CriterionArg::Nbc => Criterion::Nbc,
        }
    }
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Training inputs for the autoencoder (`label,v0,...` rows)
    #[arg(long)]
    train: PathBuf,
    /// Inputs to score: `label,v0,...` rows or an .lcrp corpus matrix
    #[arg(long)]
    eval: PathBuf,
    /// Tolerated false-alarm rate on the training inputs
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Autoencoder training epochs
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Autoencoder seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    /// Study table written by `mutate` or `pipeline` (study.json)
    #[arg(long)]
    study: PathBuf,
    /// Print a text table instead of JSON
    #[arg(long)]
    text: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    inputs: TraceInputs,
    /// Worker count for the multi-thread runs
    #[arg(long, env = "ADEQUACY_LAB_THREADS", default_value_t = 4)]
    workers: usize,
    /// Timed repeats per measurement (at least 3)
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// DSC bucket count
    #[arg(long, default_value_t = 1000)]
    k: usize,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Worker count for the multi-thread timing runs
    #[arg(long, default_value_t = 4)]
    bench_workers: usize,
    /// Skip the timing bench (timing.json is not written)
    #[arg(long)]
    skip_bench: bool,
}

/// Exit codes. Usage errors come from the argument parser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage = 2,
    Config = 3,
    MissingFile = 4,
    InvalidInput = 5,
    Computation = 6,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Config => "config",
            Kind::MissingFile => "missing_file",
            Kind::InvalidInput => "invalid_input",
            Kind::Computation => "computation",
        }
    }
}

#[derive(Debug)]
struct CliError {
    kind: Kind,
    message: String,
}

impl CliError {
    fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

fn trace_kind(e: &TraceError) -> Kind {
    match e {
        TraceError::Io(_) => Kind::MissingFile,
        _ => Kind::InvalidInput,
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::InvalidConfig(_) => Kind::Config,
        ModelError::Diverged { .. } => Kind::Computation,
        ModelError::DatasetFile { path, .. } if !path.exists() => Kind::MissingFile,
        ModelError::Traces(t) => trace_kind(t),
        ModelError::Io(_) => Kind::MissingFile,
        _ => Kind::InvalidInput,
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Config(_) => Kind::Config,
            PipelineError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Kind::MissingFile,
            PipelineError::Io { .. } => Kind::Computation,
            PipelineError::Model(m) => model_kind(m),
            PipelineError::Traces(t) => trace_kind(t),
            PipelineError::Fuzz(FuzzError::Model(m)) => model_kind(m),
            _ => Kind::Computation,
        };
        CliError::new(kind, e.to_string())
    }
}

macro_rules! computation_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(Kind::Computation, e.to_string())
            }
        }
    )*};
}
computation_error!(
    adequacy_lab::adequacy::AdequacyError,
    adequacy_lab::analysis::AnalysisError,
    adequacy_lab::validity::ValidityError,
    FuzzError
);

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::new(model_kind(&e), e.to_string())
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        CliError::new(trace_kind(&e), e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new(Kind::MissingFile, format!("{}: no such file", path.display())))
    }
}

fn read_trace_file(path: &Path, format: FileFormat, split: SplitTag, class_count: Option<usize>) -> CliResult<TraceSet> {
    require(path)?;
    let bytes = fs::read(path).map_err(|e| CliError::new(Kind::MissingFile, format!("{}: {e}", path.display())))?;
    let fmt = match format {
        FileFormat::Binary => TraceFormat::Binary,
        FileFormat::Csv => TraceFormat::Csv {
            split_tag: split,
            class_count: class_count
                .ok_or_else(|| CliError::new(Kind::Usage, "--class-count is required for csv traces"))?,
        },
    };
    traces::read_traces(bytes.as_slice(), fmt)
        .map_err(|e| CliError::new(trace_kind(&e), format!("{}: {e}", path.display())))
}

fn read_pair(inputs: &TraceInputs) -> CliResult<(TraceSet, TraceSet)> {
    let train = read_trace_file(&inputs.train, inputs.format, SplitTag::Train, inputs.class_count)?;
    let eval = read_trace_file(&inputs.eval, inputs.format, SplitTag::Test, inputs.class_count)?;
    Ok((train, eval))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::new(Kind::Computation, format!("{}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::new(Kind::Computation, format!("{}: {e}", dir.display())))
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    require(path)?;
    Ok(TrainedModel::load_from(path)?)
}

fn read_dataset(path: &Path, class_count: Option<usize>) -> CliResult<LabeledDataset> {
    require(path)?;
    Ok(refmodel::read_digits_file(path, class_count)?)
}

fn load_config(args: &ConfigArgs) -> CliResult<PipelineConfig> {
    require(&args.config)?;
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes to stdout. A closed pipe (`| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("stdout: {e}");
        }
    }
}

fn print_json(value: &serde_json::Value) {
    emit(&(serde_json::to_string_pretty(value).expect("json value serializes") + "\n"));
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let base = pipeline::train_base(&cfg)?;
    let dir = &args.common.out_dir;
    make_dir(dir)?;
    write_file(&dir.join("model.lmdl"), &refmodel::encode_model(&base.model))?;
    write_file(&dir.join("train.lstr"), &traces::encode_binary(&base.train_traces))?;
    write_file(&dir.join("test.lstr"), &traces::encode_binary(&base.test_traces))?;
    write_file(&dir.join("train.csv"), base.splits.train.to_digits_csv().as_bytes())?;
    write_file(&dir.join("validation.csv"), base.splits.validation.to_digits_csv().as_bytes())?;
    write_file(&dir.join("test.csv"), base.splits.test.to_digits_csv().as_bytes())?;
    print_json(&json!({
        "layer_sizes": base.model.config.layer_sizes,
        "epochs_run": base.model.loss_history.len(),
        "train_accuracy": base.train_traces.accuracy(),
        "test_accuracy": base.test_traces.accuracy(),
        "out_dir": dir,
    }));
    Ok(())
}

fn cmd_traces(args: &TracesArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let data = read_dataset(&args.data, Some(model.class_count()))?;
    let set = refmodel::extract_traces(&model, &data, args.split.into())?;
    let mut bytes = Vec::new();
    let fmt = match args.format {
        FileFormat::Binary => TraceFormat::Binary,
        FileFormat::Csv => TraceFormat::Csv { split_tag: set.split_tag(), class_count: set.class_count() },
    };
    traces::write_traces(&set, &mut bytes, fmt)?;
    write_file(&args.out, &bytes)?;
    print_json(&json!({
        "records": set.len(),
        "latent_dim": set.latent_dim(),
        "class_count": set.class_count(),
        "accuracy": set.accuracy(),
        "out": args.out,
    }));
    Ok(())
}

fn cmd_lscd(args: &LscdArgs) -> CliResult<()> {
    let (train, eval) = read_pair(&args.inputs)?;
    let start = Instant::now();
    let report = adequacy::lscd(&train, &eval)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    print_json(&adequacy::lscd_report_json(&report, args.timing.then_some(ms)));
    Ok(())
}

fn cmd_dsc(args: &DscArgs) -> CliResult<()> {
    let (train, eval) = read_pair(&args.inputs)?;
    let cfg = pipeline::dsc_config(args.k, args.upper_bound);
    let start = Instant::now();
    let report = adequacy::dsc_parallel(&eval, &train, &cfg, args.workers.workers)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    print_json(&adequacy::dsc_report_json(&report, args.timing.then_some(ms)));
    Ok(())
}

fn cmd_mutate(args: &ConfigArgs) -> CliResult<()> {
    let cfg = load_config(args)?;
    let base = pipeline::train_base(&cfg)?;
    let predictions: Vec<usize> = base.test_traces.traces().iter().map(|t| t.predicted).collect();
    let (records, skipped) = pipeline::mutation_study(&cfg, &base, &base.splits.test, &predictions, "test")?;
    make_dir(&args.out_dir)?;
    pipeline::write_study_json(&records, &args.out_dir.join("study.json"))?;
    pipeline::write_study_csv(&records, &args.out_dir.join("study.csv"))?;
    let skipped: Vec<_> = skipped.iter().map(|(id, reason)| json!({"mutant_id": id, "reason": reason})).collect();
    print_json(&json!({"trained": records.len(), "skipped": skipped, "out_dir": args.out_dir}));
    Ok(())
}

fn cmd_fuzz(args: &FuzzArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let train = read_dataset(&args.train, Some(model.class_count()))?;
    let seeds = read_dataset(&args.eval, Some(model.class_count()))?;
    let profile = fuzzing::profile_neurons(&model, &train)?;
    let cov = CoverageConfig {
        criterion: args.criterion.into(),
        nc_threshold: args.nc_threshold,
        kmnc_sections: args.kmnc_sections,
        nbc_margin_multiplier: args.nbc_margin,
    };
    let mut fuzz_cfg = FuzzConfig::new(args.iterations, args.seed);
    fuzz_cfg.mutators = Mutator::ALL.into_iter().filter(|m| seeds.grid().is_some() || !m.needs_grid()).collect();
    let outcome = fuzzing::fuzz(&model, &seeds, &profile, &cov, &fuzz_cfg)?;
    make_dir(&args.out_dir)?;
    let stem = format!("corner_case_{}", outcome.criterion);
    fuzzing::save_corpus(&outcome, &args.out_dir, &stem)?;
    print_json(&json!({
        "criterion": outcome.criterion,
        "iterations": outcome.iterations,
        "seeds": outcome.seed_count,
        "final_coverage": outcome.final_coverage(),
        "corner_cases": outcome.corpus.len(),
        "corpus_accuracy": outcome.corpus.accuracy(),
        "manifest": args.out_dir.join(format!("{stem}.json")),
    }));
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> CliResult<()> {
    let train = read_dataset(&args.train, None)?;
    require(&args.eval)?;
    let rows: Vec<Vec<f64>> = if args.eval.extension().is_some_and(|e| e == "lcrp") {
        let file = fs::File::open(&args.eval)
            .map_err(|e| CliError::new(Kind::MissingFile, format!("{}: {e}", args.eval.display())))?;
        let (rows, dim) = fuzzing::read_corpus_matrix(file)
            .map_err(|e| CliError::new(Kind::InvalidInput, format!("{}: {e}", args.eval.display())))?;
        if dim != train.dim() {
            return Err(CliError::new(
                Kind::InvalidInput,
                format!("corpus rows have {dim} values, training inputs have {}", train.dim()),
            ));
        }
        rows
    } else {
        let data = read_dataset(&args.eval, None)?;
        data.rows().map(<[f64]>::to_vec).collect()
    };
    let ae = AutoencoderConfig { epochs: args.epochs, ..AutoencoderConfig::for_input_dim(train.dim(), args.seed) };
    let oracle = ValidityOracle::fit(&train, &ae, args.epsilon)?;
    let report = oracle.validate(rows.iter().map(Vec::as_slice))?;
    print_json(&serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

fn cmd_correlate(args: &CorrelateArgs) -> CliResult<()> {
    require(&args.study)?;
    let records: Vec<StudyRecord> = pipeline::read_study(&args.study)?;
    let table = analysis::correlation_study(&records)?;
    if args.text {
        let report = analysis::Report { title: "Correlation study".into(), correlations: Some(table), ..Default::default() };
        emit(&analysis::render_text(&report));
    } else {
        print_json(&serde_json::to_value(&table).expect("table serializes"));
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let (train, eval) = read_pair(&args.inputs)?;
    let cfg = pipeline::dsc_config(args.k, UpperBound::Auto);
    let records = analysis::timing_bench(&train, &eval, &[1, args.workers], args.repeats, &cfg)?;
    print_json(&serde_json::to_value(&records).expect("records serialize"));
    Ok(())
}

fn cmd_pipeline(args: &PipelineArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let outcome = pipeline::run_pipeline(&cfg)?;
    let dir = &args.common.out_dir;
    pipeline::write_outputs(&outcome, dir)?;
    // wall times differ between runs, so they stay out of the report files
    if !args.skip_bench {
        let dsc = pipeline::dsc_config(cfg.dsc.bucket_count, cfg.dsc.upper_bound);
        let timing =
            analysis::timing_bench(&outcome.train_traces, &outcome.test_traces, &[1, args.bench_workers], 3, &dsc)?;
        let json = serde_json::to_string_pretty(&timing).expect("records serialize");
        write_file(&dir.join("timing.json"), (json + "\n").as_bytes())?;
    }
    emit(&analysis::render_text(&outcome.report));
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Traces(a) => cmd_traces(a),
        Command::Lscd(a) => cmd_lscd(a),
        Command::Dsc(a) => cmd_dsc(a),
        Command::Mutate(a) => cmd_mutate(a),
        Command::Fuzz(a) => cmd_fuzz(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

fn fail(err: &CliError) -> ExitCode {
    let body = json!({"error": {"kind": err.kind.name(), "message": err.message}, "exit_code": err.kind as u8});
    eprintln!("{body}");
    ExitCode::from(err.kind as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::new(Kind::Usage, e.to_string().trim_end())),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
