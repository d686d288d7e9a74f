//! Evaluation apparatus: Pearson correlation with a t-test p-value, the
//! correlation study over mutants, the DSC bucket-count sweep, the LSCD/DSC
//! timing benchmark, and report rendering.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adequacy::{self, AdequacyError, DscConfig, Exclusions, UpperBound};
use crate::numkit::{reg_incomplete_beta, NumError};
use crate::traces::TraceSet;
use crate::validity::ValidityReport;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// p-values below this are displayed as `<1e-15`.
pub const P_DISPLAY_FLOOR: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 paired values, got {0}")]
    TooFewValues(usize),
    #[error("undefined correlation: series '{0}' is constant")]
    Undefined(String),
    #[error("non-finite value in series '{0}'")]
    NonFinite(String),
    #[error("records disagree on the DSC sweep bucket counts")]
    InconsistentSweep,
    #[error(transparent)]
    Adequacy(#[from] AdequacyError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pair: String,
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
    pub significant: bool,
    /// Per bucket count `(k, r, p)` when `r` is a mean over the DSC sweep.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<(usize, f64, f64)>,
}

pub fn format_p_value(p: f64) -> String {
    if p < P_DISPLAY_FLOOR {
        "<1e-15".to_string()
    } else {
        format!("{p:.4e}")
    }
}

fn check_series(name: &str, v: &[f64]) -> Result<(), AnalysisError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite(name.into()));
    }
    Ok(())
}

/// Sample Pearson r with a two-sided p-value from Student's t on n - 2
/// degrees of freedom. |r| within 1e-14 of 1 is reported as exactly 1.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult, AnalysisError> {
    pearson_named("x_vs_y", xs, ys)
}

pub fn pearson_named(pair: &str, xs: &[f64], ys: &[f64]) -> Result<CorrelationResult, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::TooFewValues(n));
    }
    check_series("x", xs)?;
    check_series("y", ys)?;
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (xname, yname) = pair.split_once("_vs_").unwrap_or(("x", "y"));
    if sxx == 0.0 {
        return Err(AnalysisError::Undefined(xname.into()));
    }
    if syy == 0.0 {
        return Err(AnalysisError::Undefined(yname.into()));
    }
    let mut r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    if 1.0 - r.abs() < 1e-14 {
        r = r.signum();
    }
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        // P(|T| > |t|) = I_{nu / (nu + t^2)}(nu / 2, 1 / 2), and nu / (nu + t^2) = 1 - r^2
        let nu = (n - 2) as f64;
        reg_incomplete_beta(nu / 2.0, 0.5, 1.0 - r * r)?.clamp(0.0, 1.0)
    };
    Ok(CorrelationResult { pair: pair.into(), r, p_value, n, significant: p_value < SIGNIFICANCE_LEVEL, sweep: Vec::new() })
}

/// Metrics of one mutant on one evaluation set; all four come from the same
/// traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub mutant_id: String,
    #[serde(default)]
    pub dataset: String,
    pub accuracy: f64,
    pub dsc: f64,
    pub lscd: f64,
    pub mutation_score: f64,
    /// DSC per bucket count, `(k, coverage)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dsc_sweep: Vec<(usize, f64)>,
}

pub const STUDY_PAIRS: [&str; 5] =
    ["dsc_vs_ms", "lscd_vs_ms", "accuracy_vs_ms", "accuracy_vs_lscd", "accuracy_vs_dsc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub n: usize,
    pub rows: Vec<CorrelationResult>,
}

impl CorrelationTable {
    pub fn get(&self, pair: &str) -> Option<&CorrelationResult> {
        self.rows.iter().find(|r| r.pair == pair)
    }
}

/// Mean r and mean p over the sweep; degenerate bucket counts (constant DSC)
/// are left out of the mean.
fn swept_pair(
    pair: &str,
    records: &[StudyRecord],
    other: &[f64],
    dsc_first: bool,
) -> Result<CorrelationResult, AnalysisError> {
    let ks: Vec<usize> = records[0].dsc_sweep.iter().map(|p| p.0).collect();
    if records.iter().any(|r| r.dsc_sweep.iter().map(|p| p.0).ne(ks.iter().copied())) {
        return Err(AnalysisError::InconsistentSweep);
    }
    let mut sweep = Vec::new();
    let mut last_err = None;
    for (j, &k) in ks.iter().enumerate() {
        let dsc: Vec<f64> = records.iter().map(|r| r.dsc_sweep[j].1).collect();
        let res = if dsc_first { pearson_named(pair, &dsc, other) } else { pearson_named(pair, other, &dsc) };
        match res {
            Ok(c) => sweep.push((k, c.r, c.p_value)),
            Err(e @ AnalysisError::Undefined(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    if sweep.is_empty() {
        return Err(last_err.unwrap_or(AnalysisError::InconsistentSweep));
    }
    let r = sweep.iter().map(|s| s.1).sum::<f64>() / sweep.len() as f64;
    let p_value = sweep.iter().map(|s| s.2).sum::<f64>() / sweep.len() as f64;
    Ok(CorrelationResult {
        pair: pair.into(),
        r,
        p_value,
        n: records.len(),
        significant: p_value < SIGNIFICANCE_LEVEL,
        sweep,
    })
}

/// The five metric pairs over the mutant records. DSC pairs take the mean
/// over each record's sweep when one is present, the single DSC otherwise.
pub fn correlation_study(records: &[StudyRecord]) -> Result<CorrelationTable, AnalysisError> {
    if records.len() < 3 {
        return Err(AnalysisError::TooFewValues(records.len()));
    }
    let col = |f: fn(&StudyRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    let ms = col(|r| r.mutation_score);
    let acc = col(|r| r.accuracy);
    let lscd = col(|r| r.lscd);
    let dsc = col(|r| r.dsc);
    let swept = records.iter().all(|r| !r.dsc_sweep.is_empty());
    let rows = vec![
        if swept { swept_pair("dsc_vs_ms", records, &ms, true)? } else { pearson_named("dsc_vs_ms", &dsc, &ms)? },
        pearson_named("lscd_vs_ms", &lscd, &ms)?,
        pearson_named("accuracy_vs_ms", &acc, &ms)?,
        pearson_named("accuracy_vs_lscd", &acc, &lscd)?,
        if swept {
            swept_pair("accuracy_vs_dsc", records, &acc, false)?
        } else {
            pearson_named("accuracy_vs_dsc", &acc, &dsc)?
        },
    ];
    Ok(CorrelationTable { n: records.len(), rows })
}

pub fn default_sweep_k() -> Vec<usize> {
    (1..=10).map(|i| i * 100).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub per_k: Vec<(usize, f64)>,
    pub mean: f64,
    pub upper_bound: f64,
    pub exclusions: Exclusions,
}

/// Re-buckets precomputed DSA values for every k.
pub fn sweep_from_values(values: &[f64], k_values: &[usize], upper_bound: f64) -> SweepResult {
    let per_k: Vec<(usize, f64)> = k_values
        .iter()
        .map(|&k| (k, adequacy::bucket_coverage(values, k, upper_bound).coverage))
        .collect();
    let mean = per_k.iter().map(|p| p.1).sum::<f64>() / per_k.len().max(1) as f64;
    SweepResult { per_k, mean, upper_bound, exclusions: Exclusions::default() }
}

/// DSA is computed once per input and bucketed for each k.
pub fn dsc_bucket_sweep(
    data: &TraceSet,
    train: &TraceSet,
    k_values: &[usize],
    upper_bound: UpperBound,
    workers: usize,
) -> Result<SweepResult, AnalysisError> {
    for &k in k_values {
        DscConfig { bucket_count: k, upper_bound }.validate()?;
    }
    if data.latent_dim() != train.latent_dim() {
        return Err(AdequacyError::DimensionMismatch { reference: train.latent_dim(), evaluation: data.latent_dim() }.into());
    }
    let outcomes = adequacy::dsa_values_parallel(data, train, workers);
    let (values, exclusions) = adequacy::summarize_outcomes(&outcomes);
    if values.is_empty() {
        return Err(AdequacyError::NoComputableDsa { excluded: exclusions.total() }.into());
    }
    let u = adequacy::resolve_upper_bound(&values, upper_bound);
    Ok(SweepResult { exclusions, ..sweep_from_values(&values, k_values, u) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimedMetric {
    Lscd,
    Dsc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    SingleThread,
    MultiThread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub metric: TimedMetric,
    pub mode: TimingMode,
    pub worker_count: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub latent_dim: usize,
    /// Median over the timed repeats.
    pub wall_time_ms: f64,
    pub repeats: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms<F: FnMut() -> Result<(), AnalysisError>>(repeats: usize, mut f: F) -> Result<f64, AnalysisError> {
    f()?; // warm-up, discarded
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    Ok(median(samples))
}

/// Times LSCD once (single-threaded) and DSC at each worker count on
/// preloaded traces. Each configuration gets one warm-up run and at least
/// three timed repeats.
pub fn timing_bench(
    train: &TraceSet,
    eval: &TraceSet,
    worker_counts: &[usize],
    repeats: usize,
    dsc: &DscConfig,
) -> Result<Vec<TimingRecord>, AnalysisError> {
    let repeats = repeats.max(3);
    let record = |metric, worker_count: usize, wall_time_ms| TimingRecord {
        metric,
        mode: if worker_count > 1 { TimingMode::MultiThread } else { TimingMode::SingleThread },
        worker_count,
        n_train: train.len(),
        n_eval: eval.len(),
        latent_dim: train.latent_dim(),
        wall_time_ms,
        repeats,
    };
    let mut out = Vec::new();
    let t = time_ms(repeats, || {
        std::hint::black_box(adequacy::lscd(train, eval)?);
        Ok(())
    })?;
    out.push(record(TimedMetric::Lscd, 1, t));
    for &w in worker_counts {
        let t = time_ms(repeats, || {
            std::hint::black_box(adequacy::dsc_parallel(eval, train, dsc, w)?);
            Ok(())
        })?;
        out.push(record(TimedMetric::Dsc, w, t));
    }
    Ok(out)
}

/// One row of the dataset table: accuracy, LSCD and DSC of one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub name: String,
    pub size: usize,
    pub accuracy: Option<f64>,
    pub lscd: Option<f64>,
    pub dsc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidityRow {
    pub name: String,
    #[serde(flatten)]
    pub report: ValidityReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    pub title: String,
    pub datasets: Vec<DatasetRow>,
    pub mutants: Vec<StudyRecord>,
    pub correlations: Option<CorrelationTable>,
    pub validity: Vec<ValidityRow>,
    pub timing: Vec<TimingRecord>,
    /// Free-form run metadata lines, printed verbatim.
    pub notes: Vec<String>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn omitted(out: &mut String) {
    out.push_str("  (omitted: no data)\n");
}

/// Plain-text tables. Output depends only on the report contents.
pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", report.title);
    let _ = writeln!(out, "{}", "=".repeat(report.title.len()));
    for note in &report.notes {
        let _ = writeln!(out, "{note}");
    }

    out.push_str("\nDataset quality\n");
    if report.datasets.is_empty() {
        omitted(&mut out);
    } else {
        let _ = writeln!(out, "  {:<22} {:>6} {:>9} {:>10} {:>9}", "dataset", "size", "accuracy", "lscd", "dsc");
        for d in &report.datasets {
            let _ = writeln!(
                out,
                "  {:<22} {:>6} {:>9} {:>10} {:>9}",
                d.name,
                d.size,
                opt(d.accuracy),
                opt(d.lscd),
                opt(d.dsc)
            );
        }
    }

    out.push_str("\nMutants\n");
    if report.mutants.is_empty() {
        omitted(&mut out);
    } else {
        let _ = writeln!(
            out,
            "  {:<34} {:<18} {:>9} {:>10} {:>9} {:>9}",
            "mutant", "dataset", "accuracy", "lscd", "dsc", "ms"
        );
        for m in &report.mutants {
            let _ = writeln!(
                out,
                "  {:<34} {:<18} {:>9.4} {:>10.4} {:>9.4} {:>9.4}",
                m.mutant_id, m.dataset, m.accuracy, m.lscd, m.dsc, m.mutation_score
            );
        }
    }

    out.push_str("\nCorrelation (Pearson)\n");
    match &report.correlations {
        None => omitted(&mut out),
        Some(t) => {
            let _ = writeln!(out, "  n = {}", t.n);
            let _ = writeln!(out, "  {:<18} {:>8} {:>12} {:>12}", "pair", "r", "p", "significant");
            for c in &t.rows {
                let _ = writeln!(
                    out,
                    "  {:<18} {:>8.4} {:>12} {:>12}",
                    c.pair,
                    c.r,
                    format_p_value(c.p_value),
                    if c.significant { "yes" } else { "no" }
                );
            }
        }
    }

    out.push_str("\nInput validity\n");
    if report.validity.is_empty() {
        omitted(&mut out);
    } else {
        let _ = writeln!(out, "  {:<22} {:>6} {:>6} {:>8} {:>10}", "corpus", "total", "valid", "valid %", "threshold");
        for v in &report.validity {
            let _ = writeln!(
                out,
                "  {:<22} {:>6} {:>6} {:>8.2} {:>10.4e}",
                v.name, v.report.total, v.report.valid, v.report.validity_pct, v.report.threshold
            );
        }
    }

    out.push_str("\nRuntime\n");
    if report.timing.is_empty() {
        omitted(&mut out);
    } else {
        let _ = writeln!(out, "  {:<6} {:<14} {:>7} {:>12}", "metric", "mode", "workers", "median ms");
        for t in &report.timing {
            let metric = match t.metric {
                TimedMetric::Lscd => "lscd",
                TimedMetric::Dsc => "dsc",
            };
            let mode = match t.mode {
                TimingMode::SingleThread => "single_thread",
                TimingMode::MultiThread => "multi_thread",
            };
            let _ = writeln!(out, "  {:<6} {:<14} {:>7} {:>12.3}", metric, mode, t.worker_count, t.wall_time_ms);
        }
    }
    out
}

/// JSON form of the report, validated by `schemas/report.schema.json`.
pub fn render_json(report: &Report) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    v["schema_version"] = REPORT_SCHEMA_VERSION.into();
    v
}
