//! Latent-space adequacy metrics.
//!
//! * LSCD: per ground-truth class, the mean Euclidean distance of evaluation
//!   latents from the class centroid of the training latents; aggregated as
//!   the mean over evaluated classes.
//! * DSA / DSC: for an input `x` predicted as class `c`, `x_a` is the nearest
//!   training trace predicted `c`, `x_b` the training trace of another
//!   predicted class nearest to `x_a`, and `DSA(x) = |x - x_a| / |x_a - x_b|`.
//!   DSC is the fraction of the `k` equal buckets over `(0, U]` hit by the
//!   DSA values of a dataset.
//!
//! DSC scans the training set exhaustively for every input. The parallel path
//! splits inputs across scoped worker threads and returns bit-identical results
//! because every per-input computation is the same sequential scan.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::numkit::{argmin_dist, euclidean, DenseVector, NumError};
use crate::traces::{group_by_class, GroupBy, LatentTrace, SplitTag, TraceSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdequacyError {
    #[error("centroids must come from a train split, got {found}")]
    WrongSplit { found: SplitTag },
    #[error("latent dimension mismatch: reference has {reference}, evaluation has {evaluation}")]
    DimensionMismatch { reference: usize, evaluation: usize },
    #[error("no class of the evaluation set has a training centroid")]
    NoOverlappingClasses,
    #[error("invalid DSC config: {0}")]
    InvalidConfig(String),
    #[error("no input has a computable DSA ({excluded} excluded)")]
    NoComputableDsa { excluded: usize },
    #[error(transparent)]
    Dsa(#[from] DsaError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum DsaError {
    #[error("no training trace is predicted as class {class}")]
    EmptySameClass { class: usize },
    #[error("no training trace is predicted as a class other than {class}")]
    EmptyOtherClass { class: usize },
    #[error("degenerate inter-class distance: training trace {train_index} coincides with another class")]
    DegenerateInterClass { train_index: usize },
    #[error("predicted class {class} is outside the training class range {class_count}")]
    ClassOutOfRange { class: usize, class_count: usize },
    #[error("latent dimension {found} does not match training dimension {expected}")]
    Dimension { expected: usize, found: usize },
}

/// Per-class means of the training latents, grouped by ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentroidTable {
    pub centroids: Vec<Option<DenseVector>>,
    pub class_counts: Vec<usize>,
    pub source_split: SplitTag,
    pub latent_dim: usize,
}

impl CentroidTable {
    pub fn centroid(&self, class: usize) -> Option<&DenseVector> {
        self.centroids.get(class).and_then(Option::as_ref)
    }

    pub fn absent_classes(&self) -> Vec<usize> {
        self.centroids.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(i, _)| i).collect()
    }
}

pub fn compute_centroids(train: &TraceSet) -> Result<CentroidTable, AdequacyError> {
    if train.split_tag() != SplitTag::Train {
        return Err(AdequacyError::WrongSplit { found: train.split_tag() });
    }
    let d = train.latent_dim();
    let mut centroids = Vec::with_capacity(train.class_count());
    let mut class_counts = Vec::with_capacity(train.class_count());
    for (class, members) in group_by_class(train, GroupBy::GroundTruth).into_iter().enumerate() {
        class_counts.push(members.len());
        if members.is_empty() {
            warn!("class {class} has no training members; its centroid is absent");
            centroids.push(None);
            continue;
        }
        let mut sum = vec![0.0; d];
        for &i in &members {
            sum.iter_mut().zip(train.latent(i)).for_each(|(s, v)| *s += v);
        }
        let n = members.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        centroids.push(Some(DenseVector::new(sum)?));
    }
    Ok(CentroidTable { centroids, class_counts, source_split: train.split_tag(), latent_dim: d })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionReport {
    pub per_class: BTreeMap<usize, f64>,
    pub aggregate: f64,
    /// Classes without evaluation members or without a training centroid.
    pub skipped_classes: Vec<usize>,
    pub evaluated_samples: usize,
}

pub fn lscd_per_class(
    data: &TraceSet,
    centroids: &CentroidTable,
) -> Result<DispersionReport, AdequacyError> {
    if data.latent_dim() != centroids.latent_dim {
        return Err(AdequacyError::DimensionMismatch {
            reference: centroids.latent_dim,
            evaluation: data.latent_dim(),
        });
    }
    let groups = group_by_class(data, GroupBy::GroundTruth);
    let class_total = groups.len().max(centroids.centroids.len());
    let mut per_class = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut evaluated_samples = 0;
    for class in 0..class_total {
        let members = groups.get(class).map(Vec::as_slice).unwrap_or(&[]);
        let centre = match (members.is_empty(), centroids.centroid(class)) {
            (false, Some(c)) => c,
            _ => {
                skipped.push(class);
                continue;
            }
        };
        let mut total = 0.0;
        for &i in members {
            total += euclidean(centre.as_slice(), data.latent(i))?;
        }
        per_class.insert(class, total / members.len() as f64);
        evaluated_samples += members.len();
    }
    if per_class.is_empty() {
        return Err(AdequacyError::NoOverlappingClasses);
    }
    let aggregate = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(DispersionReport { per_class, aggregate, skipped_classes: skipped, evaluated_samples })
}

/// Centroids from `train`, dispersion of `data`.
pub fn lscd(train: &TraceSet, data: &TraceSet) -> Result<DispersionReport, AdequacyError> {
    lscd_per_class(data, &compute_centroids(train)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DsaDetail {
    pub value: f64,
    pub dist_a: f64,
    pub dist_b: f64,
    /// Training index of `x_a`.
    pub nearest_same: usize,
    /// Training index of `x_b`.
    pub nearest_other: usize,
}

/// Training traces grouped by predicted class, ready for repeated DSA queries.
#[derive(Debug, Clone)]
pub struct DsaIndex<'a> {
    train: &'a TraceSet,
    by_predicted: Vec<Vec<usize>>,
}

impl<'a> DsaIndex<'a> {
    pub fn new(train: &'a TraceSet) -> Self {
        Self { train, by_predicted: group_by_class(train, GroupBy::Predicted) }
    }

    pub fn train(&self) -> &'a TraceSet {
        self.train
    }

    pub fn dsa(&self, latent: &[f64], predicted: usize) -> Result<DsaDetail, DsaError> {
        let train = self.train;
        if latent.len() != train.latent_dim() {
            return Err(DsaError::Dimension { expected: train.latent_dim(), found: latent.len() });
        }
        let same = self.by_predicted.get(predicted).ok_or(DsaError::ClassOutOfRange {
            class: predicted,
            class_count: train.class_count(),
        })?;
        let a = argmin_dist(latent, same.iter().map(|&i| (i, train.latent(i))))
            .map_err(|_| DsaError::EmptySameClass { class: predicted })?;
        let anchor = train.latent(a.index);
        let others = self
            .by_predicted
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != predicted)
            .flat_map(|(_, members)| members.iter().map(|&i| (i, train.latent(i))));
        let b = argmin_dist(anchor, others).map_err(|_| DsaError::EmptyOtherClass { class: predicted })?;
        if b.distance == 0.0 {
            return Err(DsaError::DegenerateInterClass { train_index: a.index });
        }
        Ok(DsaDetail {
            value: a.distance / b.distance,
            dist_a: a.distance,
            dist_b: b.distance,
            nearest_same: a.index,
            nearest_other: b.index,
        })
    }
}

/// DSA of a single trace against `train`, using its predicted class.
pub fn dsa(x: &LatentTrace, train: &TraceSet) -> Result<DsaDetail, DsaError> {
    DsaIndex::new(train).dsa(x.latent.as_slice(), x.predicted)
}

pub type DsaOutcome = Result<DsaDetail, DsaError>;

pub fn dsa_values(data: &TraceSet, train: &TraceSet) -> Vec<DsaOutcome> {
    let index = DsaIndex::new(train);
    data.traces().iter().map(|t| index.dsa(t.latent.as_slice(), t.predicted)).collect()
}

/// Same as [`dsa_values`], with inputs split into `workers` contiguous
/// chunks evaluated on scoped threads.
pub fn dsa_values_parallel(data: &TraceSet, train: &TraceSet, workers: usize) -> Vec<DsaOutcome> {
    let workers = workers.max(1).min(data.len());
    if workers <= 1 {
        return dsa_values(data, train);
    }
    let index = DsaIndex::new(train);
    let chunk = data.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .traces()
            .chunks(chunk)
            .map(|traces| {
                let index = &index;
                scope.spawn(move || {
                    traces.iter().map(|t| index.dsa(t.latent.as_slice(), t.predicted)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("DSA worker panicked"))
            .collect()
    })
}

/// Upper bound `U` of the bucketed interval `(0, U]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum UpperBound {
    /// Largest finite DSA observed on the evaluated set.
    #[default]
    Auto,
    Fixed(f64),
}

impl fmt::Display for UpperBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpperBound::Auto => f.write_str("auto"),
            UpperBound::Fixed(u) => write!(f, "{u}"),
        }
    }
}

impl FromStr for UpperBound {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(UpperBound::Auto);
        }
        let u: f64 = s.parse().map_err(|e| format!("upper bound '{s}': {e}"))?;
        if !(u > 0.0) || !u.is_finite() {
            return Err(format!("upper bound must be a positive number, got {s}"));
        }
        Ok(UpperBound::Fixed(u))
    }
}

impl Serialize for UpperBound {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            UpperBound::Auto => s.serialize_str("auto"),
            UpperBound::Fixed(u) => s.serialize_f64(*u),
        }
    }
}

impl<'de> Deserialize<'de> for UpperBound {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(u) => UpperBound::from_str(&u.to_string()),
            Raw::Text(t) => UpperBound::from_str(&t),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DscConfig {
    pub bucket_count: usize,
    #[serde(default)]
    pub upper_bound: UpperBound,
}

impl Default for DscConfig {
    fn default() -> Self {
        Self { bucket_count: 1000, upper_bound: UpperBound::Auto }
    }
}

impl DscConfig {
    pub fn validate(&self) -> Result<(), AdequacyError> {
        if self.bucket_count == 0 {
            return Err(AdequacyError::InvalidConfig("bucket count k must be >= 1".into()));
        }
        if let UpperBound::Fixed(u) = self.upper_bound {
            if !(u > 0.0) || !u.is_finite() {
                return Err(AdequacyError::InvalidConfig(format!("upper bound {u} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketCoverage {
    pub bucket_count: usize,
    pub upper_bound: f64,
    /// 1-based indices of hit buckets, ascending.
    pub hit_buckets: Vec<usize>,
    pub coverage: f64,
    /// Values above `U`.
    pub overflow: usize,
    /// Values `<= 0`, which fall outside `(0, U]`.
    pub non_positive: usize,
}

/// 1-based bucket `i` such that `value` lies in `(U(i-1)/k, U i/k]`, or
/// `None` when outside `(0, U]`.
pub fn bucket_index(value: f64, bucket_count: usize, upper_bound: f64) -> Option<usize> {
    if !(value > 0.0) || value > upper_bound {
        return None;
    }
    let k = bucket_count as f64;
    let edge = |i: usize| if i == bucket_count { upper_bound } else { upper_bound * i as f64 / k };
    let mut i = ((value * k / upper_bound).ceil() as usize).clamp(1, bucket_count);
    // settle float rounding against the literal interval edges
    while i > 1 && value <= edge(i - 1) {
        i -= 1;
    }
    while i < bucket_count && value > edge(i) {
        i += 1;
    }
    Some(i)
}

pub fn bucket_coverage(values: &[f64], bucket_count: usize, upper_bound: f64) -> BucketCoverage {
    let mut hit = vec![false; bucket_count];
    let mut overflow = 0;
    let mut non_positive = 0;
    for &v in values {
        match bucket_index(v, bucket_count, upper_bound) {
            Some(i) => hit[i - 1] = true,
            None if v > upper_bound => overflow += 1,
            None => non_positive += 1,
        }
    }
    let hit_buckets: Vec<usize> = hit.iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| i + 1).collect();
    BucketCoverage {
        bucket_count,
        upper_bound,
        coverage: hit_buckets.len() as f64 / bucket_count as f64,
        hit_buckets,
        overflow,
        non_positive,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Exclusions {
    pub empty_same_class: usize,
    pub empty_other_class: usize,
    pub degenerate_inter_class: usize,
    pub other: usize,
}

impl Exclusions {
    pub fn total(&self) -> usize {
        self.empty_same_class + self.empty_other_class + self.degenerate_inter_class + self.other
    }

    fn record(&mut self, e: &DsaError) {
        match e {
            DsaError::EmptySameClass { .. } => self.empty_same_class += 1,
            DsaError::EmptyOtherClass { .. } => self.empty_other_class += 1,
            DsaError::DegenerateInterClass { .. } => self.degenerate_inter_class += 1,
            _ => self.other += 1,
        }
    }
}

/// Finite DSA values of the computable inputs plus exclusion counts.
pub fn summarize_outcomes(outcomes: &[DsaOutcome]) -> (Vec<f64>, Exclusions) {
    let mut values = Vec::with_capacity(outcomes.len());
    let mut excl = Exclusions::default();
    for o in outcomes {
        match o {
            Ok(d) => values.push(d.value),
            Err(e) => excl.record(e),
        }
    }
    (values, excl)
}

pub fn resolve_upper_bound(values: &[f64], bound: UpperBound) -> f64 {
    match bound {
        UpperBound::Fixed(u) => u,
        UpperBound::Auto => {
            let max = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max);
            // all-zero DSA leaves nothing to bucket; any positive U gives coverage 0
            if max > 0.0 {
                max
            } else {
                1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DscReport {
    pub config: DscConfig,
    /// DSA per evaluation input, `None` where excluded.
    pub per_input: Vec<Option<f64>>,
    pub exclusions: Exclusions,
    pub buckets: BucketCoverage,
    /// Which grouping defines an input's own class.
    pub neighbor_class_source: &'static str,
}

impl DscReport {
    pub fn coverage(&self) -> f64 {
        self.buckets.coverage
    }

    /// DSA values of the computable inputs in input order.
    pub fn values(&self) -> Vec<f64> {
        self.per_input.iter().flatten().copied().collect()
    }
}

fn check_dims(data: &TraceSet, train: &TraceSet) -> Result<(), AdequacyError> {
    if data.latent_dim() != train.latent_dim() {
        return Err(AdequacyError::DimensionMismatch {
            reference: train.latent_dim(),
            evaluation: data.latent_dim(),
        });
    }
    Ok(())
}

/// Buckets precomputed DSA outcomes.
pub fn dsc_from_outcomes(outcomes: &[DsaOutcome], cfg: &DscConfig) -> Result<DscReport, AdequacyError> {
    cfg.validate()?;
    let (values, exclusions) = summarize_outcomes(outcomes);
    if values.is_empty() {
        return Err(AdequacyError::NoComputableDsa { excluded: exclusions.total() });
    }
    let u = resolve_upper_bound(&values, cfg.upper_bound);
    Ok(DscReport {
        config: *cfg,
        per_input: outcomes.iter().map(|o| o.as_ref().ok().map(|d| d.value)).collect(),
        exclusions,
        buckets: bucket_coverage(&values, cfg.bucket_count, u),
        neighbor_class_source: "predicted",
    })
}

pub fn dsc_coverage(data: &TraceSet, train: &TraceSet, cfg: &DscConfig) -> Result<DscReport, AdequacyError> {
    cfg.validate()?;
    check_dims(data, train)?;
    dsc_from_outcomes(&dsa_values(data, train), cfg)
}

pub fn dsc_parallel(
    data: &TraceSet,
    train: &TraceSet,
    cfg: &DscConfig,
    worker_count: usize,
) -> Result<DscReport, AdequacyError> {
    cfg.validate()?;
    check_dims(data, train)?;
    if worker_count == 0 {
        return Err(AdequacyError::InvalidConfig("worker count must be >= 1".into()));
    }
    dsc_from_outcomes(&dsa_values_parallel(data, train, worker_count), cfg)
}

/// JSON document for an LSCD run.
pub fn lscd_report_json(report: &DispersionReport, wall_time_ms: Option<f64>) -> serde_json::Value {
    serde_json::json!({
        "metric": "lscd",
        "config": { "centroid_grouping": "ground_truth", "centroid_source": "train" },
        "per_class": report.per_class,
        "aggregate": report.aggregate,
        "skipped_classes": report.skipped_classes,
        "evaluated_samples": report.evaluated_samples,
        "wall_time_ms": wall_time_ms,
    })
}

/// JSON document for a DSC run.
pub fn dsc_report_json(report: &DscReport, wall_time_ms: Option<f64>) -> serde_json::Value {
    let note = match report.config.upper_bound {
        UpperBound::Auto => "upper bound taken from this evaluation set; coverage is not comparable across sets",
        UpperBound::Fixed(_) => "explicit upper bound",
    };
    serde_json::json!({
        "metric": "dsc",
        "config": {
            "k": report.config.bucket_count,
            "upper_bound": report.config.upper_bound,
            "upper_bound_used": report.buckets.upper_bound,
            "neighbor_class_source": report.neighbor_class_source,
            "upper_bound_note": note,
        },
        "per_bucket": { "hit": report.buckets.hit_buckets },
        "aggregate": report.buckets.coverage,
        "overflow": report.buckets.overflow,
        "non_positive": report.buckets.non_positive,
        "excluded": report.exclusions,
        "wall_time_ms": wall_time_ms,
    })
}
