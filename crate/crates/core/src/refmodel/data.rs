//! Labeled datasets and the desk-scale synthetic generators.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Row-major matrix of inputs in [0, 1] with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
    grid: Option<(usize, usize)>,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self, ModelError> {
        if dim == 0 || labels.is_empty() {
            return Err(ModelError::InvalidData("dataset must have n > 0 rows and d > 0 columns".into()));
        }
        if inputs.len() != dim * labels.len() {
            return Err(ModelError::InvalidData(format!(
                "{} values cannot form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(ModelError::InvalidData("class_count must be positive".into()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(ModelError::InvalidData(format!("label {l} at row {i} >= class_count {class_count}")));
        }
        if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::InvalidData(format!("non-finite input value at flat index {i}")));
        }
        Ok(Self { inputs, dim, labels, class_count, grid: None })
    }

    /// Attaches an image-like `rows x cols` layout (needed by spatial mutators).
    pub fn with_grid(mut self, rows: usize, cols: usize) -> Result<Self, ModelError> {
        if rows * cols != self.dim {
            return Err(ModelError::InvalidData(format!("grid {rows}x{cols} does not match dim {}", self.dim)));
        }
        self.grid = Some((rows, cols));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.inputs.chunks_exact(self.dim)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// New dataset made of the given rows, keeping class count and grid.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, ModelError> {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let mut out = Self::new(inputs, self.dim, labels, self.class_count)?;
        out.grid = self.grid;
        Ok(out)
    }

    /// Same rows with replaced inputs and/or labels.
    pub fn with_parts(&self, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self, ModelError> {
        let mut out = Self::new(inputs, self.dim, labels, self.class_count)?;
        out.grid = self.grid;
        Ok(out)
    }

    /// `label,v0,...,v{d-1}` lines, the format read by [`DatasetKind::DigitsFile`].
    pub fn to_digits_csv(&self) -> String {
        let mut s = String::new();
        for (i, row) in self.rows().enumerate() {
            write!(s, "{}", self.labels[i]).unwrap();
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    /// Isotropic Gaussian clusters with centres drawn in [0.2, 0.8]^dim.
    Blobs {
        classes: usize,
        samples: usize,
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Concentric noisy rings in the unit square (2-D, not linearly separable).
    Rings {
        classes: usize,
        samples: usize,
        #[serde(default = "default_ring_noise")]
        noise: f64,
    },
    /// Text file with one `label,v0,...` row per sample. Values above 1 are
    /// rescaled by the file-wide maximum.
    DigitsFile {
        path: PathBuf,
        #[serde(default)]
        class_count: Option<usize>,
    },
}

fn default_spread() -> f64 {
    0.08
}

fn default_ring_noise() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    /// Train/validation/test proportions; the rest of the data after train
    /// and validation goes to test.
    #[serde(default = "default_fractions")]
    pub split: (f64, f64),
}

fn default_fractions() -> (f64, f64) {
    (0.7, 0.1)
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        Self { kind, split: default_fractions() }
    }
}

pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<DatasetSplits, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = match &spec.kind {
        DatasetKind::Blobs { classes, samples, dim, spread } => {
            check_counts(*classes, *samples)?;
            if *dim == 0 || !(*spread > 0.0) {
                return Err(ModelError::InvalidData("blobs need dim > 0 and spread > 0".into()));
            }
            blobs(*classes, *samples, *dim, *spread, &mut rng)?
        }
        DatasetKind::Rings { classes, samples, noise } => {
            check_counts(*classes, *samples)?;
            rings(*classes, *samples, *noise, &mut rng)?
        }
        DatasetKind::DigitsFile { path, class_count } => read_digits_file(path, *class_count)?,
    };
    stratified_split(&full, spec.split, &mut rng)
}

fn check_counts(classes: usize, samples: usize) -> Result<(), ModelError> {
    if classes < 2 {
        return Err(ModelError::InvalidData(format!("need at least 2 classes, got {classes}")));
    }
    if samples < 10 * classes {
        return Err(ModelError::InvalidData(format!(
            "need at least 10 samples per class, got {samples} for {classes} classes"
        )));
    }
    Ok(())
}

fn square_grid(dim: usize) -> Option<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    (side * side == dim && side > 1).then_some(side)
}

fn balanced_labels(classes: usize, samples: usize) -> Vec<usize> {
    (0..samples).map(|i| i % classes).collect()
}

fn blobs(
    classes: usize,
    samples: usize,
    dim: usize,
    spread: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset, ModelError> {
    let centres: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect()).collect();
    let noise = Normal::new(0.0, spread).expect("spread validated");
    let labels = balanced_labels(classes, samples);
    let mut inputs = Vec::with_capacity(samples * dim);
    for &l in &labels {
        for c in &centres[l] {
            inputs.push((c + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    let ds = LabeledDataset::new(inputs, dim, labels, classes)?;
    match square_grid(dim) {
        Some(side) => ds.with_grid(side, side),
        None => Ok(ds),
    }
}

fn rings(
    classes: usize,
    samples: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset, ModelError> {
    let labels = balanced_labels(classes, samples);
    let radial = Normal::new(0.0, noise.max(1e-12)).expect("finite noise");
    let mut inputs = Vec::with_capacity(samples * 2);
    for &l in &labels {
        let radius = 0.45 * (l + 1) as f64 / classes as f64;
        let r = radius + radial.sample(rng);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        inputs.push((0.5 + r * theta.cos()).clamp(0.0, 1.0));
        inputs.push((0.5 + r * theta.sin()).clamp(0.0, 1.0));
    }
    LabeledDataset::new(inputs, 2, labels, classes)
}

pub fn read_digits_file(path: &Path, class_count: Option<usize>) -> Result<LabeledDataset, ModelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ModelError::DatasetFile { path: path.to_path_buf(), message: e.to_string() })?;
    parse_digits(&text, class_count)
        .map_err(|message| ModelError::DatasetFile { path: path.to_path_buf(), message })
}

fn parse_digits(text: &str, class_count: Option<usize>) -> Result<LabeledDataset, String> {
    let mut labels = Vec::new();
    let mut inputs = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| format!("line {}: bad label: {e}", lineno + 1))?;
        let row = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("line {}: bad value: {e}", lineno + 1))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(format!("line {}: expected {d} values, found {}", lineno + 1, row.len()))
            }
            _ => {}
        }
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(format!("line {}: values must be finite and non-negative", lineno + 1));
        }
        labels.push(label);
        inputs.extend(row);
    }
    let dim = dim.filter(|&d| d > 0).ok_or_else(|| "no data rows".to_string())?;
    let max = inputs.iter().cloned().fold(0.0, f64::max);
    if max > 1.0 {
        inputs.iter_mut().for_each(|v| *v /= max);
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let ds = LabeledDataset::new(inputs, dim, labels, classes).map_err(|e| e.to_string())?;
    match square_grid(dim) {
        Some(side) => ds.with_grid(side, side).map_err(|e| e.to_string()),
        None => Ok(ds),
    }
}

/// Interleaves shuffled per-class index lists round-robin and cuts the
/// sequence, so every split is class-balanced to within one sample.
fn stratified_split(
    full: &LabeledDataset,
    (train_frac, val_frac): (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<DatasetSplits, ModelError> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
        return Err(ModelError::InvalidData(format!("invalid split fractions ({train_frac}, {val_frac})")));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); full.class_count()];
    for (i, &l) in full.labels().iter().enumerate() {
        per_class[l].push(i);
    }
    for members in &mut per_class {
        members.shuffle(rng);
    }
    let mut order = Vec::with_capacity(full.len());
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    for j in 0..longest {
        for members in &per_class {
            if let Some(&i) = members.get(j) {
                order.push(i);
            }
        }
    }
    let n = order.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = (n as f64 * val_frac).round() as usize;
    if n_train == 0 || n_train + n_val >= n {
        return Err(ModelError::InvalidData(format!("dataset of {n} rows too small to split")));
    }
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.shuffle(rng);
    val.shuffle(rng);
    test.shuffle(rng);
    let validation = if val.is_empty() { full.subset(&train[..1])? } else { full.subset(&val)? };
    Ok(DatasetSplits { train: full.subset(&train)?, validation, test: full.subset(&test)? })
}
