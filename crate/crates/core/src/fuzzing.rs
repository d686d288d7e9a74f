//! Coverage-guided fuzzing with NC, k-MNC and NBC criteria.
//!
//! The loop starts from correctly classified seeds, perturbs queue entries
//! with image-style mutators and keeps a perturbed input only when it covers
//! something new. Kept inputs the model mispredicts become corner cases; the
//! rest join the queue.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::RunningStats;
use crate::refmodel::{self, argmax, LabeledDataset, ModelError, TrainedModel};
use crate::traces::{SplitTag, TraceSet};

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("invalid coverage config: {0}")]
    InvalidConfig(String),
    #[error("activation shape {found:?} does not match the profiled layers {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("unknown mutator '{0}'")]
    UnknownMutator(String),
    #[error("mutator {0} needs grid-shaped inputs")]
    NeedsGrid(&'static str),
    #[error("none of the {0} seeds is classified correctly")]
    NoCorrectSeeds(usize),
    #[error("corpus file: {0}")]
    Corpus(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Nc,
    Kmnc,
    Nbc,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Nc, Criterion::Kmnc, Criterion::Nbc];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Nc => "nc",
            Criterion::Kmnc => "kmnc",
            Criterion::Nbc => "nbc",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nc" => Ok(Criterion::Nc),
            "kmnc" | "k-mnc" => Ok(Criterion::Kmnc),
            "nbc" => Ok(Criterion::Nbc),
            other => Err(format!("unknown criterion '{other}' (expected nc, kmnc or nbc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub criterion: Criterion,
    pub nc_threshold: f64,
    pub kmnc_sections: usize,
    /// Boundary margin in units of the profiled standard deviation.
    pub nbc_margin_multiplier: f64,
}

impl CoverageConfig {
    /// Original large-network hyperparameters: 0.75, 1500 sections, margin 10.
    pub fn large_network(criterion: Criterion) -> Self {
        Self { criterion, nc_threshold: 0.75, kmnc_sections: 1500, nbc_margin_multiplier: 10.0 }
    }

    /// Desk-scale defaults: 100 sections and a zero NBC margin, so boundary
    /// coverage is reachable on small models.
    pub fn desk(criterion: Criterion) -> Self {
        Self { criterion, nc_threshold: 0.75, kmnc_sections: 100, nbc_margin_multiplier: 0.0 }
    }

    pub fn validate(&self) -> Result<(), FuzzError> {
        if !(self.nc_threshold > 0.0 && self.nc_threshold < 1.0) {
            return Err(FuzzError::InvalidConfig(format!("nc_threshold {} not in (0, 1)", self.nc_threshold)));
        }
        if self.kmnc_sections < 2 {
            return Err(FuzzError::InvalidConfig(format!("kmnc_sections {} < 2", self.kmnc_sections)));
        }
        if !(self.nbc_margin_multiplier >= 0.0 && self.nbc_margin_multiplier.is_finite()) {
            return Err(FuzzError::InvalidConfig(format!(
                "nbc_margin_multiplier {} must be non-negative",
                self.nbc_margin_multiplier
            )));
        }
        Ok(())
    }
}

/// Per-neuron activation statistics over the training inputs, flattened in
/// layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronProfile {
    pub layer_sizes: Vec<usize>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NeuronProfile {
    pub fn neuron_count(&self) -> usize {
        self.min.len()
    }
}

pub fn profile_neurons(model: &TrainedModel, train: &LabeledDataset) -> Result<NeuronProfile, FuzzError> {
    let mut stats: Vec<RunningStats> = Vec::new();
    let mut layer_sizes = Vec::new();
    for row in train.rows() {
        let acts = model.layer_activations(row)?;
        if stats.is_empty() {
            layer_sizes = acts.iter().map(Vec::len).collect();
            stats = vec![RunningStats::new(); layer_sizes.iter().sum()];
        }
        for (s, &a) in stats.iter_mut().zip(acts.iter().flatten()) {
            s.push(a);
        }
    }
    Ok(NeuronProfile {
        layer_sizes,
        min: stats.iter().map(|s| s.min()).collect(),
        max: stats.iter().map(|s| s.max()).collect(),
        mean: stats.iter().map(|s| s.mean()).collect(),
        std: stats.iter().map(|s| s.std_dev()).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct CoverageState {
    config: CoverageConfig,
    profile: NeuronProfile,
    hit: Vec<bool>,
    covered: usize,
}

impl CoverageState {
    pub fn new(config: CoverageConfig, profile: NeuronProfile) -> Result<Self, FuzzError> {
        config.validate()?;
        let n = profile.neuron_count();
        let units = match config.criterion {
            Criterion::Nc => n,
            Criterion::Kmnc => n * config.kmnc_sections,
            Criterion::Nbc => 2 * n,
        };
        Ok(Self { config, profile, hit: vec![false; units], covered: 0 })
    }

    pub fn config(&self) -> &CoverageConfig {
        &self.config
    }

    pub fn profile(&self) -> &NeuronProfile {
        &self.profile
    }

    pub fn total_units(&self) -> usize {
        self.hit.len()
    }

    pub fn covered_units(&self) -> usize {
        self.covered
    }

    pub fn coverage(&self) -> f64 {
        if self.hit.is_empty() {
            0.0
        } else {
            self.covered as f64 / self.hit.len() as f64
        }
    }

    pub fn is_covered(&self, unit: usize) -> bool {
        self.hit[unit]
    }

    /// Units the given per-layer activations would hit.
    pub fn units_hit(&self, activations: &[Vec<f64>]) -> Result<Vec<usize>, FuzzError> {
        let found: Vec<usize> = activations.iter().map(Vec::len).collect();
        if found != self.profile.layer_sizes {
            return Err(FuzzError::ShapeMismatch { expected: self.profile.layer_sizes.clone(), found });
        }
        let p = &self.profile;
        let mut units = Vec::new();
        let mut neuron = 0;
        for layer in activations {
            match self.config.criterion {
                Criterion::Nc => {
                    let lo = layer.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = layer.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for (j, &a) in layer.iter().enumerate() {
                        let scaled = if hi > lo { (a - lo) / (hi - lo) } else { 0.0 };
                        if scaled > self.config.nc_threshold {
                            units.push(neuron + j);
                        }
                    }
                }
                Criterion::Kmnc => {
                    let k = self.config.kmnc_sections;
                    for (j, &a) in layer.iter().enumerate() {
                        let i = neuron + j;
                        units.push(i * k + kmnc_section(a, p.min[i], p.max[i], k));
                    }
                }
                Criterion::Nbc => {
                    let m = self.config.nbc_margin_multiplier;
                    for (j, &a) in layer.iter().enumerate() {
                        let i = neuron + j;
                        if a > p.max[i] + m * p.std[i] {
                            units.push(2 * i);
                        } else if a < p.min[i] - m * p.std[i] {
                            units.push(2 * i + 1);
                        }
                    }
                }
            }
            neuron += layer.len();
        }
        Ok(units)
    }

    /// Marks the hit units and reports whether any of them was new.
    pub fn absorb(&mut self, activations: &[Vec<f64>]) -> Result<bool, FuzzError> {
        let mut gained = false;
        for u in self.units_hit(activations)? {
            if !self.hit[u] {
                self.hit[u] = true;
                self.covered += 1;
                gained = true;
            }
        }
        Ok(gained)
    }
}

/// Section of `[low, high]` split into `k` equal parts; values outside the
/// range land in the edge sections.
pub fn kmnc_section(a: f64, low: f64, high: f64, k: usize) -> usize {
    if !(high > low) {
        return 0;
    }
    let s = ((a - low) / (high - low) * k as f64).floor();
    if s < 0.0 {
        0
    } else {
        (s as usize).min(k - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutator {
    BrightnessShift,
    ContrastScale,
    GaussianNoise,
    BoxBlur,
    Occlusion,
    PixelShift,
}

impl Mutator {
    pub const ALL: [Mutator; 6] = [
        Mutator::BrightnessShift,
        Mutator::ContrastScale,
        Mutator::GaussianNoise,
        Mutator::BoxBlur,
        Mutator::Occlusion,
        Mutator::PixelShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mutator::BrightnessShift => "brightness_shift",
            Mutator::ContrastScale => "contrast_scale",
            Mutator::GaussianNoise => "gaussian_noise",
            Mutator::BoxBlur => "box_blur",
            Mutator::Occlusion => "occlusion",
            Mutator::PixelShift => "pixel_shift",
        }
    }

    pub fn needs_grid(self) -> bool {
        matches!(self, Mutator::BoxBlur | Mutator::Occlusion | Mutator::PixelShift)
    }

    /// Draws concrete parameters within the bounded ranges.
    pub fn sample<R: Rng>(self, grid: Option<(usize, usize)>, rng: &mut R) -> Result<Perturbation, FuzzError> {
        let grid_of = |m: Mutator| grid.ok_or(FuzzError::NeedsGrid(m.as_str()));
        Ok(match self {
            Mutator::BrightnessShift => Perturbation::BrightnessShift { delta: rng.random_range(-0.3..=0.3) },
            Mutator::ContrastScale => Perturbation::ContrastScale { gamma: rng.random_range(0.5..=1.8) },
            Mutator::GaussianNoise => Perturbation::GaussianNoise { sigma: rng.random_range(0.02..=0.15) },
            Mutator::BoxBlur => {
                grid_of(self)?;
                Perturbation::BoxBlur
            }
            Mutator::Occlusion => {
                let (r, c) = grid_of(self)?;
                // h <= r/2 and w <= c/2 bound the block to a quarter of the input
                let height = rng.random_range(1..=(r / 2).max(1));
                let width = rng.random_range(1..=(c / 2).max(1));
                Perturbation::Occlusion {
                    row: rng.random_range(0..=r - height),
                    col: rng.random_range(0..=c - width),
                    height,
                    width,
                }
            }
            Mutator::PixelShift => {
                grid_of(self)?;
                let (dr, dc) = [(-1, 0), (1, 0), (0, -1), (0, 1)][rng.random_range(0..4)];
                Perturbation::PixelShift { dr, dc }
            }
        })
    }
}

impl fmt::Display for Mutator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mutator {
    type Err = FuzzError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mutator::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| FuzzError::UnknownMutator(s.into()))
    }
}

/// A mutator with its parameters fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mutator", rename_all = "snake_case")]
pub enum Perturbation {
    BrightnessShift { delta: f64 },
    /// Scales about 0.5.
    ContrastScale { gamma: f64 },
    /// Draws one N(0, sigma) value per component from the supplied generator.
    GaussianNoise { sigma: f64 },
    BoxBlur,
    /// Zeroes a `height x width` block whose top-left corner is `(row, col)`.
    Occlusion { row: usize, col: usize, height: usize, width: usize },
    /// Translates the grid by `(dr, dc)`; vacated cells become 0.
    PixelShift { dr: i32, dc: i32 },
}

impl Perturbation {
    pub fn mutator(&self) -> Mutator {
        match self {
            Perturbation::BrightnessShift { .. } => Mutator::BrightnessShift,
            Perturbation::ContrastScale { .. } => Mutator::ContrastScale,
            Perturbation::GaussianNoise { .. } => Mutator::GaussianNoise,
            Perturbation::BoxBlur => Mutator::BoxBlur,
            Perturbation::Occlusion { .. } => Mutator::Occlusion,
            Perturbation::PixelShift { .. } => Mutator::PixelShift,
        }
    }

    /// Applies the perturbation and clips the result to [0, 1].
    pub fn apply<R: Rng>(
        &self,
        input: &[f64],
        grid: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Result<Vec<f64>, FuzzError> {
        let need_grid = || match grid {
            Some((r, c)) if r * c == input.len() => Ok((r, c)),
            _ => Err(FuzzError::NeedsGrid(self.mutator().as_str())),
        };
        let mut out: Vec<f64> = match *self {
            Perturbation::BrightnessShift { delta } => input.iter().map(|v| v + delta).collect(),
            Perturbation::ContrastScale { gamma } => input.iter().map(|v| (v - 0.5) * gamma + 0.5).collect(),
            Perturbation::GaussianNoise { sigma } => {
                let normal = Normal::new(0.0, sigma).map_err(|e| FuzzError::InvalidConfig(e.to_string()))?;
                input.iter().map(|v| v + normal.sample(rng)).collect()
            }
            Perturbation::BoxBlur => {
                let (r, c) = need_grid()?;
                let mut out = vec![0.0; input.len()];
                for i in 0..r {
                    for j in 0..c {
                        let mut sum = 0.0;
                        let mut n = 0.0;
                        for ii in i.saturating_sub(1)..=(i + 1).min(r - 1) {
                            for jj in j.saturating_sub(1)..=(j + 1).min(c - 1) {
                                sum += input[ii * c + jj];
                                n += 1.0;
                            }
                        }
                        out[i * c + j] = sum / n;
                    }
                }
                out
            }
            Perturbation::Occlusion { row, col, height, width } => {
                let (r, c) = need_grid()?;
                let mut out = input.to_vec();
                for i in row.min(r)..(row + height).min(r) {
                    for j in col.min(c)..(col + width).min(c) {
                        out[i * c + j] = 0.0;
                    }
                }
                out
            }
            Perturbation::PixelShift { dr, dc } => {
                let (r, c) = need_grid()?;
                let mut out = vec![0.0; input.len()];
                for i in 0..r as i64 {
                    for j in 0..c as i64 {
                        let (si, sj) = (i - dr as i64, j - dc as i64);
                        if (0..r as i64).contains(&si) && (0..c as i64).contains(&sj) {
                            out[(i * c as i64 + j) as usize] = input[(si * c as i64 + sj) as usize];
                        }
                    }
                }
                out
            }
        };
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

/// Samples parameters for `mutator` and applies them.
pub fn mutate_input<R: Rng>(
    input: &[f64],
    grid: Option<(usize, usize)>,
    mutator: Mutator,
    rng: &mut R,
) -> Result<Vec<f64>, FuzzError> {
    mutator.sample(grid, rng)?.apply(input, grid, rng)
}

fn default_budget() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub max_iterations: usize,
    pub mutators: Vec<Mutator>,
    pub rng_seed: u64,
    /// Mutations tried per dequeued entry.
    #[serde(default = "default_budget")]
    pub per_seed_mutation_budget: usize,
}

impl FuzzConfig {
    pub fn new(max_iterations: usize, rng_seed: u64) -> Self {
        Self { max_iterations, mutators: Mutator::ALL.to_vec(), rng_seed, per_seed_mutation_budget: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerCase {
    #[serde(skip)]
    pub input: Vec<f64>,
    /// Row of the originating seed in the seed dataset.
    pub seed_id: usize,
    pub chain: Vec<Mutator>,
    pub ground_truth: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornerCaseCorpus {
    pub items: Vec<CornerCase>,
    pub input_dim: usize,
    pub class_count: usize,
    pub grid: Option<(usize, usize)>,
    /// Logit traces of the items, `None` for an empty corpus.
    pub traces: Option<TraceSet>,
}

impl CornerCaseCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The corpus as a labeled dataset with ground-truth labels.
    pub fn dataset(&self) -> Option<LabeledDataset> {
        if self.items.is_empty() {
            return None;
        }
        let inputs = self.items.iter().flat_map(|c| c.input.iter().copied()).collect();
        let labels = self.items.iter().map(|c| c.ground_truth).collect();
        let ds = LabeledDataset::new(inputs, self.input_dim, labels, self.class_count).ok()?;
        match self.grid {
            Some((r, c)) => ds.with_grid(r, c).ok(),
            None => Some(ds),
        }
    }

    /// Accuracy of the model under test on the corpus, 0 by construction.
    pub fn accuracy(&self) -> Option<f64> {
        self.traces.as_ref().map(TraceSet::accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzOutcome {
    pub criterion: Criterion,
    pub corpus: CornerCaseCorpus,
    /// Coverage after seeding, then after every iteration.
    pub history: Vec<f64>,
    pub seed_count: usize,
    pub queue_len: usize,
    pub iterations: usize,
}

impl FuzzOutcome {
    pub fn final_coverage(&self) -> f64 {
        *self.history.last().expect("history starts with the seeded coverage")
    }
}

struct QueueEntry {
    input: Vec<f64>,
    seed_id: usize,
    chain: Vec<Mutator>,
    ground_truth: usize,
}

/// Runs the fuzzing loop. The queue is visited cyclically in insertion order
/// (seeds first, absorbed inputs appended), so the run is a pure function of
/// the inputs and `fuzz_cfg.rng_seed`.
pub fn fuzz(
    model: &TrainedModel,
    seeds: &LabeledDataset,
    profile: &NeuronProfile,
    cov_cfg: &CoverageConfig,
    fuzz_cfg: &FuzzConfig,
) -> Result<FuzzOutcome, FuzzError> {
    if fuzz_cfg.mutators.is_empty() {
        return Err(FuzzError::InvalidConfig("no mutators configured".into()));
    }
    if fuzz_cfg.per_seed_mutation_budget == 0 {
        return Err(FuzzError::InvalidConfig("per_seed_mutation_budget must be positive".into()));
    }
    let grid = seeds.grid();
    if let Some(m) = fuzz_cfg.mutators.iter().find(|m| m.needs_grid() && grid.is_none()) {
        return Err(FuzzError::NeedsGrid(m.as_str()));
    }
    let mut state = CoverageState::new(*cov_cfg, profile.clone())?;
    let mut queue = Vec::new();
    for (i, row) in seeds.rows().enumerate() {
        let acts = model.layer_activations(row)?;
        if argmax(acts.last().expect("network has an output layer")) == seeds.label(i) {
            state.absorb(&acts)?;
            queue.push(QueueEntry { input: row.to_vec(), seed_id: i, chain: Vec::new(), ground_truth: seeds.label(i) });
        }
    }
    if queue.is_empty() {
        return Err(FuzzError::NoCorrectSeeds(seeds.len()));
    }
    let seed_count = queue.len();
    let mut rng = ChaCha8Rng::seed_from_u64(fuzz_cfg.rng_seed);
    let mut history = vec![state.coverage()];
    let mut items = Vec::new();
    let mut cursor = 0;
    let mut iteration = 0;
    while iteration < fuzz_cfg.max_iterations {
        for _ in 0..fuzz_cfg.per_seed_mutation_budget {
            if iteration == fuzz_cfg.max_iterations {
                break;
            }
            iteration += 1;
            let entry = &queue[cursor];
            let mutator = fuzz_cfg.mutators[rng.random_range(0..fuzz_cfg.mutators.len())];
            let input = mutate_input(&entry.input, grid, mutator, &mut rng)?;
            let acts = model.layer_activations(&input)?;
            if state.absorb(&acts)? {
                let predicted = argmax(acts.last().expect("output layer"));
                let mut chain = entry.chain.clone();
                chain.push(mutator);
                let (seed_id, ground_truth) = (entry.seed_id, entry.ground_truth);
                if predicted != ground_truth {
                    items.push(CornerCase { input, seed_id, chain, ground_truth, predicted });
                } else {
                    queue.push(QueueEntry { input, seed_id, chain, ground_truth });
                }
            }
            history.push(state.coverage());
        }
        cursor = (cursor + 1) % queue.len();
    }
    let mut corpus = CornerCaseCorpus {
        items,
        input_dim: seeds.dim(),
        class_count: seeds.class_count(),
        grid,
        traces: None,
    };
    if let Some(ds) = corpus.dataset() {
        corpus.traces = Some(refmodel::extract_traces(model, &ds, SplitTag::CornerCase)?);
    }
    Ok(FuzzOutcome {
        criterion: cov_cfg.criterion,
        corpus,
        history,
        seed_count,
        queue_len: queue.len(),
        iterations: iteration,
    })
}

pub const CORPUS_MAGIC: &[u8; 4] = b"LCRP";

/// `LCRP`, u32 n, u32 d, then n*d little-endian f32 values.
pub fn write_corpus_matrix<W: Write>(rows: &[Vec<f64>], dim: usize, mut sink: W) -> Result<(), FuzzError> {
    let mut buf = Vec::with_capacity(12 + rows.len() * dim * 4);
    buf.extend_from_slice(CORPUS_MAGIC);
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        if row.len() != dim {
            return Err(FuzzError::Corpus(format!("row of width {} in a width-{dim} matrix", row.len())));
        }
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_corpus_matrix<R: Read>(mut source: R) -> Result<(Vec<Vec<f64>>, usize), FuzzError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != CORPUS_MAGIC {
        return Err(FuzzError::Corpus("missing LCRP magic".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 12 + n * d * 4 {
        return Err(FuzzError::Corpus(format!("expected {} data bytes, found {}", n * d * 4, bytes.len() - 12)));
    }
    let rows = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect::<Vec<_>>()
        .chunks(d.max(1))
        .map(<[f64]>::to_vec)
        .collect();
    Ok((rows, d))
}

#[derive(Serialize)]
struct Manifest<'a> {
    criterion: Criterion,
    queue_policy: &'static str,
    count: usize,
    input_dim: usize,
    class_count: usize,
    matrix_file: String,
    items: &'a [CornerCase],
}

/// Writes `<stem>.json`, `<stem>.lcrp` and, for a non-empty corpus, the
/// corner-case traces as `<stem>.lstr`.
pub fn save_corpus(outcome: &FuzzOutcome, dir: &Path, stem: &str) -> Result<(), FuzzError> {
    let corpus = &outcome.corpus;
    let matrix_file = format!("{stem}.lcrp");
    let rows: Vec<Vec<f64>> = corpus.items.iter().map(|c| c.input.clone()).collect();
    write_corpus_matrix(&rows, corpus.input_dim, std::fs::File::create(dir.join(&matrix_file))?)?;
    let manifest = Manifest {
        criterion: outcome.criterion,
        queue_policy: "cyclic_fifo",
        count: corpus.len(),
        input_dim: corpus.input_dim,
        class_count: corpus.class_count,
        matrix_file,
        items: &corpus.items,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    if let Some(traces) = &corpus.traces {
        std::fs::write(dir.join(format!("{stem}.lstr")), crate::traces::encode_binary(traces))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::{make_dataset, Activation, DatasetKind, DatasetSpec, ModelConfig, TrainConfig};

    fn profile(sizes: Vec<usize>, min: Vec<f64>, max: Vec<f64>) -> NeuronProfile {
        let n = min.len();
        NeuronProfile { layer_sizes: sizes, min, max, mean: vec![0.5; n], std: vec![0.1; n] }
    }

    #[test]
    fn nc_example() {
        let p = profile(vec![2], vec![0.0; 2], vec![1.0; 2]);
        let mut s = CoverageState::new(CoverageConfig::desk(Criterion::Nc), p).unwrap();
        assert!(s.absorb(&[vec![0.8, 0.1]]).unwrap());
        assert_eq!(s.covered_units(), 1);
        assert!(s.is_covered(0));
        assert!(!s.absorb(&[vec![0.8, 0.1]]).unwrap());
    }

    #[test]
    fn kmnc_hand_bucketing() {
        let p = profile(vec![1], vec![0.0], vec![1.0]);
        let cfg = CoverageConfig { kmnc_sections: 4, ..CoverageConfig::desk(Criterion::Kmnc) };
        let mut s = CoverageState::new(cfg, p).unwrap();
        s.absorb(&[vec![0.1]]).unwrap();
        s.absorb(&[vec![0.6]]).unwrap();
        assert!(s.is_covered(0) && s.is_covered(2));
        assert_eq!(s.coverage(), 0.5);
        assert_eq!(kmnc_section(5.0, 0.0, 1.0, 4), 3);
        assert_eq!(kmnc_section(-5.0, 0.0, 1.0, 4), 0);
        assert_eq!(kmnc_section(0.3, 1.0, 1.0, 4), 0);
    }

    #[test]
    fn nbc_boundaries() {
        let p = profile(vec![2], vec![0.0, 0.0], vec![1.0, 1.0]);
        let cfg = CoverageConfig { nbc_margin_multiplier: 2.0, ..CoverageConfig::desk(Criterion::Nbc) };
        let mut s = CoverageState::new(cfg, p).unwrap();
        // margin 2 * std 0.1 = 0.2
        assert!(!s.absorb(&[vec![1.15, -0.15]]).unwrap());
        assert!(s.absorb(&[vec![1.25, -0.25]]).unwrap());
        assert_eq!(s.covered_units(), 2);
        assert!(s.is_covered(0) && s.is_covered(3));
        assert!(matches!(s.absorb(&[vec![1.0]]), Err(FuzzError::ShapeMismatch { .. })));
    }

    #[test]
    fn config_bounds() {
        assert!(CoverageConfig { nc_threshold: 1.0, ..CoverageConfig::large_network(Criterion::Nc) }.validate().is_err());
        assert!(CoverageConfig { kmnc_sections: 1, ..CoverageConfig::large_network(Criterion::Kmnc) }.validate().is_err());
        assert!(CoverageConfig::large_network(Criterion::Nbc).validate().is_ok());
    }

    #[test]
    fn mutator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let same = Perturbation::BrightnessShift { delta: 0.0 }.apply(&x, None, &mut rng).unwrap();
        assert_eq!(same, x);
        let occ = Perturbation::Occlusion { row: 0, col: 0, height: 4, width: 4 };
        assert_eq!(occ.apply(&x, Some((4, 4)), &mut rng).unwrap(), vec![0.0; 16]);
        assert!(matches!(occ.apply(&x, None, &mut rng), Err(FuzzError::NeedsGrid("occlusion"))));
        assert!(matches!(mutate_input(&x, None, Mutator::BoxBlur, &mut rng), Err(FuzzError::NeedsGrid(_))));
        assert!("swirl".parse::<Mutator>().is_err());
        let shifted = Perturbation::PixelShift { dr: 0, dc: 1 }.apply(&x, Some((4, 4)), &mut rng).unwrap();
        assert_eq!(&shifted[..4], &[0.0, x[0], x[1], x[2]]);
        let blurred = Perturbation::BoxBlur.apply(&[0.0, 0.0, 0.0, 0.0, 0.9, 0.0, 0.0, 0.0, 0.0], Some((3, 3)), &mut rng);
        assert_eq!(blurred.unwrap()[0], 0.9 / 4.0);
    }

    #[test]
    fn gaussian_noise_matches_reimplementation() {
        let x = vec![0.5; 32];
        let out = Perturbation::GaussianNoise { sigma: 0.1 }
            .apply(&x, None, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let expected: Vec<f64> = x.iter().map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn sampled_occlusion_stays_within_a_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let Perturbation::Occlusion { row, col, height, width } = Mutator::Occlusion.sample(Some((8, 8)), &mut rng).unwrap()
            else {
                unreachable!()
            };
            assert!(height * width <= 16 && row + height <= 8 && col + width <= 8);
        }
    }

    #[test]
    fn profile_hand_computed() {
        // 1-1-2 network with identity-like weights; activation relu
        let cfg = ModelConfig::mlp(vec![1, 1, 2], Activation::Relu, 0);
        let mut model = TrainedModel::initialize(&cfg, &TrainConfig::adam(1, 1, 0.1, 0)).unwrap();
        model.network.layers[0].weights = vec![2.0];
        model.network.layers[0].bias = vec![0.0];
        model.network.layers[1].weights = vec![1.0, -1.0];
        model.network.layers[1].bias = vec![0.0, 1.0];
        let data = LabeledDataset::new(vec![0.0, 0.5, 1.0], 1, vec![0, 0, 1], 2).unwrap();
        let p = profile_neurons(&model, &data).unwrap();
        assert_eq!(p.layer_sizes, vec![1, 2]);
        // hidden: 0, 1, 2 ; logits: (0,1), (1,0), (2,-1)
        assert_eq!(p.min, vec![0.0, 0.0, -1.0]);
        assert_eq!(p.max, vec![2.0, 2.0, 1.0]);
        assert_eq!(p.mean, vec![1.0, 1.0, 0.0]);
        assert!((p.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    fn small_setup() -> (TrainedModel, LabeledDataset) {
        let split = make_dataset(
            &DatasetSpec::new(DatasetKind::Blobs { classes: 3, samples: 240, dim: 16, spread: 0.1 }),
            5,
        )
        .unwrap();
        let model = refmodel::train(
            &split.train,
            &ModelConfig::mlp(vec![16, 12, 3], Activation::Relu, 1),
            &TrainConfig::adam(20, 16, 0.01, 2),
        )
        .unwrap();
        (model, split.train)
    }

    #[test]
    fn fuzz_loop_contracts() {
        let (model, train) = small_setup();
        let p = profile_neurons(&model, &train).unwrap();
        for criterion in Criterion::ALL {
            let cov = CoverageConfig::desk(criterion);
            let zero = fuzz(&model, &train, &p, &cov, &FuzzConfig::new(0, 1)).unwrap();
            assert!(zero.corpus.is_empty());
            assert_eq!(zero.history.len(), 1);
            let a = fuzz(&model, &train, &p, &cov, &FuzzConfig::new(300, 1)).unwrap();
            let b = fuzz(&model, &train, &p, &cov, &FuzzConfig::new(300, 1)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.history.len(), 301);
            assert!(a.history.windows(2).all(|w| w[0] <= w[1]));
            for item in &a.corpus.items {
                assert_ne!(model.predict_one(&item.input).unwrap(), item.ground_truth);
                assert!(item.input.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            if let Some(t) = &a.corpus.traces {
                assert_eq!(t.accuracy(), 0.0);
                assert_eq!(t.split_tag(), SplitTag::CornerCase);
            }
        }
    }

    #[test]
    fn fuzz_requires_correct_seeds() {
        let (model, train) = small_setup();
        let p = profile_neurons(&model, &train).unwrap();
        let preds = refmodel::predict(&model, &train).unwrap();
        let wrong: Vec<usize> = preds.iter().map(|p| (p + 1) % 3).collect();
        let bad = train.with_parts(train.inputs().to_vec(), wrong).unwrap();
        let r = fuzz(&model, &bad, &p, &CoverageConfig::desk(Criterion::Nc), &FuzzConfig::new(5, 0));
        assert!(matches!(r, Err(FuzzError::NoCorrectSeeds(_))));
    }

    #[test]
    fn corpus_matrix_roundtrip() {
        let rows = vec![vec![0.25, 0.5], vec![1.0, 0.0]];
        let mut buf = Vec::new();
        write_corpus_matrix(&rows, 2, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"LCRP");
        assert_eq!(buf.len(), 12 + 16);
        let (back, d) = read_corpus_matrix(buf.as_slice()).unwrap();
        assert_eq!((back, d), (rows, 2));
        assert!(read_corpus_matrix(&buf[..buf.len() - 1]).is_err());
    }
}
