//! Numeric kernel shared by every metric: dense vectors, Euclidean distance,
//! exhaustive nearest-neighbour search and the handful of special functions
//! needed for Student-t p-values and Gamma fitting.
//!
//! Everything here is a pure function over borrowed data, so the same calls
//! can be issued from any number of worker threads.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch: left has length {left}, right has length {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector must have at least one component")]
    EmptyVector,
    #[error("non-finite value {value} at component {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("{function}: argument out of domain ({detail})")]
    Domain { function: &'static str, detail: String },
    #[error("{function}: no convergence after {iterations} iterations")]
    NoConvergence { function: &'static str, iterations: usize },
}

/// A finite, non-empty vector of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumError> {
        if values.is_empty() {
            return Err(NumError::EmptyVector);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NumError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Result<Self, NumError> {
        Self::new(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = NumError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Squared Euclidean distance without a length check. Callers guarantee
/// `a.len() == b.len()`.
#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64, NumError> {
    if a.len() != b.len() {
        return Err(NumError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    Ok(squared_distance(a, b).sqrt())
}

/// Result of an exhaustive nearest-neighbour scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub index: usize,
    pub distance: f64,
}

/// Exhaustive scan for the candidate closest to `query`.
///
/// Candidates are `(index, vector)` pairs in any order. Among equidistant
/// candidates the smallest index wins, so the answer does not depend on
/// iteration order or on how work was split across threads.
pub fn argmin_dist<'a, I>(query: &[f64], candidates: I) -> Result<Nearest, NumError>
where
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    let mut best: Option<(usize, f64)> = None;
    for (index, candidate) in candidates {
        if candidate.len() != query.len() {
            return Err(NumError::DimensionMismatch { left: query.len(), right: candidate.len() });
        }
        let d = squared_distance(query, candidate);
        best = match best {
            Some((bi, bd)) if bd < d || (bd == d && bi < index) => Some((bi, bd)),
            _ => Some((index, d)),
        };
    }
    best.map(|(index, sq)| Nearest { index, distance: sq.sqrt() })
        .ok_or(NumError::EmptyCandidates)
}

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        if self.count == 0 {
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// Population variance (divides by n).
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// Convergence controls for the series and continued-fraction evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecialFnConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SpecialFnConfig {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-10 }
    }
}

impl SpecialFnConfig {
    pub fn validate(&self) -> Result<(), NumError> {
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-3) {
            return Err(NumError::Domain {
                function: "SpecialFnConfig",
                detail: format!("tolerance {} not in (0, 1e-3]", self.tolerance),
            });
        }
        if self.max_iterations < 50 {
            return Err(NumError::Domain {
                function: "SpecialFnConfig",
                detail: format!("max_iterations {} < 50", self.max_iterations),
            });
        }
        Ok(())
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the Gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn reg_lower_incomplete_gamma(shape: f64, x: f64) -> Result<f64, NumError> {
    reg_lower_incomplete_gamma_with(shape, x, SpecialFnConfig::default())
}

/// Regularized lower incomplete gamma P(shape, x).
///
/// Power series below `x < shape + 1`, modified Lentz continued fraction for
/// the complement above it.
pub fn reg_lower_incomplete_gamma_with(
    shape: f64,
    x: f64,
    cfg: SpecialFnConfig,
) -> Result<f64, NumError> {
    const NAME: &str = "reg_lower_incomplete_gamma";
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(NumError::Domain { function: NAME, detail: format!("shape {shape} must be > 0") });
    }
    if !(x >= 0.0) {
        return Err(NumError::Domain { function: NAME, detail: format!("x {x} must be >= 0") });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let log_prefactor = -x + shape * x.ln() - ln_gamma(shape);
    if x < shape + 1.0 {
        let mut term = 1.0 / shape;
        let mut sum = term;
        for n in 1..=cfg.max_iterations {
            term *= x / (shape + n as f64);
            sum += term;
            if term.abs() < sum.abs() * cfg.tolerance {
                return Ok((sum * log_prefactor.exp()).clamp(0.0, 1.0));
            }
        }
        Err(NumError::NoConvergence { function: NAME, iterations: cfg.max_iterations })
    } else {
        let upper = upper_gamma_continued_fraction(shape, x, cfg)?;
        Ok((1.0 - upper * log_prefactor.exp()).clamp(0.0, 1.0))
    }
}

fn upper_gamma_continued_fraction(a: f64, x: f64, cfg: SpecialFnConfig) -> Result<f64, NumError> {
    let tiny = f64::MIN_POSITIVE / f64::EPSILON;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=cfg.max_iterations {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < cfg.tolerance {
            return Ok(h);
        }
    }
    Err(NumError::NoConvergence {
        function: "reg_lower_incomplete_gamma",
        iterations: cfg.max_iterations,
    })
}

pub fn reg_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64, NumError> {
    reg_incomplete_beta_with(a, b, x, SpecialFnConfig::default())
}

/// Regularized incomplete beta I_x(a, b) via the continued fraction, using
/// the symmetry I_x(a, b) = 1 - I_{1-x}(b, a) on the slowly converging side.
pub fn reg_incomplete_beta_with(
    a: f64,
    b: f64,
    x: f64,
    cfg: SpecialFnConfig,
) -> Result<f64, NumError> {
    const NAME: &str = "reg_incomplete_beta";
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(NumError::Domain { function: NAME, detail: format!("a={a}, b={b} must be > 0") });
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(NumError::Domain { function: NAME, detail: format!("x {x} not in [0, 1]") });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let log_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        let cf = beta_continued_fraction(a, b, x, cfg)?;
        Ok((log_front.exp() * cf / a).clamp(0.0, 1.0))
    } else {
        let cf = beta_continued_fraction(b, a, 1.0 - x, cfg)?;
        Ok((1.0 - log_front.exp() * cf / b).clamp(0.0, 1.0))
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64, cfg: SpecialFnConfig) -> Result<f64, NumError> {
    let tiny = f64::MIN_POSITIVE / f64::EPSILON;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=cfg.max_iterations {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < cfg.tolerance {
            return Ok(h);
        }
    }
    Err(NumError::NoConvergence { function: "reg_incomplete_beta", iterations: cfg.max_iterations })
}

/// Digamma ψ(x) for `x > 0`: upward recurrence to x ≥ 6, then the
/// asymptotic expansion.
pub fn digamma(x: f64) -> Result<f64, NumError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(NumError::Domain { function: "digamma", detail: format!("x {x} must be > 0") });
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

/// Trigamma ψ'(x) for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64, NumError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(NumError::Domain { function: "trigamma", detail: format!("x {x} must be > 0") });
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)));
    Ok(acc + series)
}
