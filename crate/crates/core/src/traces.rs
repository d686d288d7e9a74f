//! Latent-space traces and their on-disk formats.
//!
//! A trace is one logit-layer vector together with the ground-truth and
//! predicted labels of the input that produced it. Traces travel between
//! tools in the little-endian `LSTR` binary format:
//!
//! ```text
//! 0..4    "LSTR"
//! 4       version (0x01)
//! 5..9    u32 record count n
//! 9..13   u32 latent dim d
//! 13..17  u32 class count
//! 17      split tag (0 train, 1 validation, 2 test, 3 corner_case)
//! 18..21  reserved, zero
//! then n records of: u32 input_id, u32 ground_truth, u32 predicted, d x f32
//! ```
//!
//! or as CSV with header `id,ground_truth,predicted,z0,...,z{d-1}`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{DenseVector, NumError};

pub const MAGIC: &[u8; 4] = b"LSTR";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 21;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("empty trace set")]
    Empty,
    #[error("bad magic at byte 0: expected \"LSTR\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} at byte 4 (expected {VERSION})")]
    UnsupportedVersion { found: u8 },
    #[error("unknown split tag {found} at byte 17")]
    BadSplitTag { found: u8 },
    #[error("reserved header bytes 18..21 must be zero, found {found:?}")]
    ReservedNotZero { found: [u8; 3] },
    #[error("truncated stream at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("{extra} trailing bytes after the last record at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("header declares {field} = 0")]
    ZeroHeaderField { field: &'static str },
    #[error("dimension mismatch at {location}: expected {expected} latent values, found {found}")]
    DimensionMismatch { location: Location, expected: usize, found: usize },
    #[error("label out of range at {location}: {field} = {label}, class_count = {class_count}")]
    LabelOutOfRange { location: Location, field: &'static str, label: usize, class_count: usize },
    #[error("non-finite latent value at {location}")]
    NonFinite { location: Location },
    #[error("csv parse error at {location}: {message}")]
    Csv { location: Location, message: String },
    #[error("invalid csv header: {0}")]
    CsvHeader(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where in a stream an error was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(usize),
    Line(u64),
    Trace(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Byte(o) => write!(f, "byte {o}"),
            Location::Line(l) => write!(f, "line {l}"),
            Location::Trace(i) => write!(f, "trace #{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    CornerCase,
}

impl SplitTag {
    pub fn to_byte(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Validation => 1,
            SplitTag::Test => 2,
            SplitTag::CornerCase => 3,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => SplitTag::Train,
            1 => SplitTag::Validation,
            2 => SplitTag::Test,
            3 => SplitTag::CornerCase,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
            SplitTag::CornerCase => "corner_case",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            "corner_case" => Ok(SplitTag::CornerCase),
            other => Err(format!("unknown split tag '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrace {
    pub input_id: u32,
    pub ground_truth: usize,
    pub predicted: usize,
    pub latent: DenseVector,
}

/// Immutable, validated collection of traces sharing one latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    split_tag: SplitTag,
    class_count: usize,
    latent_dim: usize,
    traces: Vec<LatentTrace>,
}

impl TraceSet {
    pub fn new(
        split_tag: SplitTag,
        class_count: usize,
        traces: Vec<LatentTrace>,
    ) -> Result<Self, TraceError> {
        if class_count == 0 {
            return Err(TraceError::ZeroHeaderField { field: "class_count" });
        }
        let latent_dim = traces.first().ok_or(TraceError::Empty)?.latent.len();
        for (i, t) in traces.iter().enumerate() {
            let location = Location::Trace(i);
            if t.latent.len() != latent_dim {
                return Err(TraceError::DimensionMismatch {
                    location,
                    expected: latent_dim,
                    found: t.latent.len(),
                });
            }
            check_label(location, "ground_truth", t.ground_truth, class_count)?;
            check_label(location, "predicted", t.predicted, class_count)?;
        }
        Ok(Self { split_tag, class_count, latent_dim, traces })
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn traces(&self) -> &[LatentTrace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    /// A validated set is never empty.
    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn get(&self, i: usize) -> &LatentTrace {
        &self.traces[i]
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        self.traces[i].latent.as_slice()
    }

    /// Fraction of traces whose prediction matches the ground truth.
    pub fn accuracy(&self) -> f64 {
        let correct = self.traces.iter().filter(|t| t.ground_truth == t.predicted).count();
        correct as f64 / self.traces.len() as f64
    }

    pub fn with_split(mut self, split_tag: SplitTag) -> Self {
        self.split_tag = split_tag;
        self
    }

    /// Applies `f` to every latent vector. Used to probe metric invariances.
    pub fn map_latents(
        &self,
        mut f: impl FnMut(&[f64]) -> Vec<f64>,
    ) -> Result<Self, TraceError> {
        let traces = self
            .traces
            .iter()
            .map(|t| {
                Ok(LatentTrace {
                    latent: DenseVector::new(f(t.latent.as_slice())).map_err(num_to_trace)?,
                    ..t.clone()
                })
            })
            .collect::<Result<Vec<_>, TraceError>>()?;
        Self::new(self.split_tag, self.class_count, traces)
    }
}

fn num_to_trace(e: NumError) -> TraceError {
    TraceError::Invalid(e.to_string())
}

fn check_label(
    location: Location,
    field: &'static str,
    label: usize,
    class_count: usize,
) -> Result<(), TraceError> {
    if label >= class_count {
        return Err(TraceError::LabelOutOfRange { location, field, label, class_count });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    GroundTruth,
    Predicted,
}

/// Indices of traces per class. The outer vector has `class_count` entries;
/// classes without members map to empty lists.
pub fn group_by_class(set: &TraceSet, by: GroupBy) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); set.class_count];
    for (i, t) in set.traces.iter().enumerate() {
        let label = match by {
            GroupBy::GroundTruth => t.ground_truth,
            GroupBy::Predicted => t.predicted,
        };
        groups[label].push(i);
    }
    groups
}

/// Serialization format. CSV carries neither split tag nor class count, so
/// they come along with the format when reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Binary,
    Csv { split_tag: SplitTag, class_count: usize },
}

pub fn read_traces<R: Read>(mut source: R, format: TraceFormat) -> Result<TraceSet, TraceError> {
    match format {
        TraceFormat::Binary => {
            let mut bytes = Vec::new();
            source.read_to_end(&mut bytes)?;
            decode_binary(&bytes)
        }
        TraceFormat::Csv { split_tag, class_count } => read_csv(source, split_tag, class_count),
    }
}

pub fn write_traces<W: Write>(set: &TraceSet, mut sink: W, format: TraceFormat) -> Result<(), TraceError> {
    match format {
        TraceFormat::Binary => {
            sink.write_all(&encode_binary(set))?;
            Ok(())
        }
        TraceFormat::Csv { .. } => write_csv(set, sink),
    }
}

pub fn encode_binary(set: &TraceSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * (12 + 4 * set.latent_dim));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.latent_dim as u32).to_le_bytes());
    out.extend_from_slice(&(set.class_count as u32).to_le_bytes());
    out.push(set.split_tag.to_byte());
    out.extend_from_slice(&[0, 0, 0]);
    for t in &set.traces {
        out.extend_from_slice(&t.input_id.to_le_bytes());
        out.extend_from_slice(&(t.ground_truth as u32).to_le_bytes());
        out.extend_from_slice(&(t.predicted as u32).to_le_bytes());
        for &v in t.latent.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(TraceError::Truncated { offset: self.bytes.len(), needed: n - available });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, TraceError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<TraceSet, TraceError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(TraceError::BadMagic { found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(TraceError::UnsupportedVersion { found: version });
    }
    let n = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let class_count = cur.u32()? as usize;
    let tag = cur.take(1)?[0];
    let split_tag = SplitTag::from_byte(tag).ok_or(TraceError::BadSplitTag { found: tag })?;
    let reserved = cur.take(3)?;
    if reserved != [0, 0, 0] {
        return Err(TraceError::ReservedNotZero { found: [reserved[0], reserved[1], reserved[2]] });
    }
    if n == 0 {
        return Err(TraceError::Empty);
    }
    if d == 0 {
        return Err(TraceError::ZeroHeaderField { field: "latent_dim" });
    }
    if class_count == 0 {
        return Err(TraceError::ZeroHeaderField { field: "class_count" });
    }
    let mut traces = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let offset = cur.pos;
        let location = Location::Byte(offset);
        let input_id = cur.u32()?;
        let ground_truth = cur.u32()? as usize;
        let predicted = cur.u32()? as usize;
        check_label(location, "ground_truth", ground_truth, class_count)?;
        check_label(location, "predicted", predicted, class_count)?;
        let mut latent = Vec::with_capacity(d);
        for _ in 0..d {
            latent.push(f64::from(cur.f32()?));
        }
        let latent = DenseVector::new(latent).map_err(|_| TraceError::NonFinite { location })?;
        traces.push(LatentTrace { input_id, ground_truth, predicted, latent });
    }
    if cur.pos != bytes.len() {
        return Err(TraceError::TrailingBytes { offset: cur.pos, extra: bytes.len() - cur.pos });
    }
    TraceSet::new(split_tag, class_count, traces)
}

fn read_csv<R: Read>(source: R, split_tag: SplitTag, class_count: usize) -> Result<TraceSet, TraceError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| TraceError::CsvHeader(e.to_string()))?
        .clone();
    if header.len() < 4 || &header[0] != "id" || &header[1] != "ground_truth" || &header[2] != "predicted"
    {
        return Err(TraceError::CsvHeader(
            "expected `id,ground_truth,predicted,z0,...`".to_string(),
        ));
    }
    let d = header.len() - 3;
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("z{j}") {
            return Err(TraceError::CsvHeader(format!("column {} should be z{j}, found {name}", j + 3)));
        }
    }
    let mut traces = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            TraceError::Csv { location: Location::Line(line), message: e.to_string() }
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let location = Location::Line(line);
        if record.len() != header.len() {
            return Err(TraceError::DimensionMismatch {
                location,
                expected: d,
                found: record.len().saturating_sub(3),
            });
        }
        let parse_u = |s: &str, what: &str| {
            s.trim().parse::<u32>().map_err(|e| TraceError::Csv {
                location,
                message: format!("{what}: {e}"),
            })
        };
        let input_id = parse_u(&record[0], "id")?;
        let ground_truth = parse_u(&record[1], "ground_truth")? as usize;
        let predicted = parse_u(&record[2], "predicted")? as usize;
        check_label(location, "ground_truth", ground_truth, class_count)?;
        check_label(location, "predicted", predicted, class_count)?;
        let latent = record
            .iter()
            .skip(3)
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| TraceError::Csv {
                    location,
                    message: format!("latent value '{s}': {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let latent = DenseVector::new(latent).map_err(|_| TraceError::NonFinite { location })?;
        traces.push(LatentTrace { input_id, ground_truth, predicted, latent });
    }
    if traces.is_empty() {
        return Err(TraceError::Empty);
    }
    TraceSet::new(split_tag, class_count, traces)
}

fn write_csv<W: Write>(set: &TraceSet, sink: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["id".to_string(), "ground_truth".to_string(), "predicted".to_string()];
    header.extend((0..set.latent_dim).map(|j| format!("z{j}")));
    let to_io = |e: csv::Error| TraceError::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(to_io)?;
    for t in &set.traces {
        let mut row = vec![t.input_id.to_string(), t.ground_truth.to_string(), t.predicted.to_string()];
        // Display for f64 is the shortest string that parses back exactly
        row.extend(t.latent.as_slice().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
