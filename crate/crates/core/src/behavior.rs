//! Behavior records, sequences, embedding vectors and log ingestion.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Interaction label: 1 = like, 0 = dislike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Dislike,
    Like,
}

impl Label {
    pub fn is_like(self) -> bool {
        self == Label::Like
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Dislike),
            1 => Ok(Label::Like),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Dislike => 0,
            Label::Like => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub item_id: String,
    pub title_text: String,
    pub label: Label,
    pub timestamp: Option<i64>,
    /// Zero-based index in the owning sequence.
    pub position: usize,
}

impl BehaviorRecord {
    /// Text shown to profilers and embedders: the title, or the id when the
    /// log carried no text.
    pub fn display_text(&self) -> &str {
        if self.title_text.trim().is_empty() {
            &self.item_id
        } else {
            &self.title_text
        }
    }
}

/// A user's history, ordered by position (which is chronological order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_id: String,
    pub records: Vec<BehaviorRecord>,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy of the first `len` records, positions unchanged.
    pub fn prefix(&self, len: usize) -> BehaviorSequence {
        BehaviorSequence {
            user_id: self.user_id.clone(),
            records: self.records[..len.min(self.records.len())].to_vec(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum VectorError {
    #[error("embedding vector is empty")]
    Empty,
    #[error("embedding entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// Dense embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VectorError::NonFinite { index, value });
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Unit-length copy; the zero vector is returned unchanged.
    pub fn normalized(&self) -> EmbeddingVector {
        let norm = self.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return self.clone();
        }
        EmbeddingVector(self.0.iter().map(|v| v / norm).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = VectorError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Vec<f64> {
        v.0
    }
}

/// Euclidean distance.
pub fn distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VectorError> {
    if a.dim() != b.dim() {
        return Err(VectorError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(euclidean(a.values(), b.values()))
}

/// Euclidean distance over raw slices of equal length.
pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogFormat {
    #[default]
    JsonLines,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate position {position} for user {user_id}")]
    DuplicatePosition { line: usize, user_id: String, position: usize },
    #[error("behavior log contains no records")]
    Empty,
}

#[derive(Deserialize)]
struct RawLine {
    user_id: String,
    item_id: String,
    label: Label,
    #[serde(default)]
    timestamp: Option<i64>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    position: Option<usize>,
}

#[derive(Serialize)]
struct OutLine<'a> {
    user_id: &'a str,
    item_id: &'a str,
    label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp: Option<i64>,
    #[serde(skip_serializing_if = "str::is_empty")]
    text: &'a str,
    position: usize,
}

struct Pending {
    line: usize,
    raw: RawLine,
}

/// Reads a behavior log and groups it into one sequence per user.
///
/// Users come out in order of first appearance. Within a user, explicit
/// `position` fields (when every line of that user has one) define the order;
/// otherwise records are sorted by timestamp when every line has one, and
/// file order is kept when any timestamp is missing. Positions are then
/// reassigned as `0..n`.
pub fn ingest_behaviors(path: &Path, format: LogFormat) -> Result<Vec<BehaviorSequence>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_behaviors(&text, format)
}

pub fn parse_behaviors(text: &str, format: LogFormat) -> Result<Vec<BehaviorSequence>, IngestError> {
    let LogFormat::JsonLines = format;
    let mut order: Vec<String> = Vec::new();
    let mut by_user: HashMap<String, Vec<Pending>> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(line).map_err(|e| IngestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.user_id.is_empty() || raw.item_id.is_empty() {
            return Err(IngestError::Malformed {
                line: line_no,
                message: "user_id and item_id must be non-empty".into(),
            });
        }
        let entry = by_user.entry(raw.user_id.clone()).or_insert_with(|| {
            order.push(raw.user_id.clone());
            Vec::new()
        });
        entry.push(Pending { line: line_no, raw });
    }
    if order.is_empty() {
        return Err(IngestError::Empty);
    }

    let mut out = Vec::with_capacity(order.len());
    for user_id in order {
        let mut pending = by_user.remove(&user_id).unwrap_or_default();
        if pending.iter().all(|p| p.raw.position.is_some()) {
            let mut seen = HashSet::new();
            for p in &pending {
                let pos = p.raw.position.unwrap_or_default();
                if !seen.insert(pos) {
                    return Err(IngestError::DuplicatePosition {
                        line: p.line,
                        user_id: user_id.clone(),
                        position: pos,
                    });
                }
            }
            pending.sort_by_key(|p| p.raw.position);
        } else if pending.iter().all(|p| p.raw.timestamp.is_some()) {
            pending.sort_by_key(|p| p.raw.timestamp);
        }
        let records = pending
            .into_iter()
            .enumerate()
            .map(|(position, p)| BehaviorRecord {
                item_id: p.raw.item_id,
                title_text: p.raw.text.unwrap_or_default(),
                label: p.raw.label,
                timestamp: p.raw.timestamp,
                position,
            })
            .collect();
        out.push(BehaviorSequence { user_id, records });
    }
    Ok(out)
}

/// Serializes sequences back to the JSON-lines log format, one line per record.
pub fn write_behaviors<W: Write>(sequences: &[BehaviorSequence], mut w: W) -> std::io::Result<()> {
    for seq in sequences {
        for r in &seq.records {
            let line = OutLine {
                user_id: &seq.user_id,
                item_id: &r.item_id,
                label: r.label,
                timestamp: r.timestamp,
                text: &r.title_text,
                position: r.position,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}
