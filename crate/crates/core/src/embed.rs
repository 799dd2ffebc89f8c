//! Embedding providers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::behavior::{BehaviorRecord, EmbeddingVector, VectorError};
use crate::par::{self, Exec};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider failed for {key}: {message}")]
    Provider { key: String, message: String },
    #[error("no precomputed embedding for item {0}")]
    MissingItem(String),
    #[error("item {key} has dimension {got}, expected {expected}")]
    DimensionMismatch { key: String, expected: usize, got: usize },
    #[error("invalid vector for {key}: {source}")]
    InvalidVector {
        key: String,
        #[source]
        source: VectorError,
    },
    #[error("record at position {0} has an empty item_id")]
    EmptyItemId(usize),
    #[error("failed to load embeddings from {path}: {message}")]
    Load { path: String, message: String },
}

impl EmbedError {
    /// Provider failures may succeed on retry; the rest are fatal.
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Provider { .. })
    }
}

/// Something that maps items and free text to vectors.
///
/// Implementations must be usable from several threads at once.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity recorded in persona stores, e.g. `mock:dim=8:seed=0`.
    fn identity(&self) -> String;

    fn embed_item(&self, record: &BehaviorRecord) -> Result<EmbeddingVector, EmbedError>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

/// Hash-seeded unit vectors: a pure function of (seed, key).
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "mock embedder needs a positive dimension");
        MockEmbedder { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn vector_for(&self, key: &str) -> EmbeddingVector {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(key.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut values: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(values).expect("mock vectors are finite")
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn identity(&self) -> String {
        format!("mock:dim={}:seed={}", self.dim, self.seed)
    }

    fn embed_item(&self, record: &BehaviorRecord) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.vector_for(&record.item_id))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.vector_for(text))
    }
}

#[derive(Deserialize, Serialize)]
struct PrecomputedLine {
    item_id: String,
    vector: Vec<f64>,
}

/// Vectors loaded from a JSON-lines file of `{"item_id", "vector"}` objects.
///
/// Free text is looked up as if it were an item id, so queries must name an
/// item present in the file.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    source: String,
    dim: usize,
    vectors: HashMap<String, EmbeddingVector>,
}

impl PrecomputedEmbedder {
    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let load_err = |message: String| EmbedError::Load { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PrecomputedLine =
                serde_json::from_str(line).map_err(|e| load_err(format!("line {}: {e}", idx + 1)))?;
            let vector = EmbeddingVector::new(parsed.vector).map_err(|e| load_err(format!("line {}: {e}", idx + 1)))?;
            match dim {
                None => dim = Some(vector.dim()),
                Some(d) if d != vector.dim() => {
                    return Err(EmbedError::DimensionMismatch { key: parsed.item_id, expected: d, got: vector.dim() })
                }
                _ => {}
            }
            vectors.insert(parsed.item_id, vector);
        }
        let dim = dim.ok_or_else(|| load_err("no vectors in file".into()))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(PrecomputedEmbedder { source: name, dim, vectors })
    }

    pub fn from_map(source: &str, vectors: HashMap<String, EmbeddingVector>) -> Result<Self, EmbedError> {
        let mut dims = vectors.values().map(EmbeddingVector::dim);
        let dim = dims.next().ok_or_else(|| EmbedError::Load { path: source.into(), message: "empty map".into() })?;
        if let Some((key, v)) = vectors.iter().find(|(_, v)| v.dim() != dim) {
            return Err(EmbedError::DimensionMismatch { key: key.clone(), expected: dim, got: v.dim() });
        }
        Ok(PrecomputedEmbedder { source: source.into(), dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, key: &str) -> Result<EmbeddingVector, EmbedError> {
        self.vectors.get(key).cloned().ok_or_else(|| EmbedError::MissingItem(key.to_string()))
    }
}

impl EmbeddingProvider for PrecomputedEmbedder {
    fn identity(&self) -> String {
        format!("precomputed:{}:dim={}", self.source, self.dim)
    }

    fn embed_item(&self, record: &BehaviorRecord) -> Result<EmbeddingVector, EmbedError> {
        self.lookup(&record.item_id)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.lookup(text)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP endpoint taking `{"texts": [...]}` and answering `{"vectors": [[...]]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    url: String,
    token: Option<String>,
    timeout: Duration,
}

pub const EMBED_URL_ENV: &str = "SBS_EMBED_URL";
pub const EMBED_TOKEN_ENV: &str = "SBS_EMBED_TOKEN";

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        RemoteEmbedder { url: url.into(), token, timeout: Duration::from_secs(60) }
    }

    /// Reads the URL (required) and bearer token (optional) from the environment.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(EMBED_URL_ENV).ok()?;
        Some(Self::new(url, std::env::var(EMBED_TOKEN_ENV).ok()))
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let key = texts.first().copied().unwrap_or_default().to_string();
        let fail = |message: String| EmbedError::Provider { key: key.clone(), message };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(EmbedRequest { texts }).map_err(|e| fail(e.to_string()))?;
        let body: EmbedResponse = resp.body_mut().read_json().map_err(|e| fail(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(fail(format!("expected {} vectors, got {}", texts.len(), body.vectors.len())));
        }
        texts
            .iter()
            .zip(body.vectors)
            .map(|(t, v)| EmbeddingVector::new(v).map_err(|source| EmbedError::InvalidVector { key: t.to_string(), source }))
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn identity(&self) -> String {
        format!("remote:{}", self.url)
    }

    fn embed_item(&self, record: &BehaviorRecord) -> Result<EmbeddingVector, EmbedError> {
        self.embed_text(record.display_text()).map_err(|e| match e {
            EmbedError::Provider { message, .. } => EmbedError::Provider { key: record.item_id.clone(), message },
            other => other,
        })
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// Embeds every record, in order, checking that all vectors share one
/// dimension. `normalize` rescales each vector to unit length.
pub fn embed_items(
    records: &[BehaviorRecord],
    provider: &dyn EmbeddingProvider,
    normalize: bool,
    exec: Exec,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if let Some(r) = records.iter().find(|r| r.item_id.is_empty()) {
        return Err(EmbedError::EmptyItemId(r.position));
    }
    let vectors = par::map(exec, records, |r| provider.embed_item(r))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(first) = vectors.first() {
        let dim = first.dim();
        if let Some((r, v)) = records.iter().zip(&vectors).find(|(_, v)| v.dim() != dim) {
            return Err(EmbedError::DimensionMismatch { key: r.item_id.clone(), expected: dim, got: v.dim() });
        }
    }
    Ok(if normalize { vectors.iter().map(EmbeddingVector::normalized).collect() } else { vectors })
}
