//! File-backed persona cache with nearest-centroid retrieval and a
//! behavior-count refresh policy.
//!
//! Layout: `<dir>/<user>.json` holding `{"meta": {...}, "personas": [...]}`.
//! Every write goes to a temp file in the same directory and is renamed into
//! place, so readers see either the old or the new persona set.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{euclidean, EmbeddingVector};
use crate::embed::{EmbedError, EmbeddingProvider};

pub const DEFAULT_REFRESH_AFTER: usize = 10;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no personas given")]
    EmptyPut,
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("dimension mismatch: store holds {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("persona_id {0} appears twice")]
    DuplicatePersonaId(u32),
    #[error("store built with provider {stored}, query uses {query}")]
    ProviderMismatch { stored: String, query: String },
    #[error("invalid user id {0:?}")]
    InvalidUserId(String),
    #[error("store I/O at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store file {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaRecord {
    pub persona_id: u32,
    pub user_id: String,
    pub cluster_id: usize,
    pub text: String,
    /// Centroid of the source cluster.
    pub key_embedding: EmbeddingVector,
    pub behaviors_seen_at_build: usize,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub provider: String,
    pub dim: usize,
    pub built_at: i64,
    pub behaviors_seen: usize,
    #[serde(default)]
    pub behaviors_since_build: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserFile {
    pub meta: StoreMeta,
    pub personas: Vec<PersonaRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshPolicy {
    pub refresh_after_d: usize,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        RefreshPolicy { refresh_after_d: DEFAULT_REFRESH_AFTER }
    }
}

impl RefreshPolicy {
    pub fn is_stale(&self, behaviors_since_build: usize) -> bool {
        behaviors_since_build >= self.refresh_after_d
    }
}

/// Acknowledgment of a committed write.
#[derive(Debug, Clone, PartialEq)]
pub struct Commit {
    pub user_id: String,
    pub personas: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub persona: PersonaRecord,
    pub distance: f64,
}

#[derive(Debug)]
pub struct PersonaStore {
    dir: PathBuf,
    policy: RefreshPolicy,
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

/// Index of the key nearest to `query`; ties go to the lowest persona_id.
pub fn nearest_persona(personas: &[PersonaRecord], query: &EmbeddingVector) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in personas.iter().enumerate() {
        let d = euclidean(p.key_embedding.values(), query.values());
        let better = match best {
            None => true,
            Some((j, bd)) => d < bd || (d == bd && p.persona_id < personas[j].persona_id),
        };
        if better {
            best = Some((i, d));
        }
    }
    best
}

impl PersonaStore {
    pub fn open(dir: impl Into<PathBuf>, policy: RefreshPolicy) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(PersonaStore { dir, policy, writers: Mutex::new(HashMap::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn policy(&self) -> RefreshPolicy {
        self.policy
    }

    fn path_for(&self, user_id: &str) -> Result<PathBuf, StoreError> {
        let bad = user_id.is_empty()
            || user_id == "."
            || user_id == ".."
            || !user_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '@'));
        if bad {
            return Err(StoreError::InvalidUserId(user_id.to_string()));
        }
        Ok(self.dir.join(format!("{user_id}.json")))
    }

    fn writer_lock(&self, user_id: &str) -> Arc<Mutex<()>> {
        let mut map = self.writers.lock().expect("poisoned");
        map.entry(user_id.to_string()).or_default().clone()
    }

    fn write_atomic(&self, path: &Path, file: &UserFile) -> Result<(), StoreError> {
        let mut bytes = serde_json::to_vec_pretty(file).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        bytes.push(b'\n');
        let mut tmp = tempfile_in(&self.dir).map_err(io_err(&self.dir))?;
        tmp.1.write_all(&bytes).map_err(io_err(&tmp.0))?;
        tmp.1.sync_all().map_err(io_err(&tmp.0))?;
        drop(tmp.1);
        fs::rename(&tmp.0, path).map_err(|e| {
            let _ = fs::remove_file(&tmp.0);
            StoreError::Io { path: path.display().to_string(), source: e }
        })
    }

    pub fn load(&self, user_id: &str) -> Result<UserFile, StoreError> {
        let path = self.path_for(user_id)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::UnknownUser(user_id.to_string())),
            Err(e) => return Err(StoreError::Io { path: path.display().to_string(), source: e }),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt { path: path.display().to_string(), message: e.to_string() })
    }

    /// Replaces the user's persona set and resets the behavior counter.
    pub fn put_personas(
        &self,
        user_id: &str,
        provider: &str,
        built_at: i64,
        behaviors_seen: usize,
        records: Vec<PersonaRecord>,
    ) -> Result<Commit, StoreError> {
        let first = records.first().ok_or(StoreError::EmptyPut)?;
        let dim = first.key_embedding.dim();
        let mut ids = std::collections::HashSet::new();
        for r in &records {
            if r.key_embedding.dim() != dim {
                return Err(StoreError::DimensionMismatch { expected: dim, got: r.key_embedding.dim() });
            }
            if !ids.insert(r.persona_id) {
                return Err(StoreError::DuplicatePersonaId(r.persona_id));
            }
        }
        let path = self.path_for(user_id)?;
        let lock = self.writer_lock(user_id);
        let _guard = lock.lock().expect("poisoned");
        let file = UserFile {
            meta: StoreMeta { provider: provider.to_string(), dim, built_at, behaviors_seen, behaviors_since_build: 0 },
            personas: records,
        };
        self.write_atomic(&path, &file)?;
        Ok(Commit { user_id: user_id.to_string(), personas: file.personas.len(), path })
    }

    pub fn list(&self, user_id: &str) -> Result<Vec<PersonaRecord>, StoreError> {
        Ok(self.load(user_id)?.personas)
    }

    /// Nearest persona by key-embedding distance.
    pub fn retrieve(&self, user_id: &str, query: &EmbeddingVector) -> Result<Retrieved, StoreError> {
        let file = self.load(user_id)?;
        if query.dim() != file.meta.dim {
            return Err(StoreError::DimensionMismatch { expected: file.meta.dim, got: query.dim() });
        }
        let (idx, distance) = nearest_persona(&file.personas, query).ok_or_else(|| StoreError::UnknownUser(user_id.to_string()))?;
        Ok(Retrieved { persona: file.personas[idx].clone(), distance })
    }

    /// Embeds `text` with `provider` (which must match the one the store was
    /// built with) and retrieves.
    pub fn retrieve_text(&self, user_id: &str, text: &str, provider: &dyn EmbeddingProvider) -> Result<Retrieved, StoreError> {
        let file = self.load(user_id)?;
        let identity = provider.identity();
        if identity != file.meta.provider {
            return Err(StoreError::ProviderMismatch { stored: file.meta.provider, query: identity });
        }
        let query = provider.embed_text(text)?;
        self.retrieve(user_id, &query)
    }

    /// Counts one new behavior; returns whether the personas are due for a
    /// rebuild.
    pub fn record_behavior(&self, user_id: &str) -> Result<bool, StoreError> {
        let path = self.path_for(user_id)?;
        let lock = self.writer_lock(user_id);
        let _guard = lock.lock().expect("poisoned");
        let mut file = self.load(user_id)?;
        file.meta.behaviors_since_build += 1;
        self.write_atomic(&path, &file)?;
        Ok(self.policy.is_stale(file.meta.behaviors_since_build))
    }

    pub fn behaviors_since_build(&self, user_id: &str) -> Result<usize, StoreError> {
        Ok(self.load(user_id)?.meta.behaviors_since_build)
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    loop {
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}
