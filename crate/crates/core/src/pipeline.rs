//! End-to-end offline pipeline: ingest, embed, cluster, allocate, select,
//! profile, store, and evaluate, plus a parameter sweep.
//!
//! Users are processed concurrently; within a user every stage runs in
//! order. Everything written to `manifest.json` and the persona store is a
//! pure function of the configuration and input, so repeated runs produce
//! identical bytes. Wall times go to `timings.json` instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{euclidean, ingest_behaviors, BehaviorRecord, BehaviorSequence, EmbeddingVector, LogFormat};
use crate::budget::{allocate_budget, effective_budget};
use crate::cluster::{cluster_with_trace, ClusterSet};
use crate::embed::{embed_items, EmbeddingProvider, MockEmbedder, PrecomputedEmbedder, RemoteEmbedder};
use crate::latency::{compare_scenarios, write_scenarios_csv, CostGrid, CostParams};
use crate::metrics::{build_candidates, compute_metrics, rank_by_distance, Candidate, MetricReport, RankedList};
use crate::par::{self, Exec};
use crate::profile::{profile_all_clusters, CallCounts, ProfileError, Profiler, ProfilerConfig, Strategy};
use crate::select::{dynamic_select, weights_from_alpha, SelectionWeights, SubBehaviorSequence};
use crate::store::{nearest_persona, PersonaRecord, PersonaStore, RefreshPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Mock {
        #[serde(default = "default_mock_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Precomputed {
        path: PathBuf,
    },
    /// URL from the config or `SBS_EMBED_URL`.
    Remote {
        #[serde(default)]
        url: Option<String>,
    },
}

fn default_mock_dim() -> usize {
    32
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Mock { dim: default_mock_dim(), seed: 0 }
    }
}

/// How evaluation scores a candidate against the user's personas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Distance from the candidate's item embedding to the nearest persona
    /// key. Works with every provider.
    #[default]
    Centroid,
    /// Distance between the embedded text of the retrieved persona and the
    /// embedded candidate text. Needs a provider that embeds free text.
    PersonaText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub enabled: bool,
    pub n_neg: usize,
    pub scoring: Scoring,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { enabled: true, n_neg: 9, scoring: Scoring::Centroid }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
    pub ratio: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid { tau: vec![0.5, 0.7], alpha: vec![1.001, 1.06, 1.4], ratio: vec![0.3, 0.5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Behavior log, JSON lines.
    pub input: PathBuf,
    /// Persona store directory; `<run_dir>/personas` when unset.
    pub store_dir: Option<PathBuf>,
    pub tau: f64,
    pub alpha: f64,
    pub ratio: f64,
    pub provider: ProviderConfig,
    /// Unit-normalize embeddings before clustering.
    pub normalize: bool,
    pub profiler: ProfilerConfig,
    pub seed: u64,
    /// Worker threads across users; 0 picks the default.
    pub workers: usize,
    pub evaluation: EvalConfig,
    pub refresh_after_d: usize,
    /// Persona timestamp; the user's latest behavior timestamp otherwise.
    pub created_at: Option<i64>,
    pub cost: CostParams,
    pub cost_n_i: Vec<f64>,
    pub sweep: SweepGrid,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: PathBuf::from("behaviors.jsonl"),
            store_dir: None,
            tau: 0.7,
            alpha: 1.06,
            ratio: 0.3,
            provider: ProviderConfig::default(),
            normalize: false,
            profiler: ProfilerConfig::default(),
            seed: 0,
            workers: 0,
            evaluation: EvalConfig::default(),
            refresh_after_d: RefreshPolicy::default().refresh_after_d,
            created_at: None,
            cost: CostParams::default(),
            cost_n_i: vec![5.0, 10.0, 20.0],
            sweep: SweepGrid::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: StageName, message: String },
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

fn out_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Output { path: path.display().to_string(), message: e.to_string() }
}

fn check_tau(tau: f64) -> Result<(), String> {
    if tau.is_finite() && tau > 0.0 { Ok(()) } else { Err(format!("tau must be > 0, got {tau}")) }
}

fn check_alpha(alpha: f64) -> Result<(), String> {
    if alpha.is_finite() && alpha > 1.0 { Ok(()) } else { Err(format!("alpha must be > 1, got {alpha}")) }
}

fn check_ratio(ratio: f64) -> Result<(), String> {
    if ratio > 0.0 && ratio <= 1.0 { Ok(()) } else { Err(format!("ratio must be in (0, 1], got {ratio}")) }
}

impl PipelineConfig {
    /// Reads a JSON config. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.input);
        if let Some(p) = cfg.store_dir.as_mut() {
            resolve(p);
        }
        if let ProviderConfig::Precomputed { path } = &mut cfg.provider {
            resolve(path);
        }
        if let Some(p) = cfg.profiler.templates_dir.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let all = [check_tau(self.tau), check_alpha(self.alpha), check_ratio(self.ratio)];
        for r in all {
            r.map_err(PipelineError::Config)?;
        }
        if self.refresh_after_d == 0 {
            return Err(PipelineError::Config("refresh_after_d must be positive".into()));
        }
        if let ProviderConfig::Mock { dim: 0, .. } = self.provider {
            return Err(PipelineError::Config("mock provider dim must be positive".into()));
        }
        self.profiler.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.cost.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn build_provider(&self) -> Result<Arc<dyn EmbeddingProvider>, PipelineError> {
        let stage = |message: String| PipelineError::Stage { stage: StageName::Embed, message };
        Ok(match &self.provider {
            ProviderConfig::Mock { dim, seed } => Arc::new(MockEmbedder::new(*dim, *seed)),
            ProviderConfig::Precomputed { path } => Arc::new(PrecomputedEmbedder::load(path).map_err(|e| stage(e.to_string()))?),
            ProviderConfig::Remote { url } => match url {
                Some(u) => Arc::new(RemoteEmbedder::new(u.clone(), std::env::var(crate::embed::EMBED_TOKEN_ENV).ok())),
                None => Arc::new(RemoteEmbedder::from_env().ok_or_else(|| {
                    PipelineError::Config(format!("remote provider needs a url or {}", crate::embed::EMBED_URL_ENV))
                })?),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Ingest,
    Embed,
    Cluster,
    Allocate,
    Select,
    Profile,
    Store,
    Evaluate,
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: StageName,
    pub message: String,
}

impl StageFailure {
    fn new(stage: StageName, e: impl fmt::Display) -> Self {
        StageFailure { stage, message: e.to_string() }
    }
}

/// One user's history split into the part that is profiled and an optional
/// held-out target, with embeddings of the profiled part.
#[derive(Debug, Clone)]
pub struct PreparedUser {
    pub profiled: BehaviorSequence,
    pub holdout: Option<BehaviorRecord>,
    pub embeddings: Vec<EmbeddingVector>,
    pub total_behaviors: usize,
}

pub fn prepare_user(
    seq: &BehaviorSequence,
    provider: &dyn EmbeddingProvider,
    normalize: bool,
    hold_out_last: bool,
) -> Result<PreparedUser, StageFailure> {
    let (profiled, holdout) = if hold_out_last && seq.len() >= 2 {
        (seq.prefix(seq.len() - 1), seq.records.last().cloned())
    } else {
        (seq.clone(), None)
    };
    let embeddings = embed_items(&profiled.records, provider, normalize, Exec::Sequential).map_err(|e| StageFailure::new(StageName::Embed, e))?;
    Ok(PreparedUser { profiled, holdout, embeddings, total_behaviors: seq.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbsSummary {
    pub cluster_id: usize,
    pub positions: Vec<usize>,
    pub objective: f64,
}

/// Result of building one user's personas.
#[derive(Debug, Clone)]
pub struct UserBuild {
    pub clusters: ClusterSet,
    pub budget: usize,
    pub effective_budget: usize,
    pub allocations: Vec<usize>,
    pub sbs: Vec<SubBehaviorSequence>,
    pub personas: Vec<PersonaRecord>,
    /// Clusters whose SBS had no liked items.
    pub skipped_clusters: Vec<usize>,
    pub calls: CallCounts,
    pub wrong_first_choices: usize,
    /// (positive, negative) pairs walked by reflection.
    pub pairs: usize,
    pub stage_ms: BTreeMap<StageName, f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildParams {
    pub tau: f64,
    pub ratio: f64,
    pub weights: SelectionWeights,
    pub created_at: Option<i64>,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn build_user(prep: &PreparedUser, params: &BuildParams, profiler: &Profiler) -> Result<UserBuild, StageFailure> {
    let seq = &prep.profiled;
    let mut stage_ms = BTreeMap::new();

    let t = Instant::now();
    let (clusters, _) = cluster_with_trace(&prep.embeddings, params.tau, Exec::Sequential).map_err(|e| StageFailure::new(StageName::Cluster, e))?;
    stage_ms.insert(StageName::Cluster, elapsed_ms(t));

    let t = Instant::now();
    let budget = effective_budget(seq.len(), params.ratio, clusters.m());
    let allocation = allocate_budget(&clusters.sizes(), budget).map_err(|e| StageFailure::new(StageName::Allocate, e))?;
    stage_ms.insert(StageName::Allocate, elapsed_ms(t));

    let t = Instant::now();
    let mut sbs = Vec::with_capacity(clusters.m());
    for (cluster, &quota) in clusters.clusters.iter().zip(&allocation.allocations) {
        if quota == 0 {
            continue;
        }
        sbs.push(dynamic_select(cluster, &prep.embeddings, quota, &params.weights).map_err(|e| StageFailure::new(StageName::Select, e))?);
    }
    stage_ms.insert(StageName::Select, elapsed_ms(t));

    let t = Instant::now();
    let created_at = params.created_at.unwrap_or_else(|| seq.records.iter().filter_map(|r| r.timestamp).max().unwrap_or(0));
    let mut personas = Vec::new();
    let mut skipped = Vec::new();
    let mut calls = CallCounts::default();
    let mut wrong = 0;
    let mut pairs = 0;
    for outcome in profile_all_clusters(seq, &clusters, &sbs, profiler, Exec::Sequential) {
        calls.add(&outcome.calls);
        wrong += outcome.wrong_first_choices;
        pairs += outcome.pairs;
        match outcome.result {
            Ok(draft) => {
                let cluster = clusters.clusters.iter().find(|c| c.cluster_id == draft.source_cluster).expect("draft from known cluster");
                personas.push(PersonaRecord {
                    persona_id: personas.len() as u32,
                    user_id: seq.user_id.clone(),
                    cluster_id: draft.source_cluster,
                    text: draft.text,
                    key_embedding: cluster.centroid.clone(),
                    behaviors_seen_at_build: seq.len(),
                    created_at,
                });
            }
            Err(ProfileError::NoLikedItems(c)) => skipped.push(c),
            Err(e) => return Err(StageFailure::new(StageName::Profile, format!("cluster {}: {e}", outcome.cluster_id))),
        }
    }
    stage_ms.insert(StageName::Profile, elapsed_ms(t));
    if personas.is_empty() {
        return Err(StageFailure::new(StageName::Profile, "no cluster produced a persona (no liked items selected)"));
    }
    Ok(UserBuild {
        budget: allocation.budget,
        effective_budget: allocation.effective_budget,
        allocations: allocation.allocations,
        clusters,
        sbs,
        personas,
        skipped_clusters: skipped,
        calls,
        wrong_first_choices: wrong,
        pairs,
        stage_ms,
    })
}

/// Every distinct item in the corpus, first occurrence wins.
pub fn item_catalog(users: &[BehaviorSequence]) -> BTreeMap<String, BehaviorRecord> {
    let mut catalog = BTreeMap::new();
    for u in users {
        for r in &u.records {
            catalog.entry(r.item_id.clone()).or_insert_with(|| r.clone());
        }
    }
    catalog
}

fn user_seed(seed: u64, user_id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(user_id.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Ranks the held-out item against `n_neg` items the user never touched.
pub fn evaluate_user(
    full: &BehaviorSequence,
    prep: &PreparedUser,
    personas: &[PersonaRecord],
    catalog: &BTreeMap<String, BehaviorRecord>,
    provider: &dyn EmbeddingProvider,
    config: &PipelineConfig,
) -> Result<RankedList, StageFailure> {
    let fail = |e: &dyn fmt::Display| StageFailure::new(StageName::Evaluate, e);
    let target = prep.holdout.as_ref().ok_or_else(|| fail(&"history too short to hold out a target"))?;
    let seen: BTreeSet<&str> = full.records.iter().map(|r| r.item_id.as_str()).collect();
    let pool: Vec<String> = catalog.keys().filter(|k| !seen.contains(k.as_str())).cloned().collect();
    let ids = build_candidates(&target.item_id, &pool, config.evaluation.n_neg, user_seed(config.seed, &full.user_id)).map_err(|e| fail(&e))?;
    let records: Vec<&BehaviorRecord> = ids.iter().map(|id| if *id == target.item_id { target } else { &catalog[id] }).collect();
    let candidates: Vec<Candidate> =
        records.iter().map(|r| Candidate { item_id: r.item_id.clone(), text: r.display_text().to_string() }).collect();
    let mut distances = Vec::with_capacity(records.len());
    for r in &records {
        let mut e = provider.embed_item(r).map_err(|e| fail(&e))?;
        if config.normalize {
            e = e.normalized();
        }
        let (idx, d) = nearest_persona(personas, &e).ok_or_else(|| fail(&"no personas"))?;
        let d = match config.evaluation.scoring {
            Scoring::Centroid => d,
            Scoring::PersonaText => {
                let p = provider.embed_text(&personas[idx].text).map_err(|e| fail(&e))?;
                let c = provider.embed_text(r.display_text()).map_err(|e| fail(&e))?;
                euclidean(p.values(), c.values())
            }
        };
        distances.push(d);
    }
    rank_by_distance(&candidates, &distances, &target.item_id).map_err(|e| fail(&e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserManifest {
    pub user_id: String,
    pub behaviors: usize,
    pub profiled_behaviors: usize,
    pub m: usize,
    pub cluster_sizes: Vec<usize>,
    pub budget: usize,
    pub effective_budget: usize,
    pub allocations: Vec<usize>,
    pub sbs_lengths: Vec<usize>,
    pub sbs: Vec<SbsSummary>,
    pub n_personas: usize,
    pub skipped_clusters: Vec<usize>,
    pub calls: CallCounts,
    /// LLM calls the cost model predicts for this build (repairs excluded).
    pub expected_calls: usize,
    pub wrong_first_choices: usize,
    pub target_rank: Option<usize>,
    pub error: Option<StageFailure>,
}

impl UserManifest {
    fn failed(seq: &BehaviorSequence, failure: StageFailure) -> Self {
        UserManifest {
            user_id: seq.user_id.clone(),
            behaviors: seq.len(),
            profiled_behaviors: 0,
            m: 0,
            cluster_sizes: vec![],
            budget: 0,
            effective_budget: 0,
            allocations: vec![],
            sbs_lengths: vec![],
            sbs: vec![],
            n_personas: 0,
            skipped_clusters: vec![],
            calls: CallCounts::default(),
            expected_calls: 0,
            wrong_first_choices: 0,
            target_rank: None,
            error: Some(failure),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub tau: f64,
    pub alpha: f64,
    pub ratio: f64,
    pub w_p: f64,
    pub w_d: f64,
    pub provider: String,
    pub strategy: Strategy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub settings: Option<RunSettings>,
    pub users: Vec<UserManifest>,
    pub error: Option<StageFailure>,
}

impl RunManifest {
    pub fn is_success(&self) -> bool {
        self.error.is_none() && self.users.iter().all(|u| u.error.is_none())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub metrics: Option<MetricReport>,
    pub run_dir: PathBuf,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    #[serde(flatten)]
    report: &'a MetricReport,
    ranks: BTreeMap<&'a str, usize>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| out_err(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| out_err(path, e))
}

fn expected_calls(strategy: Strategy, build: &UserBuild) -> usize {
    match strategy {
        Strategy::Summarization | Strategy::Mock => crate::latency::summarization_calls(build.personas.len()),
        Strategy::Reflection => crate::latency::reflection_calls(&[build.pairs], &[build.wrong_first_choices]),
    }
}

fn process_user(
    seq: &BehaviorSequence,
    config: &PipelineConfig,
    params: &BuildParams,
    provider: &dyn EmbeddingProvider,
    profiler: &Profiler,
    store: &PersonaStore,
    catalog: &BTreeMap<String, BehaviorRecord>,
) -> (UserManifest, BTreeMap<StageName, f64>) {
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let prep = match prepare_user(seq, provider, config.normalize, config.evaluation.enabled) {
        Ok(p) => p,
        Err(f) => return (UserManifest::failed(seq, f), timings),
    };
    timings.insert(StageName::Embed, elapsed_ms(t));
    let build = match build_user(&prep, params, profiler) {
        Ok(b) => b,
        Err(f) => return (UserManifest::failed(seq, f), timings),
    };
    timings.extend(build.stage_ms.iter().map(|(k, v)| (*k, *v)));

    let t = Instant::now();
    if let Err(e) = store.put_personas(&seq.user_id, &provider.identity(), build.personas[0].created_at, prep.profiled.len(), build.personas.clone()) {
        return (UserManifest::failed(seq, StageFailure::new(StageName::Store, e)), timings);
    }
    timings.insert(StageName::Store, elapsed_ms(t));

    let mut error = None;
    let mut target_rank = None;
    if config.evaluation.enabled {
        let t = Instant::now();
        match evaluate_user(seq, &prep, &build.personas, catalog, provider, config) {
            Ok(list) => target_rank = list.rank().ok(),
            Err(f) => error = Some(f),
        }
        timings.insert(StageName::Evaluate, elapsed_ms(t));
    }
    let sbs_lengths: Vec<usize> = build.sbs.iter().map(|s| s.selected_positions.len()).collect();
    let manifest = UserManifest {
        user_id: seq.user_id.clone(),
        behaviors: prep.total_behaviors,
        profiled_behaviors: prep.profiled.len(),
        m: build.clusters.m(),
        cluster_sizes: build.clusters.sizes(),
        budget: build.budget,
        effective_budget: build.effective_budget,
        allocations: build.allocations.clone(),
        sbs: build
            .sbs
            .iter()
            .map(|s| SbsSummary { cluster_id: s.cluster_id, positions: s.selected_positions.clone(), objective: s.objective_value })
            .collect(),
        sbs_lengths,
        n_personas: build.personas.len(),
        skipped_clusters: build.skipped_clusters.clone(),
        calls: build.calls,
        expected_calls: expected_calls(profiler.config().strategy, &build),
        wrong_first_choices: build.wrong_first_choices,
        target_rank,
        error,
    };
    (manifest, timings)
}

fn load_users(config: &PipelineConfig) -> Result<Vec<BehaviorSequence>, StageFailure> {
    ingest_behaviors(&config.input, LogFormat::JsonLines).map_err(|e| StageFailure::new(StageName::Ingest, e))
}

/// Runs the whole offline pipeline and writes `manifest.json`,
/// `timings.json`, `metrics.json`, `costs.csv` and the persona store under
/// `run_dir`. Stage failures are recorded in the manifest rather than
/// returned; check [`RunManifest::is_success`].
pub fn run_pipeline(config: &PipelineConfig, run_dir: &Path) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| out_err(run_dir, e))?;
    let manifest_path = run_dir.join("manifest.json");
    let fail_early = |failure: StageFailure| -> Result<RunOutcome, PipelineError> {
        let manifest = RunManifest { settings: None, users: vec![], error: Some(failure) };
        write_json(&manifest_path, &manifest)?;
        Ok(RunOutcome { manifest, metrics: None, run_dir: run_dir.to_path_buf() })
    };

    let provider = match config.build_provider() {
        Ok(p) => p,
        Err(PipelineError::Stage { stage, message }) => return fail_early(StageFailure { stage, message }),
        Err(e) => return Err(e),
    };
    let users = match load_users(config) {
        Ok(u) => u,
        Err(f) => return fail_early(f),
    };
    let profiler = Profiler::from_config(config.profiler.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
    let weights = weights_from_alpha(config.alpha).map_err(|e| PipelineError::Config(e.to_string()))?;
    let params = BuildParams { tau: config.tau, ratio: config.ratio, weights, created_at: config.created_at };
    let store_dir = config.store_dir.clone().unwrap_or_else(|| run_dir.join("personas"));
    let store = PersonaStore::open(&store_dir, RefreshPolicy { refresh_after_d: config.refresh_after_d })
        .map_err(|e| out_err(&store_dir, e))?;
    let catalog = item_catalog(&users);

    let results = par::with_workers(config.workers, || {
        par::map(Exec::Parallel, &users, |seq| process_user(seq, config, &params, provider.as_ref(), &profiler, &store, &catalog))
    });

    let mut manifests = Vec::with_capacity(results.len());
    let mut timings: BTreeMap<String, BTreeMap<StageName, f64>> = BTreeMap::new();
    for (m, t) in results {
        timings.insert(m.user_id.clone(), t);
        manifests.push(m);
    }
    let manifest = RunManifest {
        settings: Some(RunSettings {
            tau: config.tau,
            alpha: config.alpha,
            ratio: config.ratio,
            w_p: weights.w_p,
            w_d: weights.w_d,
            provider: provider.identity(),
            strategy: config.profiler.strategy,
            seed: config.seed,
        }),
        users: manifests,
        error: None,
    };
    write_json(&manifest_path, &manifest)?;
    write_json(&run_dir.join("timings.json"), &timings)?;

    let mut metrics = None;
    if config.evaluation.enabled {
        let lists: Vec<(&str, usize)> =
            manifest.users.iter().filter_map(|u| u.target_rank.map(|r| (u.user_id.as_str(), r))).collect();
        let ranked: Vec<RankedList> = lists.iter().map(|&(_, r)| synthetic_list(r)).collect();
        if let Ok(report) = compute_metrics(&ranked) {
            write_json(&run_dir.join("metrics.json"), &MetricsFile { report: &report, ranks: lists.iter().copied().collect() })?;
            metrics = Some(report);
        }
    }

    let grid = CostGrid { base: config.cost.clone(), n_i: config.cost_n_i.clone(), n: vec![config.cost.n], k: vec![config.cost.k] };
    let rows = compare_scenarios(&grid.points()).map_err(|e| PipelineError::Config(e.to_string()))?;
    let costs_path = run_dir.join("costs.csv");
    let file = fs::File::create(&costs_path).map_err(|e| out_err(&costs_path, e))?;
    write_scenarios_csv(&rows, file).map_err(|e| out_err(&costs_path, e))?;

    Ok(RunOutcome { manifest, metrics, run_dir: run_dir.to_path_buf() })
}

/// A list whose positive sits at `rank`; only the rank matters to the
/// metrics.
fn synthetic_list(rank: usize) -> RankedList {
    let ids: Vec<String> = (1..=rank).map(|i| if i == rank { "+".to_string() } else { format!("-{i}") }).collect();
    RankedList::new(ids, "+").expect("unique ids")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub alpha: f64,
    pub ratio: f64,
    pub users_ok: usize,
    pub users_failed: usize,
    /// Mean personas (SBS) per user.
    pub n_sbs: f64,
    pub mean_sbs_len: f64,
    pub hr1: Option<f64>,
    pub hr5: Option<f64>,
    pub ndcg5: Option<f64>,
    pub mrr10: Option<f64>,
    pub error: String,
}

struct SweepContext {
    provider: Arc<dyn EmbeddingProvider>,
    users: Vec<BehaviorSequence>,
    profiler: Profiler,
    catalog: BTreeMap<String, BehaviorRecord>,
    prepared: Vec<Result<PreparedUser, StageFailure>>,
}

type CellResult = Result<(UserBuild, Option<usize>), StageFailure>;

impl SweepContext {
    fn new(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let provider = config.build_provider()?;
        let users = load_users(config).map_err(|f| PipelineError::Stage { stage: f.stage, message: f.message })?;
        let profiler = Profiler::from_config(config.profiler.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
        let catalog = item_catalog(&users);
        let prepared = par::with_workers(config.workers, || {
            par::map(Exec::Parallel, &users, |u| prepare_user(u, provider.as_ref(), config.normalize, config.evaluation.enabled))
        });
        Ok(SweepContext { provider, users, profiler, catalog, prepared })
    }

    fn cell(&self, config: &PipelineConfig, tau: f64, alpha: f64, ratio: f64) -> Result<Vec<CellResult>, PipelineError> {
        let weights = weights_from_alpha(alpha).map_err(|e| PipelineError::Config(e.to_string()))?;
        let params = BuildParams { tau, ratio, weights, created_at: config.created_at };
        Ok(par::with_workers(config.workers, || {
            par::map_range(Exec::Parallel, self.users.len(), |i| -> CellResult {
                let prep = self.prepared[i].as_ref().map_err(Clone::clone)?;
                let build = build_user(prep, &params, &self.profiler)?;
                let rank = if config.evaluation.enabled {
                    let list = evaluate_user(&self.users[i], prep, &build.personas, &self.catalog, self.provider.as_ref(), config)?;
                    list.rank().ok()
                } else {
                    None
                };
                Ok((build, rank))
            })
        }))
    }
}

/// Reruns clustering through evaluation for every (tau, alpha, ratio) cell,
/// embedding each user once. Nothing is written to the store.
pub fn sweep(config: &PipelineConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>, PipelineError> {
    config.validate()?;
    if grid.tau.is_empty() || grid.alpha.is_empty() || grid.ratio.is_empty() {
        return Err(PipelineError::Config("sweep grid has an empty axis".into()));
    }
    let checks = grid
        .tau
        .iter()
        .map(|&t| check_tau(t))
        .chain(grid.alpha.iter().map(|&a| check_alpha(a)))
        .chain(grid.ratio.iter().map(|&r| check_ratio(r)));
    for r in checks {
        r.map_err(PipelineError::Config)?;
    }
    let ctx = SweepContext::new(config)?;
    let mut rows = Vec::new();
    for &tau in &grid.tau {
        for &alpha in &grid.alpha {
            for &ratio in &grid.ratio {
                let cells = ctx.cell(config, tau, alpha, ratio)?;
                rows.push(summarize_cell(tau, alpha, ratio, &ctx.users, cells));
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub report: MetricReport,
    pub ranks: BTreeMap<String, usize>,
    pub failures: BTreeMap<String, StageFailure>,
}

/// Builds personas in memory from all but each user's last behavior and
/// ranks that behavior's item among sampled negatives.
pub fn evaluate(config: &PipelineConfig) -> Result<Evaluation, PipelineError> {
    config.validate()?;
    let config = PipelineConfig { evaluation: EvalConfig { enabled: true, ..config.evaluation.clone() }, ..config.clone() };
    let ctx = SweepContext::new(&config)?;
    let cells = ctx.cell(&config, config.tau, config.alpha, config.ratio)?;
    let mut ranks = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for (u, cell) in ctx.users.iter().zip(cells) {
        match cell {
            Ok((_, Some(rank))) => {
                ranks.insert(u.user_id.clone(), rank);
            }
            Ok((_, None)) => {}
            Err(f) => {
                failures.insert(u.user_id.clone(), f);
            }
        }
    }
    let lists: Vec<RankedList> = ranks.values().copied().map(synthetic_list).collect();
    let report = compute_metrics(&lists).map_err(|e| PipelineError::Stage { stage: StageName::Evaluate, message: e.to_string() })?;
    Ok(Evaluation { report, ranks, failures })
}

fn summarize_cell(
    tau: f64,
    alpha: f64,
    ratio: f64,
    users: &[BehaviorSequence],
    cells: Vec<Result<(UserBuild, Option<usize>), StageFailure>>,
) -> SweepRow {
    let mut ok = 0;
    let mut errors = Vec::new();
    let (mut personas, mut sbs_total, mut sbs_count) = (0usize, 0usize, 0usize);
    let mut ranks = Vec::new();
    for (u, cell) in users.iter().zip(cells) {
        match cell {
            Ok((build, rank)) => {
                ok += 1;
                personas += build.personas.len();
                sbs_count += build.sbs.len();
                sbs_total += build.sbs.iter().map(|s| s.selected_positions.len()).sum::<usize>();
                ranks.extend(rank);
            }
            Err(f) => errors.push(format!("{}: {} {}", u.user_id, f.stage, f.message)),
        }
    }
    let lists: Vec<RankedList> = ranks.into_iter().map(synthetic_list).collect();
    let report = compute_metrics(&lists).ok();
    let pick = |f: fn(&MetricReport) -> f64| report.as_ref().map(f);
    SweepRow {
        tau,
        alpha,
        ratio,
        users_ok: ok,
        users_failed: errors.len(),
        n_sbs: if ok > 0 { personas as f64 / ok as f64 } else { 0.0 },
        mean_sbs_len: if sbs_count > 0 { sbs_total as f64 / sbs_count as f64 } else { 0.0 },
        hr1: pick(|r| r.hr_at[&1]),
        hr5: pick(|r| r.hr_at[&5]),
        ndcg5: pick(|r| r.ndcg_at[&5]),
        mrr10: pick(|r| r.mrr_at[&10]),
        error: errors.join("; "),
    }
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tau", "alpha", "ratio", "users_ok", "users_failed", "n_sbs", "mean_sbs_len", "HR@1", "HR@5", "NDCG@5", "MRR@10", "error"])?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.tau.to_string(),
            r.alpha.to_string(),
            r.ratio.to_string(),
            r.users_ok.to_string(),
            r.users_failed.to_string(),
            format!("{:.4}", r.n_sbs),
            format!("{:.4}", r.mean_sbs_len),
            f(r.hr1),
            f(r.hr5),
            f(r.ndcg5),
            f(r.mrr10),
            r.error.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
