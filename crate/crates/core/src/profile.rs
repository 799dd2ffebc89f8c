//! Offline persona generation from sub-behavior sequences.
//!
//! Two profilers are supported. Summarization sends the liked items of an
//! SBS in one prompt and reads the text after `Summarization:`. Reflection
//! walks the liked items of the SBS in chronological order, pairing each with
//! a negative; the agent picks between them and, when it picks the negative,
//! a backward prompt rewrites the profile from the text after
//! `My updated profile:` before the pair is asked again.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{BehaviorRecord, BehaviorSequence};
use crate::cluster::ClusterSet;
use crate::llm::{DecodingParams, HttpLlm, LlmClient, LlmError, MockLlm};
use crate::par::{self, Exec};
use crate::select::SubBehaviorSequence;
use crate::template::{Stage, TemplateError, TemplateSet};

/// Profile text before any evidence has been seen.
pub const UNKNOWN_PROFILE: &str = "Currently Unknown";

const SUMMARY_MARKER: &str = "Summarization:";
const CHOICE_MARKER: &str = "Chosen Item:";
const UPDATE_MARKER: &str = "My updated profile:";
const REPAIR_PREFIX: &str = "Your output should strictly be in the following format:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Summarization,
    Reflection,
    #[default]
    Mock,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Summarization => "summarization",
            Strategy::Reflection => "reflection",
            Strategy::Mock => "mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilerConfig {
    pub strategy: Strategy,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub max_reflection_rounds: usize,
    /// Directory with template overrides; bundled templates otherwise.
    pub templates_dir: Option<PathBuf>,
    pub decoding: DecodingParams,
    /// Seed for sampling out-of-cluster negatives.
    pub seed: u64,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig {
            strategy: Strategy::Mock,
            endpoint: None,
            model_name: "gpt-4o-mini".into(),
            max_reflection_rounds: 1,
            templates_dir: None,
            decoding: DecodingParams::default(),
            seed: 0,
        }
    }
}

impl ProfilerConfig {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.strategy != Strategy::Mock && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(ProfileError::Config(format!("strategy {} needs an LLM endpoint", self.strategy)));
        }
        if self.max_reflection_rounds == 0 {
            return Err(ProfileError::Config("max_reflection_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("profiler configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("response lacks `{marker}`: {raw}")]
    Parse { marker: &'static str, raw: String },
    #[error("prompt rendering failed: {0}")]
    Template(String),
    #[error("cluster {0} has no liked items in its SBS")]
    NoLikedItems(usize),
    #[error("cluster {0}: no negative item available for reflection")]
    NoNegative(usize),
    #[error("{0}")]
    InvalidInput(String),
}

impl From<TemplateError> for ProfileError {
    fn from(e: TemplateError) -> Self {
        ProfileError::Template(e.to_string())
    }
}

impl ProfileError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProfileError::Llm(e) if e.is_retriable())
    }
}

/// LLM calls issued, by prompt kind. Repairs are counted separately from
/// the call they repair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub summarize: usize,
    pub forward: usize,
    pub backward: usize,
    pub repair: usize,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.summarize + self.forward + self.backward + self.repair
    }

    pub fn add(&mut self, other: &CallCounts) {
        self.summarize += other.summarize;
        self.forward += other.forward;
        self.backward += other.backward;
        self.repair += other.repair;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaDraft {
    pub text: String,
    pub source_cluster: usize,
    pub sbs_positions: Vec<usize>,
    pub strategy: Strategy,
    pub token_estimate: usize,
}

/// Result of one profiling step (a summarization or one reflection pair).
#[derive(Debug, Clone, PartialEq)]
pub struct Drafted {
    pub text: String,
    pub calls: CallCounts,
    /// Reflection only: pairs answered wrongly on the first forward call.
    pub wrong_first_choices: usize,
}

/// Per-cluster outcome of [`profile_all_clusters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProfile {
    pub cluster_id: usize,
    pub result: Result<PersonaDraft, ProfileError>,
    pub calls: CallCounts,
    /// Reflection pairs processed and how many were first answered wrongly.
    pub pairs: usize,
    pub wrong_first_choices: usize,
}

pub struct Profiler {
    config: ProfilerConfig,
    llm: Arc<dyn LlmClient>,
    templates: TemplateSet,
}

impl fmt::Debug for Profiler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Profiler").field("config", &self.config).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    A,
    B,
}

fn token_estimate(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn after_marker(response: &str, marker: &'static str) -> Option<String> {
    let idx = response.find(marker)?;
    let text = response[idx + marker.len()..].trim();
    (!text.is_empty()).then(|| text.to_string())
}

fn parse_choice(response: &str) -> Option<Slot> {
    let line = response.lines().find(|l| l.contains(CHOICE_MARKER))?;
    let rest = line[line.find(CHOICE_MARKER)? + CHOICE_MARKER.len()..].trim();
    let rest = rest.trim_start_matches(['{', '[', '*', '"', '\'']).trim().to_ascii_lowercase();
    if rest.starts_with("item a") {
        Some(Slot::A)
    } else if rest.starts_with("item b") {
        Some(Slot::B)
    } else {
        None
    }
}

impl Profiler {
    /// Builds the client the configuration asks for: [`MockLlm`] for the mock
    /// strategy, an [`HttpLlm`] otherwise.
    pub fn from_config(config: ProfilerConfig) -> Result<Self, ProfileError> {
        config.validate()?;
        let llm: Arc<dyn LlmClient> = match (&config.strategy, &config.endpoint) {
            (Strategy::Mock, _) => Arc::new(MockLlm),
            (_, Some(endpoint)) => Arc::new(HttpLlm::new(endpoint.clone(), config.model_name.clone(), config.decoding.clone())),
            (_, None) => unreachable!("validated above"),
        };
        let templates = match &config.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::default(),
        };
        Ok(Profiler { config, llm, templates })
    }

    /// Uses the given client regardless of strategy; the endpoint check is
    /// skipped.
    pub fn with_client(config: ProfilerConfig, llm: Arc<dyn LlmClient>, templates: TemplateSet) -> Result<Self, ProfileError> {
        if config.max_reflection_rounds == 0 {
            return Err(ProfileError::Config("max_reflection_rounds must be at least 1".into()));
        }
        Ok(Profiler { config, llm, templates })
    }

    pub fn config(&self) -> &ProfilerConfig {
        &self.config
    }

    /// Sends `prompt`; if the reply lacks `marker`, re-asks once with the
    /// required format appended.
    fn ask(&self, prompt: &str, marker: &'static str, format_line: &str, calls: &mut CallCounts) -> Result<String, ProfileError> {
        let first = self.llm.complete(prompt)?;
        if first.contains(marker) {
            return Ok(first);
        }
        calls.repair += 1;
        let repaired = format!("{prompt}\n\n{REPAIR_PREFIX}\n{format_line}");
        let second = self.llm.complete(&repaired)?;
        if second.contains(marker) {
            Ok(second)
        } else {
            Err(ProfileError::Parse { marker, raw: second })
        }
    }

    /// One summarization round over `items` (the liked items of an SBS).
    pub fn summarize(&self, prior_profile: &str, items: &[&BehaviorRecord]) -> Result<Drafted, ProfileError> {
        if items.is_empty() {
            return Err(ProfileError::InvalidInput("summarization needs at least one item".into()));
        }
        let prior = if prior_profile.trim().is_empty() { UNKNOWN_PROFILE } else { prior_profile };
        let listing = items.iter().map(|r| format!("- {}", r.display_text())).collect::<Vec<_>>().join("\n");
        let prompt = self
            .templates
            .get(Stage::Summarize)
            .render(&BTreeMap::from([("profile", prior), ("sequence_item_profile", listing.as_str())]))?;
        let mut calls = CallCounts { summarize: 1, ..Default::default() };
        let reply = self.ask(&prompt, SUMMARY_MARKER, "Summarization: {Your updated profile.}", &mut calls)?;
        let text = after_marker(&reply, SUMMARY_MARKER).ok_or(ProfileError::Parse { marker: SUMMARY_MARKER, raw: reply })?;
        Ok(Drafted { text, calls, wrong_first_choices: 0 })
    }

    /// Forward/backward loop for one (positive, negative) pair. The positive
    /// is shown as Item A when its position is even, as Item B otherwise.
    pub fn reflect(&self, prior_profile: &str, positive: &BehaviorRecord, negative: &BehaviorRecord) -> Result<Drafted, ProfileError> {
        if !positive.label.is_like() {
            return Err(ProfileError::InvalidInput(format!("positive item {} is not liked", positive.item_id)));
        }
        let mut profile = if prior_profile.trim().is_empty() { UNKNOWN_PROFILE.to_string() } else { prior_profile.to_string() };
        let positive_slot = if positive.position.is_multiple_of(2) { Slot::A } else { Slot::B };
        let (item_a, item_b) = match positive_slot {
            Slot::A => (positive.display_text(), negative.display_text()),
            Slot::B => (negative.display_text(), positive.display_text()),
        };
        let mut calls = CallCounts::default();
        let mut wrong_first = 0;
        let mut rounds = 0;
        loop {
            let prompt = self
                .templates
                .get(Stage::Forward)
                .render(&BTreeMap::from([("profile", profile.as_str()), ("item_a", item_a), ("item_b", item_b)]))?;
            calls.forward += 1;
            let reply = self.ask(&prompt, CHOICE_MARKER, "Chosen Item: {Item A or Item B}", &mut calls)?;
            let choice = parse_choice(&reply).ok_or_else(|| ProfileError::Parse { marker: CHOICE_MARKER, raw: reply.clone() })?;
            if choice == positive_slot {
                break;
            }
            if rounds == 0 {
                wrong_first = 1;
            }
            if rounds == self.config.max_reflection_rounds {
                break;
            }
            // the backward template always casts the wrong pick as Item A
            let prompt = self.templates.get(Stage::Backward).render(&BTreeMap::from([
                ("profile", profile.as_str()),
                ("item_a", negative.display_text()),
                ("item_b", positive.display_text()),
                ("response", reply.as_str()),
            ]))?;
            calls.backward += 1;
            let update = self.ask(&prompt, UPDATE_MARKER, "My updated profile: {Please write your updated profile here}", &mut calls)?;
            profile = after_marker(&update, UPDATE_MARKER).ok_or(ProfileError::Parse { marker: UPDATE_MARKER, raw: update })?;
            rounds += 1;
        }
        Ok(Drafted { text: profile, calls, wrong_first_choices: wrong_first })
    }
}

fn cluster_of(clusters: &ClusterSet, cluster_id: usize) -> Option<&crate::cluster::Cluster> {
    clusters.clusters.iter().find(|c| c.cluster_id == cluster_id)
}

fn profile_one(
    seq: &BehaviorSequence,
    clusters: &ClusterSet,
    sbs: &SubBehaviorSequence,
    profiler: &Profiler,
) -> ClusterProfile {
    let mut out = ClusterProfile { cluster_id: sbs.cluster_id, result: Err(ProfileError::NoLikedItems(sbs.cluster_id)), calls: CallCounts::default(), pairs: 0, wrong_first_choices: 0 };
    let record = |p: usize| seq.records.get(p);
    let liked: Vec<&BehaviorRecord> = sbs.selected_positions.iter().filter_map(|&p| record(p)).filter(|r| r.label.is_like()).collect();
    if liked.is_empty() {
        return out;
    }
    let strategy = profiler.config.strategy;
    let text = match strategy {
        Strategy::Summarization | Strategy::Mock => match profiler.summarize(UNKNOWN_PROFILE, &liked) {
            Ok(d) => {
                out.calls.add(&d.calls);
                Ok(d.text)
            }
            Err(e) => Err(e),
        },
        Strategy::Reflection => {
            let Some(cluster) = cluster_of(clusters, sbs.cluster_id) else {
                out.result = Err(ProfileError::InvalidInput(format!("unknown cluster {}", sbs.cluster_id)));
                return out;
            };
            let dislikes: Vec<&BehaviorRecord> =
                cluster.member_positions.iter().filter_map(|&p| record(p)).filter(|r| !r.label.is_like()).collect();
            let outside: Vec<&BehaviorRecord> =
                seq.records.iter().filter(|r| !cluster.member_positions.contains(&r.position)).collect();
            let mut profile = UNKNOWN_PROFILE.to_string();
            let mut failure = None;
            for (i, positive) in liked.iter().enumerate() {
                let negative = if !dislikes.is_empty() {
                    dislikes[i % dislikes.len()]
                } else if !outside.is_empty() {
                    let mut rng = ChaCha8Rng::seed_from_u64(profiler.config.seed ^ ((sbs.cluster_id as u64) << 32) ^ i as u64);
                    outside[rng.random_range(0..outside.len())]
                } else {
                    failure = Some(ProfileError::NoNegative(sbs.cluster_id));
                    break;
                };
                match profiler.reflect(&profile, positive, negative) {
                    Ok(d) => {
                        out.calls.add(&d.calls);
                        out.pairs += 1;
                        out.wrong_first_choices += d.wrong_first_choices;
                        profile = d.text;
                    }
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            match failure {
                Some(e) => Err(e),
                None => Ok(profile),
            }
        }
    };
    out.result = text.map(|text| PersonaDraft {
        token_estimate: token_estimate(&text),
        text,
        source_cluster: sbs.cluster_id,
        sbs_positions: sbs.selected_positions.clone(),
        strategy,
    });
    out
}

/// Profiles every cluster's SBS. Clusters are independent and run in
/// parallel; failures are reported per cluster.
pub fn profile_all_clusters(
    seq: &BehaviorSequence,
    clusters: &ClusterSet,
    sbs_list: &[SubBehaviorSequence],
    profiler: &Profiler,
    exec: Exec,
) -> Vec<ClusterProfile> {
    par::map(exec, sbs_list, |sbs| profile_one(seq, clusters, sbs, profiler))
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct PersonaLine {
    pub user_id: String,
    pub cluster_id: usize,
    pub strategy: Strategy,
    pub text: String,
    pub positions: Vec<usize>,
    pub created_at: i64,
}

/// Writes drafts as JSON lines.
pub fn write_persona_lines<W: std::io::Write>(user_id: &str, drafts: &[&PersonaDraft], created_at: i64, mut w: W) -> std::io::Result<()> {
    for d in drafts {
        let line = PersonaLine {
            user_id: user_id.to_string(),
            cluster_id: d.source_cluster,
            strategy: d.strategy,
            text: d.text.clone(),
            positions: d.sbs_positions.clone(),
            created_at,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
