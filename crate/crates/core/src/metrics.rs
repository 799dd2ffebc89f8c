//! Ranking evaluation with one relevant item per list: candidate sampling,
//! HR@k, NDCG@k, MRR@k, and a similarity ranker used as a stand-in
//! recommender.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::euclidean;
use crate::embed::{EmbedError, EmbeddingProvider};

pub const CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("negative pool has {available} items, {requested} requested")]
    PoolTooSmall { available: usize, requested: usize },
    #[error("positive item {0} is also in the negative pool")]
    PositiveInPool(String),
    #[error("positive item {0} missing from ranked list")]
    PositiveMissing(String),
    #[error("candidate {0} appears twice")]
    DuplicateCandidate(String),
    #[error("no ranked lists")]
    NoLists,
    #[error("embedding failed: {0}")]
    Embed(String),
}

impl From<EmbedError> for MetricsError {
    fn from(e: EmbedError) -> Self {
        MetricsError::Embed(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    /// Best first.
    pub candidate_ids: Vec<String>,
    pub positive_id: String,
}

impl RankedList {
    pub fn new(candidate_ids: Vec<String>, positive_id: impl Into<String>) -> Result<Self, MetricsError> {
        let positive_id = positive_id.into();
        let mut seen = HashSet::new();
        for c in &candidate_ids {
            if !seen.insert(c.as_str()) {
                return Err(MetricsError::DuplicateCandidate(c.clone()));
            }
        }
        if !seen.contains(positive_id.as_str()) {
            return Err(MetricsError::PositiveMissing(positive_id));
        }
        Ok(RankedList { candidate_ids, positive_id })
    }

    pub fn size(&self) -> usize {
        self.candidate_ids.len()
    }

    /// 1-based rank of the positive item.
    pub fn rank(&self) -> Result<usize, MetricsError> {
        self.candidate_ids
            .iter()
            .position(|c| *c == self.positive_id)
            .map(|i| i + 1)
            .ok_or_else(|| MetricsError::PositiveMissing(self.positive_id.clone()))
    }
}

/// The positive followed by `n_neg` distinct negatives drawn from `pool`.
pub fn build_candidates(positive: &str, pool: &[String], n_neg: usize, seed: u64) -> Result<Vec<String>, MetricsError> {
    if pool.iter().any(|p| p == positive) {
        return Err(MetricsError::PositiveInPool(positive.to_string()));
    }
    let unique: Vec<&String> = {
        let mut seen = HashSet::new();
        pool.iter().filter(|p| seen.insert(p.as_str())).collect()
    };
    if unique.len() < n_neg {
        return Err(MetricsError::PoolTooSmall { available: unique.len(), requested: n_neg });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, unique.len(), n_neg).into_vec();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(n_neg + 1);
    out.push(positive.to_string());
    out.extend(picks.into_iter().map(|i| unique[i].clone()));
    Ok(out)
}

pub fn hit_rate(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 } else { 0.0 }
}

pub fn ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 }
}

pub fn reciprocal_rank(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 / rank as f64 } else { 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hr_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub mrr_at: BTreeMap<usize, f64>,
    pub n_users: usize,
}

/// Averages over lists. Ranks are tallied first and summed in rank order,
/// so the result does not depend on list order.
pub fn compute_metrics(lists: &[RankedList]) -> Result<MetricReport, MetricsError> {
    if lists.is_empty() {
        return Err(MetricsError::NoLists);
    }
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for l in lists {
        *histogram.entry(l.rank()?).or_default() += 1;
    }
    let n = lists.len() as f64;
    let mean = |f: fn(usize, usize) -> f64, k: usize| histogram.iter().map(|(&r, &c)| c as f64 * f(r, k)).sum::<f64>() / n;
    let table = |f: fn(usize, usize) -> f64| CUTOFFS.iter().map(|&k| (k, mean(f, k))).collect();
    Ok(MetricReport {
        hr_at: table(hit_rate),
        ndcg_at: table(ndcg),
        mrr_at: table(reciprocal_rank),
        n_users: lists.len(),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    fn at(map: &BTreeMap<usize, f64>, k: usize) -> f64 {
        map.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn render_table(&self) -> String {
        let cols = [
            ("HR@1", Self::at(&self.hr_at, 1)),
            ("HR@5", Self::at(&self.hr_at, 5)),
            ("NDCG@5", Self::at(&self.ndcg_at, 5)),
            ("MRR@10", Self::at(&self.mrr_at, 10)),
        ];
        let head: Vec<String> = cols.iter().map(|(h, _)| format!("{h:>8}")).collect();
        let vals: Vec<String> = cols.iter().map(|(_, v)| format!("{:>8.4}", v)).collect();
        format!("{}  {:>7}\n{}  {:>7}\n", head.join(" "), "users", vals.join(" "), self.n_users)
    }
}

/// A candidate to rank: id plus the text it is embedded from.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub item_id: String,
    pub text: String,
}

/// Sorts candidates by (distance, item_id) ascending given precomputed
/// distances.
pub fn rank_by_distance(candidates: &[Candidate], distances: &[f64], positive_id: &str) -> Result<RankedList, MetricsError> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then_with(|| candidates[a].item_id.cmp(&candidates[b].item_id)));
    RankedList::new(order.into_iter().map(|i| candidates[i].item_id.clone()).collect(), positive_id)
}

/// Scores each candidate by negative distance between the embedded persona
/// text and the embedded candidate text.
pub fn rank_by_persona(
    persona: &str,
    candidates: &[Candidate],
    positive_id: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<RankedList, MetricsError> {
    let p = provider.embed_text(persona)?;
    let mut distances = Vec::with_capacity(candidates.len());
    for c in candidates {
        let e = provider.embed_text(&c.text)?;
        distances.push(euclidean(p.values(), e.values()));
    }
    rank_by_distance(candidates, &distances, positive_id)
}
