//! Threshold-governed complete-linkage agglomerative clustering.
//!
//! Clusters keep merging while the smallest complete-linkage distance between
//! any two of them is strictly below `tau`. Because complete linkage is the
//! largest member-to-member distance, every produced cluster has all pairwise
//! distances `< tau`, and every pair of clusters ends with linkage `>= tau`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{euclidean, EmbeddingVector};
use crate::par::{self, Exec};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("cannot cluster an empty embedding list")]
    Empty,
    #[error("tau must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("embedding {0} has a non-finite entry")]
    NonFinite(usize),
    #[error("member index {0} is out of range")]
    MemberOutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: usize,
    /// Indices into the clustered embedding list, ascending.
    pub member_positions: Vec<usize>,
    pub centroid: EmbeddingVector,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.member_positions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub tau: f64,
}

impl ClusterSet {
    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::size).collect()
    }
}

/// One merge of the dendrogram. `left`/`right` are the working cluster ids
/// at merge time (the merged cluster keeps `left`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub step: usize,
    pub left: usize,
    pub right: usize,
    pub linkage_distance: f64,
}

/// Symmetric pairwise distance matrix, row-major.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn compute(embeddings: &[EmbeddingVector], exec: Exec) -> Self {
        let n = embeddings.len();
        let rows = par::map_range(exec, n, |i| {
            let a = embeddings[i].values();
            (0..n).map(|j| if i == j { 0.0 } else { euclidean(a, embeddings[j].values()) }).collect::<Vec<_>>()
        });
        let mut data = Vec::with_capacity(n * n);
        rows.into_iter().for_each(|r| data.extend(r));
        // euclidean() is symmetric bit-for-bit, so no fix-up is needed.
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

fn validate(embeddings: &[EmbeddingVector], tau: f64) -> Result<(), ClusterError> {
    if embeddings.is_empty() {
        return Err(ClusterError::Empty);
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ClusterError::InvalidTau(tau));
    }
    let dim = embeddings[0].dim();
    for (index, e) in embeddings.iter().enumerate() {
        if e.dim() != dim {
            return Err(ClusterError::DimensionMismatch { index, expected: dim, got: e.dim() });
        }
        if e.values().iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFinite(index));
        }
    }
    Ok(())
}

pub fn cluster_behaviors(embeddings: &[EmbeddingVector], tau: f64) -> Result<ClusterSet, ClusterError> {
    cluster_with_trace(embeddings, tau, Exec::default()).map(|(set, _)| set)
}

/// Clusters and also returns the merge trace.
pub fn cluster_with_trace(
    embeddings: &[EmbeddingVector],
    tau: f64,
    exec: Exec,
) -> Result<(ClusterSet, Vec<MergeStep>), ClusterError> {
    validate(embeddings, tau)?;
    let dist = DistanceMatrix::compute(embeddings, exec);
    let (groups, trace) = agglomerate(&dist, tau);
    let clusters = groups
        .into_iter()
        .enumerate()
        .map(|(cluster_id, member_positions)| {
            let centroid = mean_of(&member_positions, embeddings);
            Cluster { cluster_id, member_positions, centroid }
        })
        .collect();
    Ok((ClusterSet { clusters, tau }, trace))
}

/// Naive O(n^3) agglomeration on a precomputed matrix. Working cluster ids
/// start as point indices; a merge keeps the lower id. Output groups are
/// sorted by their smallest member.
fn agglomerate(dist: &DistanceMatrix, tau: f64) -> (Vec<Vec<usize>>, Vec<MergeStep>) {
    let n = dist.len();
    let mut linkage: Vec<f64> = (0..n * n).map(|k| dist.get(k / n, k % n)).collect();
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut trace = Vec::new();

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_none() {
                    continue;
                }
                let d = linkage[i * n + j];
                // strict `<` keeps the lexicographically first pair on ties
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        let Some((left, right, d)) = best.filter(|&(_, _, d)| d < tau) else {
            break;
        };
        let moved = members[right].take().unwrap_or_default();
        if let Some(m) = members[left].as_mut() {
            m.extend(moved);
        }
        for k in 0..n {
            if k == left || members[k].is_none() {
                continue;
            }
            let merged = linkage[left * n + k].max(linkage[right * n + k]);
            linkage[left * n + k] = merged;
            linkage[k * n + left] = merged;
        }
        trace.push(MergeStep { step: trace.len(), left, right, linkage_distance: d });
    }

    let mut groups: Vec<Vec<usize>> = members
        .into_iter()
        .flatten()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect();
    groups.sort_by_key(|g| g[0]);
    (groups, trace)
}

fn mean_of(members: &[usize], embeddings: &[EmbeddingVector]) -> EmbeddingVector {
    let dim = embeddings[members[0]].dim();
    let mut acc = vec![0.0; dim];
    for &m in members {
        for (a, v) in acc.iter_mut().zip(embeddings[m].values()) {
            *a += v;
        }
    }
    let count = members.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    EmbeddingVector::new(acc).expect("mean of finite vectors is finite")
}

/// Coordinate-wise mean of the cluster's member embeddings.
pub fn compute_centroid(member_positions: &[usize], embeddings: &[EmbeddingVector]) -> Result<EmbeddingVector, ClusterError> {
    if member_positions.is_empty() {
        return Err(ClusterError::Empty);
    }
    if let Some(&bad) = member_positions.iter().find(|&&p| p >= embeddings.len()) {
        return Err(ClusterError::MemberOutOfRange(bad));
    }
    Ok(mean_of(member_positions, embeddings))
}

/// Writes the merge trace as JSON lines.
pub fn write_merge_trace<W: Write>(trace: &[MergeStep], mut w: W) -> std::io::Result<()> {
    for step in trace {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
