//! In-cluster selection balancing prototypicality and diversity.
//!
//! For a cluster with centroid `mu` and quota `a`, a subset `S` scores
//!
//! ```text
//! w_p * sum_{j in S} 1 / (1 + d(e_j, mu))  +  w_d * (2 / a) * sum_{pairs {x,y} in S} d(e_x, e_y)
//! ```
//!
//! The first term is modular, the second supermodular. [`dynamic_select`]
//! seeds with the member nearest the centroid and then adds the member with
//! the largest marginal gain until the quota is met.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{euclidean, EmbeddingVector};
use crate::cluster::Cluster;

/// Largest cluster the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX_SIZE: usize = 15;
/// Largest quota the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX_QUOTA: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("alpha must be finite and > 1, got {0}")]
    InvalidAlpha(f64),
    #[error("weights must lie in [0, 1] and sum to 1 (w_p = {w_p}, w_d = {w_d})")]
    InvalidWeights { w_p: f64, w_d: f64 },
    #[error("quota must be at least 1")]
    ZeroQuota,
    #[error("quota {quota} exceeds cluster size {size}")]
    QuotaTooLarge { quota: usize, size: usize },
    #[error("position {0} is not a member of the cluster")]
    NotAMember(usize),
    #[error("position {0} has no embedding")]
    MissingEmbedding(usize),
    #[error("candidate {0} is already selected")]
    AlreadySelected(usize),
    #[error(
        "exhaustive search is limited to clusters of at most {BRUTE_FORCE_MAX_SIZE} members and quotas of at most \
         {BRUTE_FORCE_MAX_QUOTA} (got size {size}, quota {quota}); use dynamic_select for larger instances"
    )]
    OracleLimit { size: usize, quota: usize },
    #[error("cluster needs at least 2 members to measure curvature")]
    TooSmall,
    #[error("curvature ratio {0} is outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("no ratios supplied")]
    NoRatios,
    #[error("member {0} has zero diversity gain against the rest of the cluster (coincident points)")]
    ZeroDenominator(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    /// `None` when the weights were given directly.
    pub alpha: Option<f64>,
    pub w_p: f64,
    pub w_d: f64,
}

impl SelectionWeights {
    /// Explicit weights; must be nonnegative and sum to 1.
    pub fn new(w_p: f64, w_d: f64) -> Result<Self, SelectError> {
        let ok = (0.0..=1.0).contains(&w_p) && (0.0..=1.0).contains(&w_d) && (w_p + w_d - 1.0).abs() <= 1e-12;
        if !ok {
            return Err(SelectError::InvalidWeights { w_p, w_d });
        }
        Ok(SelectionWeights { alpha: None, w_p, w_d })
    }
}

/// `w_p = alpha^-10`, `w_d = 1 - w_p`. Alpha near 1.001 is centroid-like,
/// near 1.4 boundary-like.
pub fn weights_from_alpha(alpha: f64) -> Result<SelectionWeights, SelectError> {
    if !(alpha.is_finite() && alpha > 1.0) {
        return Err(SelectError::InvalidAlpha(alpha));
    }
    let w_p = alpha.powi(-10);
    Ok(SelectionWeights { alpha: Some(alpha), w_p, w_d: 1.0 - w_p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBehaviorSequence {
    pub cluster_id: usize,
    /// Ascending, which is chronological order.
    pub selected_positions: Vec<usize>,
    pub objective_value: f64,
}

/// Precomputed geometry of one cluster: distances to the centroid and
/// between members, indexed by member slot (ascending position).
#[derive(Debug, Clone)]
pub struct ClusterGeometry {
    positions: Vec<usize>,
    to_centroid: Vec<f64>,
    pairwise: Vec<f64>,
}

impl ClusterGeometry {
    pub fn new(cluster: &Cluster, embeddings: &[EmbeddingVector]) -> Result<Self, SelectError> {
        let mut positions = cluster.member_positions.clone();
        positions.sort_unstable();
        positions.dedup();
        let vecs = positions
            .iter()
            .map(|&p| embeddings.get(p).map(EmbeddingVector::values).ok_or(SelectError::MissingEmbedding(p)))
            .collect::<Result<Vec<_>, _>>()?;
        let mu = cluster.centroid.values();
        let to_centroid = vecs.iter().map(|v| euclidean(v, mu)).collect();
        let n = vecs.len();
        let mut pairwise = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclidean(vecs[i], vecs[j]);
                pairwise[i * n + j] = d;
                pairwise[j * n + i] = d;
            }
        }
        Ok(ClusterGeometry { positions, to_centroid, pairwise })
    }

    pub fn size(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    fn slot(&self, position: usize) -> Result<usize, SelectError> {
        self.positions.binary_search(&position).map_err(|_| SelectError::NotAMember(position))
    }

    #[inline]
    fn pair(&self, i: usize, j: usize) -> f64 {
        self.pairwise[i * self.positions.len() + j]
    }

    fn prototypicality(&self, slot: usize) -> f64 {
        1.0 / (1.0 + self.to_centroid[slot])
    }

    fn value_of_slots(&self, slots: &[usize], weights: &SelectionWeights, quota: usize) -> f64 {
        let proto: f64 = slots.iter().map(|&s| self.prototypicality(s)).sum();
        let mut spread = 0.0;
        for (i, &a) in slots.iter().enumerate() {
            for &b in &slots[i + 1..] {
                spread += self.pair(a, b);
            }
        }
        weights.w_p * proto + weights.w_d * (2.0 / quota as f64) * spread
    }

    fn gains_of_slot(&self, slot: usize, selected: &[usize], weights: &SelectionWeights, quota: usize) -> (f64, f64) {
        let g_p = weights.w_p * self.prototypicality(slot);
        let spread: f64 = selected.iter().map(|&b| self.pair(slot, b)).sum();
        (g_p, 2.0 * weights.w_d / quota as f64 * spread)
    }

    fn nearest_centroid_slot(&self) -> usize {
        let mut best = 0;
        for s in 1..self.size() {
            if self.to_centroid[s] < self.to_centroid[best] {
                best = s;
            }
        }
        best
    }

    fn slots_of(&self, subset: &[usize]) -> Result<Vec<usize>, SelectError> {
        let mut seen = HashSet::new();
        subset
            .iter()
            .filter(|p| seen.insert(**p))
            .map(|&p| self.slot(p))
            .collect()
    }

    pub fn objective_value(&self, subset: &[usize], weights: &SelectionWeights, quota: usize) -> Result<f64, SelectError> {
        if quota == 0 {
            return Err(SelectError::ZeroQuota);
        }
        let slots = self.slots_of(subset)?;
        Ok(self.value_of_slots(&slots, weights, quota))
    }
}

/// Objective of `subset` (sequence positions) within `cluster`.
pub fn objective_value(
    subset: &[usize],
    cluster: &Cluster,
    embeddings: &[EmbeddingVector],
    weights: &SelectionWeights,
    quota: usize,
) -> Result<f64, SelectError> {
    ClusterGeometry::new(cluster, embeddings)?.objective_value(subset, weights, quota)
}

/// `(g_p, g_d)` for adding `candidate` to `selected`.
pub fn marginal_gains(
    candidate: usize,
    selected: &[usize],
    cluster: &Cluster,
    embeddings: &[EmbeddingVector],
    weights: &SelectionWeights,
    quota: usize,
) -> Result<(f64, f64), SelectError> {
    if quota == 0 {
        return Err(SelectError::ZeroQuota);
    }
    if selected.contains(&candidate) {
        return Err(SelectError::AlreadySelected(candidate));
    }
    let geo = ClusterGeometry::new(cluster, embeddings)?;
    let slot = geo.slot(candidate)?;
    let selected = geo.slots_of(selected)?;
    Ok(geo.gains_of_slot(slot, &selected, weights, quota))
}

/// Greedy selection of `quota` members. Returns the selection in
/// chronological order together with the objective after each insertion.
pub fn greedy_trace(geo: &ClusterGeometry, quota: usize, weights: &SelectionWeights) -> Result<(Vec<usize>, Vec<f64>), SelectError> {
    if quota == 0 {
        return Err(SelectError::ZeroQuota);
    }
    if quota > geo.size() {
        return Err(SelectError::QuotaTooLarge { quota, size: geo.size() });
    }
    let mut chosen = vec![geo.nearest_centroid_slot()];
    let mut taken = vec![false; geo.size()];
    taken[chosen[0]] = true;
    let mut values = vec![geo.value_of_slots(&chosen, weights, quota)];
    while chosen.len() < quota {
        let mut best: Option<(usize, f64)> = None;
        for slot in (0..geo.size()).filter(|&s| !taken[s]) {
            let (g_p, g_d) = geo.gains_of_slot(slot, &chosen, weights, quota);
            let gain = g_p + g_d;
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((slot, gain));
            }
        }
        let (slot, _) = best.expect("quota <= size leaves a candidate");
        taken[slot] = true;
        chosen.push(slot);
        values.push(geo.value_of_slots(&chosen, weights, quota));
    }
    let mut positions: Vec<usize> = chosen.iter().map(|&s| geo.positions[s]).collect();
    positions.sort_unstable();
    Ok((positions, values))
}

pub fn dynamic_select(
    cluster: &Cluster,
    embeddings: &[EmbeddingVector],
    quota: usize,
    weights: &SelectionWeights,
) -> Result<SubBehaviorSequence, SelectError> {
    let geo = ClusterGeometry::new(cluster, embeddings)?;
    let (selected_positions, values) = greedy_trace(&geo, quota, weights)?;
    Ok(SubBehaviorSequence {
        cluster_id: cluster.cluster_id,
        selected_positions,
        objective_value: *values.last().unwrap_or(&0.0),
    })
}

/// Exhaustive maximiser over all `quota`-subsets; ties go to the
/// lexicographically smallest position set.
pub fn brute_force_select(
    cluster: &Cluster,
    embeddings: &[EmbeddingVector],
    quota: usize,
    weights: &SelectionWeights,
) -> Result<(Vec<usize>, f64), SelectError> {
    let geo = ClusterGeometry::new(cluster, embeddings)?;
    brute_force_on(&geo, quota, weights)
}

pub fn brute_force_on(geo: &ClusterGeometry, quota: usize, weights: &SelectionWeights) -> Result<(Vec<usize>, f64), SelectError> {
    let size = geo.size();
    if size > BRUTE_FORCE_MAX_SIZE || quota > BRUTE_FORCE_MAX_QUOTA {
        return Err(SelectError::OracleLimit { size, quota });
    }
    if quota == 0 {
        return Err(SelectError::ZeroQuota);
    }
    if quota > size {
        return Err(SelectError::QuotaTooLarge { quota, size });
    }
    let mut combo: Vec<usize> = (0..quota).collect();
    let mut best = (combo.clone(), geo.value_of_slots(&combo, weights, quota));
    // lexicographic successor of a k-combination of 0..size
    while let Some(i) = (0..quota).rev().find(|&i| combo[i] < size - quota + i) {
        combo[i] += 1;
        for j in (i + 1)..quota {
            combo[j] = combo[j - 1] + 1;
        }
        let v = geo.value_of_slots(&combo, weights, quota);
        if v > best.1 {
            best = (combo.clone(), v);
        }
    }
    Ok((best.0.iter().map(|&s| geo.positions[s]).collect(), best.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub kappa_f: f64,
    pub kappa_g: f64,
    pub bound: f64,
    /// `(r_g, r_f)` per point.
    pub pointwise_ratios: Vec<(f64, f64)>,
}

/// Worst-case greedy ratio for a monotone submodular-plus-supermodular
/// objective: `(1/kf) * (1 - exp(-kf * (1 - kg)))`, with the `kf -> 0`
/// limit `1 - kg`.
pub fn greedy_bound(kappa_f: f64, kappa_g: f64) -> f64 {
    let slack = 1.0 - kappa_g;
    if kappa_f <= f64::EPSILON {
        return slack;
    }
    -(-kappa_f * slack).exp_m1() / kappa_f
}

pub fn curvature_from_ratios(ratios: &[(f64, f64)]) -> Result<CurvatureReport, SelectError> {
    if ratios.is_empty() {
        return Err(SelectError::NoRatios);
    }
    for &(rg, rf) in ratios {
        for r in [rg, rf] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(SelectError::RatioOutOfRange(r));
            }
        }
    }
    let min_g = ratios.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let min_f = ratios.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let kappa_g = 1.0 - min_g;
    let kappa_f = 1.0 - min_f;
    Ok(CurvatureReport { kappa_f, kappa_g, bound: greedy_bound(kappa_f, kappa_g), pointwise_ratios: ratios.to_vec() })
}

/// Measures both curvatures on the whole cluster `V`.
///
/// The prototypicality part is modular, so `r_f = 1` for every member. For
/// the diversity part the singleton value of a lone member is zero, which
/// would pin the curvature at 1; the greedy never evaluates diversity on an
/// empty set because it is seeded first, so the singleton term is taken as
/// the smallest one-neighbour gain `min_u d(v, u)` and compared against the
/// full-complement gain `sum_u d(v, u)` (the `2/a` factor cancels).
pub fn measure_instance_curvatures(cluster: &Cluster, embeddings: &[EmbeddingVector]) -> Result<CurvatureReport, SelectError> {
    let geo = ClusterGeometry::new(cluster, embeddings)?;
    measure_curvatures_on(&geo)
}

pub fn measure_curvatures_on(geo: &ClusterGeometry) -> Result<CurvatureReport, SelectError> {
    let n = geo.size();
    if n < 2 {
        return Err(SelectError::TooSmall);
    }
    let mut ratios = Vec::with_capacity(n);
    for v in 0..n {
        let others = (0..n).filter(|&u| u != v).map(|u| geo.pair(v, u));
        let (mut least, mut total) = (f64::INFINITY, 0.0);
        for d in others {
            least = least.min(d);
            total += d;
        }
        if total == 0.0 {
            return Err(SelectError::ZeroDenominator(geo.positions[v]));
        }
        // f(v | V \ {v}) = f(v) for a modular f
        ratios.push((least / total, 1.0));
    }
    curvature_from_ratios(&ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::compute_centroid;

    fn line(xs: &[f64]) -> (Cluster, Vec<EmbeddingVector>) {
        let e: Vec<_> = xs.iter().map(|&x| EmbeddingVector::new(vec![x]).unwrap()).collect();
        let members: Vec<usize> = (0..xs.len()).collect();
        let centroid = compute_centroid(&members, &e).unwrap();
        (Cluster { cluster_id: 0, member_positions: members, centroid }, e)
    }

    #[test]
    fn weight_fixtures() {
        let w = weights_from_alpha(1.06).unwrap();
        assert!((w.w_p - 0.558394776).abs() < 1e-8);
        assert!((w.w_d - 0.441605224).abs() < 1e-8);
        assert!((weights_from_alpha(1.001).unwrap().w_p - 0.990054781).abs() < 1e-8);
        assert!((weights_from_alpha(1.4).unwrap().w_p - 0.034571613).abs() < 1e-8);
        assert_eq!(weights_from_alpha(1.0), Err(SelectError::InvalidAlpha(1.0)));
        assert!(weights_from_alpha(0.5).is_err());
    }

    #[test]
    fn objective_fixtures() {
        let (c, e) = line(&[0.0, 0.1, 1.0]);
        let half = SelectionWeights::new(0.5, 0.5).unwrap();
        assert_eq!(objective_value(&[], &c, &e, &half, 2).unwrap(), 0.0);
        let v = objective_value(&[0, 2], &c, &e, &half, 2).unwrap();
        let mu = 1.1 / 3.0;
        let expected = 0.5 * (1.0 / (1.0 + mu) + 1.0 / (1.0 + (1.0 - mu))) + 0.5 * 1.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 1.1720).abs() < 5e-5);
        assert_eq!(objective_value(&[7], &c, &e, &half, 2), Err(SelectError::NotAMember(7)));

        let (c1, e1) = line(&[4.0]);
        let proto = SelectionWeights::new(1.0, 0.0).unwrap();
        assert_eq!(objective_value(&[0], &c1, &e1, &proto, 1).unwrap(), 1.0);
    }

    #[test]
    fn gain_fixtures() {
        let (c, e) = line(&[0.0, 0.1, 1.0]);
        let div = SelectionWeights::new(0.0, 1.0).unwrap();
        let (_, g_d) = marginal_gains(2, &[1], &c, &e, &div, 2).unwrap();
        assert!((g_d - 0.9).abs() < 1e-12);
        let (_, g_d) = marginal_gains(2, &[], &c, &e, &div, 2).unwrap();
        assert_eq!(g_d, 0.0);
        let (c1, e1) = line(&[2.0]);
        let w = weights_from_alpha(1.06).unwrap();
        let (g_p, _) = marginal_gains(0, &[], &c1, &e1, &w, 1).unwrap();
        assert_eq!(g_p, w.w_p);
        assert_eq!(marginal_gains(1, &[1], &c, &e, &div, 2), Err(SelectError::AlreadySelected(1)));
    }

    #[test]
    fn greedy_fixtures() {
        let (c, e) = line(&[0.0, 0.1, 1.0]);
        let proto = SelectionWeights::new(1.0, 0.0).unwrap();
        assert_eq!(dynamic_select(&c, &e, 2, &proto).unwrap().selected_positions, vec![0, 1]);
        let div = SelectionWeights::new(0.0, 1.0).unwrap();
        assert_eq!(dynamic_select(&c, &e, 2, &div).unwrap().selected_positions, vec![1, 2]);
        let all = dynamic_select(&c, &e, 3, &weights_from_alpha(1.4).unwrap()).unwrap();
        assert_eq!(all.selected_positions, vec![0, 1, 2]);
        assert_eq!(dynamic_select(&c, &e, 0, &div), Err(SelectError::ZeroQuota));
        assert_eq!(dynamic_select(&c, &e, 4, &div), Err(SelectError::QuotaTooLarge { quota: 4, size: 3 }));
    }

    #[test]
    fn brute_force_fixtures() {
        let (c, e) = line(&[0.0, 0.1, 1.0]);
        let half = SelectionWeights::new(0.5, 0.5).unwrap();
        let (best, v) = brute_force_select(&c, &e, 2, &half).unwrap();
        assert_eq!(best, vec![0, 2]);
        assert!((v - 1.1720).abs() < 5e-5);
        let proto = SelectionWeights::new(1.0, 0.0).unwrap();
        assert_eq!(brute_force_select(&c, &e, 1, &proto).unwrap().0, vec![1]);
        assert_eq!(brute_force_select(&c, &e, 3, &half).unwrap().0, vec![0, 1, 2]);
        let (big, eb) = line(&(0..16).map(f64::from).collect::<Vec<_>>());
        assert!(matches!(brute_force_select(&big, &eb, 2, &half), Err(SelectError::OracleLimit { size: 16, .. })));
    }

    #[test]
    fn curvature_fixtures() {
        let modular = curvature_from_ratios(&[(1.0, 1.0), (1.0, 1.0)]).unwrap();
        assert_eq!((modular.kappa_f, modular.kappa_g), (0.0, 0.0));
        assert_eq!(modular.bound, 1.0);
        let b = greedy_bound(0.9304, 0.9806);
        let direct = (1.0 / 0.9304) * (1.0 - (-0.9304f64 * (1.0 - 0.9806)).exp());
        assert!((b - direct).abs() < 1e-15);
        assert!((b - 0.0192).abs() < 5e-5);
        assert!(matches!(curvature_from_ratios(&[(0.0, 0.5)]), Err(SelectError::RatioOutOfRange(_))));
        assert!(matches!(curvature_from_ratios(&[(0.5, 1.2)]), Err(SelectError::RatioOutOfRange(_))));
        assert_eq!(curvature_from_ratios(&[]), Err(SelectError::NoRatios));
    }

    #[test]
    fn two_point_cluster_has_zero_curvature() {
        let (c, e) = line(&[0.0, 3.0]);
        let r = measure_instance_curvatures(&c, &e).unwrap();
        assert_eq!(r.kappa_g, 0.0);
        assert_eq!(r.kappa_f, 0.0);
        assert_eq!(r.bound, 1.0);
    }

    #[test]
    fn coincident_points_rejected() {
        let (c, e) = line(&[1.0, 1.0, 1.0]);
        assert_eq!(measure_instance_curvatures(&c, &e), Err(SelectError::ZeroDenominator(0)));
        let (c1, e1) = line(&[1.0]);
        assert_eq!(measure_instance_curvatures(&c1, &e1), Err(SelectError::TooSmall));
    }
}
