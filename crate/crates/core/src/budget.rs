//! Sampling budget allocation across clusters.
//!
//! Clusters are visited smallest first; each gets `min(size, B / r)` where `B`
//! is the budget still unassigned and `r` the clusters not yet visited. Small
//! clusters are therefore served in full before large ones split what is
//! left. The budget is clamped to the total cluster size first, which makes
//! the trailing one-unit-at-a-time distribution loop terminate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("no clusters to allocate over")]
    NoClusters,
    #[error("cluster {index} has size 0")]
    EmptyCluster { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    /// Aligned with the input cluster order.
    pub allocations: Vec<usize>,
    /// Requested budget.
    pub budget: usize,
    /// `min(budget, sum of sizes)`, the amount actually distributed.
    pub effective_budget: usize,
}

pub fn allocate_budget(sizes: &[usize], k: usize) -> Result<BudgetAllocation, BudgetError> {
    if sizes.is_empty() {
        return Err(BudgetError::NoClusters);
    }
    if let Some(index) = sizes.iter().position(|&s| s == 0) {
        return Err(BudgetError::EmptyCluster { index });
    }
    let total: usize = sizes.iter().sum();
    let effective = k.min(total);

    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| sizes[i]); // stable: equal sizes keep input order

    let mut alloc = vec![0usize; sizes.len()];
    let mut remaining = effective;
    for (visited, &i) in order.iter().enumerate() {
        let clusters_left = sizes.len() - visited;
        let share = remaining / clusters_left;
        alloc[i] = sizes[i].min(share);
        remaining -= alloc[i];
    }
    while remaining > 0 {
        for &i in &order {
            if remaining == 0 {
                break;
            }
            if alloc[i] < sizes[i] {
                alloc[i] += 1;
                remaining -= 1;
            }
        }
    }
    Ok(BudgetAllocation { allocations: alloc, budget: k, effective_budget: effective })
}

/// Total SBS budget for a history of length `n`: `round(n * ratio)`, raised to
/// at least one behavior per cluster and capped at `n`.
pub fn effective_budget(n: usize, ratio: f64, m: usize) -> usize {
    let target = (n as f64 * ratio.clamp(0.0, 1.0)).round() as usize;
    target.max(m).min(n)
}
