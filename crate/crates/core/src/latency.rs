//! Analytic offline/online cost model for the six agent × profiling
//! strategy combinations.
//!
//! Big-O rows are evaluated with unit constants. The throughput terms
//! (`1/F`, `n log k / F`) are kept in a separate column so the headline
//! per-call figure matches the symbolic row exactly while the full value
//! still includes them.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("cost parameter {name} must be strictly positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("empty parameter grid")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentStrategy {
    AgentCfRecent,
    AgentCfRelevance,
    Agent4RecRecent,
    Agent4RecRelevance,
    AgentCfPersona,
    Agent4RecPersona,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agent {
    AgentCf,
    Agent4Rec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Recent,
    Relevance,
    Persona,
}

impl AgentStrategy {
    pub const ALL: [AgentStrategy; 6] = [
        AgentStrategy::AgentCfRecent,
        AgentStrategy::AgentCfRelevance,
        AgentStrategy::Agent4RecRecent,
        AgentStrategy::Agent4RecRelevance,
        AgentStrategy::AgentCfPersona,
        AgentStrategy::Agent4RecPersona,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AgentStrategy::AgentCfRecent => "AgentCF_Recent",
            AgentStrategy::AgentCfRelevance => "AgentCF_Relevance",
            AgentStrategy::Agent4RecRecent => "Agent4Rec_Recent",
            AgentStrategy::Agent4RecRelevance => "Agent4Rec_Relevance",
            AgentStrategy::AgentCfPersona => "AgentCF_Persona",
            AgentStrategy::Agent4RecPersona => "Agent4Rec_Persona",
        }
    }

    pub fn agent(self) -> Agent {
        match self {
            AgentStrategy::AgentCfRecent | AgentStrategy::AgentCfRelevance | AgentStrategy::AgentCfPersona => Agent::AgentCf,
            _ => Agent::Agent4Rec,
        }
    }

    pub fn sampling(self) -> Sampling {
        match self {
            AgentStrategy::AgentCfRecent | AgentStrategy::Agent4RecRecent => Sampling::Recent,
            AgentStrategy::AgentCfRelevance | AgentStrategy::Agent4RecRelevance => Sampling::Relevance,
            _ => Sampling::Persona,
        }
    }

    fn with_sampling(agent: Agent, sampling: Sampling) -> AgentStrategy {
        *Self::ALL.iter().find(|s| s.agent() == agent && s.sampling() == sampling).expect("all combinations exist")
    }
}

impl fmt::Display for AgentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgentStrategy {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| CostError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// History length.
    pub n: f64,
    /// Cluster (persona) count.
    pub c: f64,
    /// Seconds per LLM call.
    pub t: f64,
    /// Seconds per embedding call.
    pub d_embed: f64,
    /// SBS length.
    pub k: f64,
    /// Candidate items per inference.
    pub n_i: f64,
    /// Calls served per persona build.
    pub d_calls: f64,
    /// Floating-point throughput, ops/second.
    pub f: f64,
    /// Embedding dimension used for the clustering term.
    pub dim: f64,
    /// Measured clustering + allocation + selection wall time; replaces the
    /// analytic estimate when set.
    pub selection_seconds: Option<f64>,
    /// Charge cached-persona rows once per call over the D-call window too.
    /// Off by default: only the rebuild-per-call strategies scale with D.
    pub persona_scales_with_d: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            n: 500.0,
            c: 20.0,
            t: 3.0,
            d_embed: 0.1,
            k: 10.0,
            n_i: 10.0,
            d_calls: 10.0,
            f: 1e9,
            dim: 768.0,
            selection_seconds: None,
            persona_scales_with_d: false,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("n", self.n),
            ("C", self.c),
            ("T", self.t),
            ("d", self.d_embed),
            ("k", self.k),
            ("N_I", self.n_i),
            ("D", self.d_calls),
            ("F", self.f),
            ("dim", self.dim),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(CostError::NonPositive { name, value });
            }
        }
        if let Some(s) = self.selection_seconds {
            if !(s.is_finite() && s >= 0.0) {
                return Err(CostError::NonPositive { name: "selection_seconds", value: s });
            }
        }
        Ok(())
    }

    /// Clustering, allocation and selection cost: measured if known, else
    /// `n²·dim/F` for the distance matrix plus linear terms.
    pub fn selection_term(&self) -> f64 {
        self.selection_seconds.unwrap_or((self.n * self.n * self.dim + 2.0 * self.n) / self.f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub strategy: AgentStrategy,
    pub offline_seconds: f64,
    /// The symbolic row with throughput terms dropped.
    pub online_seconds_per_call: f64,
    /// The `1/F` and `n log k / F` terms of one call.
    pub throughput_seconds_per_call: f64,
    /// `(per_call + throughput) × D` for strategies that rebuild the
    /// profile every call; a single call's cost for cached-persona rows
    /// unless `persona_scales_with_d` is set.
    pub online_seconds_total: f64,
}

impl CostBreakdown {
    pub fn full_per_call(&self) -> f64 {
        self.online_seconds_per_call + self.throughput_seconds_per_call
    }
}

pub fn cost_of(strategy: AgentStrategy, p: &CostParams) -> Result<CostBreakdown, CostError> {
    p.validate()?;
    let CostParams { n, c, t, d_embed: d, k, n_i, f, .. } = *p;
    let nlogk = n * k.log2().max(0.0);
    let (offline, per_call, throughput) = match strategy {
        AgentStrategy::AgentCfRecent => (0.0, 2.0 * k * t + n_i * t, 1.0 / f),
        AgentStrategy::AgentCfRelevance => (n * d, n_i * (2.0 * k * t + d + t), n_i * nlogk / f),
        AgentStrategy::Agent4RecRecent => (0.0, t + n_i * t, 1.0 / f),
        AgentStrategy::Agent4RecRelevance => (n * d, n_i * (d + 2.0 * t), n_i * nlogk / f),
        AgentStrategy::AgentCfPersona => (c * 2.0 * k * t + n * d + p.selection_term(), n_i * (t + d), n_i / f),
        AgentStrategy::Agent4RecPersona => (c * t + n * d + p.selection_term(), n_i * (t + d), n_i / f),
    };
    let scale = if strategy.sampling() == Sampling::Persona && !p.persona_scales_with_d { 1.0 } else { p.d_calls };
    Ok(CostBreakdown {
        strategy,
        offline_seconds: offline,
        online_seconds_per_call: per_call,
        throughput_seconds_per_call: throughput,
        online_seconds_total: (per_call + throughput) * scale,
    })
}

/// Cartesian grid over the parameters the comparison varies.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGrid {
    pub base: CostParams,
    pub n_i: Vec<f64>,
    pub n: Vec<f64>,
    pub k: Vec<f64>,
}

impl CostGrid {
    /// Defaults with `N_I ∈ {5, 10, 20}`.
    pub fn standard() -> Self {
        let base = CostParams::default();
        CostGrid { n: vec![base.n], k: vec![base.k], n_i: vec![5.0, 10.0, 20.0], base }
    }

    pub fn points(&self) -> Vec<CostParams> {
        let mut out = Vec::new();
        for &n_i in &self.n_i {
            for &n in &self.n {
                for &k in &self.k {
                    out.push(CostParams { n_i, n, k, ..self.base.clone() });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub n_i: f64,
    pub n: f64,
    pub k: f64,
    pub strategy: AgentStrategy,
    pub offline_seconds: f64,
    pub online_per_call: f64,
    pub online_total: f64,
    /// Percent saved versus the same agent's Recent row (persona rows only).
    pub savings_vs_recent: Option<f64>,
    pub savings_vs_relevance: Option<f64>,
}

pub fn compare_scenarios(grid: &[CostParams]) -> Result<Vec<ScenarioRow>, CostError> {
    if grid.is_empty() {
        return Err(CostError::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(grid.len() * 6);
    for p in grid {
        let costs = AgentStrategy::ALL.map(|s| cost_of(s, p));
        let total = |s: AgentStrategy| -> Result<f64, CostError> {
            let i = AgentStrategy::ALL.iter().position(|x| *x == s).expect("listed");
            costs[i].as_ref().map(|c| c.online_seconds_total).map_err(Clone::clone)
        };
        for (s, cost) in AgentStrategy::ALL.into_iter().zip(&costs) {
            let cost = cost.as_ref().map_err(Clone::clone)?;
            let saving = |other: Sampling| -> Result<Option<f64>, CostError> {
                if s.sampling() != Sampling::Persona {
                    return Ok(None);
                }
                let base = total(AgentStrategy::with_sampling(s.agent(), other))?;
                Ok(Some(100.0 * (1.0 - cost.online_seconds_total / base)))
            };
            rows.push(ScenarioRow {
                n_i: p.n_i,
                n: p.n,
                k: p.k,
                strategy: s,
                offline_seconds: cost.offline_seconds,
                online_per_call: cost.full_per_call(),
                online_total: cost.online_seconds_total,
                savings_vs_recent: saving(Sampling::Recent)?,
                savings_vs_relevance: saving(Sampling::Relevance)?,
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

pub fn write_scenarios_csv<W: Write>(rows: &[ScenarioRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "N_I",
        "n",
        "k",
        "strategy",
        "offline_s",
        "online_per_call_s",
        "online_total_s",
        "savings_vs_recent_pct",
        "savings_vs_relevance_pct",
    ])?;
    for r in rows {
        out.write_record([
            r.n_i.to_string(),
            r.n.to_string(),
            r.k.to_string(),
            r.strategy.label().to_string(),
            format!("{:.6}", r.offline_seconds),
            format!("{:.6}", r.online_per_call),
            format!("{:.6}", r.online_total),
            opt(r.savings_vs_recent),
            opt(r.savings_vs_relevance),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn render_scenarios_table(rows: &[ScenarioRow]) -> String {
    let header = ["N_I", "n", "k", "strategy", "offline s", "per call s", "total s", "vs Recent %", "vs Relevance %"];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.n_i.to_string(),
                r.n.to_string(),
                r.k.to_string(),
                r.strategy.label().to_string(),
                format!("{:.2}", r.offline_seconds),
                format!("{:.2}", r.online_per_call),
                format!("{:.2}", r.online_total),
                opt(r.savings_vs_recent),
                opt(r.savings_vs_relevance),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&header, &mut out);
    for row in &body {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&cells, &mut out);
    }
    out
}

/// LLM calls needed to build personas, per profiling style: one per cluster
/// for summarization; for reflection one forward call per selected positive
/// plus a backward and a second forward call for each wrong first choice.
pub fn summarization_calls(clusters: usize) -> usize {
    clusters
}

pub fn reflection_calls(sbs_lengths: &[usize], wrong_first_choices: &[usize]) -> usize {
    sbs_lengths.iter().sum::<usize>() + 2 * wrong_first_choices.iter().sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_under_defaults() {
        let p = CostParams::default();
        let per_call = |s| cost_of(s, &p).unwrap().online_seconds_per_call;
        assert!((per_call(AgentStrategy::Agent4RecRecent) - 33.0).abs() < 1e-9);
        assert!((per_call(AgentStrategy::AgentCfPersona) - 31.0).abs() < 1e-9);
        assert!((per_call(AgentStrategy::Agent4RecPersona) - 31.0).abs() < 1e-9);
        assert!((per_call(AgentStrategy::Agent4RecRelevance) - 61.0).abs() < 1e-9);
        assert!((per_call(AgentStrategy::AgentCfRecent) - 90.0).abs() < 1e-9);
        assert!((per_call(AgentStrategy::AgentCfRelevance) - 631.0).abs() < 1e-9);
    }

    #[test]
    fn throughput_terms_are_tiny_but_present() {
        let c = cost_of(AgentStrategy::Agent4RecRelevance, &CostParams::default()).unwrap();
        assert!(c.throughput_seconds_per_call > 0.0 && c.throughput_seconds_per_call < 1e-4);
        assert!((c.online_seconds_total - 10.0 * c.full_per_call()).abs() < 1e-9);
    }

    #[test]
    fn savings_under_defaults() {
        let rows = compare_scenarios(&CostGrid::standard().points()).unwrap();
        let r = rows.iter().find(|r| r.n_i == 10.0 && r.strategy == AgentStrategy::Agent4RecPersona).unwrap();
        // 1 - 31/330 and 1 - 31/610
        assert!((r.savings_vs_recent.unwrap() - 90.606).abs() < 1e-2);
        assert!((r.savings_vs_relevance.unwrap() - 94.918).abs() < 1e-2);

        let scaled = CostParams { persona_scales_with_d: true, ..CostParams::default() };
        let rows = compare_scenarios(&[scaled]).unwrap();
        let r = rows.iter().find(|r| r.strategy == AgentStrategy::Agent4RecPersona).unwrap();
        assert!((r.savings_vs_recent.unwrap() - 100.0 * (1.0 - 31.0 / 33.0)).abs() < 1e-3);
    }

    #[test]
    fn offline_terms() {
        let p = CostParams { selection_seconds: Some(0.0), ..CostParams::default() };
        assert_eq!(cost_of(AgentStrategy::Agent4RecRecent, &p).unwrap().offline_seconds, 0.0);
        assert!((cost_of(AgentStrategy::Agent4RecRelevance, &p).unwrap().offline_seconds - 50.0).abs() < 1e-9);
        assert!((cost_of(AgentStrategy::Agent4RecPersona, &p).unwrap().offline_seconds - 110.0).abs() < 1e-9);
        assert!((cost_of(AgentStrategy::AgentCfPersona, &p).unwrap().offline_seconds - 1250.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_params_and_names() {
        let p = CostParams { t: 0.0, ..CostParams::default() };
        assert!(matches!(cost_of(AgentStrategy::AgentCfRecent, &p), Err(CostError::NonPositive { name: "T", .. })));
        assert!("Agent4Rec_Persona".parse::<AgentStrategy>().is_ok());
        assert_eq!("nope".parse::<AgentStrategy>(), Err(CostError::UnknownStrategy("nope".into())));
    }

    #[test]
    fn standard_grid_has_eighteen_rows() {
        let rows = compare_scenarios(&CostGrid::standard().points()).unwrap();
        assert_eq!(rows.len(), 18);
        assert_eq!(compare_scenarios(&[]), Err(CostError::EmptyGrid));
        let mut csv = Vec::new();
        write_scenarios_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 19);
        assert_eq!(render_scenarios_table(&rows).lines().count(), 19);
    }

    #[test]
    fn call_counts() {
        assert_eq!(summarization_calls(7), 7);
        assert_eq!(reflection_calls(&[3, 2], &[1, 0]), 7);
    }
}
