use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sbs_core::behavior::{ingest_behaviors, write_behaviors, BehaviorRecord, BehaviorSequence, Label, LogFormat};
use sbs_core::cluster::{cluster_with_trace, write_merge_trace};
use sbs_core::latency::{compare_scenarios, render_scenarios_table, write_scenarios_csv, CostGrid, CostParams};
use sbs_core::par::Exec;
use sbs_core::pipeline::{self, build_user, prepare_user, BuildParams, PipelineConfig, PipelineError, SweepGrid};
use sbs_core::profile::{write_persona_lines, PersonaDraft, Profiler, Strategy};
use sbs_core::select::weights_from_alpha;
use sbs_core::store::{PersonaStore, RefreshPolicy};

#[derive(Parser)]
#[command(name = "sbs", version, about = "Cluster, select and profile user behavior histories into cached personas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a behavior log and print per-user counts.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Write the normalized log here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster each user's behaviors and print the clusters as JSON.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: Option<String>,
        /// Write the merge trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print the selected sub-behavior sequence of every cluster of a user.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: String,
    },
    /// Build personas and print them as JSON lines.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve the persona nearest to an item from a persona store.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        user: String,
        /// Free text to embed as the query.
        #[arg(long, conflicts_with = "item_id", required_unless_present = "item_id")]
        item_text: Option<String>,
        /// Item whose embedding is the query.
        #[arg(long)]
        item_id: Option<String>,
    },
    /// Hold out each user's last behavior and report ranking metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the analytic latency model over N_I settings.
    SimulateLatency(LatencyArgs),
    /// Rerun selection, profiling and evaluation over a tau × alpha × ratio grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        tau_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        ratio_grid: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full offline pipeline into a run directory.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
}

/// Config file plus overrides; flags win over the file, the file over
/// defaults.
#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Behavior log (JSON lines).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// summarization, reflection or mock.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long, default_value_t = 500.0)]
    n: f64,
    #[arg(long = "C", default_value_t = 20.0)]
    c: f64,
    #[arg(long = "T", default_value_t = 3.0)]
    t: f64,
    #[arg(long, default_value_t = 0.1)]
    d: f64,
    #[arg(long, default_value_t = 10.0)]
    k: f64,
    #[arg(long = "NI", value_delimiter = ',', default_value = "5,10,20")]
    n_i: Vec<f64>,
    #[arg(long = "D", default_value_t = 10.0)]
    d_calls: f64,
    #[arg(long = "F", default_value_t = 1e9)]
    f: f64,
    /// Also multiply cached-persona rows by D.
    #[arg(long)]
    persona_scales_with_d: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Stage(e.to_string()),
        }
    }
}

fn stage(e: impl std::fmt::Display) -> Failure {
    Failure::Stage(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(p) = &self.input {
            cfg.input = p.clone();
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.ratio {
            cfg.ratio = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
            cfg.profiler.seed = v;
        }
        if let Some(s) = &self.strategy {
            cfg.profiler.strategy =
                serde_json::from_value::<Strategy>(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| {
                    Failure::Config(format!("unknown strategy {s:?}; expected summarization, reflection or mock"))
                })?;
        }
        if let Some(e) = &self.endpoint {
            cfg.profiler.endpoint = Some(e.clone());
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn users(cfg: &PipelineConfig, only: Option<&str>) -> Result<Vec<BehaviorSequence>, Failure> {
    let all = ingest_behaviors(&cfg.input, LogFormat::JsonLines).map_err(stage)?;
    match only {
        None => Ok(all),
        Some(u) => {
            let found: Vec<_> = all.into_iter().filter(|s| s.user_id == u).collect();
            if found.is_empty() {
                Err(Failure::Config(format!("user {u} not in {}", cfg.input.display())))
            } else {
                Ok(found)
            }
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).map_err(|e| stage(format!("{}: {e}", p.display())))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("json values serialize"));
}

fn cmd_ingest(common: &Common, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = common.load()?;
    let seqs = users(&cfg, None)?;
    for s in &seqs {
        let likes = s.records.iter().filter(|r| r.label == Label::Like).count();
        println!("{}\t{} behaviors\t{} likes\t{} dislikes", s.user_id, s.len(), likes, s.len() - likes);
    }
    if let Some(p) = out {
        write_behaviors(&seqs, output(Some(p))?).map_err(stage)?;
    }
    Ok(())
}

fn cmd_cluster(common: &Common, user: Option<&str>, trace: Option<&Path>) -> Result<(), Failure> {
    let cfg = common.load()?;
    let provider = cfg.build_provider()?;
    let mut trace_out = trace.map(|p| output(Some(p))).transpose()?;
    for seq in users(&cfg, user)? {
        let prep = prepare_user(&seq, provider.as_ref(), cfg.normalize, false).map_err(|f| stage(format!("{}: {}", f.stage, f.message)))?;
        let (set, steps) = cluster_with_trace(&prep.embeddings, cfg.tau, Exec::Sequential).map_err(stage)?;
        if let Some(w) = trace_out.as_mut() {
            write_merge_trace(&steps, w).map_err(stage)?;
        }
        let clusters: Vec<_> = set
            .clusters
            .iter()
            .map(|c| serde_json::json!({"cluster_id": c.cluster_id, "members": c.member_positions, "size": c.size()}))
            .collect();
        print_json(&serde_json::json!({"user_id": seq.user_id, "tau": cfg.tau, "m": set.m(), "clusters": clusters}));
    }
    Ok(())
}

fn build_params(cfg: &PipelineConfig) -> Result<BuildParams, Failure> {
    let weights = weights_from_alpha(cfg.alpha).map_err(config_err)?;
    Ok(BuildParams { tau: cfg.tau, ratio: cfg.ratio, weights, created_at: cfg.created_at })
}

fn cmd_select(common: &Common, user: &str) -> Result<(), Failure> {
    let cfg = common.load()?;
    let provider = cfg.build_provider()?;
    let params = build_params(&cfg)?;
    let seq = users(&cfg, Some(user))?.remove(0);
    let prep = prepare_user(&seq, provider.as_ref(), cfg.normalize, false).map_err(|f| stage(f.message))?;
    let (set, _) = cluster_with_trace(&prep.embeddings, params.tau, Exec::Sequential).map_err(stage)?;
    let k = sbs_core::budget::effective_budget(seq.len(), params.ratio, set.m());
    let alloc = sbs_core::budget::allocate_budget(&set.sizes(), k).map_err(stage)?;
    for (cluster, &quota) in set.clusters.iter().zip(&alloc.allocations) {
        let sbs = sbs_core::select::dynamic_select(cluster, &prep.embeddings, quota, &params.weights).map_err(stage)?;
        print_json(&serde_json::json!({
            "cluster_id": sbs.cluster_id,
            "positions": sbs.selected_positions,
            "objective": sbs.objective_value,
        }));
    }
    Ok(())
}

fn cmd_profile(common: &Common, user: Option<&str>, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = common.load()?;
    let provider = cfg.build_provider()?;
    let params = build_params(&cfg)?;
    let profiler = Profiler::from_config(cfg.profiler.clone()).map_err(config_err)?;
    let mut w = output(out)?;
    for seq in users(&cfg, user)? {
        let prep = prepare_user(&seq, provider.as_ref(), cfg.normalize, false).map_err(|f| stage(f.message))?;
        let build = build_user(&prep, &params, &profiler).map_err(|f| stage(format!("{} {}: {}", seq.user_id, f.stage, f.message)))?;
        let drafts: Vec<PersonaDraft> = build
            .personas
            .iter()
            .map(|p| {
                let positions = build.sbs.iter().find(|s| s.cluster_id == p.cluster_id).map(|s| s.selected_positions.clone()).unwrap_or_default();
                PersonaDraft {
                    text: p.text.clone(),
                    source_cluster: p.cluster_id,
                    token_estimate: p.text.chars().count().div_ceil(4),
                    sbs_positions: positions,
                    strategy: cfg.profiler.strategy,
                }
            })
            .collect();
        let refs: Vec<&PersonaDraft> = drafts.iter().collect();
        let created_at = build.personas[0].created_at;
        write_persona_lines(&seq.user_id, &refs, created_at, &mut w).map_err(stage)?;
    }
    w.flush().map_err(stage)
}

fn cmd_retrieve(common: &Common, store_dir: &Path, user: &str, text: Option<&str>, item_id: Option<&str>) -> Result<(), Failure> {
    let cfg = common.load()?;
    let provider = cfg.build_provider()?;
    let store = PersonaStore::open(store_dir, RefreshPolicy { refresh_after_d: cfg.refresh_after_d }).map_err(stage)?;
    let hit = match (text, item_id) {
        (Some(t), _) => store.retrieve_text(user, t, provider.as_ref()).map_err(stage)?,
        (None, Some(id)) => {
            let meta = store.load(user).map_err(stage)?.meta;
            if meta.provider != provider.identity() {
                return Err(stage(format!("store built with provider {}, query uses {}", meta.provider, provider.identity())));
            }
            let title = ingest_behaviors(&cfg.input, LogFormat::JsonLines)
                .ok()
                .and_then(|all| pipeline::item_catalog(&all).remove(id))
                .map(|r| r.title_text)
                .unwrap_or_default();
            let record = BehaviorRecord { item_id: id.to_string(), title_text: title, label: Label::Like, timestamp: None, position: 0 };
            let mut q = provider.embed_item(&record).map_err(stage)?;
            if cfg.normalize {
                q = q.normalized();
            }
            store.retrieve(user, &q).map_err(stage)?
        }
        (None, None) => return Err(Failure::Config("give --item-text or --item-id".into())),
    };
    print_json(&serde_json::json!({
        "persona_id": hit.persona.persona_id,
        "cluster_id": hit.persona.cluster_id,
        "distance": hit.distance,
        "text": hit.persona.text,
    }));
    Ok(())
}

fn cmd_evaluate(common: &Common, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = common.load()?;
    let eval = pipeline::evaluate(&cfg)?;
    print!("{}", eval.report.render_table());
    for (user, f) in &eval.failures {
        eprintln!("{user}: stage {} failed: {}", f.stage, f.message);
    }
    if let Some(p) = out {
        let mut text = serde_json::to_string_pretty(&eval).map_err(stage)?;
        text.push('\n');
        fs::write(p, text).map_err(|e| stage(format!("{}: {e}", p.display())))?;
    }
    if eval.failures.is_empty() { Ok(()) } else { Err(Failure::Stage(format!("{} user(s) failed", eval.failures.len()))) }
}

fn cmd_latency(a: &LatencyArgs) -> Result<(), Failure> {
    let base = CostParams {
        n: a.n,
        c: a.c,
        t: a.t,
        d_embed: a.d,
        k: a.k,
        d_calls: a.d_calls,
        f: a.f,
        persona_scales_with_d: a.persona_scales_with_d,
        ..CostParams::default()
    };
    let grid = CostGrid { n: vec![a.n], k: vec![a.k], n_i: a.n_i.clone(), base };
    let rows = compare_scenarios(&grid.points()).map_err(config_err)?;
    print!("{}", render_scenarios_table(&rows));
    if let Some(p) = &a.out {
        write_scenarios_csv(&rows, output(Some(p))?).map_err(stage)?;
    }
    Ok(())
}

fn cmd_sweep(common: &Common, taus: &[f64], alphas: &[f64], ratios: &[f64], out: Option<&Path>) -> Result<(), Failure> {
    let cfg = common.load()?;
    let pick = |flag: &[f64], single: Option<f64>, file: &[f64]| -> Vec<f64> {
        if !flag.is_empty() {
            flag.to_vec()
        } else if let Some(v) = single {
            vec![v]
        } else {
            file.to_vec()
        }
    };
    let grid = SweepGrid {
        tau: pick(taus, common.tau, &cfg.sweep.tau),
        alpha: pick(alphas, common.alpha, &cfg.sweep.alpha),
        ratio: pick(ratios, common.ratio, &cfg.sweep.ratio),
    };
    let rows = pipeline::sweep(&cfg, &grid)?;
    pipeline::write_sweep_csv(&rows, output(out)?).map_err(stage)?;
    if out.is_some() {
        eprintln!("{} cells written", rows.len());
    }
    Ok(())
}

fn cmd_run(common: &Common, out: &Path) -> Result<(), Failure> {
    let cfg = common.load()?;
    let outcome = pipeline::run_pipeline(&cfg, out)?;
    let m = &outcome.manifest;
    if let Some(e) = &m.error {
        return Err(Failure::Stage(format!("stage {} failed: {}", e.stage, e.message)));
    }
    let mut failed = BTreeMap::new();
    for u in &m.users {
        match &u.error {
            None => println!("{}\tm={}\tk={}\tpersonas={}\tcalls={}", u.user_id, u.m, u.effective_budget, u.n_personas, u.calls.total()),
            Some(f) => {
                failed.insert(u.user_id.clone(), f.clone());
            }
        }
    }
    if let Some(report) = &outcome.metrics {
        print!("{}", report.render_table());
    }
    println!("artifacts in {}", out.display());
    if failed.is_empty() {
        Ok(())
    } else {
        for (u, f) in &failed {
            eprintln!("{u}: stage {} failed: {}", f.stage, f.message);
        }
        Err(Failure::Stage(format!("{} user(s) failed", failed.len())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest { common, out } => cmd_ingest(common, out.as_deref()),
        Command::Cluster { common, user, trace } => cmd_cluster(common, user.as_deref(), trace.as_deref()),
        Command::Select { common, user } => cmd_select(common, user),
        Command::Profile { common, user, out } => cmd_profile(common, user.as_deref(), out.as_deref()),
        Command::Retrieve { common, store, user, item_text, item_id } => {
            cmd_retrieve(common, store, user, item_text.as_deref(), item_id.as_deref())
        }
        Command::Evaluate { common, out } => cmd_evaluate(common, out.as_deref()),
        Command::SimulateLatency(a) => cmd_latency(a),
        Command::Sweep { common, tau_grid, alpha_grid, ratio_grid, out } => {
            cmd_sweep(common, tau_grid, alpha_grid, ratio_grid, out.as_deref())
        }
        Command::Run { common, out } => cmd_run(common, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
