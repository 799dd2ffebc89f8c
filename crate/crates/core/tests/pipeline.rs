use std::fs;
use std::path::Path;

use sbs_core::pipeline::{run_pipeline, sweep, write_sweep_csv, PipelineConfig, ProviderConfig, StageName, SweepGrid};

/// One user, ten liked items in two tight groups far apart.
fn two_group_corpus(dir: &Path) -> PipelineConfig {
    let mut log = String::new();
    let mut vecs = String::new();
    for i in 0..10 {
        let x = if i < 5 { 0.0 } else { 10.0 } + i as f64 * 0.01;
        log.push_str(&format!("{{\"user_id\":\"a\",\"item_id\":\"it{i}\",\"label\":1,\"timestamp\":{i},\"text\":\"item {i}\"}}\n"));
        vecs.push_str(&format!("{{\"item_id\":\"it{i}\",\"vector\":[{x},0.0]}}\n"));
    }
    fs::write(dir.join("log.jsonl"), log).unwrap();
    fs::write(dir.join("vecs.jsonl"), vecs).unwrap();
    let mut cfg = PipelineConfig {
        input: dir.join("log.jsonl"),
        tau: 1.0,
        ratio: 0.3,
        provider: ProviderConfig::Precomputed { path: dir.join("vecs.jsonl") },
        ..PipelineConfig::default()
    };
    cfg.evaluation.enabled = false;
    cfg
}

#[test]
fn budget_accounting_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_group_corpus(dir.path());
    let out = run_pipeline(&cfg, &dir.path().join("run")).unwrap();
    assert!(out.manifest.is_success(), "{:?}", out.manifest);
    let u = &out.manifest.users[0];
    assert_eq!((u.m, u.effective_budget), (2, 3));
    assert_eq!(u.sbs_lengths.iter().sum::<usize>(), 3);
    assert_eq!(u.n_personas, 2);
    assert_eq!(u.calls.total(), u.expected_calls);
    for name in ["manifest.json", "timings.json", "costs.csv", "personas/a.json"] {
        assert!(dir.path().join("run").join(name).exists(), "{name}");
    }
    assert!(!dir.path().join("run/metrics.json").exists());
}

#[test]
fn missing_embeddings_is_an_embed_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = two_group_corpus(dir.path());
    cfg.provider = ProviderConfig::Precomputed { path: dir.path().join("nope.jsonl") };
    let out = run_pipeline(&cfg, &dir.path().join("run")).unwrap();
    assert!(!out.manifest.is_success());
    assert_eq!(out.manifest.error.as_ref().unwrap().stage, StageName::Embed);
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(written["error"]["stage"], "embed");
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        PipelineConfig { tau: 0.0, ..two_group_corpus(dir.path()) },
        PipelineConfig { alpha: 1.0, ..two_group_corpus(dir.path()) },
        PipelineConfig { ratio: 1.5, ..two_group_corpus(dir.path()) },
    ] {
        assert!(matches!(run_pipeline(&cfg, &dir.path().join("run")), Err(sbs_core::pipeline::PipelineError::Config(_))));
    }
}

#[test]
fn sweep_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = two_group_corpus(dir.path());
    let grid = SweepGrid { tau: vec![0.5, 20.0], alpha: vec![1.06], ratio: vec![0.3, 0.8] };
    let rows = sweep(&cfg, &grid).unwrap();
    assert_eq!(rows.len(), 4);
    // tau 20 merges everything into one cluster
    assert_eq!(rows[2].n_sbs, 1.0);
    let csv = |rows| {
        let mut buf = Vec::new();
        write_sweep_csv(rows, &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(&rows), csv(&sweep(&cfg, &grid).unwrap()));
}
