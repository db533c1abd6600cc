mod common;

use std::collections::BTreeSet;
use std::fs;

use common::*;
use mixtte_core::asil::Decision;
use mixtte_core::experiment::*;
use mixtte_core::params::TrainMask;
use mixtte_core::trafficgen::{generate_network, NetworkKind, TripConfig};
use mixtte_core::trainer::TrainConfig;

fn tiny_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 11,
        model: tiny_model_config(),
        train: TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.data.width = 3;
    cfg.data.train_days = 2;
    cfg.data.test_days = 1;
    cfg.data.trips_per_day = 150;
    cfg.data.hot_fraction = 0.5;
    cfg.data.trips = TripConfig {
        min_route_links: 3,
        ..TripConfig::default()
    };
    cfg.il.days = 5;
    cfg.il.warmup_days = 3;
    cfg.il.shift_day = 4;
    cfg.il.shift_region_links = 6;
    cfg.serve.queries = 100;
    cfg
}

#[test]
fn link_region_is_a_connected_ball() {
    let net = generate_network(NetworkKind::Grid, 4, 1).unwrap();
    let r = link_region(&net, 5, 10);
    assert_eq!(r.len(), 10);
    assert!(r.contains(&5));
    assert_eq!(r.iter().collect::<BTreeSet<_>>().len(), 10);
    assert_eq!(link_region(&net, 5, 10), r);
    assert_eq!(link_region(&net, 5, 10_000).len(), net.n_links());
}

#[test]
fn retrain_reports_are_reproducible() {
    let cfg = tiny_cfg();
    let variants = vec!["full".to_string(), "no-moe".to_string()];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_retrain(&cfg, &variants, a.path()).unwrap();
    let rb = run_retrain(&cfg, &variants, b.path()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.variants.len(), 2);
    assert!(ra.variant("no-moe").is_some() && ra.variant("no-external-attention").is_none());
    for f in [
        "metrics.json",
        "predictions.csv",
        "longtail.csv",
        "checkpoint_full.mxck",
        "checkpoint_no-moe.mxck",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let header = fs::read_to_string(a.path().join("predictions.csv")).unwrap();
    assert!(header.starts_with("trip,start_step,truth,baseline,full,no-moe"));
}

#[test]
fn quiet_il_loop_never_updates() {
    let mut cfg = tiny_cfg();
    cfg.il.inject_shift = false;
    cfg.il.drift.delta_d_link = 1e9;
    let out = run_il_loop(&cfg).unwrap();
    assert_eq!(out.summary.hours, 48);
    assert_eq!(out.summary.shift_hour, None);
    assert!(out.hours.iter().all(|h| h.decision == Decision::NoUpdate && h.p_t == 0.0));
    assert_eq!(out.summary.updates_applied, 0);
    assert_eq!(out.summary.trainable_params_total, 0);
    assert_eq!(run_il_loop(&cfg).unwrap(), out);

    let dir = tempfile::tempdir().unwrap();
    write_il(dir.path(), &out).unwrap();
    let lines = fs::read_to_string(dir.path().join("decisions.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 48);
}

#[test]
fn always_full_update_trains_both_sides_every_hour() {
    let mut cfg = tiny_cfg();
    cfg.il.always_full_update = true;
    cfg.il.compare_frozen = false;
    let out = run_il_loop(&cfg).unwrap();
    let full = tiny_model(cfg.seed).store.count(TrainMask::All);
    for h in &out.hours {
        assert_eq!(h.applied, TrainMask::All);
        if h.trips_trained > 0 {
            assert_eq!(h.trainable_params, full);
        }
    }
    assert!(out.summary.updates_applied > 40);
    assert!(out.hours.iter().all(|h| h.mae_frozen.is_none()));
}

#[test]
fn run_directory_has_manifest_and_serving_log() {
    let mut cfg = tiny_cfg();
    cfg.scenario = Scenario::ServeSim;
    cfg.serve.refresh_interval = 2;
    let root = tempfile::tempdir().unwrap();
    let dir = run_experiment(&cfg, root.path(), &[]).unwrap();
    assert!(dir.file_name().unwrap().to_string_lossy().starts_with("run-"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    for f in ["config.toml", "serve_log.jsonl", "serve_summary.json"] {
        assert_eq!(files[f].as_str().unwrap().len(), 64, "{f}");
    }
    let summary: ServeSummary = serde_json::from_slice(&fs::read(dir.join("serve_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.queries, 100);
    assert!(summary.max_staleness <= 2);

    let again = tempfile::tempdir().unwrap();
    run_in_dir(&cfg, again.path(), &[]).unwrap();
    assert!(again.path().join("serve_log.jsonl").exists());
    let a: serde_json::Value = serde_json::from_slice(&fs::read(again.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(a["files"]["config.toml"], manifest["files"]["config.toml"]);
    assert_eq!(a["config_sha256"], manifest["config_sha256"]);
}

#[test]
fn expert_report_covers_every_expert() {
    let cfg = tiny_cfg();
    let bench = build_benchmark(&cfg).unwrap();
    let model = tiny_model(cfg.seed);
    let dir = tempfile::tempdir().unwrap();
    let usage = experts_report(&model, &bench, 2, 2, dir.path()).unwrap();
    let n_e = model.layers[0].pool.n_experts();
    assert_eq!(usage.len(), model.layers.len() * n_e);
    for l in 0..model.layers.len() {
        assert!(dir.path().join(format!("assignments_layer{l}.mxtt")).exists());
        // top-k gate weights sum to one per (link, step)
        let total: f64 = usage.iter().filter(|u| u.layer == l).map(|u| u.recurring).sum();
        assert!((total - 1.0).abs() < 1e-5, "{total}");
    }
    assert!(dir.path().join("expert_usage.csv").exists());
}
