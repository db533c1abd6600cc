use std::path::Path;
use std::process::Command;

fn mixtte() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixtte"))
}

const TINY: &str = r#"
seed = 3

[data]
width = 6
train_days = 1
test_days = 1
trips_per_day = 60

[model.stea]
d = 8
heads = 2
u_ex = 4
u_in = 2

[model.route]
d_r = 8
seq_heads = 2

[train]
epochs = 1
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn help_exits_zero() {
    let out = mixtte().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "train", "il", "serve-sim", "eval", "experts-report"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = mixtte().args(["train", "--no-bananas"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = mixtte().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_scenario_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "scenario = \"warp-drive\"\n");
    let out = mixtte()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = mixtte()
        .args(["serve-sim", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(tmp.path().join("nope.mxck"))
        .arg("--out")
        .arg(tmp.path().join("runs"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_writes_benchmark_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = mixtte()
        .args(["gen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("runs"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = std::path::PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    for f in ["links.csv", "edges.csv", "traffic.mxtt", "trips_train.jsonl", "trips_test.jsonl", "hot_links.txt", "manifest.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["files"]["traffic.mxtt"].as_str().unwrap().len() == 64);
}

#[test]
fn train_then_serve_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = mixtte()
        .args(["train", "--no-moe", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("runs"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = std::path::PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    let ckpt = dir.join("checkpoint_no-moe.mxck");
    assert!(ckpt.is_file() && dir.join("metrics.json").is_file() && dir.join("longtail.csv").is_file());

    let serve_cfg = write_config(tmp.path(), &format!("{TINY}\n[model.ablation]\nno_moe = true\n"));
    let out = mixtte()
        .args(["serve-sim", "--refresh-interval", "2", "--config"])
        .arg(&serve_cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(tmp.path().join("runs"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = std::path::PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("serve_summary.json")).unwrap()).unwrap();
    assert!(summary["max_staleness"].as_u64().unwrap() <= 2);
}
