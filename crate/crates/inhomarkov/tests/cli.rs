use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use inhomarkov::formats::read_snapshots;

const BIN: &str = env!("CARGO_BIN_EXE_inhomarkov");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_stage(stage: &str, config: &Path, out: &Path) -> Output {
    run(&[stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
seed = 11

[synthetic]
len = 600

[model]
n = 5
horizons = [1, 2]
forward_bins = [4]
ck_horizon = 2
export_snapshots = true

[train]
max_epochs = 2
batch_size = 128

[bootstrap]
reps = 50
"#;

fn full_pipeline(config: &Path, out: &Path) {
    for stage in ["synth", "ingest", "train", "diagnose", "ck", "eval"] {
        let o = run_stage(stage, config, out);
        assert!(o.status.success(), "{stage} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn listing(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect()
}

fn column(csv: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(csv).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn pipeline_is_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    full_pipeline(&config, &a);
    full_pipeline(&config, &b);
    let (la, lb) = (listing(&a), listing(&b));
    assert_eq!(la.len(), lb.len());
    for ((pa, ca), (pb, cb)) in la.iter().zip(&lb) {
        assert_eq!(pa, pb);
        assert!(ca == cb, "{} differs between runs", pa.display());
    }

    let diag = a.join("diagnose");
    assert!(column(&diag.join("diagnostics_state_free.csv"), "rho").iter().all(|&r| r == 0.0));
    assert!(column(&diag.join("diagnostics_state_free.csv"), "dobrushin").iter().all(|&r| r == 0.0));
    for model in ["state_free", "state_conditioned"] {
        let h = column(&diag.join(format!("diagnostics_{model}.csv")), "entropy");
        assert_eq!(h.len(), 600);
        assert!(h.iter().all(|&x| (0.0..=5f64.ln() + 1e-9).contains(&x)));
        let snaps = read_snapshots(&diag.join(format!("snapshots_{model}.jsonl"))).unwrap();
        assert_eq!(snaps.len(), 600);
    }

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("eval/report.json")).unwrap()).unwrap();
    let reports = report["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2 * 5);
    for r in reports.iter().filter(|r| r["model"] == "marginal") {
        assert_eq!(r["delta_nll_vs_marginal"].as_f64().unwrap(), 0.0);
    }
    assert!(a.join("ck/ck_h2_state_conditioned.csv").exists());
    assert!(a.join("train/h2_forward_state_free_history.csv").exists());
}

#[test]
fn ck_at_horizon_one_reports_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    for stage in ["synth", "ingest"] {
        assert!(run_stage(stage, &config, &out).status.success());
    }
    // No checkpoints are needed when the composition is trivial.
    let o = run(&["ck", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--horizon", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("h = 1"));
    let kl = column(&out.join("ck/ck_h1_state_free.csv"), "kl");
    assert!(!kl.is_empty() && kl.iter().all(|&x| x == 0.0));
}

#[test]
fn unparseable_date_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("date,price,x\n");
    for d in 1..=20 {
        csv.push_str(&format!("2020-01-{d:02},{},{}\n", 100 + d, d % 3));
    }
    csv.push_str("2020-01-32,99,1\n");
    fs::write(dir.path().join("prices.csv"), csv).unwrap();
    let config = write_config(dir.path(), "[data]\npath = \"prices.csv\"\n[model]\nn = 3\n");
    let o = run_stage("ingest", &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 21") && err.contains("date"), "{err}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = write_config(dir.path(), "[synthetic]\nlen = 600\n[model]\nhorizons = [2]\n");
    assert_eq!(run_stage("synth", &bad, &out).status.code(), Some(2));
    let missing = dir.path().join("absent.toml");
    assert_eq!(run_stage("synth", &missing, &out).status.code(), Some(2));
    let unknown = write_config(dir.path(), "[synthetic]\nlength = 600\n");
    assert_eq!(run_stage("synth", &unknown, &out).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    for stage in ["synth", "ingest"] {
        assert!(run_stage(stage, &config, &out).status.success());
    }
    let o = run_stage("diagnose", &config, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("h1_state_state_conditioned.json"));
}

#[test]
fn divergence_exits_with_code_one_and_keeps_history() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("max_epochs = 2", "max_epochs = 2\nlearning_rate = 1e300\ngrad_clip_norm = 0.0\nweight_decay = 0.0");
    let config = write_config(dir.path(), &body);
    let out = dir.path().join("o");
    for stage in ["synth", "ingest"] {
        assert!(run_stage(stage, &config, &out).status.success());
    }
    let o = run_stage("train", &config, &out);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("train/h1_state_state_conditioned_history.csv").exists());
    assert!(!out.join("train/h1_state_state_conditioned.json").exists());
}

#[test]
fn persistence_one_keeps_a_single_regime() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[synthetic]\nlen = 300\nregime_persistence = 1.0\n[model]\nn = 5\n");
    let out = dir.path().join("o");
    assert!(run_stage("synth", &config, &out).status.success());
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("synthetic/truth.json")).unwrap()).unwrap();
    let path = truth["regime_path"].as_array().unwrap();
    assert_eq!(path.len(), 300);
    assert!(path.iter().all(|r| r == &path[0]));
    // The generated CSV round-trips through ingest without drops.
    assert!(run_stage("ingest", &config, &out).status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ingest/report.json")).unwrap()).unwrap();
    assert_eq!(report["features_retained"], 2);
    assert_eq!(report["dropped"].as_array().unwrap().len(), 0);
}
