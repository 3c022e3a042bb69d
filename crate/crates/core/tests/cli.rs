mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::small_config_path;

fn causeloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causeloc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = causeloc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn plan_prints_defaults_and_overrides() {
    let out = ok(&["plan", "--concept", "surfing"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n_pos_train"], 200);
    assert_eq!(v["n_edits_per_parent"], 10);
    let out = ok(&["plan", "--concept", "surfing", "--config", p(&small_config_path()), "--n-pos-eval", "7"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n_pos_train"], 20);
    assert_eq!(v["n_pos_eval"], 7);
    assert_eq!(causeloc(&["plan", "--concept", "x", "--n-edit-parents-train", "300"]).status.code(), Some(1));
}

#[test]
fn pvalue_and_verdict_commands() {
    let out = ok(&["pvalue", "--target", "0.5", "--baselines", "0.1,-0.2,0.5", "--alpha", "0.5"]);
    assert!(out.starts_with("p = 0.5 (3 baselines)"), "{out}");
    let out = ok(&["pvalue", "--target", "1", "--baselines"]);
    assert!(out.starts_with("p = 1 (0 baselines)"), "{out}");
    for (gen, gate, cov, want) in [
        ("0.2", "pass", "high", "HighConfidenceDiscovery"),
        ("0.2", "fail", "high", "Rejected"),
        ("0.2", "pass", "low", "PromisingNeedsFollowUp"),
        ("-0.1", "pass", "low", "Inconclusive"),
    ] {
        let mut args = vec!["verdict", "--gen-causal", gen, "--gate", gate, "--coverage", cov];
        if cov == "high" {
            args.extend(["--meas-causal", "0.3"]);
        }
        let out = ok(&args);
        assert!(out.trim_end().ends_with(want), "{args:?}: {out}");
    }
}

#[test]
fn stage_commands_chain_on_simulated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let world = Path::new(env!("CARGO_MANIFEST_DIR")).join("worlds/small.toml");
    let sim = tmp.path().join("sim");
    ok(&["simulate", "--world", p(&world), "--concept", "surfing", "--output", p(&sim)]);
    let matrix = sim.join("surfing.predicted.bcrm");
    let manifest = sim.join("surfing.manifest.jsonl");
    assert!(sim.join("measured.bcrm").exists() && sim.join("measured.bcei").exists());

    let scores = tmp.path().join("scores.csv");
    ok(&[
        "score", "--matrix", p(&matrix), "--manifest", p(&manifest), "--weight", "CSG=1", "--weight", "CEG=1",
        "--output", p(&scores),
    ]);
    let region = tmp.path().join("region.csv");
    ok(&["select-region", "--scores", p(&scores), "--concept", "surfing", "--k", "6", "--output", p(&region)]);
    let rows = std::fs::read_to_string(&region).unwrap();
    assert_eq!(rows.lines().count(), 7);

    let out = ok(&["evaluate", "--matrix", p(&matrix), "--manifest", p(&manifest), "--region", p(&region)]);
    let eval: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(eval["n_voxels"], 6);
    assert!(eval["s_causal"].as_f64().unwrap() > 0.0, "{out}");

    let map = tmp.path().join("map.csv");
    ok(&["export-map", "--scores", p(&scores), "--score", "combined", "--output", p(&map)]);
    assert!(std::fs::read_to_string(&map).unwrap().starts_with("voxel_id,combined\n"));
    assert_eq!(causeloc(&["export-map", "--scores", p(&scores), "--score", "nope", "--output", p(&map)]).status.code(), Some(1));

    let out = ok(&["coverage", "--manifest", p(&manifest), "--n-pos", "10", "--n-neg-per-counter", "5"]);
    let cov: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(cov["coverage_level"], "Low");
}

#[test]
fn compare_baselines_writes_outcomes() {
    let tmp = tempfile::tempdir().unwrap();
    let world = Path::new(env!("CARGO_MANIFEST_DIR")).join("worlds/small.toml");
    let csv = tmp.path().join("fpr.csv");
    let out = ok(&["compare-baselines", "--world", p(&world), "--noiseless", "--output", p(&csv)]);
    assert!(out.contains("activation") && out.contains("causal"));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("concept,strategy,"));
}

#[test]
fn run_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let stdout = ok(&["run", "--config", p(&small_config_path()), "--output", p(&out), "--workers", "2"]);
    assert!(stdout.contains("surfing"));
    assert!(out.join("summary.csv").exists());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "concepts = [\"a\"]\nseed = 1\nbogus = 3\n[backend]\nkind = \"stub\"\nvoxel_dim = 4\n").unwrap();
    let res = causeloc(&["run", "--config", p(&bad), "--output", p(&tmp.path().join("bad"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bogus"));
    assert_eq!(causeloc(&["run", "--config", p(&tmp.path().join("missing.toml"))]).status.code(), Some(1));
}
