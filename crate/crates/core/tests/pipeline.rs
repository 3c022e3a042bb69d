mod common;

use std::path::Path;
use std::sync::Arc;

use causeloc::clients::{ClientError, ClientRequest, ClientResponse, ModelClient};
use causeloc::pipeline::{run_pipeline, run_pipeline_with_client, BackendConfig, PipelineConfig};
use causeloc::retrieval::CoverageLevel;
use causeloc::simulator::{build_world, SimulatorClient, WorldSpec};
use common::{small_config_path, tree};

const UPSTREAM_FILES: [&str; 6] = [
    "manifest.jsonl",
    "scores.csv",
    "score_map_causal.csv",
    "region.csv",
    "region_scores.csv",
    "retrieval.csv",
];

fn small(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(small_config_path()).unwrap();
    cfg.output_dir = Some(out.to_path_buf());
    cfg
}

fn read(dir: &Path, concept: &str, file: &str) -> Vec<u8> {
    std::fs::read(dir.join(concept).join(file)).unwrap()
}

#[test]
fn unknown_weight_component_fails_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut cfg = small(&out);
    cfg.scoring.weights.insert("XYZ".into(), 1.0);
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("XYZ"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = std::fs::read_to_string(small_config_path()).unwrap();
    assert!(PipelineConfig::from_toml(&text).is_ok());
    let err = PipelineConfig::from_toml(&format!("{text}\n[region_extra]\nk = 3\n")).unwrap_err();
    assert!(err.to_string().contains("region_extra"), "{err}");
    let err = PipelineConfig::from_toml(&text.replace("k = 8", "k = 8\nsize = 4")).unwrap_err();
    assert!(err.to_string().contains("size"), "{err}");
}

#[test]
fn alpha_change_leaves_upstream_outputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small(&tmp.path().join("a"));
    let mut b = small(&tmp.path().join("b"));
    b.significance.alpha = 0.5;
    let ra = run_pipeline(&a).unwrap();
    let rb = run_pipeline(&b).unwrap();
    assert_eq!(ra.upstream_hash, rb.upstream_hash);
    assert_ne!(ra.config_hash, rb.config_hash);
    for c in &a.concepts {
        for f in UPSTREAM_FILES {
            assert_eq!(read(&ra.output_dir, c, f), read(&rb.output_dir, c, f), "{c}/{f}");
        }
        let pa = String::from_utf8(read(&ra.output_dir, c, "pvalues.csv")).unwrap();
        assert!(pa.starts_with(&format!("# config_hash: {}\n", ra.config_hash)));
        let verdict: serde_json::Value = serde_json::from_slice(&read(&rb.output_dir, c, "verdict.json")).unwrap();
        assert_eq!(verdict["config_hash"], rb.config_hash.as_str());
    }
}

#[test]
fn seed_change_moves_upstream_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(&tmp.path().join("a"));
    cfg.concepts.truncate(2);
    let ra = run_pipeline(&cfg).unwrap();
    cfg.seed += 1;
    cfg.output_dir = Some(tmp.path().join("b"));
    let rb = run_pipeline(&cfg).unwrap();
    assert_ne!(ra.upstream_hash, rb.upstream_hash);
    assert_ne!(read(&ra.output_dir, "surfing", "scores.csv"), read(&rb.output_dir, "surfing", "scores.csv"));
}

/// Fails every prompt proposal for one concept.
struct FailConcept {
    inner: SimulatorClient,
    concept: &'static str,
}

impl ModelClient for FailConcept {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        if let ClientRequest::ProposePrompts { concept, .. } = request {
            if concept == self.concept {
                return Err(ClientError::Fatal(format!("no model for {concept}")));
            }
        }
        self.inner.call(request)
    }
}

fn simulator_client(cfg: &PipelineConfig) -> SimulatorClient {
    let BackendConfig::Simulator { world } = &cfg.backend else {
        panic!("small config uses the simulator");
    };
    let spec = WorldSpec::load(world).unwrap();
    SimulatorClient::new(Arc::new(build_world(&spec, cfg.seed).unwrap()))
}

#[test]
fn failing_concept_is_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = small(&tmp.path().join("clean"));
    let broken = small(&tmp.path().join("broken"));
    let rc = run_pipeline(&clean).unwrap();
    let client = FailConcept {
        inner: simulator_client(&broken),
        concept: "horse",
    };
    let rb = run_pipeline_with_client(&broken, Some(Arc::new(client))).unwrap();

    assert_eq!(rc.exit_code(), 0);
    assert_eq!(rb.exit_code(), 2);
    assert_eq!(rb.failures.len(), 1);
    assert_eq!(rb.failures[0].0, "horse");
    assert_eq!(rb.reports.len(), 2);

    let horse = rb.output_dir.join("horse");
    let written: Vec<_> = std::fs::read_dir(&horse).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(written, vec!["error.txt"]);
    let errors = std::fs::read_to_string(rb.output_dir.join("errors.csv")).unwrap();
    assert!(errors.lines().any(|l| l.starts_with("horse,")), "{errors}");
    let summary = std::fs::read_to_string(rb.output_dir.join("summary.csv")).unwrap();
    assert!(!summary.contains("horse"));

    // The survivors' own data are unaffected; only the baseline set shrinks.
    for c in ["surfing", "goose"] {
        for f in UPSTREAM_FILES {
            assert_eq!(read(&rc.output_dir, c, f), read(&rb.output_dir, c, f), "{c}/{f}");
        }
        let v = rb.verdict(c).unwrap();
        assert!(v.notes.iter().any(|n| n.contains("baseline horse skipped")), "{:?}", v.notes);
    }
}

#[test]
fn rerun_into_same_directory_replaces_stale_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = small(&out);
    run_pipeline(&cfg).unwrap();
    let first = tree(&out);
    std::fs::write(out.join("surfing").join("error.txt"), "stale").unwrap();
    run_pipeline(&cfg).unwrap();
    assert_eq!(tree(&out), first);
}

#[test]
fn stub_backend_runs_without_measured_data() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
concepts = ["red barn", "lighthouse"]
seed = 7
output_dir = "{}"

[plan]
n_pos_train = 12
n_pos_eval = 6
n_counter_concepts = 2
n_prompts_per_counter = 4
n_edit_parents_train = 4
n_edit_parents_eval = 2
n_edits_per_parent = 2

[region]
k = 5

[significance]
alpha = 0.5

[backend]
kind = "stub"
voxel_dim = 24
"#,
        tmp.path().join("stub").display()
    );
    let cfg = PipelineConfig::from_toml(&text).unwrap();
    let report = run_pipeline(&cfg).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    for r in &report.reports {
        assert_eq!(r.coverage.coverage_level, CoverageLevel::Low);
        assert!(r.measured_eval.is_none());
        assert_eq!(r.region.len(), 5);
    }
    assert!(tmp.path().join("stub/red-barn/verdict.json").exists());
}
