//! End-to-end orchestration: dataset assembly, scoring, region selection on
//! the training split, evaluation on held-out and measured data, significance
//! against baseline concepts, coverage, verdicts and the output tree.
//!
//! Output layout under the run directory:
//!
//! ```text
//! summary.csv  errors.csv  config_echo.toml
//! <concept>/manifest.jsonl  scores.csv  score_map_causal.csv  region.csv
//!           region_scores.csv  retrieval.csv  pvalues.csv  coverage.json
//!           verdict.json  verdict.txt  followup.csv      (or error.txt)
//! ```
//!
//! Every file is a pure function of the configuration, its input files and
//! the seed. Timing and worker counts go to the log only.

mod assemble;
mod config;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::clients::{slug, ModelClient};
use crate::error::{Error, Result};
use crate::pool::bounded_map;
use crate::region::{select_region_positive_causal, select_region_top_k, Region};
use crate::retrieval::{coverage_report, CoverageReport, RequestedCounts};
use crate::scoring::{
    positive_score, region_scores, score_voxels, semantic_negative_score, Component, RegionScoreSet,
    VoxelScoreTable,
};
use crate::stats::{write_results_csv, Criterion, GateDecision, SignificanceResult};
use crate::verdict::{decide, propose_followup, write_summary_csv, CausalEvidence, FollowUpPlan, Supporting, Verdict};

pub use assemble::{align_voxels, assemble_concept, ConceptData, MeasuredPool, PoolSets, Setup};
pub use config::{
    file_digest, BackendConfig, MeasuredConfig, NormalizationConfig, NormalizationMode, PipelineConfig,
    RegionConfig, RegionModeName, RetrievalConfig, RetryConfig, ScoringConfig, SignificanceConfig,
};

/// Files written into every concept directory, removed before a rewrite.
const CONCEPT_FILES: [&str; 12] = [
    "manifest.jsonl",
    "scores.csv",
    "score_map_causal.csv",
    "region.csv",
    "region_scores.csv",
    "retrieval.csv",
    "pvalues.csv",
    "coverage.json",
    "verdict.json",
    "verdict.txt",
    "followup.csv",
    "error.txt",
];

/// Everything computed for one concept.
#[derive(Debug, Clone)]
pub struct ConceptReport {
    pub concept: String,
    pub scores: VoxelScoreTable,
    pub region: Region,
    pub generated_eval: Option<RegionScoreSet>,
    pub measured_eval: Option<RegionScoreSet>,
    pub coverage: CoverageReport,
    pub verdict: Verdict,
    pub followup: FollowUpPlan,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub reports: Vec<ConceptReport>,
    /// Concepts that failed, with the error message.
    pub failures: Vec<(String, String)>,
    pub config_hash: String,
    pub upstream_hash: String,
}

impl RunReport {
    /// 0 when every concept succeeded, 2 when some failed.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }

    pub fn verdict(&self, concept: &str) -> Option<&Verdict> {
        self.reports.iter().find(|r| r.concept == concept).map(|r| &r.verdict)
    }
}

/// CSV of (voxel_id, <which>) sorted by voxel id.
pub fn export_score_map<W: Write>(table: &VoxelScoreTable, which: &str, w: W) -> Result<()> {
    let values = table.score(which)?;
    let mut rows: Vec<(&String, f64)> = table.voxel_ids.iter().zip(values.iter().copied()).collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["voxel_id", which])?;
    for (id, v) in rows {
        wtr.write_record([id.as_str(), &v.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_score_map(table: &VoxelScoreTable, which: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::from(e).at_path(path))?;
    export_score_map(table, which, std::io::BufWriter::new(f))
}

/// Reads a score map; lines starting with `#` are skipped.
pub fn import_score_map<R: BufRead>(r: R) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let cell = rec.get(1).unwrap_or_default();
        let v = cell
            .parse::<f64>()
            .map_err(|e| Error::InvalidArgument(format!("bad score {cell:?}: {e}")))?;
        out.push((rec.get(0).unwrap_or_default().to_string(), v));
    }
    Ok(out)
}

/// Assembled data shared between a concept's own run and its use as a
/// baseline elsewhere. Each concept is assembled at most once per run.
struct DataCache {
    slots: Mutex<BTreeMap<String, Arc<OnceLock<std::result::Result<Arc<ConceptData>, String>>>>>,
}

impl DataCache {
    fn get(&self, cfg: &PipelineConfig, setup: &Setup, concept: &str) -> std::result::Result<Arc<ConceptData>, String> {
        let slot = Arc::clone(self.slots.lock().expect("cache poisoned").entry(concept.to_string()).or_default());
        slot.get_or_init(|| {
            log::info!("assembling {concept}");
            assemble_concept(cfg, setup, concept)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        })
        .clone()
    }
}

fn score_table(cfg: &PipelineConfig, setup: &Setup, data: &ConceptData) -> Result<VoxelScoreTable> {
    let k = cfg.scoring.hard_negatives;
    let mut table = score_voxels(&data.predicted, &data.train, k)?;
    table.set_component(Component::Mag.as_str(), table.s_pos.clone())?;
    if let Some(v) = table.s_neg.clone() {
        table.set_component(Component::Csg.as_str(), v)?;
    }
    if let Some(v) = table.s_edit.clone() {
        table.set_component(Component::Ceg.as_str(), v)?;
    }
    if let (Some(pool), Some(ps)) = (&setup.pool, &data.pool_sets) {
        if !ps.retrieved.is_empty() {
            table.set_component(Component::Mal.as_str(), positive_score(&pool.predicted, &ps.retrieved)?)?;
        }
        if !ps.verified_positives.is_empty() {
            table.set_component(Component::Malf.as_str(), positive_score(&pool.predicted, &ps.verified_positives)?)?;
            if !ps.verified_negatives.is_empty() {
                let v = semantic_negative_score(&pool.predicted, &ps.verified_positives, &ps.verified_negatives, k)?;
                table.set_component(Component::Csl.as_str(), v)?;
            }
        }
    }
    if let (Some(pool), Some(sets)) = (&setup.pool, &data.measured) {
        if !sets.positives.is_empty() {
            table.set_component(Component::Mam.as_str(), positive_score(&pool.measured, &sets.positives)?)?;
            if !sets.negatives.is_empty() {
                let v = semantic_negative_score(&pool.measured, &sets.positives, &sets.negatives, k)?;
                table.set_component(Component::Csm.as_str(), v)?;
            }
        }
    }
    if !cfg.scoring.weights.is_empty() {
        table.set_combined(&cfg.scoring.weights, cfg.scoring.standardize)?;
    }
    Ok(table)
}

fn select_region(cfg: &PipelineConfig, concept: &str, table: &VoxelScoreTable) -> Result<Region> {
    match cfg.region.mode {
        RegionModeName::TopK => select_region_top_k(concept, table, &cfg.region.score, cfg.region.k),
        RegionModeName::PositiveCausal => Ok(select_region_positive_causal(concept, table)),
    }
}

/// Region scores on generated-eval and measured data. The measured score is
/// `None` when there is no pool or no verified measured positive.
fn evaluate(
    cfg: &PipelineConfig,
    setup: &Setup,
    data: &ConceptData,
    region: &Region,
) -> Result<(RegionScoreSet, Option<RegionScoreSet>)> {
    let k = cfg.scoring.hard_negatives;
    let gen = region_scores(&data.predicted, &data.eval, region, k)?;
    let meas = match (&setup.pool, &data.measured) {
        (Some(pool), Some(sets)) if !sets.positives.is_empty() => Some(region_scores(&pool.measured, sets, region, k)?),
        _ => None,
    };
    Ok((gen, meas))
}

fn criterion_value(c: Criterion, gen: &RegionScoreSet, meas: Option<&RegionScoreSet>) -> Option<f64> {
    match c {
        Criterion::ActivationGen => Some(gen.s_pos),
        Criterion::CausalGen => gen.s_causal,
        Criterion::CausalEdits => gen.s_edit,
        Criterion::ActivationMeas => meas.map(|m| m.s_pos),
        Criterion::CausalMeas => meas.and_then(|m| m.s_causal),
    }
}

/// Gate over the available criteria; a required criterion without a result
/// fails the gate.
fn gate(results: &[SignificanceResult], alpha: f64, required: &[Criterion], notes: &mut Vec<String>) -> Result<GateDecision> {
    let (present, missing): (Vec<Criterion>, Vec<Criterion>) =
        required.iter().partition(|c| results.iter().any(|r| r.criterion == **c));
    let mut g = crate::stats::significance_gate(results, alpha, &present)?;
    for c in &missing {
        notes.push(format!("criterion unavailable: {c}"));
    }
    g.required = required.to_vec();
    g.failing.extend(missing);
    g.failing.sort();
    g.passed = g.failing.is_empty();
    Ok(g)
}

struct Evaluated {
    report: ConceptReport,
    data: Arc<ConceptData>,
}

fn run_concept(cfg: &PipelineConfig, setup: &Setup, cache: &DataCache, concept: &str) -> Result<Evaluated> {
    let data = cache.get(cfg, setup, concept).map_err(|message| Error::Assembly {
        concept: concept.to_string(),
        message,
    })?;
    let mut notes = setup.notes.clone();
    notes.extend(data.notes.iter().cloned());

    let table = score_table(cfg, setup, &data)?;
    let region = select_region(cfg, concept, &table)?;
    if region.short {
        notes.push(format!("region holds {} voxels, fewer than the requested {}", region.len(), cfg.region.k));
    }

    let requested = RequestedCounts {
        n_pos: cfg.n_pos_requested(&data.plan),
        n_neg_per_counter: cfg.n_neg_requested(&data.plan),
    };
    let coverage = coverage_report(concept, &data.manifest, requested, cfg.coverage);
    let followup = propose_followup(&coverage, &data.plan, &cfg.followup);
    let alpha = cfg.significance.alpha;
    let required = &cfg.significance.required;

    if region.is_empty() {
        notes.push("empty region: no evaluation possible, causal evidence is weak".into());
        let mut gate_notes = Vec::new();
        let g = gate(&[], alpha, required, &mut gate_notes)?;
        notes.extend(gate_notes);
        let level = coverage.coverage_level;
        let verdict = Verdict {
            concept: concept.to_string(),
            decision: decide(CausalEvidence::Weak, level),
            causal_evidence: CausalEvidence::Weak,
            coverage_level: level,
            supporting: Supporting {
                region_size: 0,
                generated_eval: None,
                measured_eval: None,
                significance: Vec::new(),
                gate: g,
                coverage: coverage.clone(),
            },
            notes,
        };
        return Ok(Evaluated {
            report: ConceptReport {
                concept: concept.to_string(),
                scores: table,
                region,
                generated_eval: None,
                measured_eval: None,
                coverage,
                verdict,
                followup,
            },
            data,
        });
    }

    let (gen, meas) = evaluate(cfg, setup, &data, &region)?;
    let mut baselines: Vec<(String, RegionScoreSet, Option<RegionScoreSet>)> = Vec::new();
    for b in cfg.baselines_for(concept) {
        let scored = cache
            .get(cfg, setup, &b)
            .and_then(|d| evaluate(cfg, setup, &d, &region).map_err(|e| e.to_string()));
        match scored {
            Ok((g, m)) => baselines.push((b, g, m)),
            Err(e) => notes.push(format!("baseline {b} skipped: {e}")),
        }
    }
    let mut significance = Vec::new();
    for c in Criterion::ALL {
        let Some(target) = criterion_value(c, &gen, meas.as_ref()) else {
            continue;
        };
        let values: Vec<f64> = baselines
            .iter()
            .filter_map(|(_, g, m)| criterion_value(c, g, m.as_ref()))
            .collect();
        significance.push(SignificanceResult::new(c, target, values, alpha));
    }
    let g = gate(&significance, alpha, required, &mut notes)?;
    let supporting = Supporting {
        region_size: region.len(),
        generated_eval: Some(gen.clone()),
        measured_eval: meas.clone(),
        significance,
        gate: g,
        coverage: coverage.clone(),
    };
    let verdict = Verdict::new(concept, supporting, &cfg.evidence, notes)?;
    Ok(Evaluated {
        report: ConceptReport {
            concept: concept.to_string(),
            scores: table,
            region,
            generated_eval: Some(gen),
            measured_eval: meas,
            coverage,
            verdict,
            followup,
        },
        data,
    })
}

fn csv_bytes(hash_label: &str, hash: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = format!("# {hash_label}: {hash}\n").into_bytes();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Serialize)]
struct Thresholds<'a> {
    alpha: f64,
    required: &'a [Criterion],
    evidence: &'a crate::verdict::EvidenceThresholds,
    coverage: &'a crate::retrieval::CoverageThresholds,
}

/// JSON object with the config hash and, optionally, the decision
/// thresholds merged in.
fn stamped<T: Serialize>(body: &T, hash: &str, thresholds: Option<Thresholds<'_>>) -> Result<Vec<u8>> {
    let mut v = serde_json::to_value(body)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("config_hash".into(), hash.into());
        if let Some(t) = thresholds {
            map.insert("thresholds".into(), serde_json::to_value(t)?);
        }
    }
    let mut out = serde_json::to_vec_pretty(&v)?;
    out.push(b'\n');
    Ok(out)
}

fn region_scores_csv(w: &mut Vec<u8>, gen: Option<&RegionScoreSet>, meas: Option<&RegionScoreSet>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["evaluation", "n_voxels", "s_pos", "s_neg", "s_edit", "s_causal", "partial_causal"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, s) in [("generated_eval", gen), ("measured_eval", meas)] {
        if let Some(s) = s {
            wtr.write_record([
                name.to_string(),
                s.n_voxels.to_string(),
                s.s_pos.to_string(),
                opt(s.s_neg),
                opt(s.s_edit),
                opt(s.s_causal),
                s.partial_causal.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn retrieval_csv(w: &mut Vec<u8>, data: &ConceptData) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["query", "stage", "rank", "image_id", "similarity", "verification"])?;
    for r in &data.retrieval {
        for (i, (id, (s, v))) in r.ranked_ids.iter().zip(r.similarities.iter().zip(&r.verification)).enumerate() {
            wtr.write_record([
                r.query.clone(),
                format!("{:?}", r.stage),
                (i + 1).to_string(),
                id.clone(),
                s.to_string(),
                v.as_str().to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn concept_files(cfg: &PipelineConfig, ev: &Evaluated, upstream: &str, full: &str) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let r = &ev.report;
    let mut manifest = ev.data.manifest.clone();
    manifest.extra.insert("upstream_hash".into(), upstream.into());
    let mut manifest_bytes = Vec::new();
    manifest.write_jsonl(&mut manifest_bytes)?;
    let thresholds = || Thresholds {
        alpha: cfg.significance.alpha,
        required: &cfg.significance.required,
        evidence: &cfg.evidence,
        coverage: &cfg.coverage,
    };
    let mut text = format!("config hash: {full}\n");
    text.push_str(&r.verdict.render_text());
    text.push_str(&format!(
        "thresholds: alpha {} required [{}] generated causal > {} measured causal > {} coverage pos >= {} neg >= {}\n",
        cfg.significance.alpha,
        cfg.significance.required.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", "),
        cfg.evidence.generated_causal_above,
        cfg.evidence.measured_causal_above,
        cfg.coverage.pos,
        cfg.coverage.neg,
    ));
    Ok(vec![
        ("manifest.jsonl", manifest_bytes),
        ("scores.csv", csv_bytes("upstream_hash", upstream, |w| r.scores.write_csv(w))?),
        (
            "score_map_causal.csv",
            csv_bytes("upstream_hash", upstream, |w| export_score_map(&r.scores, "s_causal", w))?,
        ),
        ("region.csv", csv_bytes("upstream_hash", upstream, |w| r.region.write_csv(w))?),
        (
            "region_scores.csv",
            csv_bytes("upstream_hash", upstream, |w| {
                region_scores_csv(w, r.generated_eval.as_ref(), r.measured_eval.as_ref())
            })?,
        ),
        ("retrieval.csv", csv_bytes("upstream_hash", upstream, |w| retrieval_csv(w, &ev.data))?),
        (
            "pvalues.csv",
            csv_bytes("config_hash", full, |w| write_results_csv(w, &r.concept, &r.verdict.supporting.significance))?,
        ),
        ("coverage.json", stamped(&r.coverage, full, None)?),
        ("verdict.json", stamped(&r.verdict, full, Some(thresholds()))?),
        ("verdict.txt", text.into_bytes()),
        ("followup.csv", csv_bytes("config_hash", full, |w| r.followup.write_csv(w))?),
    ])
}

fn write_dir(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).at_path(dir))?;
    for name in CONCEPT_FILES {
        let p = dir.join(name);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::from(e).at_path(&p))?;
        }
    }
    for (name, bytes) in files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::from(e).at_path(&p))?;
    }
    Ok(())
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Runs every configured concept and writes the output tree. Errors returned
/// here are fatal configuration or input errors; per-concept failures are
/// recorded in the report and in `errors.csv`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    run_pipeline_with_client(cfg, None)
}

/// As [`run_pipeline`], with `client` standing in for the configured
/// backend's models.
pub fn run_pipeline_with_client(cfg: &PipelineConfig, client: Option<Arc<dyn ModelClient>>) -> Result<RunReport> {
    let started = unix_now();
    cfg.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory configured".into()))?;
    let setup = Setup::new(cfg, client)?;
    let upstream = cfg.upstream_hash(&setup.inputs);
    let full = cfg.config_hash(&setup.inputs);
    std::fs::create_dir_all(&out).map_err(|e| Error::from(e).at_path(&out))?;

    let cache = DataCache {
        slots: Mutex::new(BTreeMap::new()),
    };
    let results = bounded_map(&cfg.concepts, cfg.workers, |c| {
        log::info!("running {c}");
        let r = run_concept(cfg, &setup, &cache, c);
        let dir = out.join(slug(c));
        let written = match &r {
            Ok(ev) => concept_files(cfg, ev, &upstream, &full).and_then(|files| write_dir(&dir, &files)),
            Err(e) => write_dir(&dir, &[("error.txt", format!("{e}\n").into_bytes())]),
        };
        (r, written)
    });

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (c, (r, written)) in cfg.concepts.iter().zip(results) {
        written?;
        match r {
            Ok(ev) => reports.push(ev.report),
            Err(e) => {
                log::error!("{c} failed: {e}");
                failures.push((c.clone(), e.to_string()));
            }
        }
    }

    let verdicts: Vec<Verdict> = reports.iter().map(|r| r.verdict.clone()).collect();
    let summary = csv_bytes("config_hash", &full, |w| write_summary_csv(w, &verdicts))?;
    let errors = csv_bytes("config_hash", &full, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["concept", "error"])?;
        for (c, e) in &failures {
            wtr.write_record([c, e])?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    let mut echo = cfg.clone();
    echo.output_dir = None;
    echo.workers = 1;
    let echo = format!("# config_hash: {full}\n# upstream_hash: {upstream}\n{}", echo.to_toml()?);
    for (name, bytes) in [
        ("summary.csv", summary),
        ("errors.csv", errors),
        ("config_echo.toml", echo.into_bytes()),
    ] {
        let p = out.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::from(e).at_path(&p))?;
    }
    log::info!(
        "finished {} concepts ({} failed) in {:.2}s with {} workers",
        cfg.concepts.len(),
        failures.len(),
        unix_now() - started,
        cfg.workers
    );
    Ok(RunReport {
        output_dir: out,
        reports,
        failures,
        config_hash: full,
        upstream_hash: upstream,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_map_round_trip_sorted() {
        let table = VoxelScoreTable {
            voxel_ids: vec!["v2".into(), "v0".into(), "v1".into()],
            s_pos: vec![1.0, 2.0, 3.0],
            s_neg: None,
            s_edit: None,
            s_causal: vec![0.5, -0.25, 0.125],
            components: BTreeMap::new(),
            combined: None,
            counts: Default::default(),
            partial_causal: false,
        };
        let mut buf = b"# header comment\n".to_vec();
        export_score_map(&table, "s_causal", &mut buf).unwrap();
        let back = import_score_map(&buf[..]).unwrap();
        assert_eq!(
            back,
            vec![("v0".to_string(), -0.25), ("v1".to_string(), 0.125), ("v2".to_string(), 0.5)]
        );
        assert!(export_score_map(&table, "nope", Vec::new()).is_err());
    }
}
