//! Exact cosine retrieval over embedding indices, verification of retrieved
//! items, and coverage accounting for measured datasets.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clients::{self, ModelClient, VerifyOutcome};
use crate::error::{Error, Result};
use crate::matrix::EmbeddingIndex;
use crate::pool::bounded_map;
use crate::scoring::desc_then_id;
use crate::stimulus::{Role, Source, StimulusManifest};

/// Stage-1 candidate count for two-stage negative retrieval.
pub const DEFAULT_STAGE1_CANDIDATES: usize = 100;

pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    SingleStage,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verification {
    Pending,
    Pass,
    Fail,
    /// The verifier could not answer; never counts as a pass.
    Unverified,
}

impl Verification {
    pub fn as_str(self) -> &'static str {
        match self {
            Verification::Pending => "pending",
            Verification::Pass => "pass",
            Verification::Fail => "fail",
            Verification::Unverified => "unverified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub stage: Stage,
    pub ranked_ids: Vec<String>,
    /// Similarity under the final ranking criterion: the query for single
    /// stage, the positive vector for two stage.
    pub similarities: Vec<f64>,
    /// Two stage only: similarity to the negative vector.
    pub stage1_similarities: Option<Vec<f64>>,
    pub verification: Vec<Verification>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.ranked_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked_ids.is_empty()
    }

    pub fn passing_ids(&self) -> Vec<&str> {
        self.ranked_ids
            .iter()
            .zip(&self.verification)
            .filter(|(_, v)| **v == Verification::Pass)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// CSV of (rank, id, similarity, verification), rank starting at 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["rank", "id", "similarity", "verification"])?;
        for (i, ((id, s), v)) in self
            .ranked_ids
            .iter()
            .zip(&self.similarities)
            .zip(&self.verification)
            .enumerate()
        {
            wtr.write_record([(i + 1).to_string(), id.clone(), s.to_string(), v.as_str().to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_dim(vec: &[f32], index: &EmbeddingIndex) -> Result<()> {
    if vec.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            actual: vec.len(),
        });
    }
    Ok(())
}

/// Cosine similarity of every index row to `query`. Both sides are unit
/// vectors, so this is a dot product, accumulated in f64 and clamped to [-1, 1].
pub fn similarities(query: &[f32], index: &EmbeddingIndex) -> Result<Vec<f64>> {
    check_dim(query, index)?;
    Ok((0..index.len())
        .map(|r| {
            let dot: f64 = index
                .row(r)
                .iter()
                .zip(query)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            dot.clamp(-1.0, 1.0)
        })
        .collect())
}

/// Top `n` rows by cosine similarity, descending, ties by id ascending.
pub fn rank_by_similarity(query: &str, query_vec: &[f32], index: &EmbeddingIndex, n: usize) -> Result<RetrievalResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("retrieval count must be at least 1".into()));
    }
    let sims = similarities(query_vec, index)?;
    let ids = index.ids();
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| desc_then_id((sims[a], &ids[a]), (sims[b], &ids[b])));
    order.truncate(n);
    Ok(RetrievalResult {
        query: query.to_string(),
        stage: Stage::SingleStage,
        ranked_ids: order.iter().map(|&i| ids[i].clone()).collect(),
        similarities: order.iter().map(|&i| sims[i]).collect(),
        stage1_similarities: None,
        verification: vec![Verification::Pending; order.len()],
    })
}

/// Stage 1 keeps the top `m` rows by similarity to `neg_vec`. Stage 2 orders
/// those by similarity to `pos_vec`, ascending, ties by id ascending, and
/// returns the first `n`. `m` larger than the index means the whole index.
pub fn two_stage_negative_retrieval(
    query: &str,
    neg_vec: &[f32],
    pos_vec: &[f32],
    index: &EmbeddingIndex,
    m: usize,
    n: usize,
) -> Result<RetrievalResult> {
    if n == 0 || n > m {
        return Err(Error::InvalidArgument(format!("need 1 <= n <= m, got n={n}, m={m}")));
    }
    let stage1 = rank_by_similarity(query, neg_vec, index, m)?;
    let pos = similarities(pos_vec, index)?;
    let ids = index.ids();
    let mut rows: Vec<(usize, f64)> = stage1
        .ranked_ids
        .iter()
        .zip(&stage1.similarities)
        .map(|(id, &s)| (ids.iter().position(|x| x == id).expect("id from index"), s))
        .collect();
    rows.sort_by(|&(a, _), &(b, _)| {
        pos[a]
            .partial_cmp(&pos[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    rows.truncate(n);
    Ok(RetrievalResult {
        query: query.to_string(),
        stage: Stage::TwoStage,
        ranked_ids: rows.iter().map(|&(i, _)| ids[i].clone()).collect(),
        similarities: rows.iter().map(|&(i, _)| pos[i]).collect(),
        stage1_similarities: Some(rows.iter().map(|&(_, s)| s).collect()),
        verification: vec![Verification::Pending; rows.len()],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyMode {
    RequirePresent,
    RequireAbsent,
    /// Counter concept present and target absent.
    Double(String),
}

fn present(o: VerifyOutcome) -> Verification {
    match o {
        VerifyOutcome::Present => Verification::Pass,
        VerifyOutcome::Absent => Verification::Fail,
        VerifyOutcome::Unverified => Verification::Unverified,
    }
}

fn absent(o: VerifyOutcome) -> Verification {
    match o {
        VerifyOutcome::Present => Verification::Fail,
        VerifyOutcome::Absent => Verification::Pass,
        VerifyOutcome::Unverified => Verification::Unverified,
    }
}

/// Conjunction of two checks: any definite failure fails, otherwise any
/// unanswered check leaves the item unverified.
pub fn both(a: Verification, b: Verification) -> Verification {
    use Verification::*;
    match (a, b) {
        (Fail, _) | (_, Fail) => Fail,
        (Pass, Pass) => Pass,
        (Pending, _) | (_, Pending) => Pending,
        _ => Unverified,
    }
}

/// Verifies one image against `concept` under `mode`.
pub fn verify_item(client: &dyn ModelClient, image_ref: &str, concept: &str, mode: &VerifyMode) -> Verification {
    match mode {
        VerifyMode::RequirePresent => present(clients::verify(client, image_ref, concept)),
        VerifyMode::RequireAbsent => absent(clients::verify(client, image_ref, concept)),
        VerifyMode::Double(counter) => both(
            present(clients::verify(client, image_ref, counter)),
            absent(clients::verify(client, image_ref, concept)),
        ),
    }
}

/// Fills in verification outcomes with at most `max_in_flight` concurrent
/// client calls. Outcomes are keyed by position, so results do not depend on
/// completion order.
pub fn verify_batch(
    mut result: RetrievalResult,
    concept: &str,
    mode: &VerifyMode,
    client: &dyn ModelClient,
    max_in_flight: usize,
) -> RetrievalResult {
    result.verification = bounded_map(&result.ranked_ids, max_in_flight, |id| {
        verify_item(client, id, concept, mode)
    });
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverageLevel {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageThresholds {
    #[serde(default = "default_threshold")]
    pub pos: f64,
    #[serde(default = "default_threshold")]
    pub neg: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_COVERAGE_THRESHOLD
}

impl Default for CoverageThresholds {
    fn default() -> Self {
        CoverageThresholds {
            pos: DEFAULT_COVERAGE_THRESHOLD,
            neg: DEFAULT_COVERAGE_THRESHOLD,
        }
    }
}

impl CoverageThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pos", self.pos), ("neg", self.neg)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("coverage threshold {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestedCounts {
    pub n_pos: usize,
    pub n_neg_per_counter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverageFlag {
    NoPositivesRequested,
    NoNegativesRequested,
    NoCounterConcepts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCoverage {
    pub counter_concept: String,
    pub n_neg_requested: usize,
    pub n_neg_verified: usize,
}

impl PairCoverage {
    /// Verified negatives that count toward the request.
    pub fn usable(&self) -> usize {
        self.n_neg_verified.min(self.n_neg_requested)
    }

    pub fn deficit(&self) -> usize {
        self.n_neg_requested - self.usable()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub concept: String,
    pub n_pos_requested: usize,
    pub n_pos_verified: usize,
    pub pairs: Vec<PairCoverage>,
    pub pos_coverage_ratio: f64,
    /// Fraction of counter concepts with at least one usable verified negative.
    pub neg_pair_coverage_ratio: f64,
    pub coverage_level: CoverageLevel,
    pub thresholds: CoverageThresholds,
    pub flags: Vec<CoverageFlag>,
}

impl CoverageReport {
    pub fn pos_deficit(&self) -> usize {
        self.n_pos_requested - self.n_pos_verified.min(self.n_pos_requested)
    }
}

fn capped_ratio(verified: usize, requested: usize) -> f64 {
    if requested == 0 {
        0.0
    } else {
        verified.min(requested) as f64 / requested as f64
    }
}

/// Coverage of the measured dataset: verified positives and verified
/// negatives per counter concept, counting only `RetrievedMeasured` images.
pub fn coverage_report(
    concept: &str,
    manifest: &StimulusManifest,
    requested: RequestedCounts,
    thresholds: CoverageThresholds,
) -> CoverageReport {
    let measured = [Source::RetrievedMeasured];
    let n_pos_verified = manifest.select(Role::Positive, None, &measured, true).len();
    let mut per_counter: BTreeMap<&str, usize> = BTreeMap::new();
    for img in manifest.select(Role::SemanticNegative, None, &measured, true) {
        if let Some(c) = img.counter_concept.as_deref() {
            *per_counter.entry(c).or_default() += 1;
        }
    }
    let pairs: Vec<PairCoverage> = manifest
        .counter_concepts
        .iter()
        .map(|c| PairCoverage {
            counter_concept: c.clone(),
            n_neg_requested: requested.n_neg_per_counter,
            n_neg_verified: per_counter.get(c.as_str()).copied().unwrap_or(0),
        })
        .collect();

    let mut flags = Vec::new();
    if requested.n_pos == 0 {
        flags.push(CoverageFlag::NoPositivesRequested);
    }
    if requested.n_neg_per_counter == 0 {
        flags.push(CoverageFlag::NoNegativesRequested);
    }
    if pairs.is_empty() {
        flags.push(CoverageFlag::NoCounterConcepts);
    }
    let pos_coverage_ratio = capped_ratio(n_pos_verified, requested.n_pos);
    let populated = pairs.iter().filter(|p| p.usable() >= 1).count();
    let neg_pair_coverage_ratio = capped_ratio(populated, pairs.len());
    let high = pos_coverage_ratio >= thresholds.pos && neg_pair_coverage_ratio >= thresholds.neg;
    CoverageReport {
        concept: concept.to_string(),
        n_pos_requested: requested.n_pos,
        n_pos_verified,
        pairs,
        pos_coverage_ratio,
        neg_pair_coverage_ratio,
        coverage_level: if high { CoverageLevel::High } else { CoverageLevel::Low },
        thresholds,
        flags,
    }
}
