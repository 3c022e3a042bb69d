//! Run configuration: TOML with defaults, validated before any work starts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::{slug, RetryPolicy};
use crate::error::{Error, Result};
use crate::matrix::DEFAULT_RELIABILITY_THRESHOLD;
use crate::region::DEFAULT_REGION_SIZE;
use crate::retrieval::{CoverageThresholds, DEFAULT_STAGE1_CANDIDATES};
use crate::scoring::{Component, VoxelScoreTable, DEFAULT_HARD_NEGATIVES};
use crate::stats::{Criterion, DEFAULT_ALPHA};
use crate::stimulus::{build_generation_plan, GenerationPlan, PlanConfig};
use crate::verdict::{EvidenceThresholds, FollowUpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionModeName {
    TopK,
    PositiveCausal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub mode: RegionModeName,
    pub k: usize,
    /// Score used for TopK ranking.
    pub score: String,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            mode: RegionModeName::TopK,
            k: DEFAULT_REGION_SIZE,
            score: "s_causal".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub hard_negatives: usize,
    /// Component name to weight. Empty means no combined score.
    pub weights: BTreeMap<String, f64>,
    /// z-score each component across voxels before weighting.
    pub standardize: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            hard_negatives: DEFAULT_HARD_NEGATIVES,
            weights: BTreeMap::new(),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignificanceConfig {
    pub alpha: f64,
    pub required: Vec<Criterion>,
    /// Baseline concepts per target. Targets not listed use the other
    /// concepts of the run.
    pub baselines: BTreeMap<String, Vec<String>>,
    pub max_baselines: Option<usize>,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        SignificanceConfig {
            alpha: DEFAULT_ALPHA,
            required: vec![Criterion::ActivationGen, Criterion::CausalGen],
            baselines: BTreeMap::new(),
            max_baselines: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub stage1_candidates: usize,
    /// Measured positives requested; defaults to the plan's eval positives.
    pub n_pos: Option<usize>,
    /// Measured negatives requested per counter concept; defaults to the
    /// plan's prompts per counter.
    pub n_neg_per_counter: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            stage1_candidates: DEFAULT_STAGE1_CANDIDATES,
            n_pos: None,
            n_neg_per_counter: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizationMode {
    /// Statistics of the predicted pool, applied to generated responses.
    Reference,
    /// Each concept's generated responses are z-scored on their own.
    Own,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationConfig {
    pub mode: NormalizationMode,
    /// Drop voxels whose predicted and measured pool responses correlate
    /// below the threshold. Needs a measured pool.
    pub reliability_filter: bool,
    pub reliability_threshold: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig {
            mode: NormalizationMode::Reference,
            reliability_filter: true,
            reliability_threshold: DEFAULT_RELIABILITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// In-process synthetic world.
    Simulator { world: PathBuf },
    /// Deterministic stub models.
    Stub {
        voxel_dim: usize,
        #[serde(default = "default_embed_dim")]
        embed_dim: usize,
    },
    /// Remote models; the endpoint falls back to the environment.
    Http {
        endpoint: Option<String>,
        voxel_dim: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_embed_dim() -> usize {
    16
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// Measured responses and embeddings of the measured image pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredConfig {
    pub matrix: PathBuf,
    pub index: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryConfig {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        let p = RetryPolicy::default();
        RetryConfig {
            max_retries: p.max_retries,
            initial_backoff_ms: p.initial_backoff.as_millis() as u64,
            multiplier: p.multiplier,
            max_backoff_ms: p.max_backoff.as_millis() as u64,
        }
    }
}

impl RetryConfig {
    pub fn policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_backoff: Duration::from_millis(self.initial_backoff_ms),
            multiplier: self.multiplier,
            max_backoff: Duration::from_millis(self.max_backoff_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub concepts: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Concepts processed concurrently. Not part of the config hash.
    #[serde(default = "one")]
    pub workers: usize,
    /// Concurrent requests per client. Not part of the config hash.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub coverage: CoverageThresholds,
    #[serde(default)]
    pub significance: SignificanceConfig,
    #[serde(default)]
    pub evidence: EvidenceThresholds,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub normalization: NormalizationConfig,
    pub backend: BackendConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured: Option<MeasuredConfig>,
    #[serde(default)]
    pub followup: FollowUpConfig,
    #[serde(default)]
    pub retry: RetryConfig,
}

fn one() -> usize {
    1
}

fn default_in_flight() -> usize {
    8
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and resolves relative input paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        let mut cfg = PipelineConfig::from_toml(&text).map_err(|e| e.at_path(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendConfig::Simulator { world } = &mut self.backend {
            fix(world);
        }
        if let Some(m) = &mut self.measured {
            fix(&mut m.matrix);
            fix(&mut m.index);
        }
        if let Some(o) = &mut self.output_dir {
            fix(o);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn plan_for(&self, concept: &str) -> Result<GenerationPlan> {
        build_generation_plan(concept, &self.plan)
    }

    pub fn n_pos_requested(&self, plan: &GenerationPlan) -> usize {
        self.retrieval.n_pos.unwrap_or(plan.n_pos_eval)
    }

    pub fn n_neg_requested(&self, plan: &GenerationPlan) -> usize {
        self.retrieval.n_neg_per_counter.unwrap_or(plan.n_prompts_per_counter)
    }

    /// Baseline concepts for `target`, in configured order.
    pub fn baselines_for(&self, target: &str) -> Vec<String> {
        let mut list: Vec<String> = match self.significance.baselines.get(target) {
            Some(b) => b.clone(),
            None => self.concepts.iter().filter(|c| *c != target).cloned().collect(),
        };
        if let Some(n) = self.significance.max_baselines {
            list.truncate(n);
        }
        list
    }

    /// Checks everything that can be checked without touching a client.
    pub fn validate(&self) -> Result<()> {
        check(!self.concepts.is_empty(), || "at least one concept is required".into())?;
        let mut slugs = BTreeSet::new();
        for c in &self.concepts {
            let s = slug(c);
            check(!s.is_empty(), || format!("concept {c:?} has no usable name"))?;
            check(slugs.insert(s), || format!("concept {c:?} is listed twice or collides with another name"))?;
            self.plan_for(c).map_err(|e| Error::Config(e.to_string()))?;
        }
        check(self.workers >= 1, || "workers must be at least 1".into())?;
        check(self.max_in_flight >= 1, || "max_in_flight must be at least 1".into())?;

        check(self.region.k >= 1, || "region.k must be at least 1".into())?;
        for (name, w) in &self.scoring.weights {
            name.parse::<Component>().map_err(|_| Error::Config(format!("unknown score component {name:?} in scoring.weights")))?;
            check(w.is_finite(), || format!("weight of {name} must be finite"))?;
        }
        let score = self.region.score.as_str();
        let known = VoxelScoreTable::SCORE_NAMES.contains(&score) || score.parse::<Component>().is_ok();
        check(known, || format!("unknown region score {score:?}"))?;
        check(score != "combined" || !self.scoring.weights.is_empty(), || {
            "region.score = \"combined\" needs scoring.weights".into()
        })?;

        self.coverage.validate().map_err(|e| Error::Config(e.to_string()))?;
        let alpha = self.significance.alpha;
        check(alpha > 0.0 && alpha <= 1.0, || format!("alpha must be in (0, 1], got {alpha}"))?;
        let required: BTreeSet<_> = self.significance.required.iter().collect();
        check(required.len() == self.significance.required.len(), || {
            "significance.required lists a criterion twice".into()
        })?;
        for (target, list) in &self.significance.baselines {
            check(!list.contains(target), || format!("{target:?} is listed as its own baseline"))?;
        }
        check(
            self.evidence.generated_causal_above.is_finite() && self.evidence.measured_causal_above.is_finite(),
            || "evidence thresholds must be finite".into(),
        )?;

        let r = &self.retrieval;
        check(r.stage1_candidates >= 1, || "retrieval.stage1_candidates must be at least 1".into())?;
        for c in &self.concepts {
            let plan = self.plan_for(c)?;
            let n = self.n_neg_requested(&plan);
            check(n <= r.stage1_candidates, || {
                format!("{n} negatives per counter exceed {} stage-1 candidates", r.stage1_candidates)
            })?;
        }
        let t = self.normalization.reliability_threshold;
        check((-1.0..=1.0).contains(&t), || format!("reliability threshold {t} outside [-1, 1]"))?;
        let rc = &self.retry;
        check(rc.multiplier.is_finite() && rc.multiplier >= 1.0, || "retry.multiplier must be at least 1".into())?;
        match &self.backend {
            BackendConfig::Simulator { world } => {
                check(world.exists(), || format!("world file {} not found", world.display()))?;
            }
            BackendConfig::Stub { voxel_dim, embed_dim } => {
                check(*voxel_dim >= 1 && *embed_dim >= 1, || "stub dimensions must be at least 1".into())?;
            }
            BackendConfig::Http { endpoint, voxel_dim, .. } => {
                check(*voxel_dim >= 1, || "http voxel_dim must be at least 1".into())?;
                check(endpoint.is_some() || std::env::var(crate::clients::ENDPOINT_ENV).is_ok(), || {
                    format!("http backend needs an endpoint or {}", crate::clients::ENDPOINT_ENV)
                })?;
            }
        }
        if let Some(m) = &self.measured {
            for p in [&m.matrix, &m.index] {
                check(p.exists(), || format!("measured input {} not found", p.display()))?;
            }
        }
        Ok(())
    }

    /// Hash of every setting that can change dataset assembly, scores or the
    /// region. Outputs up to the region carry this one, so changing only
    /// downstream thresholds leaves them byte-identical.
    pub fn upstream_hash(&self, inputs: &BTreeMap<String, String>) -> String {
        #[derive(Serialize)]
        struct Upstream<'a> {
            concepts: &'a [String],
            seed: u64,
            plan: &'a PlanConfig,
            region: &'a RegionConfig,
            scoring: &'a ScoringConfig,
            retrieval: &'a RetrievalConfig,
            normalization: &'a NormalizationConfig,
            backend: &'a BackendConfig,
            measured: &'a Option<MeasuredConfig>,
            retry: &'a RetryConfig,
            inputs: &'a BTreeMap<String, String>,
        }
        hash_of(&Upstream {
            concepts: &self.concepts,
            seed: self.seed,
            plan: &self.plan,
            region: &self.region,
            scoring: &self.scoring,
            retrieval: &self.retrieval,
            normalization: &self.normalization,
            backend: &self.backend,
            measured: &self.measured,
            retry: &self.retry,
            inputs,
        })
    }

    /// Hash of the whole configuration except where outputs go and how much
    /// parallelism is used.
    pub fn config_hash(&self, inputs: &BTreeMap<String, String>) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.workers = 1;
        c.max_in_flight = 1;
        hash_of(&(c, inputs))
    }
}

fn hash_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

/// Content digest of an input file, for the config hash.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        concepts = ["dog"]
        [backend]
        kind = "stub"
        voxel_dim = 8
    "#;

    #[test]
    fn defaults_fill_in() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.region.k, 100);
        assert_eq!(c.significance.alpha, 0.05);
        assert_eq!(c.max_in_flight, 8);
        assert_eq!(c.normalization.reliability_threshold, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_components_are_rejected() {
        assert!(PipelineConfig::from_toml(&format!("{MINIMAL}\n[region]\nsize = 3\n")).is_err());
        let c = PipelineConfig::from_toml(&format!("{MINIMAL}\n[scoring.weights]\nXYZ = 1.0\n")).unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("XYZ"), "{err}");
    }

    #[test]
    fn alpha_only_changes_full_hash() {
        let a = PipelineConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.significance.alpha = 0.01;
        let inputs = BTreeMap::new();
        assert_eq!(a.upstream_hash(&inputs), b.upstream_hash(&inputs));
        assert_ne!(a.config_hash(&inputs), b.config_hash(&inputs));
        let mut c = a.clone();
        c.workers = 4;
        assert_eq!(a.config_hash(&inputs), c.config_hash(&inputs));
    }
}
