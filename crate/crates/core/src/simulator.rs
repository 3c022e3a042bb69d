//! Synthetic worlds with planted ground truth.
//!
//! An image is described by a set of flags (concepts and attributes). Each
//! voxel is one of three kinds: selective for a concept flag, driven by an
//! attribute flag, or pure noise. Co-occurrence rules attach attributes to
//! concepts with fixed probabilities, so an attribute-driven voxel looks
//! concept-selective to anyone who only measures activation on positives.
//!
//! All randomness comes from [`crate::rng`] streams keyed by image key, so
//! responses do not depend on processing order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clients::{ClientError, ClientRequest, ClientResponse, ModelClient, PromptKind};
use crate::error::{Error, Result};
use crate::matrix::{normalize_in_place, EmbeddingIndex, Provenance, ResponseMatrix};
use crate::pool::bounded_map;
use crate::region::{select_region_top_k, Region};
use crate::rng;
use crate::scoring::{region_scores, score_voxels, ScoringSets, DEFAULT_HARD_NEGATIVES};
use crate::stimulus::{
    build_generation_plan, GenerationPlan, PlanConfig, Role, Source, Split, StimulusImage, StimulusManifest,
};

pub const REF_PREFIX: &str = "sim://img/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    ConceptSelective,
    ConfoundDriven,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGroup {
    pub kind: GroupKind,
    /// Driving flag; required for selective and confound groups.
    #[serde(default)]
    pub flag: Option<String>,
    pub count: usize,
    #[serde(default = "one")]
    pub gain: f64,
    /// Overrides the world-wide noise level for this group.
    #[serde(default)]
    pub noise_sd: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cooccurrence {
    pub given: String,
    pub flag: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    #[serde(default)]
    pub counter_concepts: Vec<String>,
    /// Overrides `pool.per_concept` for this concept.
    #[serde(default)]
    pub pool_images: Option<usize>,
}

/// Composition of the simulated measured image pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSpec {
    pub per_concept: usize,
    pub per_counter: usize,
    pub background: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            per_concept: 40,
            per_counter: 10,
            background: 100,
        }
    }
}

/// How a frozen region counts as a discovery in the FPR experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discovery {
    /// The strategy's own score of the region on the held-out split is positive.
    EvalSign,
    /// Same, on the training split used for selection.
    TrainSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub region_size: usize,
    pub hard_negatives: usize,
    pub discovery: Discovery,
    pub plan: PlanConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            region_size: 20,
            hard_negatives: DEFAULT_HARD_NEGATIVES,
            discovery: Discovery::EvalSign,
            plan: PlanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    /// Noise of simulated measurements; defaults to each voxel's own level.
    #[serde(default)]
    pub measured_noise_sd: Option<f64>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Scale of per-image jitter added to image embeddings.
    #[serde(default = "default_embedding_noise")]
    pub embedding_noise: f64,
    pub voxels: Vec<VoxelGroup>,
    #[serde(default)]
    pub cooccurrence: Vec<Cooccurrence>,
    pub concepts: Vec<ConceptSpec>,
    #[serde(default)]
    pub pool: PoolSpec,
    #[serde(default)]
    pub experiment: ExperimentSpec,
}

fn default_noise() -> f64 {
    0.5
}

fn default_embedding_dim() -> usize {
    32
}

fn default_embedding_noise() -> f64 {
    0.1
}

impl WorldSpec {
    pub fn from_toml(text: &str) -> Result<WorldSpec> {
        toml::from_str(text).map_err(|e| Error::InvalidWorld(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<WorldSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        WorldSpec::from_toml(&text).map_err(|e| e.at_path(path))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The same world with every noise level set to zero.
    pub fn noiseless(&self) -> WorldSpec {
        let mut s = self.clone();
        s.noise_sd = 0.0;
        s.measured_noise_sd = Some(0.0);
        for g in &mut s.voxels {
            g.noise_sd = g.noise_sd.map(|_| 0.0);
        }
        s
    }

    /// The same world with every confound-driven group emptied.
    pub fn without_confound_voxels(&self) -> WorldSpec {
        let mut s = self.clone();
        for g in s.voxels.iter_mut().filter(|g| g.kind == GroupKind::ConfoundDriven) {
            g.count = 0;
        }
        s
    }
}

/// Ground-truth label of a voxel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoxelType {
    ConceptSelective(String),
    ConfoundDriven(String),
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub id: String,
    pub kind: VoxelType,
    pub gain: f64,
    pub noise_sd: f64,
}

/// Flags present in one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Descriptor(pub BTreeSet<String>);

impl Descriptor {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(flags: I) -> Self {
        Descriptor(flags.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, flag: &str) -> bool {
        self.0.contains(flag)
    }

    pub fn without(&self, flag: &str) -> Descriptor {
        let mut d = self.clone();
        d.0.remove(flag);
        d
    }

    pub fn flags(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags: Vec<&str> = self.flags().collect();
        f.write_str(&flags.join(","))
    }
}

/// Image ref carrying its key and descriptor: `sim://img/<key>?flags=a,b`.
pub fn image_ref(key: &str, desc: &Descriptor) -> String {
    format!("{REF_PREFIX}{key}?flags={desc}")
}

pub fn parse_image_ref(r: &str) -> Option<(&str, Descriptor)> {
    let rest = r.strip_prefix(REF_PREFIX)?;
    let (key, flags) = rest.split_once("?flags=")?;
    let desc = if flags.is_empty() {
        Descriptor::default()
    } else {
        Descriptor::new(flags.split(','))
    };
    Some((key, desc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub spec: WorldSpec,
    voxels: Vec<VoxelSpec>,
    vocabulary: BTreeSet<String>,
    rules: BTreeMap<String, Vec<(String, f64)>>,
}

fn check_flag(f: &str) -> Result<()> {
    let ok = !f.is_empty()
        && f.chars().all(|c| c.is_alphanumeric() || c == '-' || c == '_' || c == ' ')
        && f.trim() == f;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidWorld(format!("invalid flag name {f:?}")))
    }
}

fn check_level(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidWorld(format!("{what} must be finite and non-negative, got {v}")))
    }
}

/// Validates `spec` and expands its voxel groups. `seed` overrides the seed in the spec.
pub fn build_world(spec: &WorldSpec, seed: u64) -> Result<SyntheticWorld> {
    if spec.concepts.is_empty() {
        return Err(Error::InvalidWorld("no concepts".into()));
    }
    for kind in [GroupKind::ConceptSelective, GroupKind::ConfoundDriven] {
        if !spec.voxels.iter().any(|g| g.kind == kind) {
            return Err(Error::InvalidWorld(format!("no {kind:?} voxel group")));
        }
    }
    if spec.embedding_dim < 2 {
        return Err(Error::InvalidWorld("embedding_dim must be at least 2".into()));
    }
    check_level("noise_sd", spec.noise_sd)?;
    check_level("embedding_noise", spec.embedding_noise)?;
    if let Some(m) = spec.measured_noise_sd {
        check_level("measured_noise_sd", m)?;
    }

    let mut vocabulary = BTreeSet::new();
    let mut names = BTreeSet::new();
    for c in &spec.concepts {
        check_flag(&c.name)?;
        if !names.insert(c.name.as_str()) {
            return Err(Error::InvalidWorld(format!("duplicate concept {:?}", c.name)));
        }
        vocabulary.insert(c.name.clone());
        for counter in &c.counter_concepts {
            check_flag(counter)?;
            if counter.to_lowercase().contains(&c.name.to_lowercase()) {
                return Err(Error::InvalidWorld(format!(
                    "counter concept {counter:?} mentions its target {:?}",
                    c.name
                )));
            }
            vocabulary.insert(counter.clone());
        }
    }
    let mut rules: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for r in &spec.cooccurrence {
        check_flag(&r.given)?;
        check_flag(&r.flag)?;
        if !(0.0..=1.0).contains(&r.p) {
            return Err(Error::InvalidWorld(format!(
                "co-occurrence probability P({} | {}) = {} outside [0, 1]",
                r.flag, r.given, r.p
            )));
        }
        vocabulary.insert(r.given.clone());
        vocabulary.insert(r.flag.clone());
        rules.entry(r.given.clone()).or_default().push((r.flag.clone(), r.p));
    }

    let total: usize = spec.voxels.iter().map(|g| g.count).sum();
    let width = total.saturating_sub(1).to_string().len().max(4);
    let mut voxels = Vec::with_capacity(total);
    for g in &spec.voxels {
        check_level("gain magnitude", g.gain.abs())?;
        let noise_sd = g.noise_sd.unwrap_or(spec.noise_sd);
        check_level("group noise_sd", noise_sd)?;
        let kind = match (g.kind, &g.flag) {
            (GroupKind::Noise, None) => VoxelType::Noise,
            (GroupKind::Noise, Some(_)) => return Err(Error::InvalidWorld("noise groups take no flag".into())),
            (_, None) => return Err(Error::InvalidWorld(format!("{:?} group needs a flag", g.kind))),
            (GroupKind::ConceptSelective, Some(f)) => VoxelType::ConceptSelective(f.clone()),
            (GroupKind::ConfoundDriven, Some(f)) => VoxelType::ConfoundDriven(f.clone()),
        };
        if let VoxelType::ConceptSelective(f) | VoxelType::ConfoundDriven(f) = &kind {
            check_flag(f)?;
            vocabulary.insert(f.clone());
        }
        for _ in 0..g.count {
            voxels.push(VoxelSpec {
                id: format!("v{:0width$}", voxels.len()),
                kind: kind.clone(),
                gain: g.gain,
                noise_sd,
            });
        }
    }
    Ok(SyntheticWorld {
        seed,
        spec: spec.clone(),
        voxels,
        vocabulary,
        rules,
    })
}

/// Simulated measured pool: images, their measured responses and embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPool {
    pub refs: Vec<String>,
    pub measured: ResponseMatrix,
    pub index: EmbeddingIndex,
}

impl SyntheticWorld {
    pub fn voxels(&self) -> &[VoxelSpec] {
        &self.voxels
    }

    pub fn voxel_ids(&self) -> Vec<String> {
        self.voxels.iter().map(|v| v.id.clone()).collect()
    }

    pub fn n_voxels(&self) -> usize {
        self.voxels.len()
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn concept(&self, name: &str) -> Option<&ConceptSpec> {
        self.spec.concepts.iter().find(|c| c.name == name)
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.spec.concepts.iter().map(|c| c.name.clone()).collect()
    }

    /// True when no voxel is selective for `concept`.
    pub fn is_pure_confound(&self, concept: &str) -> bool {
        !self
            .voxels
            .iter()
            .any(|v| v.kind == VoxelType::ConceptSelective(concept.to_string()))
    }

    fn check_descriptor(&self, d: &Descriptor) -> Result<()> {
        match d.flags().find(|f| !self.vocabulary.contains(*f)) {
            Some(f) => Err(Error::UnknownFlag(f.to_string())),
            None => Ok(()),
        }
    }

    /// `base` flags plus attributes drawn from the co-occurrence rules.
    pub fn sample_descriptor(&self, key: &str, base: &[&str]) -> Result<Descriptor> {
        let mut d = Descriptor::new(base.iter().copied());
        self.check_descriptor(&d)?;
        let mut r = rng::stream(self.seed, "descriptor", key);
        for b in base {
            for (flag, p) in self.rules.get(*b).into_iter().flatten() {
                let u: f64 = r.random();
                if u < *p {
                    d.0.insert(flag.clone());
                }
            }
        }
        Ok(d)
    }

    fn respond(&self, domain: &str, key: &str, d: &Descriptor, sd_override: Option<f64>) -> Result<Vec<f32>> {
        self.check_descriptor(d)?;
        let mut r = rng::stream(self.seed, domain, key);
        Ok(self
            .voxels
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut r);
                let on = match &v.kind {
                    VoxelType::ConceptSelective(f) | VoxelType::ConfoundDriven(f) => d.contains(f),
                    VoxelType::Noise => false,
                };
                let signal = if on { v.gain } else { 0.0 };
                (signal + sd_override.unwrap_or(v.noise_sd) * z) as f32
            })
            .collect())
    }

    /// Encoder-predicted response of the image keyed `key`.
    pub fn simulate_response(&self, key: &str, d: &Descriptor) -> Result<Vec<f32>> {
        self.respond("response", key, d, None)
    }

    /// Measured response of the same image, with independent noise.
    pub fn simulate_measured(&self, key: &str, d: &Descriptor) -> Result<Vec<f32>> {
        self.respond("measured", key, d, self.spec.measured_noise_sd)
    }

    fn direction(&self, name: &str) -> Vec<f32> {
        let mut r = rng::stream(self.seed, "embedding", name);
        let mut v: Vec<f32> = (0..self.spec.embedding_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                z as f32
            })
            .collect();
        normalize_in_place(&mut v).expect("gaussian draw is nonzero");
        v
    }

    /// Unit embedding of a text query: the flag's direction for known flags.
    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        if self.vocabulary.contains(text) {
            self.direction(text)
        } else {
            self.direction(&format!("text:{text}"))
        }
    }

    /// Unit embedding of an image: the normalized sum of its flag directions
    /// plus keyed jitter.
    pub fn embed_image(&self, key: &str, d: &Descriptor) -> Result<Vec<f32>> {
        self.check_descriptor(d)?;
        let dim = self.spec.embedding_dim;
        let mut v = vec![0.0f64; dim];
        for f in d.flags() {
            for (acc, x) in v.iter_mut().zip(self.direction(f)) {
                *acc += f64::from(x);
            }
        }
        let mut r = rng::stream(self.seed, "embedding-jitter", key);
        for acc in v.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *acc += self.spec.embedding_noise * z;
        }
        let mut out: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
        if normalize_in_place(&mut out).is_err() {
            out = self.direction("background");
        }
        Ok(out)
    }

    /// Keys and descriptors of the measured pool, in a fixed order: images
    /// of each battery concept, of each counter concept, then background.
    pub fn pool_descriptors(&self) -> Result<Vec<(String, Descriptor)>> {
        let p = &self.spec.pool;
        let mut out = Vec::new();
        for c in &self.spec.concepts {
            for i in 0..c.pool_images.unwrap_or(p.per_concept) {
                let key = format!("pool-{}-{i}", c.name);
                let d = self.sample_descriptor(&key, &[&c.name])?;
                out.push((key, d));
            }
        }
        let battery: BTreeSet<&str> = self.spec.concepts.iter().map(|c| c.name.as_str()).collect();
        let counters: BTreeSet<&str> = self
            .spec
            .concepts
            .iter()
            .flat_map(|c| c.counter_concepts.iter().map(String::as_str))
            .filter(|c| !battery.contains(c))
            .collect();
        for c in counters {
            for i in 0..p.per_counter {
                let key = format!("pool-{c}-{i}");
                let d = self.sample_descriptor(&key, &[c])?;
                out.push((key, d));
            }
        }
        for i in 0..p.background {
            out.push((format!("pool-background-{i}"), Descriptor::default()));
        }
        Ok(out)
    }

    pub fn measured_pool(&self) -> Result<SimulatedPool> {
        let items = self.pool_descriptors()?;
        let refs: Vec<String> = items.iter().map(|(k, d)| image_ref(k, d)).collect();
        let mut rows = Vec::with_capacity(items.len());
        let mut vectors = Vec::with_capacity(items.len() * self.spec.embedding_dim);
        for (k, d) in &items {
            rows.push(self.simulate_measured(k, d)?);
            vectors.extend(self.embed_image(k, d)?);
        }
        let measured = ResponseMatrix::from_rows(refs.clone(), self.voxel_ids(), &rows, Provenance::Measured)?;
        let index = EmbeddingIndex::new(refs.clone(), self.spec.embedding_dim, vectors)?;
        Ok(SimulatedPool { refs, measured, index })
    }

    fn split_stimuli(
        &self,
        concept: &str,
        split: Split,
        plan: &GenerationPlan,
    ) -> Result<(Vec<Vec<f32>>, Vec<StimulusImage>)> {
        let spec = self
            .concept(concept)
            .ok_or_else(|| Error::InvalidArgument(format!("concept {concept:?} is not in the world")))?;
        let (n_pos, n_parents, tag) = match split {
            Split::Train => (plan.n_pos_train, plan.n_edit_parents_train, "train"),
            Split::Eval => (plan.n_pos_eval, plan.n_edit_parents_eval, "eval"),
        };
        let mut rows = Vec::new();
        let mut images = Vec::new();
        let mut parents = Vec::new();
        for i in 0..n_pos {
            let key = format!("{concept}/{tag}/pos/{i:04}");
            let d = self.sample_descriptor(&key, &[concept])?;
            rows.push(self.simulate_response(&key, &d)?);
            if i < n_parents {
                parents.push((key.clone(), d));
            }
            images.push(StimulusImage::positive(key, concept, split, Source::Generated).with_verified_present(true));
        }
        for counter in spec.counter_concepts.iter().take(plan.n_counter_concepts) {
            for j in 0..plan.n_prompts_per_counter {
                let key = format!("{concept}/{tag}/neg/{counter}/{j:04}");
                let d = self.sample_descriptor(&key, &[counter])?;
                rows.push(self.simulate_response(&key, &d)?);
                images.push(
                    StimulusImage::semantic_negative(key, concept, counter.clone(), split, Source::Generated)
                        .with_verified_absent(true),
                );
            }
        }
        for (parent, d) in parents {
            let edited = d.without(concept);
            for e in 0..plan.n_edits_per_parent {
                let key = format!("{parent}/edit/{e:02}");
                rows.push(self.simulate_response(&key, &edited)?);
                images.push(StimulusImage::counterfactual_edit(key, concept, parent.clone(), split).with_verified_absent(true));
            }
        }
        Ok((rows, images))
    }

    /// Predicted responses and scoring sets for one concept and split, built
    /// straight from the world without going through clients.
    pub fn concept_dataset(&self, concept: &str, split: Split, plan: &GenerationPlan) -> Result<(ResponseMatrix, ScoringSets)> {
        let (rows, images) = self.split_stimuli(concept, split, plan)?;
        let ids = images.iter().map(|i| i.id.clone()).collect();
        let m = ResponseMatrix::from_rows(ids, self.voxel_ids(), &rows, Provenance::Predicted)?;
        Ok((m, ScoringSets::from_images(&images, true)))
    }

    /// Both splits of one concept as a manifest and a predicted response matrix.
    pub fn concept_stimuli(&self, concept: &str, plan: &GenerationPlan) -> Result<(ResponseMatrix, StimulusManifest)> {
        let mut manifest = StimulusManifest::new(concept);
        let spec = self
            .concept(concept)
            .ok_or_else(|| Error::InvalidArgument(format!("concept {concept:?} is not in the world")))?;
        manifest.counter_concepts = spec.counter_concepts.iter().take(plan.n_counter_concepts).cloned().collect();
        let mut rows = Vec::new();
        for split in [Split::Train, Split::Eval] {
            let (r, images) = self.split_stimuli(concept, split, plan)?;
            rows.extend(r);
            manifest.images.extend(images);
        }
        let ids = manifest.images.iter().map(|i| i.id.clone()).collect();
        let m = ResponseMatrix::from_rows(ids, self.voxel_ids(), &rows, Provenance::Predicted)?;
        Ok((m, manifest))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Activation,
    Causal,
}

impl Strategy {
    fn score_name(self) -> &'static str {
        match self {
            Strategy::Activation => "s_pos",
            Strategy::Causal => "s_causal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    Withheld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub region: Vec<String>,
    pub n_selective: usize,
    pub n_confound: usize,
    pub n_other: usize,
    pub train_score: f64,
    pub eval_score: f64,
    pub eval_causal: Option<f64>,
    pub discovered: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptOutcome {
    pub concept: String,
    pub pure_confound: bool,
    pub activation: StrategyOutcome,
    pub causal: StrategyOutcome,
}

impl ConceptOutcome {
    pub fn get(&self, s: Strategy) -> &StrategyOutcome {
        match s {
            Strategy::Activation => &self.activation,
            Strategy::Causal => &self.causal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprMetrics {
    pub fpr_activation: f64,
    pub tpr_activation: f64,
    pub fpr_causal: f64,
    pub tpr_causal: f64,
    /// Fraction of concepts whose discovered region has a non-positive
    /// held-out causal score, the sign-based labeling.
    pub sign_fpr_activation: f64,
    pub sign_fpr_causal: f64,
    pub outcomes: Vec<ConceptOutcome>,
}

impl FprMetrics {
    /// False-positive rate restricted to concepts matching `filter`.
    pub fn fpr_where(&self, s: Strategy, filter: impl Fn(&ConceptOutcome) -> bool) -> f64 {
        let subset: Vec<&ConceptOutcome> = self.outcomes.iter().filter(|o| filter(o)).collect();
        rate(&subset, |o| o.get(s).outcome == Outcome::FalsePositive)
    }

    /// CSV with one row per concept and strategy, then one summary row per strategy.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "concept",
            "strategy",
            "pure_confound",
            "n_selective",
            "n_confound",
            "n_other",
            "train_score",
            "eval_score",
            "eval_causal",
            "outcome",
        ])?;
        for o in &self.outcomes {
            for s in [Strategy::Activation, Strategy::Causal] {
                let r = o.get(s);
                wtr.write_record([
                    o.concept.clone(),
                    format!("{s:?}"),
                    o.pure_confound.to_string(),
                    r.n_selective.to_string(),
                    r.n_confound.to_string(),
                    r.n_other.to_string(),
                    r.train_score.to_string(),
                    r.eval_score.to_string(),
                    r.eval_causal.map_or(String::new(), |x| x.to_string()),
                    format!("{:?}", r.outcome),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn rate<T>(items: &[T], pred: impl Fn(&T) -> bool) -> f64 {
    if items.is_empty() {
        0.0
    } else {
        items.iter().filter(|x| pred(x)).count() as f64 / items.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FprOptions {
    pub region_size: usize,
    pub hard_negatives: usize,
    pub discovery: Discovery,
    pub plan: GenerationPlan,
    pub workers: usize,
}

impl FprOptions {
    pub fn from_spec(spec: &ExperimentSpec) -> Result<FprOptions> {
        Ok(FprOptions {
            region_size: spec.region_size,
            hard_negatives: spec.hard_negatives,
            discovery: spec.discovery,
            plan: build_generation_plan("experiment", &spec.plan)?,
            workers: 1,
        })
    }
}

fn strategy_outcome(
    world: &SyntheticWorld,
    concept: &str,
    strategy: Strategy,
    table: &crate::scoring::VoxelScoreTable,
    train: &(ResponseMatrix, ScoringSets),
    eval: &(ResponseMatrix, ScoringSets),
    opts: &FprOptions,
) -> Result<StrategyOutcome> {
    let region: Region = select_region_top_k(concept, table, strategy.score_name(), opts.region_size)?;
    let tr = region_scores(&train.0, &train.1, &region, opts.hard_negatives)?;
    let ev = region_scores(&eval.0, &eval.1, &region, opts.hard_negatives)?;
    let pick = |r: &crate::scoring::RegionScoreSet| match strategy {
        Strategy::Activation => Some(r.s_pos),
        Strategy::Causal => r.s_causal,
    };
    let train_score = pick(&tr).ok_or(Error::NoCausalEvidence)?;
    let eval_score = pick(&ev).ok_or(Error::NoCausalEvidence)?;
    let discovered = match opts.discovery {
        Discovery::EvalSign => eval_score > 0.0,
        Discovery::TrainSign => train_score > 0.0,
    };
    let by_id: BTreeMap<&str, &VoxelType> = world.voxels.iter().map(|v| (v.id.as_str(), &v.kind)).collect();
    let (mut n_selective, mut n_confound, mut n_other) = (0, 0, 0);
    for id in &region.voxel_ids {
        match by_id[id.as_str()] {
            VoxelType::ConceptSelective(c) if c == concept => n_selective += 1,
            VoxelType::ConfoundDriven(_) => n_confound += 1,
            _ => n_other += 1,
        }
    }
    let outcome = if !discovered {
        Outcome::Withheld
    } else if 2 * n_selective > region.len() {
        Outcome::TruePositive
    } else {
        Outcome::FalsePositive
    };
    Ok(StrategyOutcome {
        region: region.voxel_ids,
        n_selective,
        n_confound,
        n_other,
        train_score,
        eval_score,
        eval_causal: ev.s_causal,
        discovered,
        outcome,
    })
}

/// Runs activation-ranked and causal-ranked discovery for every battery
/// concept and scores both against the planted ground truth.
///
/// Each strategy selects its top `region_size` voxels on the training split
/// by its own score (`s_pos` or `s_causal`) and freezes the region. A region
/// is discovered when the same score of the region is positive on the split
/// named by `discovery`. A discovery is a true positive iff more than half of
/// its voxels are selective for the target; rates are over all concepts.
pub fn run_fpr_experiment(world: &SyntheticWorld, opts: &FprOptions) -> Result<FprMetrics> {
    let names = world.concept_names();
    let results = bounded_map(&names, opts.workers, |concept| -> Result<ConceptOutcome> {
        let train = world.concept_dataset(concept, Split::Train, &opts.plan)?;
        let eval = world.concept_dataset(concept, Split::Eval, &opts.plan)?;
        let table = score_voxels(&train.0, &train.1, opts.hard_negatives)?;
        Ok(ConceptOutcome {
            concept: concept.clone(),
            pure_confound: world.is_pure_confound(concept),
            activation: strategy_outcome(world, concept, Strategy::Activation, &table, &train, &eval, opts)?,
            causal: strategy_outcome(world, concept, Strategy::Causal, &table, &train, &eval, opts)?,
        })
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let fpr = |s: Strategy| rate(&outcomes, |o| o.get(s).outcome == Outcome::FalsePositive);
    let tpr = |s: Strategy| rate(&outcomes, |o| o.get(s).outcome == Outcome::TruePositive);
    let sign = |s: Strategy| {
        rate(&outcomes, |o| {
            let r = o.get(s);
            r.discovered && r.eval_causal.is_none_or(|c| c <= 0.0)
        })
    };
    Ok(FprMetrics {
        fpr_activation: fpr(Strategy::Activation),
        tpr_activation: tpr(Strategy::Activation),
        fpr_causal: fpr(Strategy::Causal),
        tpr_causal: tpr(Strategy::Causal),
        sign_fpr_activation: sign(Strategy::Activation),
        sign_fpr_causal: sign(Strategy::Causal),
        outcomes,
    })
}

/// Model client backed by a synthetic world. Image refs carry their
/// descriptor, so every operation is a pure function of the request.
#[derive(Debug, Clone)]
pub struct SimulatorClient {
    world: Arc<SyntheticWorld>,
}

impl SimulatorClient {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        SimulatorClient { world }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn parse(&self, r: &str) -> Result<(String, Descriptor), ClientError> {
        parse_image_ref(r)
            .map(|(k, d)| (k.to_string(), d))
            .ok_or_else(|| ClientError::Fatal(format!("not a simulator image ref: {r}")))
    }

    fn prompts(&self, concept: &str, kind: PromptKind, n: usize, counter: Option<&str>, round: u32) -> Result<Vec<String>, ClientError> {
        let offset = round as usize * n;
        Ok(match kind {
            PromptKind::Positive => (0..n).map(|i| format!("{concept} photo {}", offset + i)).collect(),
            PromptKind::NegativeScene => {
                let c = counter.ok_or_else(|| ClientError::Fatal("negative scene needs a counter concept".into()))?;
                (0..n).map(|i| format!("{c} photo {}", offset + i)).collect()
            }
            PromptKind::EditInstruction => (0..n)
                .map(|i| format!("replace the main subject, variant {}", offset + i))
                .collect(),
            PromptKind::CounterConcept => {
                let spec = self
                    .world
                    .concept(concept)
                    .ok_or_else(|| ClientError::Fatal(format!("unknown concept {concept:?}")))?;
                spec.counter_concepts.iter().skip(offset).take(n).cloned().collect()
            }
        })
    }
}

fn world_error(e: Error) -> ClientError {
    ClientError::Fatal(e.to_string())
}

impl ModelClient for SimulatorClient {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let w = &self.world;
        Ok(match request {
            ClientRequest::ProposePrompts { concept, prompt_kind, n, counter_concept, round, .. } => {
                ClientResponse::Prompts {
                    prompts: self.prompts(concept, *prompt_kind, *n, counter_concept.as_deref(), *round)?,
                }
            }
            ClientRequest::GenerateImage { concept, role, counter_concept, .. } => {
                let base = match role {
                    Role::Positive => concept.as_str(),
                    Role::SemanticNegative => counter_concept
                        .as_deref()
                        .ok_or_else(|| ClientError::Fatal("negative generation needs a counter concept".into()))?,
                    Role::CounterfactualEdit => return Err(ClientError::Fatal("edits are produced by edit requests".into())),
                };
                let key = format!("gen-{}", rng::short_hash(w.seed, "generate", &request.idempotency_key()));
                let d = w.sample_descriptor(&key, &[base]).map_err(world_error)?;
                ClientResponse::Image { image_ref: image_ref(&key, &d) }
            }
            ClientRequest::EditImage { image_ref: parent, concept, .. } => {
                let (_, d) = self.parse(parent)?;
                let key = format!("edit-{}", rng::short_hash(w.seed, "edit", &request.idempotency_key()));
                ClientResponse::Image { image_ref: image_ref(&key, &d.without(concept)) }
            }
            ClientRequest::Verify { image_ref, concept } => {
                let (_, d) = self.parse(image_ref)?;
                ClientResponse::Answer {
                    answer: if d.contains(concept) { "yes" } else { "no" }.into(),
                }
            }
            ClientRequest::Encode { image_ref, .. } => {
                let (key, d) = self.parse(image_ref)?;
                ClientResponse::Vector {
                    values: w.simulate_response(&key, &d).map_err(world_error)?,
                }
            }
            ClientRequest::Embed { text, image_ref, .. } => {
                let values = match (text, image_ref) {
                    (Some(t), _) => w.embed_text(t),
                    (None, Some(r)) => {
                        let (key, d) = self.parse(r)?;
                        w.embed_image(&key, &d).map_err(world_error)?
                    }
                    (None, None) => return Err(ClientError::Fatal("embed needs text or an image ref".into())),
                };
                ClientResponse::Vector { values }
            }
        })
    }
}
