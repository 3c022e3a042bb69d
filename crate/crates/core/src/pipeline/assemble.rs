//! Shared run setup and per-concept dataset assembly through model clients.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use crate::clients::{
    self, ClientError, HttpClient, ModelClient, PromptKind, PromptSpec, Retrying, StubClient, Throttled,
};
use crate::error::{Error, Result};
use crate::matrix::{
    filter_voxels_by_reliability, read_index, read_matrix, EmbeddingIndex, NormalizationStats, Provenance,
    ReliabilityMask, ResponseMatrix,
};
use crate::pool::bounded_map;
use crate::retrieval::{
    rank_by_similarity, two_stage_negative_retrieval, verify_batch, verify_item, RetrievalResult, Verification,
    VerifyMode,
};
use crate::scoring::ScoringSets;
use crate::simulator::{build_world, SimulatorClient, SyntheticWorld, WorldSpec};
use crate::stimulus::{validate_manifest, GenerationPlan, Role, Source, Split, StimulusImage, StimulusManifest};

use super::config::{file_digest, BackendConfig, NormalizationMode, PipelineConfig};

/// Measured image pool after normalization and reliability masking.
pub struct MeasuredPool {
    pub index: EmbeddingIndex,
    pub measured: ResponseMatrix,
    /// Encoder predictions for the pool images that could be encoded.
    pub predicted: ResponseMatrix,
}

/// Everything shared by the concepts of one run.
pub struct Setup {
    pub client: Arc<dyn ModelClient>,
    pub world: Option<Arc<SyntheticWorld>>,
    /// Voxel ids before masking; the encoder's output dimension.
    pub all_voxel_ids: Vec<String>,
    pub embed_dim: Option<usize>,
    pub mode: NormalizationMode,
    pub reference: Option<NormalizationStats>,
    pub mask: ReliabilityMask,
    pub pool: Option<MeasuredPool>,
    /// Content digests of input files.
    pub inputs: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

/// Reorders the columns of `m` to `voxel_ids`. Every id must be present.
pub fn align_voxels(m: &ResponseMatrix, voxel_ids: &[String]) -> Result<ResponseMatrix> {
    if m.voxel_ids() == voxel_ids {
        return Ok(m.clone());
    }
    let cols = m.voxel_indices(voxel_ids)?;
    let mut values = Vec::with_capacity(m.n_images() * cols.len());
    for i in 0..m.n_images() {
        let row = m.row(i);
        values.extend(cols.iter().map(|&c| row[c]));
    }
    ResponseMatrix::new(m.image_ids().to_vec(), voxel_ids.to_vec(), values, m.provenance())
}

fn default_voxel_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:04}")).collect()
}

fn client_error(e: ClientError) -> Error {
    Error::Client(e)
}

impl Setup {
    /// Builds the client stack and loads or simulates the measured pool.
    /// `client` replaces the configured backend client when given.
    pub fn new(cfg: &PipelineConfig, client: Option<Arc<dyn ModelClient>>) -> Result<Setup> {
        let mut inputs = BTreeMap::new();
        let mut notes = Vec::new();
        let mut world = None;
        let (backend, voxel_dim, embed_dim): (Arc<dyn ModelClient>, Option<usize>, Option<usize>) = match &cfg.backend {
            BackendConfig::Simulator { world: path } => {
                inputs.insert("world".to_string(), file_digest(path)?);
                let spec = WorldSpec::load(path)?;
                let w = Arc::new(build_world(&spec, cfg.seed).map_err(|e| e.at_path(path))?);
                for c in cfg.concepts.iter().cloned().chain(cfg.concepts.iter().flat_map(|c| cfg.baselines_for(c))) {
                    if w.concept(&c).is_none() {
                        return Err(Error::Config(format!("concept {c:?} is not defined in {}", path.display())));
                    }
                }
                let dim = w.n_voxels();
                world = Some(Arc::clone(&w));
                (Arc::new(SimulatorClient::new(w)), Some(dim), Some(spec.embedding_dim))
            }
            BackendConfig::Stub { voxel_dim, embed_dim } => (
                Arc::new(StubClient::new(cfg.seed).with_embed_dim(*embed_dim)),
                Some(*voxel_dim),
                Some(*embed_dim),
            ),
            BackendConfig::Http { endpoint, voxel_dim, timeout_ms } => {
                let timeout = Duration::from_millis(*timeout_ms);
                let http = match endpoint {
                    Some(url) => HttpClient::new(url.clone(), timeout),
                    None => HttpClient::from_env(timeout)
                        .ok_or_else(|| Error::Config(format!("{} is not set", clients::ENDPOINT_ENV)))?,
                };
                (Arc::new(http), Some(*voxel_dim), None)
            }
        };
        let inner = client.unwrap_or(backend);
        let client: Arc<dyn ModelClient> = Arc::new(Throttled::new(
            Retrying::new(inner, cfg.retry.policy()),
            cfg.max_in_flight,
        ));

        let raw_pool: Option<(ResponseMatrix, EmbeddingIndex)> = match (&cfg.measured, &world) {
            (Some(m), _) => {
                inputs.insert("measured_matrix".to_string(), file_digest(&m.matrix)?);
                inputs.insert("measured_index".to_string(), file_digest(&m.index)?);
                let matrix = read_matrix(&m.matrix)?;
                let index = read_index(&m.index)?;
                if matrix.image_ids() != index.ids() {
                    return Err(Error::IdMismatch(format!(
                        "{} and {} list different images",
                        m.matrix.display(),
                        m.index.display()
                    )));
                }
                Some((matrix, index))
            }
            (None, Some(w)) => {
                let p = w.measured_pool()?;
                Some((p.measured, p.index))
            }
            (None, None) => None,
        };

        let all_voxel_ids = match (&world, &raw_pool) {
            (Some(w), _) => w.voxel_ids(),
            (None, Some((m, _))) => m.voxel_ids().to_vec(),
            (None, None) => default_voxel_ids(voxel_dim.unwrap_or(0)),
        };
        if let Some(d) = voxel_dim {
            if d != all_voxel_ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: all_voxel_ids.len(),
                });
            }
        }
        let embed_dim = match &raw_pool {
            Some((_, idx)) => Some(idx.dim()),
            None => embed_dim,
        };

        let mut mode = cfg.normalization.mode;
        let mut setup = Setup {
            client,
            world,
            all_voxel_ids: all_voxel_ids.clone(),
            embed_dim,
            mode,
            reference: None,
            mask: ReliabilityMask::keep_all(&all_voxel_ids),
            pool: None,
            inputs,
            notes: Vec::new(),
        };

        let Some((measured_raw, index)) = raw_pool else {
            if mode == NormalizationMode::Reference {
                notes.push("no measured pool: reference normalization replaced by per-concept normalization".into());
                setup.mode = NormalizationMode::Own;
            }
            if cfg.normalization.reliability_filter {
                notes.push("no measured pool: reliability filtering skipped".into());
            }
            setup.notes = notes;
            return Ok(setup);
        };
        let measured_raw = align_voxels(&measured_raw, &all_voxel_ids)?;

        let encoded = bounded_map(index.ids(), cfg.max_in_flight, |id| {
            clients::encode(&*setup.client, id, all_voxel_ids.len())
        });
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (id, r) in index.ids().iter().zip(encoded) {
            match r {
                Ok(row) => {
                    ids.push(id.clone());
                    rows.push(row);
                }
                Err(e) => notes.push(format!("pool image {id} could not be encoded: {e}")),
            }
        }
        let predicted_raw = ResponseMatrix::from_rows(ids.clone(), all_voxel_ids.clone(), &rows, Provenance::Predicted)?;

        if predicted_raw.n_images() >= 2 {
            setup.reference = Some(NormalizationStats::compute(&predicted_raw)?);
        } else if mode == NormalizationMode::Reference {
            notes.push("fewer than two pool images encoded: reference normalization replaced by per-concept normalization".into());
            mode = NormalizationMode::Own;
        }
        setup.mode = mode;

        if cfg.normalization.reliability_filter {
            if predicted_raw.n_images() >= 2 {
                let held_out = measured_raw.select_images(&ids)?;
                let mask = filter_voxels_by_reliability(&predicted_raw, &held_out, cfg.normalization.reliability_threshold)?;
                if mask.n_retained() == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "no voxel reaches reliability {}",
                        cfg.normalization.reliability_threshold
                    )));
                }
                notes.push(format!(
                    "reliability filter kept {} of {} voxels",
                    mask.n_retained(),
                    all_voxel_ids.len()
                ));
                setup.mask = mask;
            } else {
                notes.push("fewer than two pool images encoded: reliability filtering skipped".into());
            }
        }

        let (measured, predicted) = match mode {
            NormalizationMode::None => (measured_raw, predicted_raw),
            _ => {
                let measured = NormalizationStats::compute(&measured_raw)?.apply(&measured_raw, true)?;
                let predicted = match &setup.reference {
                    Some(stats) => stats.apply(&predicted_raw, true)?,
                    None => predicted_raw,
                };
                (measured, predicted)
            }
        };
        setup.pool = Some(MeasuredPool {
            index,
            measured: setup.mask.apply(&measured)?,
            predicted: setup.mask.apply(&predicted)?,
        });
        setup.notes = notes;
        Ok(setup)
    }

    /// Normalizes and masks one concept's raw predicted responses.
    pub fn prepare(&self, raw: &ResponseMatrix) -> Result<ResponseMatrix> {
        let normalized = match (self.mode, &self.reference) {
            (NormalizationMode::None, _) => raw.clone(),
            (NormalizationMode::Reference, Some(stats)) => stats.apply(raw, true)?,
            _ => NormalizationStats::compute(raw)?.apply(raw, true)?,
        };
        self.mask.apply(&normalized)
    }
}

/// Pool image ids retrieved for the predicted-pool score components.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolSets {
    /// Every retrieved positive, verified or not.
    pub retrieved: Vec<String>,
    pub verified_positives: Vec<String>,
    pub verified_negatives: Vec<String>,
}

/// One concept's assembled data.
pub struct ConceptData {
    pub concept: String,
    pub plan: GenerationPlan,
    pub manifest: StimulusManifest,
    /// Predicted responses of generated images, normalized and masked.
    pub predicted: ResponseMatrix,
    pub train: ScoringSets,
    pub eval: ScoringSets,
    /// Sets over the measured pool; `None` without a pool.
    pub measured: Option<ScoringSets>,
    pub pool_sets: Option<PoolSets>,
    pub retrieval: Vec<RetrievalResult>,
    pub notes: Vec<String>,
}

struct Pending {
    image: StimulusImage,
    image_ref: String,
}

fn split_tag(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Eval => "eval",
    }
}

fn flag(v: Verification) -> Option<bool> {
    match v {
        Verification::Pass => Some(true),
        Verification::Fail => Some(false),
        _ => None,
    }
}

fn propose(client: &dyn ModelClient, spec: PromptSpec<'_>, notes: &mut Vec<String>) -> Result<Vec<String>> {
    if spec.n == 0 {
        return Ok(Vec::new());
    }
    let p = clients::propose_prompts(client, &spec).map_err(client_error)?;
    if !p.dropped.is_empty() {
        notes.push(format!(
            "{} {:?} prompt(s) dropped for mentioning {:?}: {}",
            p.dropped.len(),
            spec.kind,
            spec.concept,
            p.dropped.join(" | ")
        ));
    }
    Ok(p.prompts)
}

/// Generates, verifies, edits, encodes and retrieves everything one concept
/// needs. Per-item client failures drop the item and leave a note; failures
/// of whole requests (prompt proposals) fail the concept.
pub fn assemble_concept(cfg: &PipelineConfig, setup: &Setup, concept: &str) -> Result<ConceptData> {
    let client = &*setup.client;
    let par = cfg.max_in_flight;
    let plan = cfg.plan_for(concept)?;
    let mut notes = Vec::new();
    let mut manifest = StimulusManifest::new(concept);

    let counters = propose(client, PromptSpec::new(concept, PromptKind::CounterConcept, plan.n_counter_concepts), &mut notes)?;
    manifest.counter_concepts = counters.clone();

    let n_pos = plan.n_pos_train + plan.n_pos_eval;
    let pos_prompts = propose(client, PromptSpec::new(concept, PromptKind::Positive, n_pos), &mut notes)?;
    let mut to_generate: Vec<(StimulusImage, String)> = Vec::new();
    for (i, prompt) in pos_prompts.iter().enumerate() {
        let (split, j) = if i < plan.n_pos_train {
            (Split::Train, i)
        } else {
            (Split::Eval, i - plan.n_pos_train)
        };
        let id = format!("{concept}/{}/pos/{j:04}", split_tag(split));
        to_generate.push((StimulusImage::positive(id, concept, split, Source::Generated).with_prompt(prompt), prompt.clone()));
    }
    for counter in &counters {
        let mut spec = PromptSpec::new(concept, PromptKind::NegativeScene, 2 * plan.n_prompts_per_counter);
        spec.counter_concept = Some(counter);
        for (i, prompt) in propose(client, spec, &mut notes)?.into_iter().enumerate() {
            let (split, j) = if i < plan.n_prompts_per_counter {
                (Split::Train, i)
            } else {
                (Split::Eval, i - plan.n_prompts_per_counter)
            };
            let id = format!("{concept}/{}/neg/{counter}/{j:04}", split_tag(split));
            let img = StimulusImage::semantic_negative(id, concept, counter.clone(), split, Source::Generated).with_prompt(&prompt);
            to_generate.push((img, prompt));
        }
    }

    let generated = bounded_map(&to_generate, par, |(img, prompt)| {
        let ref_ = clients::generate_image(client, concept, img.role, prompt, img.counter_concept.as_deref())?;
        let mode = match &img.counter_concept {
            Some(c) => VerifyMode::Double(c.clone()),
            None => VerifyMode::RequirePresent,
        };
        Ok::<_, ClientError>((ref_.clone(), verify_item(client, &ref_, concept, &mode)))
    });
    let mut pending: Vec<Pending> = Vec::new();
    for ((img, _), r) in to_generate.into_iter().zip(generated) {
        match r {
            Ok((image_ref, v)) => {
                let image = match img.role {
                    Role::Positive => StimulusImage { verified_present: flag(v), ..img },
                    _ => StimulusImage { verified_absent: flag(v), ..img },
                };
                pending.push(Pending { image, image_ref });
            }
            Err(e) => notes.push(format!("generation of {} failed: {e}", img.id)),
        }
    }

    let has_parents = plan.n_edit_parents_train + plan.n_edit_parents_eval > 0;
    if has_parents && plan.n_edits_per_parent > 0 {
        let instructions = propose(client, PromptSpec::new(concept, PromptKind::EditInstruction, plan.n_edits_per_parent), &mut notes)?;
        let mut edits: Vec<(StimulusImage, String, String)> = Vec::new();
        for (split, n_parents) in [(Split::Train, plan.n_edit_parents_train), (Split::Eval, plan.n_edit_parents_eval)] {
            let parents = pending
                .iter()
                .filter(|p| p.image.role == Role::Positive && p.image.split == split && p.image.is_verified())
                .take(n_parents);
            let mut found = 0;
            for p in parents {
                found += 1;
                for (e, instr) in instructions.iter().enumerate() {
                    let id = format!("{}/edit/{e:02}", p.image.id);
                    let img = StimulusImage::counterfactual_edit(id, concept, p.image.id.clone(), split).with_prompt(instr);
                    edits.push((img, p.image_ref.clone(), instr.clone()));
                }
            }
            if found < n_parents {
                notes.push(format!(
                    "only {found} of {n_parents} verified {} positives available as edit parents",
                    split_tag(split)
                ));
            }
        }
        let edited = bounded_map(&edits, par, |(_, parent_ref, instr)| {
            let r = clients::edit_image(client, parent_ref, concept, instr)?;
            Ok::<_, ClientError>((r.clone(), verify_item(client, &r, concept, &VerifyMode::RequireAbsent)))
        });
        for ((img, _, _), r) in edits.into_iter().zip(edited) {
            match r {
                Ok((image_ref, v)) => pending.push(Pending {
                    image: StimulusImage { verified_absent: flag(v), ..img },
                    image_ref,
                }),
                Err(e) => notes.push(format!("edit {} failed: {e}", img.id)),
            }
        }
    }

    let dim = setup.all_voxel_ids.len();
    let encoded = bounded_map(&pending, par, |p| clients::encode(client, &p.image_ref, dim));
    let mut kept: BTreeSet<String> = BTreeSet::new();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (p, r) in pending.into_iter().zip(encoded) {
        if let Some(parent) = p.image.parent_positive_id.as_deref().filter(|q| !kept.contains(*q)) {
            notes.push(format!("edit {} dropped: parent {parent} was not encoded", p.image.id));
            continue;
        }
        match r {
            Ok(row) => {
                let mut image = p.image;
                image.extra.insert("image_ref".into(), p.image_ref.into());
                kept.insert(image.id.clone());
                ids.push(image.id.clone());
                rows.push(row);
                manifest.images.push(image);
            }
            Err(e) => notes.push(format!("encoding of {} failed: {e}", p.image.id)),
        }
    }
    if ids.len() < 2 {
        return Err(Error::InsufficientImages(ids.len()));
    }
    let raw = ResponseMatrix::from_rows(ids, setup.all_voxel_ids.clone(), &rows, Provenance::Predicted)?;
    let predicted = setup.prepare(&raw)?;

    let mut retrieval = Vec::new();
    let mut measured = None;
    let mut pool_sets = None;
    if let Some(pool) = &setup.pool {
        let (results, sets, ps) = retrieve_measured(cfg, setup, pool, concept, &plan, &counters, &mut manifest, &mut notes)?;
        retrieval = results;
        measured = Some(sets);
        pool_sets = Some(ps);
    }

    let report = validate_manifest(&manifest);
    if !report.is_valid() {
        return Err(Error::InvalidArgument(format!("assembled manifest is invalid: {:?}", report.violations)));
    }
    let generated = |split: Split| {
        ScoringSets::from_images(
            manifest.images.iter().filter(|i| i.source == Source::Generated && i.split == split),
            true,
        )
    };
    let train = generated(Split::Train);
    let eval = generated(Split::Eval);
    Ok(ConceptData {
        concept: concept.to_string(),
        plan,
        manifest,
        predicted,
        train,
        eval,
        measured,
        pool_sets,
        retrieval,
        notes,
    })
}

#[allow(clippy::too_many_arguments)]
fn retrieve_measured(
    cfg: &PipelineConfig,
    setup: &Setup,
    pool: &MeasuredPool,
    concept: &str,
    plan: &GenerationPlan,
    counters: &[String],
    manifest: &mut StimulusManifest,
    notes: &mut Vec<String>,
) -> Result<(Vec<RetrievalResult>, ScoringSets, PoolSets)> {
    let client = &*setup.client;
    let par = cfg.max_in_flight;
    let size = pool.index.len();
    let mut n_pos = cfg.n_pos_requested(plan);
    if n_pos > size {
        notes.push(format!("{n_pos} measured positives requested but the pool holds {size} images"));
        n_pos = size;
    }
    // (counter concept, result); `None` marks the positive query
    let mut queries: Vec<(Option<String>, RetrievalResult)> = Vec::new();
    let q_pos = clients::embed_text(client, concept, setup.embed_dim).map_err(client_error)?;
    if n_pos > 0 {
        let r = rank_by_similarity(concept, &q_pos, &pool.index, n_pos)?;
        queries.push((None, verify_batch(r, concept, &VerifyMode::RequirePresent, client, par)));
    }
    let m = cfg.retrieval.stage1_candidates.min(size);
    let n_neg = cfg.n_neg_requested(plan).min(m);
    for counter in counters.iter().filter(|_| n_neg > 0) {
        let q_neg = clients::embed_text(client, counter, setup.embed_dim).map_err(client_error)?;
        let r = two_stage_negative_retrieval(counter, &q_neg, &q_pos, &pool.index, m, n_neg)?;
        let r = verify_batch(r, concept, &VerifyMode::Double(counter.clone()), client, par);
        queries.push((Some(counter.clone()), r));
    }

    // an image retrieved twice keeps its first role
    let mut seen: BTreeSet<String> = manifest.images.iter().map(|i| i.id.clone()).collect();
    let mut pool_sets = PoolSets::default();
    let predicted_ids: BTreeSet<&str> = pool.predicted.image_ids().iter().map(String::as_str).collect();
    let mut measured_images = Vec::new();
    for (counter, r) in &queries {
        for (id, v) in r.ranked_ids.iter().zip(&r.verification) {
            let in_pool = predicted_ids.contains(id.as_str());
            if counter.is_none() && in_pool {
                pool_sets.retrieved.push(id.clone());
            }
            if !seen.insert(id.clone()) {
                continue;
            }
            let image = match counter {
                None => StimulusImage {
                    verified_present: flag(*v),
                    ..StimulusImage::positive(id.clone(), concept, Split::Eval, Source::RetrievedMeasured)
                },
                Some(c) => StimulusImage {
                    verified_absent: flag(*v),
                    ..StimulusImage::semantic_negative(id.clone(), concept, c.clone(), Split::Eval, Source::RetrievedMeasured)
                },
            };
            if image.is_verified() && in_pool {
                match image.role {
                    Role::Positive => pool_sets.verified_positives.push(id.clone()),
                    _ => pool_sets.verified_negatives.push(id.clone()),
                }
            }
            measured_images.push(image);
        }
    }
    let results = queries.into_iter().map(|(_, r)| r).collect();
    let sets = ScoringSets::from_images(&measured_images, true);
    manifest.images.extend(measured_images);
    Ok((results, sets, pool_sets))
}
