//! Stimulus data model: images, per-concept generation plans and manifests.
//!
//! A manifest is stored as line-delimited JSON. The first record is a header
//! carrying the concept and its counter concepts; every following line is one
//! [`StimulusImage`]. Fields this crate does not know about are kept in an
//! `extra` map and written back unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Positive,
    SemanticNegative,
    CounterfactualEdit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Generated,
    RetrievedPool,
    RetrievedMeasured,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Positive => "Positive",
            Role::SemanticNegative => "SemanticNegative",
            Role::CounterfactualEdit => "CounterfactualEdit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusImage {
    pub id: String,
    pub role: Role,
    pub split: Split,
    pub source: Source,
    pub concept: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counter_concept: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_positive_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified_present: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified_absent: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_or_instruction: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl StimulusImage {
    pub fn positive(id: impl Into<String>, concept: impl Into<String>, split: Split, source: Source) -> Self {
        StimulusImage {
            id: id.into(),
            role: Role::Positive,
            split,
            source,
            concept: concept.into(),
            counter_concept: None,
            parent_positive_id: None,
            verified_present: None,
            verified_absent: None,
            prompt_or_instruction: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn semantic_negative(
        id: impl Into<String>,
        concept: impl Into<String>,
        counter_concept: impl Into<String>,
        split: Split,
        source: Source,
    ) -> Self {
        StimulusImage {
            role: Role::SemanticNegative,
            counter_concept: Some(counter_concept.into()),
            ..StimulusImage::positive(id, concept, split, source)
        }
    }

    pub fn counterfactual_edit(
        id: impl Into<String>,
        concept: impl Into<String>,
        parent_positive_id: impl Into<String>,
        split: Split,
    ) -> Self {
        StimulusImage {
            role: Role::CounterfactualEdit,
            parent_positive_id: Some(parent_positive_id.into()),
            ..StimulusImage::positive(id, concept, split, Source::Generated)
        }
    }

    pub fn with_verified_present(mut self, value: bool) -> Self {
        self.verified_present = Some(value);
        self
    }

    pub fn with_verified_absent(mut self, value: bool) -> Self {
        self.verified_absent = Some(value);
        self
    }

    pub fn with_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.prompt_or_instruction = Some(prompt.into());
        self
    }

    /// Whether the verification flag required for this image's role is set.
    ///
    /// Positives need `verified_present`, negatives and edits need
    /// `verified_absent`. An absent flag counts as unverified.
    pub fn is_verified(&self) -> bool {
        match self.role {
            Role::Positive => self.verified_present == Some(true),
            Role::SemanticNegative | Role::CounterfactualEdit => self.verified_absent == Some(true),
        }
    }
}

/// Target counts for one concept's dataset. Every count is a target; attrition
/// during verification is reported, not compensated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub n_pos_train: usize,
    pub n_pos_eval: usize,
    pub n_counter_concepts: usize,
    pub n_prompts_per_counter: usize,
    pub n_edit_parents_train: usize,
    pub n_edit_parents_eval: usize,
    pub n_edits_per_parent: usize,
}

impl Default for GenerationPlan {
    fn default() -> Self {
        GenerationPlan {
            n_pos_train: 200,
            n_pos_eval: 100,
            n_counter_concepts: 10,
            n_prompts_per_counter: 10,
            n_edit_parents_train: 50,
            n_edit_parents_eval: 20,
            n_edits_per_parent: 10,
        }
    }
}

/// Optional overrides applied on top of [`GenerationPlan::default`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub n_pos_train: Option<usize>,
    pub n_pos_eval: Option<usize>,
    pub n_counter_concepts: Option<usize>,
    pub n_prompts_per_counter: Option<usize>,
    pub n_edit_parents_train: Option<usize>,
    pub n_edit_parents_eval: Option<usize>,
    pub n_edits_per_parent: Option<usize>,
}

impl PlanConfig {
    pub fn all(count: usize) -> Self {
        PlanConfig {
            n_pos_train: Some(count),
            n_pos_eval: Some(count),
            n_counter_concepts: Some(count),
            n_prompts_per_counter: Some(count),
            n_edit_parents_train: Some(count),
            n_edit_parents_eval: Some(count),
            n_edits_per_parent: Some(count),
        }
    }
}

pub fn build_generation_plan(concept: &str, config: &PlanConfig) -> Result<GenerationPlan> {
    if concept.trim().is_empty() {
        return Err(Error::InvalidPlan("concept must be non-empty".into()));
    }
    let d = GenerationPlan::default();
    let plan = GenerationPlan {
        n_pos_train: config.n_pos_train.unwrap_or(d.n_pos_train),
        n_pos_eval: config.n_pos_eval.unwrap_or(d.n_pos_eval),
        n_counter_concepts: config.n_counter_concepts.unwrap_or(d.n_counter_concepts),
        n_prompts_per_counter: config.n_prompts_per_counter.unwrap_or(d.n_prompts_per_counter),
        n_edit_parents_train: config.n_edit_parents_train.unwrap_or(d.n_edit_parents_train),
        n_edit_parents_eval: config.n_edit_parents_eval.unwrap_or(d.n_edit_parents_eval),
        n_edits_per_parent: config.n_edits_per_parent.unwrap_or(d.n_edits_per_parent),
    };
    if plan.n_edit_parents_train > plan.n_pos_train {
        return Err(Error::InvalidPlan(format!(
            "edit parents exceed positives on train split ({} > {})",
            plan.n_edit_parents_train, plan.n_pos_train
        )));
    }
    if plan.n_edit_parents_eval > plan.n_pos_eval {
        return Err(Error::InvalidPlan(format!(
            "edit parents exceed positives on eval split ({} > {})",
            plan.n_edit_parents_eval, plan.n_pos_eval
        )));
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StimulusManifest {
    pub concept: String,
    pub images: Vec<StimulusImage>,
    pub counter_concepts: Vec<String>,
    /// Unknown header fields, preserved on round trip.
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId(String),
    DanglingParent { id: String, parent: String },
    ParentNotPositive { id: String, parent: String },
    MissingParent(String),
    MissingCounterConcept(String),
    UnlistedCounterConcept { id: String, counter_concept: String },
    PositiveWithParent(String),
    PositiveWithCounterConcept(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate id {id}"),
            Violation::DanglingParent { id, parent } => {
                write!(f, "dangling parent: {id} refers to missing positive {parent}")
            }
            Violation::ParentNotPositive { id, parent } => {
                write!(f, "parent not positive: {id} refers to {parent}")
            }
            Violation::MissingParent(id) => write!(f, "edit {id} has no parent_positive_id"),
            Violation::MissingCounterConcept(id) => {
                write!(f, "semantic negative {id} has no counter_concept")
            }
            Violation::UnlistedCounterConcept { id, counter_concept } => write!(
                f,
                "missing counter_concept: {id} uses {counter_concept:?} which the header does not list"
            ),
            Violation::PositiveWithParent(id) => write!(f, "positive {id} has a parent_positive_id"),
            Violation::PositiveWithCounterConcept(id) => {
                write!(f, "positive {id} has a counter_concept")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_manifest(m: &StimulusManifest) -> ValidationReport {
    let mut violations = Vec::new();
    let mut by_id: HashMap<&str, &StimulusImage> = HashMap::new();
    let mut reported_dup = BTreeSet::new();
    for img in &m.images {
        if by_id.insert(img.id.as_str(), img).is_some() && reported_dup.insert(img.id.as_str()) {
            violations.push(Violation::DuplicateId(img.id.clone()));
        }
    }
    let listed: BTreeSet<&str> = m.counter_concepts.iter().map(String::as_str).collect();
    for img in &m.images {
        match img.role {
            Role::Positive => {
                if img.parent_positive_id.is_some() {
                    violations.push(Violation::PositiveWithParent(img.id.clone()));
                }
                if img.counter_concept.is_some() {
                    violations.push(Violation::PositiveWithCounterConcept(img.id.clone()));
                }
            }
            Role::SemanticNegative => match img.counter_concept.as_deref() {
                None | Some("") => violations.push(Violation::MissingCounterConcept(img.id.clone())),
                Some(cc) if !listed.contains(cc) => violations.push(Violation::UnlistedCounterConcept {
                    id: img.id.clone(),
                    counter_concept: cc.to_string(),
                }),
                Some(_) => {}
            },
            Role::CounterfactualEdit => match img.parent_positive_id.as_deref() {
                None => violations.push(Violation::MissingParent(img.id.clone())),
                Some(parent) => match by_id.get(parent) {
                    None => violations.push(Violation::DanglingParent {
                        id: img.id.clone(),
                        parent: parent.to_string(),
                    }),
                    Some(p) if p.role != Role::Positive => violations.push(Violation::ParentNotPositive {
                        id: img.id.clone(),
                        parent: parent.to_string(),
                    }),
                    Some(_) => {}
                },
            },
        }
    }
    ValidationReport { violations }
}

impl StimulusManifest {
    pub fn new(concept: impl Into<String>) -> Self {
        StimulusManifest {
            concept: concept.into(),
            ..Default::default()
        }
    }

    pub fn get(&self, id: &str) -> Option<&StimulusImage> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Images of one role, optionally restricted by split and source.
    /// With `verified_only`, images lacking the role's verification flag are skipped.
    pub fn select(
        &self,
        role: Role,
        split: Option<Split>,
        sources: &[Source],
        verified_only: bool,
    ) -> Vec<&StimulusImage> {
        self.images
            .iter()
            .filter(|i| i.role == role)
            .filter(|i| split.is_none_or(|s| i.split == s))
            .filter(|i| sources.is_empty() || sources.contains(&i.source))
            .filter(|i| !verified_only || i.is_verified())
            .collect()
    }

    /// Groups counterfactual edits under their parent positives, in manifest order.
    /// Edits whose parent is missing or not a positive are left out.
    pub fn resolve_edits(&self) -> BTreeMap<&str, Vec<&StimulusImage>> {
        let positives: BTreeSet<&str> = self
            .images
            .iter()
            .filter(|i| i.role == Role::Positive)
            .map(|i| i.id.as_str())
            .collect();
        let mut out: BTreeMap<&str, Vec<&StimulusImage>> = BTreeMap::new();
        for img in self.images.iter().filter(|i| i.role == Role::CounterfactualEdit) {
            if let Some(parent) = img.parent_positive_id.as_deref() {
                if let Some(p) = positives.get(parent) {
                    out.entry(*p).or_default().push(img);
                }
            }
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = serde_json::Map::new();
        header.insert("record".into(), Value::from("header"));
        header.insert("concept".into(), Value::from(self.concept.clone()));
        header.insert(
            "counter_concepts".into(),
            Value::from(self.counter_concepts.clone()),
        );
        for (k, v) in &self.extra {
            header.insert(k.clone(), v.clone());
        }
        serde_json::to_writer(&mut w, &Value::Object(header))?;
        w.write_all(b"\n")?;
        for img in &self.images {
            serde_json::to_writer(&mut w, img)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<StimulusManifest> {
        let mut manifest: Option<StimulusManifest> = None;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::ManifestParse {
                line: lineno,
                message: e.to_string(),
            };
            match manifest.as_mut() {
                None => {
                    let mut obj: serde_json::Map<String, Value> =
                        serde_json::from_str(&line).map_err(parse_err)?;
                    if obj.remove("record") != Some(Value::from("header")) {
                        return Err(Error::ManifestParse {
                            line: lineno,
                            message: "first record must be the header".into(),
                        });
                    }
                    let concept = match obj.remove("concept") {
                        Some(Value::String(s)) => s,
                        _ => {
                            return Err(Error::ManifestParse {
                                line: lineno,
                                message: "header lacks a string concept".into(),
                            })
                        }
                    };
                    let counter_concepts: Vec<String> = match obj.remove("counter_concepts") {
                        Some(v) => serde_json::from_value(v).map_err(parse_err)?,
                        None => Vec::new(),
                    };
                    manifest = Some(StimulusManifest {
                        concept,
                        images: Vec::new(),
                        counter_concepts,
                        extra: obj.into_iter().collect(),
                    });
                }
                Some(m) => {
                    let img: StimulusImage = serde_json::from_str(&line).map_err(parse_err)?;
                    m.images.push(img);
                }
            }
        }
        manifest.ok_or(Error::ManifestParse {
            line: 0,
            message: "empty manifest file".into(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::from(e).at_path(path))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<StimulusManifest> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::from(e).at_path(path))?;
        StimulusManifest::read_jsonl(std::io::BufReader::new(file)).map_err(|e| e.at_path(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_counts() {
        let plan = build_generation_plan("human face", &PlanConfig::default()).unwrap();
        assert_eq!(
            plan,
            GenerationPlan {
                n_pos_train: 200,
                n_pos_eval: 100,
                n_counter_concepts: 10,
                n_prompts_per_counter: 10,
                n_edit_parents_train: 50,
                n_edit_parents_eval: 20,
                n_edits_per_parent: 10,
            }
        );
    }

    #[test]
    fn zero_overrides_give_zero_plan() {
        let plan = build_generation_plan("x", &PlanConfig::all(0)).unwrap();
        assert_eq!(plan, GenerationPlan {
            n_pos_train: 0,
            n_pos_eval: 0,
            n_counter_concepts: 0,
            n_prompts_per_counter: 0,
            n_edit_parents_train: 0,
            n_edit_parents_eval: 0,
            n_edits_per_parent: 0,
        });
    }

    #[test]
    fn edit_parents_cannot_exceed_positives() {
        let cfg = PlanConfig {
            n_pos_train: Some(4),
            n_edit_parents_train: Some(5),
            ..Default::default()
        };
        let err = build_generation_plan("dog", &cfg).unwrap_err();
        assert!(err.to_string().contains("edit parents exceed positives"), "{err}");
        assert!(build_generation_plan("  ", &PlanConfig::default()).is_err());
    }

    #[test]
    fn plan_is_pure() {
        let cfg = PlanConfig {
            n_pos_eval: Some(70),
            ..Default::default()
        };
        assert_eq!(
            build_generation_plan("dog", &cfg).unwrap(),
            build_generation_plan("dog", &cfg).unwrap()
        );
    }

    fn small_manifest() -> StimulusManifest {
        let mut m = StimulusManifest::new("dog");
        m.counter_concepts = vec!["cat".into()];
        m.images = vec![
            StimulusImage::positive("p1", "dog", Split::Train, Source::Generated),
            StimulusImage::semantic_negative("n1", "dog", "cat", Split::Train, Source::Generated),
            StimulusImage::counterfactual_edit("e1", "dog", "p1", Split::Train),
        ];
        m
    }

    #[test]
    fn validation_reports() {
        assert!(validate_manifest(&StimulusManifest::default()).is_valid());
        assert!(validate_manifest(&small_manifest()).is_valid());

        let mut m = small_manifest();
        m.images[2].parent_positive_id = Some("missing".into());
        let report = validate_manifest(&m);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].to_string().starts_with("dangling parent"));

        let mut m = small_manifest();
        m.images.push(StimulusImage::positive("a", "dog", Split::Eval, Source::Generated));
        m.images.push(StimulusImage::positive("a", "dog", Split::Eval, Source::Generated));
        let report = validate_manifest(&m);
        assert_eq!(report.violations, vec![Violation::DuplicateId("a".into())]);
        assert_eq!(report.violations[0].to_string(), "duplicate id a");

        let mut m = small_manifest();
        m.counter_concepts.clear();
        m.images[0].counter_concept = Some("x".into());
        let report = validate_manifest(&m);
        assert_eq!(report.violations.len(), 2);
    }

    #[test]
    fn edits_resolve_to_parent() {
        let m = small_manifest();
        let resolved = m.resolve_edits();
        assert_eq!(resolved.len(), 1);
        assert_eq!(resolved["p1"][0].id, "e1");
    }

    #[test]
    fn jsonl_keeps_unknown_fields() {
        let text = concat!(
            r#"{"record":"header","concept":"dog","counter_concepts":["cat"],"batch":7}"#,
            "\n",
            r#"{"id":"p1","role":"Positive","split":"Train","source":"Generated","concept":"dog","verified_present":true,"uri":"s3://x/p1.png"}"#,
            "\n"
        );
        let m = StimulusManifest::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(m.extra["batch"], Value::from(7));
        assert_eq!(m.images[0].extra["uri"], Value::from("s3://x/p1.png"));
        let mut out = Vec::new();
        m.write_jsonl(&mut out).unwrap();
        let again = StimulusManifest::read_jsonl(out.as_slice()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn header_must_come_first() {
        let text = r#"{"id":"p1","role":"Positive","split":"Train","source":"Generated","concept":"dog"}"#;
        assert!(matches!(
            StimulusManifest::read_jsonl(text.as_bytes()),
            Err(Error::ManifestParse { line: 1, .. })
        ));
    }
}
