//! Final classification of a discovered region and follow-up stimulus proposals.

use std::fmt::{self, Write as _};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{CoverageLevel, CoverageReport};
use crate::scoring::RegionScoreSet;
use crate::stats::{Criterion, GateDecision, SignificanceResult};
use crate::stimulus::{GenerationPlan, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CausalEvidence {
    Strong,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    HighConfidenceDiscovery,
    Rejected,
    PromisingNeedsFollowUp,
    Inconclusive,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Minimum region causal scores counted as positive evidence. Both default
/// to strict positivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvidenceThresholds {
    pub generated_causal_above: f64,
    pub measured_causal_above: f64,
}

impl Default for EvidenceThresholds {
    fn default() -> Self {
        EvidenceThresholds {
            generated_causal_above: 0.0,
            measured_causal_above: 0.0,
        }
    }
}

/// Strong iff the generated-eval causal score clears its threshold, the
/// significance gate passes, and either the measured-eval causal score clears
/// its threshold or measured coverage is low. A missing measured score counts
/// as not clearing.
pub fn assess_causal_evidence(
    generated_eval: Option<&RegionScoreSet>,
    measured_eval: Option<&RegionScoreSet>,
    gate: &GateDecision,
    coverage: CoverageLevel,
    thresholds: &EvidenceThresholds,
) -> Result<CausalEvidence> {
    let gen = generated_eval
        .and_then(|s| s.s_causal)
        .ok_or(Error::MissingGeneratedScores)?;
    let meas_ok = measured_eval
        .and_then(|s| s.s_causal)
        .is_some_and(|m| m > thresholds.measured_causal_above);
    let strong = gen > thresholds.generated_causal_above
        && gate.passed
        && (meas_ok || coverage == CoverageLevel::Low);
    Ok(if strong { CausalEvidence::Strong } else { CausalEvidence::Weak })
}

pub fn decide(evidence: CausalEvidence, coverage: CoverageLevel) -> Decision {
    match (evidence, coverage) {
        (CausalEvidence::Strong, CoverageLevel::High) => Decision::HighConfidenceDiscovery,
        (CausalEvidence::Weak, CoverageLevel::High) => Decision::Rejected,
        (CausalEvidence::Strong, CoverageLevel::Low) => Decision::PromisingNeedsFollowUp,
        (CausalEvidence::Weak, CoverageLevel::Low) => Decision::Inconclusive,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supporting {
    pub region_size: usize,
    pub generated_eval: Option<RegionScoreSet>,
    pub measured_eval: Option<RegionScoreSet>,
    pub significance: Vec<SignificanceResult>,
    pub gate: GateDecision,
    pub coverage: CoverageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub concept: String,
    pub decision: Decision,
    pub causal_evidence: CausalEvidence,
    pub coverage_level: CoverageLevel,
    pub supporting: Supporting,
    pub notes: Vec<String>,
}

impl Verdict {
    pub fn new(
        concept: &str,
        supporting: Supporting,
        thresholds: &EvidenceThresholds,
        notes: Vec<String>,
    ) -> Result<Verdict> {
        let coverage_level = supporting.coverage.coverage_level;
        let causal_evidence = assess_causal_evidence(
            supporting.generated_eval.as_ref(),
            supporting.measured_eval.as_ref(),
            &supporting.gate,
            coverage_level,
            thresholds,
        )?;
        Ok(Verdict {
            concept: concept.to_string(),
            decision: decide(causal_evidence, coverage_level),
            causal_evidence,
            coverage_level,
            supporting,
            notes,
        })
    }

    pub fn p_value(&self, c: Criterion) -> Option<f64> {
        self.supporting
            .significance
            .iter()
            .find(|r| r.criterion == c)
            .map(|r| r.p_value)
    }

    /// Human-readable report.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(s, "concept: {}", self.concept);
        let _ = writeln!(s, "decision: {}", self.decision);
        let _ = writeln!(s, "causal evidence: {:?}", self.causal_evidence);
        let _ = writeln!(s, "coverage: {:?}", self.coverage_level);
        let _ = writeln!(s, "region size: {}", self.supporting.region_size);
        for (label, set) in [
            ("generated eval", &self.supporting.generated_eval),
            ("measured eval", &self.supporting.measured_eval),
        ] {
            match set {
                Some(r) => {
                    let _ = writeln!(
                        s,
                        "{label}: pos {:.4} neg {} edit {} causal {}",
                        r.s_pos,
                        opt(r.s_neg),
                        opt(r.s_edit),
                        opt(r.s_causal)
                    );
                }
                None => {
                    let _ = writeln!(s, "{label}: unavailable");
                }
            }
        }
        for r in &self.supporting.significance {
            let _ = writeln!(
                s,
                "p[{}] = {:.4} over {} baselines{}",
                r.criterion,
                r.p_value,
                r.baseline_scores.len(),
                if r.passed { "" } else { " (not significant)" }
            );
        }
        let g = &self.supporting.gate;
        let _ = writeln!(s, "gate at alpha {}: {}", g.alpha, if g.passed { "pass" } else { "fail" });
        let c = &self.supporting.coverage;
        let _ = writeln!(
            s,
            "coverage ratios: positives {:.3}, negative pairs {:.3} (thresholds {}/{})",
            c.pos_coverage_ratio, c.neg_pair_coverage_ratio, c.thresholds.pos, c.thresholds.neg
        );
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// CSV with one row per verdict: decision, evidence, coverage, key region
/// scores and one p-value column per criterion (empty when not computed).
pub fn write_summary_csv<W: Write>(w: W, verdicts: &[Verdict]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![
        "concept".to_string(),
        "decision".into(),
        "evidence".into(),
        "coverage".into(),
        "region_size".into(),
        "gen_pos".into(),
        "gen_causal".into(),
        "meas_pos".into(),
        "meas_causal".into(),
    ];
    header.extend(Criterion::ALL.iter().map(|c| format!("p_{c}")));
    header.push("gate_passed".into());
    wtr.write_record(&header)?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for v in verdicts {
        let gen = v.supporting.generated_eval.as_ref();
        let meas = v.supporting.measured_eval.as_ref();
        let mut row = vec![
            v.concept.clone(),
            v.decision.to_string(),
            format!("{:?}", v.causal_evidence),
            format!("{:?}", v.coverage_level),
            v.supporting.region_size.to_string(),
            cell(gen.map(|r| r.s_pos)),
            cell(gen.and_then(|r| r.s_causal)),
            cell(meas.map(|r| r.s_pos)),
            cell(meas.and_then(|r| r.s_causal)),
        ];
        row.extend(Criterion::ALL.iter().map(|&c| cell(v.p_value(c))));
        row.push(v.supporting.gate.passed.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusProposal {
    pub role: Role,
    pub concept: String,
    pub counter_concept: Option<String>,
    pub requested: usize,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowUpPlan {
    pub concept: String,
    pub missing_positive_count: usize,
    pub missing_negative_pairs: Vec<(String, usize)>,
    pub proposed_stimuli: Vec<StimulusProposal>,
}

impl FollowUpPlan {
    pub fn is_empty(&self) -> bool {
        self.proposed_stimuli.is_empty()
    }

    /// CSV of (role, concept, counter_concept, requested, rationale).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["role", "concept", "counter_concept", "requested", "rationale"])?;
        for p in &self.proposed_stimuli {
            wtr.write_record([
                p.role.to_string(),
                p.concept.clone(),
                p.counter_concept.clone().unwrap_or_default(),
                p.requested.to_string(),
                p.rationale.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FollowUpConfig {
    /// Upper bound on the count requested by any single proposal.
    pub max_per_proposal: Option<usize>,
    /// Also propose counterfactual edits of the missing positives.
    pub propose_edits: bool,
}

impl Default for FollowUpConfig {
    fn default() -> Self {
        FollowUpConfig {
            max_per_proposal: None,
            propose_edits: false,
        }
    }
}

/// Turns coverage deficits into stimulus proposals: one for missing
/// positives and one per under-covered counter concept.
pub fn propose_followup(coverage: &CoverageReport, plan: &GenerationPlan, config: &FollowUpConfig) -> FollowUpPlan {
    let cap = |n: usize| config.max_per_proposal.map_or(n, |c| n.min(c));
    let concept = coverage.concept.clone();
    let missing_positive_count = coverage.pos_deficit();
    let missing_negative_pairs: Vec<(String, usize)> = coverage
        .pairs
        .iter()
        .filter(|p| p.deficit() > 0)
        .map(|p| (p.counter_concept.clone(), p.deficit()))
        .collect();
    let mut proposed_stimuli = Vec::new();
    if missing_positive_count > 0 {
        proposed_stimuli.push(StimulusProposal {
            role: Role::Positive,
            concept: concept.clone(),
            counter_concept: None,
            requested: cap(missing_positive_count),
            rationale: format!(
                "{} of {} requested positives verified in the measured data",
                coverage.n_pos_verified.min(coverage.n_pos_requested),
                coverage.n_pos_requested
            ),
        });
        if config.propose_edits && plan.n_edits_per_parent > 0 {
            let parents = missing_positive_count.min(plan.n_edit_parents_train + plan.n_edit_parents_eval);
            proposed_stimuli.push(StimulusProposal {
                role: Role::CounterfactualEdit,
                concept: concept.clone(),
                counter_concept: None,
                requested: cap(parents * plan.n_edits_per_parent),
                rationale: format!("{parents} new positives need edits of {} each", plan.n_edits_per_parent),
            });
        }
    }
    for (counter, deficit) in &missing_negative_pairs {
        let pair = coverage
            .pairs
            .iter()
            .find(|p| &p.counter_concept == counter)
            .expect("deficit from pairs");
        proposed_stimuli.push(StimulusProposal {
            role: Role::SemanticNegative,
            concept: concept.clone(),
            counter_concept: Some(counter.clone()),
            requested: cap(*deficit),
            rationale: format!(
                "{} of {} requested negatives for {counter} verified",
                pair.usable(),
                pair.n_neg_requested
            ),
        });
    }
    FollowUpPlan {
        concept,
        missing_positive_count,
        missing_negative_pairs,
        proposed_stimuli,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{CoverageThresholds, PairCoverage};

    fn scores(causal: f64) -> RegionScoreSet {
        RegionScoreSet {
            n_voxels: 100,
            s_pos: 1.0,
            s_neg: Some(causal),
            s_edit: Some(causal),
            s_causal: Some(causal),
            partial_causal: false,
        }
    }

    fn gate(passed: bool) -> GateDecision {
        GateDecision {
            passed,
            alpha: 0.05,
            required: vec![Criterion::CausalGen],
            failing: if passed { vec![] } else { vec![Criterion::CausalGen] },
        }
    }

    #[test]
    fn evidence_examples() {
        let t = EvidenceThresholds::default();
        let e = assess_causal_evidence(Some(&scores(0.62)), Some(&scores(0.71)), &gate(true), CoverageLevel::High, &t);
        assert_eq!(e.unwrap(), CausalEvidence::Strong);
        let e = assess_causal_evidence(Some(&scores(-0.44)), Some(&scores(0.71)), &gate(true), CoverageLevel::High, &t);
        assert_eq!(e.unwrap(), CausalEvidence::Weak);
        let e = assess_causal_evidence(Some(&scores(0.5)), Some(&scores(0.5)), &gate(false), CoverageLevel::High, &t);
        assert_eq!(e.unwrap(), CausalEvidence::Weak);
        // measured evidence is waived under low coverage
        let e = assess_causal_evidence(Some(&scores(0.5)), Some(&scores(-0.5)), &gate(true), CoverageLevel::Low, &t);
        assert_eq!(e.unwrap(), CausalEvidence::Strong);
        let e = assess_causal_evidence(None, Some(&scores(0.5)), &gate(true), CoverageLevel::Low, &t);
        assert!(matches!(e, Err(Error::MissingGeneratedScores)));
    }

    fn coverage(pos: (usize, usize), pairs: &[(&str, usize, usize)]) -> CoverageReport {
        CoverageReport {
            concept: "surfing".into(),
            n_pos_requested: pos.0,
            n_pos_verified: pos.1,
            pairs: pairs
                .iter()
                .map(|&(c, r, v)| PairCoverage {
                    counter_concept: c.into(),
                    n_neg_requested: r,
                    n_neg_verified: v,
                })
                .collect(),
            pos_coverage_ratio: 0.0,
            neg_pair_coverage_ratio: 0.0,
            coverage_level: CoverageLevel::Low,
            thresholds: CoverageThresholds::default(),
            flags: vec![],
        }
    }

    #[test]
    fn followup_examples() {
        let plan = GenerationPlan::default();
        let cfg = FollowUpConfig::default();
        assert!(propose_followup(&coverage((200, 200), &[("wave", 10, 10)]), &plan, &cfg).is_empty());

        let f = propose_followup(&coverage((200, 0), &[]), &plan, &cfg);
        assert_eq!(f.proposed_stimuli.len(), 1);
        assert_eq!((f.proposed_stimuli[0].role, f.proposed_stimuli[0].requested), (Role::Positive, 200));

        let f = propose_followup(&coverage((200, 250), &[("wave", 10, 0), ("beach", 10, 12)]), &plan, &cfg);
        assert_eq!(f.missing_negative_pairs, vec![("wave".to_string(), 10)]);
        assert_eq!(f.proposed_stimuli.len(), 1);
        let p = &f.proposed_stimuli[0];
        assert_eq!((p.role, p.counter_concept.as_deref(), p.requested), (Role::SemanticNegative, Some("wave"), 10));

        let capped = FollowUpConfig { max_per_proposal: Some(50), propose_edits: true };
        let f = propose_followup(&coverage((200, 0), &[]), &plan, &capped);
        assert_eq!(f.proposed_stimuli.iter().map(|p| p.requested).collect::<Vec<_>>(), vec![50, 50]);
    }
}
