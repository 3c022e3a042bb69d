//! From region scores to a verdict: p-values against baseline concepts, the
//! significance gate, the four decision quadrants and follow-up proposals.
//!
//! ```text
//! cargo run --example significance_verdict
//! ```

use causeloc::retrieval::{coverage_report, CoverageLevel, CoverageThresholds, RequestedCounts};
use causeloc::scoring::RegionScoreSet;
use causeloc::stats::{significance_gate, Criterion, SignificanceResult};
use causeloc::stimulus::{build_generation_plan, PlanConfig};
use causeloc::verdict::{decide, propose_followup, CausalEvidence, EvidenceThresholds, FollowUpConfig, Supporting, Verdict};
use causeloc::{Source, Split, StimulusImage, StimulusManifest};

fn main() -> causeloc::Result<()> {
    let alpha = 0.1;
    let results = vec![
        SignificanceResult::new(Criterion::ActivationGen, 1.2, vec![0.3, 0.5, 0.1, 0.9, 1.3, 0.2, 0.4, 0.0, 0.6, 0.7], alpha),
        SignificanceResult::new(Criterion::CausalGen, 0.8, vec![0.1, -0.2, 0.0, 0.3, 0.2, 0.1, -0.1, 0.05, 0.0, 0.2], alpha),
    ];
    for r in &results {
        println!("{:<14} target {:.2}  p = {:.3}", r.criterion.to_string(), r.target_score, r.p_value);
    }
    let gate = significance_gate(&results, alpha, &[Criterion::CausalGen])?;
    println!("gate on CausalGen passed: {}", gate.passed);

    println!("\ndecision table:");
    for e in [CausalEvidence::Strong, CausalEvidence::Weak] {
        for c in [CoverageLevel::High, CoverageLevel::Low] {
            println!("  {e:?} evidence, {c:?} coverage -> {}", decide(e, c));
        }
    }

    // Measured data holds 3 of 10 requested positives and no negatives for
    // one of two counter concepts.
    let mut manifest = StimulusManifest::new("goose");
    manifest.counter_concepts = vec!["duck".into(), "swan".into()];
    for i in 0..3 {
        let img = StimulusImage::positive(format!("nsd-{i}"), "goose", Split::Eval, Source::RetrievedMeasured);
        manifest.images.push(img.with_verified_present(true));
    }
    let img = StimulusImage::semantic_negative("nsd-9", "goose", "duck", Split::Eval, Source::RetrievedMeasured);
    manifest.images.push(img.with_verified_absent(true));
    let requested = RequestedCounts {
        n_pos: 10,
        n_neg_per_counter: 5,
    };
    let coverage = coverage_report("goose", &manifest, requested, CoverageThresholds::default());

    let generated = RegionScoreSet {
        n_voxels: 100,
        s_pos: 1.1,
        s_neg: Some(0.7),
        s_edit: Some(0.9),
        s_causal: Some(0.8),
        partial_causal: false,
    };
    let supporting = Supporting {
        region_size: 100,
        generated_eval: Some(generated),
        measured_eval: None,
        significance: results,
        gate,
        coverage: coverage.clone(),
    };
    let verdict = Verdict::new("goose", supporting, &EvidenceThresholds::default(), Vec::new())?;
    println!("\n{}", verdict.render_text());

    let plan = build_generation_plan("goose", &PlanConfig::default())?;
    let followup = propose_followup(&coverage, &plan, &FollowUpConfig::default());
    for p in &followup.proposed_stimuli {
        println!("follow-up: {}", p.rationale);
    }
    Ok(())
}
