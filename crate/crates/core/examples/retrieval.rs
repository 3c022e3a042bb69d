//! Single-stage positive retrieval and two-stage negative retrieval over a
//! small embedding index, followed by coverage accounting.
//!
//! ```text
//! cargo run --example retrieval
//! ```

use causeloc::retrieval::{
    coverage_report, rank_by_similarity, two_stage_negative_retrieval, CoverageThresholds, RequestedCounts,
};
use causeloc::{EmbeddingIndex, Source, Split, StimulusImage, StimulusManifest};

fn main() -> causeloc::Result<()> {
    // axes: horse, field, water
    let items = [
        ("horse-in-field", [0.9, 0.4, 0.0]),
        ("horse-close-up", [1.0, 0.0, 0.0]),
        ("empty-field", [0.05, 1.0, 0.0]),
        ("cow-in-field", [0.3, 0.9, 0.0]),
        ("lake", [0.0, 0.2, 1.0]),
        ("field-by-lake", [0.0, 0.7, 0.7]),
    ];
    let index = EmbeddingIndex::from_raw(
        items.iter().map(|(id, _)| id.to_string()).collect(),
        3,
        items.iter().flat_map(|(_, v)| v.to_vec()).collect(),
    )?;
    let horse = [1.0f32, 0.0, 0.0];
    let field = [0.0f32, 1.0, 0.0];

    let pos = rank_by_similarity("horse", &horse, &index, 2)?;
    println!("positives: {:?}", pos.ranked_ids);

    // Field images, least horse-like first.
    let neg = two_stage_negative_retrieval("field", &field, &horse, &index, 4, 2)?;
    for (id, s) in neg.ranked_ids.iter().zip(&neg.similarities) {
        println!("negative {id:<15} similarity to horse {s:.3}");
    }

    let mut manifest = StimulusManifest::new("horse");
    manifest.counter_concepts = vec!["field".into(), "stable".into()];
    for id in &pos.ranked_ids {
        let img = StimulusImage::positive(id.clone(), "horse", Split::Eval, Source::RetrievedMeasured);
        manifest.images.push(img.with_verified_present(true));
    }
    for id in &neg.ranked_ids {
        let img = StimulusImage::semantic_negative(id.clone(), "horse", "field", Split::Eval, Source::RetrievedMeasured);
        manifest.images.push(img.with_verified_absent(true));
    }
    let requested = RequestedCounts {
        n_pos: 4,
        n_neg_per_counter: 2,
    };
    let report = coverage_report("horse", &manifest, requested, CoverageThresholds::default());
    println!(
        "coverage: positives {:.2}, negative pairs {:.2} -> {:?}",
        report.pos_coverage_ratio, report.neg_pair_coverage_ratio, report.coverage_level
    );
    Ok(())
}
