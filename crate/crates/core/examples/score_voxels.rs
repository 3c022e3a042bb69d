//! Voxel scores on a hand-built matrix: one voxel tuned to the concept, one
//! driven by a co-occurring attribute, one flat.
//!
//! ```text
//! cargo run --example score_voxels
//! ```

use std::collections::BTreeMap;

use causeloc::region::select_region_top_k;
use causeloc::scoring::{region_scores, score_voxels, ScoringSets};
use causeloc::{Provenance, ResponseMatrix};

fn main() -> causeloc::Result<()> {
    // rows: images; columns: selective, confound, flat
    let rows = [
        ("surf-1", [2.0, 1.8, 0.1]),
        ("surf-2", [1.9, 2.1, 0.0]),
        ("surf-3", [2.2, 1.7, -0.1]),
        ("swim-1", [0.1, 1.9, 0.0]),
        ("swim-2", [0.0, 2.0, 0.1]),
        ("sail-1", [0.2, 1.6, 0.0]),
        ("surf-1-edit", [0.3, 1.8, 0.1]),
        ("surf-2-edit", [0.1, 2.0, 0.0]),
    ];
    let m = ResponseMatrix::from_rows(
        rows.iter().map(|(id, _)| id.to_string()).collect(),
        vec!["selective".into(), "confound".into(), "flat".into()],
        &rows.iter().map(|(_, v)| v.to_vec()).collect::<Vec<_>>(),
        Provenance::Predicted,
    )?;
    let mut pairs = BTreeMap::new();
    pairs.insert("surf-1".to_string(), vec!["surf-1-edit".to_string()]);
    pairs.insert("surf-2".to_string(), vec!["surf-2-edit".to_string()]);
    let sets = ScoringSets {
        positives: vec!["surf-1".into(), "surf-2".into(), "surf-3".into()],
        negatives: vec!["swim-1".into(), "swim-2".into(), "sail-1".into()],
        pairs,
    };

    let table = score_voxels(&m, &sets, 10)?;
    println!("{:<10} {:>7} {:>7} {:>7} {:>7}", "voxel", "s_pos", "s_neg", "s_edit", "causal");
    for (i, id) in table.voxel_ids.iter().enumerate() {
        println!(
            "{:<10} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            id,
            table.s_pos[i],
            table.s_neg.as_ref().unwrap()[i],
            table.s_edit.as_ref().unwrap()[i],
            table.s_causal[i]
        );
    }

    for score in ["s_pos", "s_causal"] {
        let region = select_region_top_k("surfing", &table, score, 1)?;
        let r = region_scores(&m, &sets, &region, 10)?;
        println!("top-1 by {score}: {:?}, region causal {:.3}", region.voxel_ids, r.s_causal.unwrap());
    }
    Ok(())
}
