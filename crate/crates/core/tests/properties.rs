use std::collections::BTreeMap;

use causeloc::pipeline::{export_score_map, import_score_map};
use causeloc::region::{select_region_positive_causal, select_region_top_k};
use causeloc::scoring::{score_voxels, ScoringSets};
use causeloc::stats::empirical_p_value;
use causeloc::stimulus::StimulusManifest;
use causeloc::{Provenance, ResponseMatrix, Source, Split, StimulusImage, VoxelScoreTable};
use proptest::prelude::*;

/// 12 images x `n_vox` voxels: images 0-3 positive, 4-8 negative, 9-11 edits
/// of positives 0, 0 and 1.
fn fixture(values: &[f32], n_vox: usize) -> (ResponseMatrix, ScoringSets) {
    let ids: Vec<String> = (0..12).map(|i| format!("i{i:02}")).collect();
    let m = ResponseMatrix::new(ids.clone(), (0..n_vox).map(|v| format!("v{v}")).collect(), values.to_vec(), Provenance::Predicted)
        .unwrap();
    let mut pairs = BTreeMap::new();
    pairs.insert(ids[0].clone(), vec![ids[9].clone(), ids[10].clone()]);
    pairs.insert(ids[1].clone(), vec![ids[11].clone()]);
    let sets = ScoringSets {
        positives: ids[0..4].to_vec(),
        negatives: ids[4..9].to_vec(),
        pairs,
    };
    (m, sets)
}

fn matrix_values() -> impl Strategy<Value = (Vec<f32>, usize)> {
    (1usize..6).prop_flat_map(|n| (prop::collection::vec(-4.0f32..4.0, 12 * n), Just(n)))
}

fn table(voxels: usize, causal: Vec<f64>) -> VoxelScoreTable {
    VoxelScoreTable {
        voxel_ids: (0..voxels).map(|v| format!("v{v:03}")).collect(),
        s_pos: vec![0.0; voxels],
        s_neg: None,
        s_edit: None,
        s_causal: causal,
        components: BTreeMap::new(),
        combined: None,
        counts: Default::default(),
        partial_causal: true,
    }
}

proptest! {
    #[test]
    fn image_order_does_not_matter((values, n) in matrix_values(), seed in any::<u64>()) {
        let (m, sets) = fixture(&values, n);
        let base = score_voxels(&m, &sets, 3).unwrap();
        let mut order: Vec<usize> = (0..12).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let ids: Vec<String> = order.iter().map(|&i| m.image_ids()[i].clone()).collect();
        let shuffled = m.select_images(&ids).unwrap();
        let again = score_voxels(&shuffled, &sets, 3).unwrap();
        prop_assert_eq!(base.s_causal, again.s_causal);
        prop_assert_eq!(base.s_neg, again.s_neg);
    }

    #[test]
    fn specificity_ignores_voxel_offsets((values, n) in matrix_values(), shift in -3.0f32..3.0) {
        let (m, sets) = fixture(&values, n);
        let (shifted, _) = fixture(&values.iter().map(|x| x + shift).collect::<Vec<_>>(), n);
        let a = score_voxels(&m, &sets, 3).unwrap();
        let b = score_voxels(&shifted, &sets, 3).unwrap();
        for v in 0..n {
            prop_assert!((a.s_causal[v] - b.s_causal[v]).abs() < 1e-5);
            prop_assert!((b.s_pos[v] - a.s_pos[v] - f64::from(shift)).abs() < 1e-5);
        }
    }

    #[test]
    fn more_hard_negatives_never_raise_the_bar((values, n) in matrix_values(), k in 1usize..5) {
        let (m, sets) = fixture(&values, n);
        let tight = score_voxels(&m, &sets, k).unwrap().s_neg.unwrap();
        let loose = score_voxels(&m, &sets, k + 1).unwrap().s_neg.unwrap();
        for v in 0..n {
            prop_assert!(loose[v] >= tight[v] - 1e-12);
        }
    }

    #[test]
    fn top_k_is_a_sorted_prefix(causal in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), -2.0f64..2.0], 1..40), k in 1usize..50) {
        let t = table(causal.len(), causal.clone());
        let r = select_region_top_k("c", &t, "s_causal", k).unwrap();
        prop_assert_eq!(r.len(), k.min(causal.len()));
        prop_assert_eq!(r.short, k > causal.len());
        for w in r.voxel_ids.windows(2).zip(r.scores.windows(2)) {
            let ((a, b), (sa, sb)) = ((&w.0[0], &w.0[1]), (w.1[0], w.1[1]));
            prop_assert!(sa > sb || (sa == sb && a < b));
        }
        if let Some(&last) = r.scores.last() {
            let outside = causal.iter().enumerate().filter(|(i, _)| !r.voxel_ids.contains(&format!("v{i:03}")));
            for (_, &s) in outside {
                prop_assert!(s <= last);
            }
        }
        let pc = select_region_positive_causal("c", &t);
        prop_assert_eq!(pc.len(), causal.iter().filter(|&&s| s > 0.0).count());
    }

    #[test]
    fn p_value_bounds_and_monotonicity(base in prop::collection::vec(-3i32..3, 0..30), t in -4i32..4) {
        let b: Vec<f64> = base.iter().map(|&x| f64::from(x)).collect();
        let lo = empirical_p_value(f64::from(t), &b);
        let hi = empirical_p_value(f64::from(t + 1), &b);
        prop_assert!(lo > 0.0 && lo <= 1.0);
        prop_assert!(hi <= lo);
        prop_assert!(lo >= 1.0 / (1.0 + b.len() as f64));
    }

    #[test]
    fn score_table_csv_round_trip(causal in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20)) {
        let mut t = table(causal.len(), causal.clone());
        t.s_neg = Some(causal.iter().map(|x| x / 3.0).collect());
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = VoxelScoreTable::read_csv(&buf[..]).unwrap();
        prop_assert_eq!(&back.s_causal, &t.s_causal);
        prop_assert_eq!(&back.s_neg, &t.s_neg);
        let mut map = Vec::new();
        export_score_map(&t, "s_causal", &mut map).unwrap();
        let imported = import_score_map(&map[..]).unwrap();
        prop_assert_eq!(imported.iter().map(|(_, s)| *s).collect::<Vec<_>>(), causal);
    }

    #[test]
    fn manifest_round_trip(
        prompts in prop::collection::vec(proptest::option::of("[ -~é日]{0,12}"), 1..8),
        flags in prop::collection::vec(proptest::option::of(any::<bool>()), 8),
    ) {
        let mut m = StimulusManifest::new("goose");
        m.counter_concepts = vec!["duck".into()];
        m.extra.insert("subject".into(), serde_json::json!({"id": 1, "tags": ["x"]}));
        for (i, p) in prompts.iter().enumerate() {
            let mut img = match i % 3 {
                0 => StimulusImage::positive(format!("p{i}"), "goose", Split::Train, Source::Generated),
                1 => StimulusImage::semantic_negative(format!("n{i}"), "goose", "duck", Split::Eval, Source::RetrievedMeasured),
                _ => StimulusImage::counterfactual_edit(format!("e{i}"), "goose", "p0", Split::Train),
            };
            img.prompt_or_instruction = p.clone();
            img.verified_present = flags[i];
            img.verified_absent = flags[7 - i];
            img.extra.insert(format!("k{i}"), serde_json::json!(i));
            m.images.push(img);
        }
        let mut buf = Vec::new();
        m.write_jsonl(&mut buf).unwrap();
        prop_assert_eq!(StimulusManifest::read_jsonl(&buf[..]).unwrap(), m);
    }
}
