//! Candidate region construction from voxel score tables.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{desc_then_id, VoxelScoreTable};

/// Region size used for evaluation.
pub const DEFAULT_REGION_SIZE: usize = 100;

/// Region sizes exposed for size sweeps.
pub const REGION_SIZE_SWEEP: [usize; 5] = [50, 100, 200, 500, 1000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionMode {
    PositiveCausal,
    TopK(usize),
}

/// Voxels ordered by descending selection score, ties by voxel id ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub concept: String,
    pub voxel_ids: Vec<String>,
    /// Selection score of each voxel, aligned with `voxel_ids`.
    pub scores: Vec<f64>,
    pub mode: RegionMode,
    pub selection_score_name: String,
    /// TopK asked for more voxels than the table holds.
    pub short: bool,
}

fn ranked(table: &VoxelScoreTable, scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| {
        desc_then_id(
            (scores[a], table.voxel_ids[a].as_str()),
            (scores[b], table.voxel_ids[b].as_str()),
        )
    });
    order
}

impl Region {
    pub fn is_empty(&self) -> bool {
        self.voxel_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.voxel_ids.len()
    }

    /// CSV of (rank, voxel_id, score), rank starting at 1.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["rank", "voxel_id", "score"])?;
        for (i, (id, s)) in self.voxel_ids.iter().zip(&self.scores).enumerate() {
            wtr.write_record([(i + 1).to_string(), id.clone(), s.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, concept: &str, mode: RegionMode, score_name: &str) -> Result<Region> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let mut voxel_ids = Vec::new();
        let mut scores = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            voxel_ids.push(rec.get(1).unwrap_or_default().to_string());
            let cell = rec.get(2).unwrap_or_default();
            scores.push(
                cell.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad region score {cell:?}: {e}")))?,
            );
        }
        Ok(Region {
            concept: concept.to_string(),
            voxel_ids,
            scores,
            mode,
            selection_score_name: score_name.to_string(),
            short: false,
        })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::from(e).at_path(path))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// All voxels with a strictly positive causal score. May be empty.
pub fn select_region_positive_causal(concept: &str, scores: &VoxelScoreTable) -> Region {
    let order = ranked(scores, &scores.s_causal);
    let kept: Vec<usize> = order.into_iter().filter(|&i| scores.s_causal[i] > 0.0).collect();
    Region {
        concept: concept.to_string(),
        voxel_ids: kept.iter().map(|&i| scores.voxel_ids[i].clone()).collect(),
        scores: kept.iter().map(|&i| scores.s_causal[i]).collect(),
        mode: RegionMode::PositiveCausal,
        selection_score_name: "s_causal".into(),
        short: false,
    }
}

/// The `k` highest-scoring voxels under `score_name`.
pub fn select_region_top_k(concept: &str, scores: &VoxelScoreTable, score_name: &str, k: usize) -> Result<Region> {
    if k == 0 {
        return Err(Error::InvalidArgument("region size k must be at least 1".into()));
    }
    let values = scores.score(score_name)?;
    let mut order = ranked(scores, values);
    let short = order.len() < k;
    order.truncate(k);
    Ok(Region {
        concept: concept.to_string(),
        voxel_ids: order.iter().map(|&i| scores.voxel_ids[i].clone()).collect(),
        scores: order.iter().map(|&i| values[i]).collect(),
        mode: RegionMode::TopK(k),
        selection_score_name: score_name.to_string(),
        short,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreCounts;
    use std::collections::BTreeMap;

    pub(crate) fn table(ids: &[&str], causal: &[f64]) -> VoxelScoreTable {
        VoxelScoreTable {
            voxel_ids: ids.iter().map(|s| s.to_string()).collect(),
            s_pos: causal.to_vec(),
            s_neg: None,
            s_edit: None,
            s_causal: causal.to_vec(),
            components: BTreeMap::new(),
            combined: None,
            counts: ScoreCounts::default(),
            partial_causal: false,
        }
    }

    #[test]
    fn positive_causal_examples() {
        let t = table(&["a", "b", "c"], &[0.5, -0.1, 0.2]);
        assert_eq!(select_region_positive_causal("x", &t).voxel_ids, vec!["a", "c"]);
        let t = table(&["a", "b"], &[-0.5, -0.1]);
        assert!(select_region_positive_causal("x", &t).is_empty());
        let t = table(&["c", "a", "b"], &[0.3, 0.3, 0.3]);
        assert_eq!(select_region_positive_causal("x", &t).voxel_ids, vec!["a", "b", "c"]);
        let t = table(&["a"], &[0.0]);
        assert!(select_region_positive_causal("x", &t).is_empty());
    }

    #[test]
    fn top_k_examples() {
        let t = table(&["a", "b", "c"], &[0.5, -0.1, 0.2]);
        let r = select_region_top_k("x", &t, "s_causal", 2).unwrap();
        assert_eq!(r.voxel_ids, vec!["a", "c"]);
        assert!(!r.short);
        let r = select_region_top_k("x", &t, "s_causal", 3).unwrap();
        assert_eq!(r.voxel_ids, vec!["a", "c", "b"]);
        let r = select_region_top_k("x", &t, "s_causal", 100).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.short);
        assert!(matches!(select_region_top_k("x", &t, "nope", 2), Err(Error::UnknownScore(_))));
        assert!(select_region_top_k("x", &t, "s_causal", 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = table(&["a", "b", "c"], &[0.5, -0.1, 0.2]);
        let r = select_region_top_k("x", &t, "s_causal", 2).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "rank,voxel_id,score\n1,a,0.5\n2,c,0.2\n");
        let back = Region::read_csv(buf.as_slice(), "x", RegionMode::TopK(2), "s_causal").unwrap();
        assert_eq!(back, r);
    }
}
