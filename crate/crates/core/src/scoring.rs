//! Voxel-level and region-level activation and causal-specificity scores.
//!
//! For a voxel `v` with activation `a_v(x)`:
//!
//! - positive score: mean activation over positive images;
//! - semantic-negative score: positive score minus the mean activation over
//!   the `k` hardest semantic negatives for that voxel (ties broken by image
//!   id ascending);
//! - counterfactual score: mean over positives that have edits of the
//!   positive's activation minus the activation of its hardest edit;
//! - causal score: mean of the two specificity scores, or whichever one is
//!   available.
//!
//! Region scores replace `a_v` with the region-mean signal `a_R` before
//! applying the same definitions, so hardest-negative and hardest-edit
//! selection happens on `a_R`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Provenance, ResponseMatrix};
use crate::region::Region;
use crate::stimulus::{Role, StimulusImage};

/// Number of hardest semantic negatives averaged per voxel.
pub const DEFAULT_HARD_NEGATIVES: usize = 10;

/// Named ranking signals. Abbreviations: MA = max activation, CS = causal
/// semantic, CE = causal edits; suffix G = generated, M = retrieved from
/// measured data, L = retrieved from a large predicted pool, LF = pool
/// retrieval filtered by verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "MAG")]
    Mag,
    #[serde(rename = "MAM")]
    Mam,
    #[serde(rename = "MAL")]
    Mal,
    #[serde(rename = "MALF")]
    Malf,
    #[serde(rename = "CSG")]
    Csg,
    #[serde(rename = "CSM")]
    Csm,
    #[serde(rename = "CSL")]
    Csl,
    #[serde(rename = "CEG")]
    Ceg,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Mag,
        Component::Mam,
        Component::Mal,
        Component::Malf,
        Component::Csg,
        Component::Csm,
        Component::Csl,
        Component::Ceg,
    ];

    /// The combination with the best overall balance of activation and causal criteria.
    pub const DEFAULT_COMBINATION: [Component; 5] = [
        Component::Ceg,
        Component::Csg,
        Component::Csl,
        Component::Malf,
        Component::Csm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Mag => "MAG",
            Component::Mam => "MAM",
            Component::Mal => "MAL",
            Component::Malf => "MALF",
            Component::Csg => "CSG",
            Component::Csm => "CSM",
            Component::Csl => "CSL",
            Component::Ceg => "CEG",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownComponent(s.to_string()))
    }
}

/// Image id sets for one scoring pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoringSets {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    /// Positive id to the ids of its counterfactual edits.
    pub pairs: BTreeMap<String, Vec<String>>,
}

impl ScoringSets {
    /// Positives, semantic negatives and edit pairs among `images`, in
    /// iteration order. Edits count only when their parent is among the
    /// selected positives. With `verified_only`, unverified images are skipped.
    pub fn from_images<'a, I>(images: I, verified_only: bool) -> ScoringSets
    where
        I: IntoIterator<Item = &'a StimulusImage>,
    {
        let mut sets = ScoringSets::default();
        let mut edits: Vec<&StimulusImage> = Vec::new();
        for img in images {
            if verified_only && !img.is_verified() {
                continue;
            }
            match img.role {
                Role::Positive => sets.positives.push(img.id.clone()),
                Role::SemanticNegative => sets.negatives.push(img.id.clone()),
                Role::CounterfactualEdit => edits.push(img),
            }
        }
        let positives: HashSet<&str> = sets.positives.iter().map(String::as_str).collect();
        let mut pairs: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in edits {
            if let Some(p) = e.parent_positive_id.as_deref().filter(|p| positives.contains(p)) {
                pairs.entry(p.to_string()).or_default().push(e.id.clone());
            }
        }
        sets.pairs = pairs;
        sets
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCounts {
    pub n_positives: usize,
    pub n_negatives_used: usize,
    pub n_edit_pairs_used: usize,
    pub n_positives_without_edits: usize,
}

struct Resolved {
    pos: Vec<usize>,
    neg: Vec<usize>,
    pairs: Vec<(usize, Vec<usize>)>,
}

fn resolve_positives<S: AsRef<str>>(m: &ResponseMatrix, positives: &[S]) -> Result<Vec<usize>> {
    if positives.is_empty() {
        return Err(Error::NoPositives);
    }
    m.image_indices(positives)
}

fn resolve_negatives<S: AsRef<str>, T: AsRef<str>>(
    m: &ResponseMatrix,
    positives: &[S],
    negatives: &[T],
) -> Result<Vec<usize>> {
    if negatives.is_empty() {
        return Err(Error::NoSemanticNegatives);
    }
    let pos: HashSet<&str> = positives.iter().map(AsRef::as_ref).collect();
    if let Some(overlap) = negatives.iter().find(|n| pos.contains(n.as_ref())) {
        return Err(Error::OverlappingSets(overlap.as_ref().to_string()));
    }
    m.image_indices(negatives)
}

fn resolve_pairs(
    m: &ResponseMatrix,
    pairs: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for (parent, edits) in pairs {
        if edits.is_empty() {
            continue;
        }
        let p = m.image_indices(std::slice::from_ref(parent))?[0];
        out.push((p, m.image_indices(edits)?));
    }
    if out.is_empty() {
        return Err(Error::NoCounterfactualPairs);
    }
    Ok(out)
}

fn mean_over(act: &impl Fn(usize) -> f64, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| act(i)).sum::<f64>() / idx.len() as f64
}

/// Indices of the `k` negatives with the highest activation, by
/// (activation desc, image id asc).
fn hardest(act: &impl Fn(usize) -> f64, neg: &[usize], ids: &[String], k: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = neg.iter().map(|&i| (act(i), i)).collect();
    ranked.sort_by(|a, b| desc_then_id((a.0, &ids[a.1]), (b.0, &ids[b.1])));
    ranked.truncate(k.min(neg.len()));
    ranked.into_iter().map(|(_, i)| i).collect()
}

fn neg_kernel(act: &impl Fn(usize) -> f64, pos: &[usize], neg: &[usize], ids: &[String], k: usize) -> f64 {
    let hard = hardest(act, neg, ids, k);
    mean_over(act, pos) - mean_over(act, &hard)
}

fn edit_kernel(act: &impl Fn(usize) -> f64, pairs: &[(usize, Vec<usize>)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|(p, edits)| {
            let hardest_edit = edits.iter().map(|&e| act(e)).fold(f64::NEG_INFINITY, f64::max);
            act(*p) - hardest_edit
        })
        .sum();
    total / pairs.len() as f64
}

fn per_voxel(m: &ResponseMatrix, f: impl Fn(&dyn Fn(usize) -> f64) -> f64) -> Vec<f64> {
    (0..m.n_voxels())
        .map(|v| {
            let act = |i: usize| f64::from(m.get(i, v));
            f(&act)
        })
        .collect()
}

pub fn positive_score<S: AsRef<str>>(m: &ResponseMatrix, positives: &[S]) -> Result<Vec<f64>> {
    let pos = resolve_positives(m, positives)?;
    Ok(per_voxel(m, |act| mean_over(&act, &pos)))
}

/// Ranks voxels by mean activation on positive images. Identical to
/// [`positive_score`]; kept under its own name for baseline comparisons.
pub fn baseline_max_activation<S: AsRef<str>>(m: &ResponseMatrix, positives: &[S]) -> Result<Vec<f64>> {
    positive_score(m, positives)
}

pub fn semantic_negative_score<S: AsRef<str>, T: AsRef<str>>(
    m: &ResponseMatrix,
    positives: &[S],
    negatives: &[T],
    k: usize,
) -> Result<Vec<f64>> {
    let pos = resolve_positives(m, positives)?;
    let neg = resolve_negatives(m, positives, negatives)?;
    let ids = m.image_ids();
    Ok(per_voxel(m, |act| neg_kernel(&act, &pos, &neg, ids, k)))
}

/// The hardest-negative set for one voxel, in selection order.
pub fn hardest_negatives<T: AsRef<str>>(
    m: &ResponseMatrix,
    voxel: &str,
    negatives: &[T],
    k: usize,
) -> Result<Vec<String>> {
    let v = m.voxel_indices(&[voxel])?[0];
    let neg = m.image_indices(negatives)?;
    let act = |i: usize| f64::from(m.get(i, v));
    Ok(hardest(&act, &neg, m.image_ids(), k)
        .into_iter()
        .map(|i| m.image_ids()[i].clone())
        .collect())
}

/// Positives with an empty edit list are excluded from the mean.
pub fn counterfactual_score(m: &ResponseMatrix, pairs: &BTreeMap<String, Vec<String>>) -> Result<Vec<f64>> {
    let pairs = resolve_pairs(m, pairs)?;
    Ok(per_voxel(m, |act| edit_kernel(&act, &pairs)))
}

pub fn causal_score(s_neg: &[f64], s_edit: &[f64]) -> Result<Vec<f64>> {
    if s_neg.len() != s_edit.len() {
        return Err(Error::LengthMismatch {
            left: s_neg.len(),
            right: s_edit.len(),
        });
    }
    Ok(s_neg.iter().zip(s_edit).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Weighted sum of component score vectors. An empty weight map weights every
/// component by 1. With `standardize`, each component is z-scored across
/// voxels first (constant components become zero).
pub fn combined_ranking_score(
    components: &BTreeMap<String, Vec<f64>>,
    weights: &BTreeMap<String, f64>,
    standardize: bool,
) -> Result<Vec<f64>> {
    let unit: BTreeMap<String, f64>;
    let weights = if weights.is_empty() {
        unit = components.keys().map(|k| (k.clone(), 1.0)).collect();
        &unit
    } else {
        weights
    };
    let mut len = None;
    for v in components.values() {
        match len {
            None => len = Some(v.len()),
            Some(l) if l != v.len() => {
                return Err(Error::LengthMismatch {
                    left: l,
                    right: v.len(),
                })
            }
            _ => {}
        }
    }
    let mut out = vec![0.0; len.unwrap_or(0)];
    for (name, w) in weights {
        let comp = components
            .get(name)
            .ok_or_else(|| Error::UnknownComponent(name.clone()))?;
        if standardize {
            let z = standardize_vec(comp);
            out.iter_mut().zip(&z).for_each(|(o, x)| *o += w * x);
        } else {
            out.iter_mut().zip(comp).for_each(|(o, x)| *o += w * x);
        }
    }
    Ok(out)
}

fn standardize_vec(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / sd).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelScoreTable {
    pub voxel_ids: Vec<String>,
    pub s_pos: Vec<f64>,
    pub s_neg: Option<Vec<f64>>,
    pub s_edit: Option<Vec<f64>>,
    pub s_causal: Vec<f64>,
    pub components: BTreeMap<String, Vec<f64>>,
    pub combined: Option<Vec<f64>>,
    pub counts: ScoreCounts,
    /// Set when only one of the two specificity scores could be computed.
    pub partial_causal: bool,
}

/// Scores every voxel of `m`. Positives are required; at least one of
/// negatives or counterfactual pairs must be present.
pub fn score_voxels(m: &ResponseMatrix, sets: &ScoringSets, k: usize) -> Result<VoxelScoreTable> {
    let pos = resolve_positives(m, &sets.positives)?;
    let neg = if sets.negatives.is_empty() {
        None
    } else {
        Some(resolve_negatives(m, &sets.positives, &sets.negatives)?)
    };
    let pairs = match resolve_pairs(m, &sets.pairs) {
        Ok(p) => Some(p),
        Err(Error::NoCounterfactualPairs) => None,
        Err(e) => return Err(e),
    };
    let resolved = Resolved {
        pos,
        neg: neg.unwrap_or_default(),
        pairs: pairs.unwrap_or_default(),
    };
    let ids = m.image_ids();
    let s_pos = per_voxel(m, |act| mean_over(&act, &resolved.pos));
    let s_neg = (!resolved.neg.is_empty())
        .then(|| per_voxel(m, |act| neg_kernel(&act, &resolved.pos, &resolved.neg, ids, k)));
    let s_edit = (!resolved.pairs.is_empty()).then(|| per_voxel(m, |act| edit_kernel(&act, &resolved.pairs)));
    let (s_causal, partial) = combine_causal(s_neg.as_deref(), s_edit.as_deref())?;
    let with_edits: HashSet<&str> = sets
        .pairs
        .iter()
        .filter(|(_, e)| !e.is_empty())
        .map(|(p, _)| p.as_str())
        .collect();
    let counts = ScoreCounts {
        n_positives: resolved.pos.len(),
        n_negatives_used: k.min(resolved.neg.len()),
        n_edit_pairs_used: resolved.pairs.len(),
        n_positives_without_edits: sets
            .positives
            .iter()
            .filter(|p| !with_edits.contains(p.as_str()))
            .count(),
    };
    Ok(VoxelScoreTable {
        voxel_ids: m.voxel_ids().to_vec(),
        s_pos,
        s_neg,
        s_edit,
        s_causal,
        components: BTreeMap::new(),
        combined: None,
        counts,
        partial_causal: partial,
    })
}

fn combine_causal(s_neg: Option<&[f64]>, s_edit: Option<&[f64]>) -> Result<(Vec<f64>, bool)> {
    match (s_neg, s_edit) {
        (Some(n), Some(e)) => Ok((causal_score(n, e)?, false)),
        (Some(only), None) | (None, Some(only)) => Ok((only.to_vec(), true)),
        (None, None) => Err(Error::NoCausalEvidence),
    }
}

impl VoxelScoreTable {
    pub const SCORE_NAMES: [&'static str; 5] = ["s_pos", "s_neg", "s_edit", "s_causal", "combined"];

    pub fn len(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_ids.is_empty()
    }

    /// Looks up a score column by name: `s_pos`, `s_neg`, `s_edit`,
    /// `s_causal`, `combined`, or a component abbreviation.
    pub fn score(&self, name: &str) -> Result<&[f64]> {
        let found = match name {
            "s_pos" => Some(self.s_pos.as_slice()),
            "s_neg" => self.s_neg.as_deref(),
            "s_edit" => self.s_edit.as_deref(),
            "s_causal" => Some(self.s_causal.as_slice()),
            "combined" => self.combined.as_deref(),
            other => self.components.get(other).map(Vec::as_slice),
        };
        found.ok_or_else(|| Error::UnknownScore(name.to_string()))
    }

    pub fn set_component(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: self.len(),
            });
        }
        self.components.insert(name.into(), values);
        Ok(())
    }

    /// Computes and stores the combined ranking score from this table's components.
    pub fn set_combined(&mut self, weights: &BTreeMap<String, f64>, standardize: bool) -> Result<()> {
        self.combined = Some(combined_ranking_score(&self.components, weights, standardize)?);
        Ok(())
    }

    fn columns(&self) -> Vec<(String, Option<&[f64]>)> {
        let mut cols: Vec<(String, Option<&[f64]>)> = vec![
            ("s_pos".into(), Some(&self.s_pos)),
            ("s_neg".into(), self.s_neg.as_deref()),
            ("s_edit".into(), self.s_edit.as_deref()),
            ("s_causal".into(), Some(&self.s_causal)),
        ];
        for (name, v) in &self.components {
            cols.push((name.clone(), Some(v)));
        }
        if let Some(c) = &self.combined {
            cols.push(("combined".into(), Some(c)));
        }
        cols
    }

    /// CSV with one row per voxel; unavailable scores are empty cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let cols = self.columns();
        let mut header = vec!["voxel_id".to_string()];
        header.extend(cols.iter().map(|(n, _)| n.clone()));
        wtr.write_record(&header)?;
        for (i, id) in self.voxel_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(cols.iter().map(|(_, v)| v.map(|v| v[i].to_string()).unwrap_or_default()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a table written by [`VoxelScoreTable::write_csv`]. Lines starting
    /// with `#` are ignored. Counts are not stored in the CSV and come back zero.
    pub fn read_csv<R: BufRead>(r: R) -> Result<VoxelScoreTable> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("voxel_id") {
            return Err(Error::InvalidArgument("score CSV must start with voxel_id".into()));
        }
        let mut ids = Vec::new();
        let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); header.len() - 1];
        for rec in rdr.records() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            for (c, col) in cols.iter_mut().enumerate() {
                let cell = rec.get(c + 1).unwrap_or("");
                col.push(if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse::<f64>().map_err(|e| {
                        Error::InvalidArgument(format!("bad score {cell:?}: {e}"))
                    })?)
                });
            }
        }
        let mut table = VoxelScoreTable {
            voxel_ids: ids,
            s_pos: Vec::new(),
            s_neg: None,
            s_edit: None,
            s_causal: Vec::new(),
            components: BTreeMap::new(),
            combined: None,
            counts: ScoreCounts::default(),
            partial_causal: false,
        };
        for (name, col) in header[1..].iter().zip(cols) {
            let full: Option<Vec<f64>> = col.into_iter().collect();
            match (name.as_str(), full) {
                ("s_pos", Some(v)) => table.s_pos = v,
                ("s_causal", Some(v)) => table.s_causal = v,
                ("s_neg", v) => table.s_neg = v,
                ("s_edit", v) => table.s_edit = v,
                ("combined", v) => table.combined = v,
                (other, Some(v)) => {
                    table.components.insert(other.to_string(), v);
                }
                (other, None) => {
                    return Err(Error::InvalidArgument(format!("column {other} has empty cells")))
                }
            }
        }
        if table.s_pos.len() != table.len() || table.s_causal.len() != table.len() {
            return Err(Error::InvalidArgument("score CSV lacks s_pos or s_causal".into()));
        }
        table.partial_causal = table.s_neg.is_none() != table.s_edit.is_none();
        Ok(table)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::from(e).at_path(path))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<VoxelScoreTable> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::from(e).at_path(path))?;
        VoxelScoreTable::read_csv(std::io::BufReader::new(f)).map_err(|e| e.at_path(path))
    }

    /// Packs the available score columns into a matrix with one row per
    /// score name, for storage in the binary container.
    pub fn to_matrix(&self) -> Result<ResponseMatrix> {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, col) in self.columns() {
            if let Some(col) = col {
                names.push(name);
                values.extend(col.iter().map(|&x| x as f32));
            }
        }
        ResponseMatrix::new(names, self.voxel_ids.clone(), values, Provenance::Predicted)
    }
}

/// Scores of the region-mean signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScoreSet {
    pub n_voxels: usize,
    pub s_pos: f64,
    pub s_neg: Option<f64>,
    pub s_edit: Option<f64>,
    pub s_causal: Option<f64>,
    pub partial_causal: bool,
}

/// Region-mean activation `a_R(x)` for every image of `m`.
pub fn region_signal(m: &ResponseMatrix, region: &Region) -> Result<Vec<f64>> {
    if region.voxel_ids.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let cols = m.voxel_indices(&region.voxel_ids)?;
    Ok((0..m.n_images())
        .map(|i| {
            let row = m.row(i);
            cols.iter().map(|&c| f64::from(row[c])).sum::<f64>() / cols.len() as f64
        })
        .collect())
}

/// Scores a region on the given image sets. Negatives and pairs are optional;
/// the causal score is `None` only when both are missing.
pub fn region_scores(m: &ResponseMatrix, sets: &ScoringSets, region: &Region, k: usize) -> Result<RegionScoreSet> {
    let signal = region_signal(m, region)?;
    let act = |i: usize| signal[i];
    let pos = resolve_positives(m, &sets.positives)?;
    let s_pos = mean_over(&act, &pos);
    let s_neg = if sets.negatives.is_empty() {
        None
    } else {
        let neg = resolve_negatives(m, &sets.positives, &sets.negatives)?;
        Some(neg_kernel(&act, &pos, &neg, m.image_ids(), k))
    };
    let s_edit = match resolve_pairs(m, &sets.pairs) {
        Ok(pairs) => Some(edit_kernel(&act, &pairs)),
        Err(Error::NoCounterfactualPairs) => None,
        Err(e) => return Err(e),
    };
    let (s_causal, partial) = match (s_neg, s_edit) {
        (Some(n), Some(e)) => (Some(0.5 * (n + e)), false),
        (Some(x), None) | (None, Some(x)) => (Some(x), true),
        (None, None) => (None, false),
    };
    Ok(RegionScoreSet {
        n_voxels: region.voxel_ids.len(),
        s_pos,
        s_neg,
        s_edit,
        s_causal,
        partial_causal: partial,
    })
}

/// Score descending, then id ascending. Scores are finite; `0.0` and `-0.0` tie.
pub(crate) fn desc_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::RegionMode;

    fn column_matrix(ids: &[&str], values: &[f32]) -> ResponseMatrix {
        ResponseMatrix::new(
            ids.iter().map(|s| s.to_string()).collect(),
            vec!["v".into()],
            values.to_vec(),
            Provenance::Predicted,
        )
        .unwrap()
    }

    #[test]
    fn positive_score_examples() {
        let m = column_matrix(&["a", "b", "c"], &[2.0, 2.0, 2.0]);
        assert_eq!(positive_score(&m, &["a", "b", "c"]).unwrap(), vec![2.0]);
        let m = column_matrix(&["a", "b", "c"], &[1.0, 2.0, 3.0]);
        assert_eq!(positive_score(&m, &["a", "b", "c"]).unwrap(), vec![2.0]);
        assert!(matches!(positive_score::<&str>(&m, &[]), Err(Error::NoPositives)));
        assert_eq!(baseline_max_activation(&m, &["c"]).unwrap(), vec![3.0]);
    }

    #[test]
    fn hardest_ten_of_twelve() {
        let mut ids = vec!["p".to_string()];
        let mut vals = vec![2.0f32];
        let negs = [3.0, 1., 1., 1., 1., 1., 1., 1., 1., 1., 0., 0.];
        for (i, v) in negs.iter().enumerate() {
            ids.push(format!("n{i:02}"));
            vals.push(*v);
        }
        let m = ResponseMatrix::new(ids.clone(), vec!["v".into()], vals, Provenance::Predicted).unwrap();
        let s = semantic_negative_score(&m, &["p"], &ids[1..], 10).unwrap();
        assert!((s[0] - 0.8).abs() < 1e-12, "{}", s[0]);
    }

    #[test]
    fn fewer_negatives_than_k() {
        let m = column_matrix(&["p", "n1", "n2"], &[1.0, 0.0, 0.0]);
        assert_eq!(semantic_negative_score(&m, &["p"], &["n1", "n2"], 10).unwrap(), vec![1.0]);
        let m = column_matrix(&["p", "n"], &[0.4, 0.4]);
        assert_eq!(semantic_negative_score(&m, &["p"], &["n"], 10).unwrap(), vec![0.0]);
        assert!(matches!(
            semantic_negative_score::<&str, &str>(&m, &["p"], &[], 10),
            Err(Error::NoSemanticNegatives)
        ));
        assert!(matches!(
            semantic_negative_score(&m, &["p"], &["p"], 10),
            Err(Error::OverlappingSets(_))
        ));
    }

    #[test]
    fn hardest_negative_ties_break_by_id() {
        let m = column_matrix(&["p", "b", "a", "c"], &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(hardest_negatives(&m, "v", &["b", "c", "a"], 2).unwrap(), vec!["a", "b"]);
    }

    fn pairs(entries: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
        entries
            .iter()
            .map(|(p, e)| (p.to_string(), e.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn counterfactual_examples() {
        let m = column_matrix(&["p1", "p2", "e1", "e2", "e3", "e4"], &[2.0, 3.0, 1.0, 0.0, 2.5, 1.0]);
        let s = counterfactual_score(&m, &pairs(&[("p1", &["e1", "e2"]), ("p2", &["e3", "e4"])])).unwrap();
        assert!((s[0] - 0.75).abs() < 1e-12);

        let m = column_matrix(&["p1", "p2", "e1"], &[2.0, 5.0, 1.0]);
        let s = counterfactual_score(&m, &pairs(&[("p1", &["e1"]), ("p2", &[])])).unwrap();
        assert_eq!(s, vec![1.0]);

        let m = column_matrix(&["p1", "e1"], &[2.0, 2.0]);
        assert_eq!(counterfactual_score(&m, &pairs(&[("p1", &["e1"])])).unwrap(), vec![0.0]);
        assert!(matches!(
            counterfactual_score(&m, &pairs(&[("p1", &[])])),
            Err(Error::NoCounterfactualPairs)
        ));
    }

    #[test]
    fn causal_mean() {
        let c = causal_score(&[0.8, 0.0, -1.5], &[0.75, 0.0, -1.5]).unwrap();
        assert!((c[0] - 0.775).abs() < 1e-12);
        assert_eq!(&c[1..], &[0.0, -1.5]);
        assert!(causal_score(&[1.0], &[]).is_err());
    }

    #[test]
    fn combined_examples() {
        let mut comps = BTreeMap::new();
        comps.insert("CEG".to_string(), vec![1.0, 0.0]);
        let one: BTreeMap<String, f64> = [("CEG".to_string(), 1.0)].into();
        assert_eq!(combined_ranking_score(&comps, &one, false).unwrap(), vec![1.0, 0.0]);
        comps.insert("CSG".to_string(), vec![0.0, 1.0]);
        assert_eq!(combined_ranking_score(&comps, &BTreeMap::new(), false).unwrap(), vec![1.0, 1.0]);
        let bad: BTreeMap<String, f64> = [("XYZ".to_string(), 1.0)].into();
        assert!(matches!(
            combined_ranking_score(&comps, &bad, false),
            Err(Error::UnknownComponent(_))
        ));
        let z = combined_ranking_score(&comps, &one, true).unwrap();
        assert_eq!(z, vec![1.0, -1.0]);
    }

    #[test]
    fn partial_causal_when_only_negatives() {
        let m = column_matrix(&["p", "n"], &[1.0, 0.25]);
        let sets = ScoringSets {
            positives: vec!["p".into()],
            negatives: vec!["n".into()],
            pairs: BTreeMap::new(),
        };
        let t = score_voxels(&m, &sets, 10).unwrap();
        assert!(t.partial_causal);
        assert_eq!(t.s_causal, vec![0.75]);
        let none = ScoringSets {
            positives: vec!["p".into()],
            ..Default::default()
        };
        assert!(matches!(score_voxels(&m, &none, 10), Err(Error::NoCausalEvidence)));
    }

    #[test]
    fn csv_round_trip() {
        let m = ResponseMatrix::new(
            vec!["p".into(), "n".into(), "e".into()],
            vec!["v0".into(), "v1".into()],
            vec![1.0, 0.3, 0.1, 0.7, 0.2, 0.2],
            Provenance::Predicted,
        )
        .unwrap();
        let sets = ScoringSets {
            positives: vec!["p".into()],
            negatives: vec!["n".into()],
            pairs: pairs(&[("p", &["e"])]),
        };
        let mut t = score_voxels(&m, &sets, 10).unwrap();
        t.set_component("CEG", t.s_edit.clone().unwrap()).unwrap();
        t.set_combined(&BTreeMap::new(), false).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = VoxelScoreTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.s_causal, t.s_causal);
        assert_eq!(back.components, t.components);
        assert_eq!(back.combined, t.combined);
        assert_eq!(t.to_matrix().unwrap().n_images(), 6);
    }

    #[test]
    fn single_voxel_region_matches_voxel() {
        let m = ResponseMatrix::new(
            vec!["p".into(), "n".into(), "e".into()],
            vec!["v0".into(), "v1".into()],
            vec![1.0, 0.3, 0.1, 0.7, 0.2, 0.2],
            Provenance::Predicted,
        )
        .unwrap();
        let sets = ScoringSets {
            positives: vec!["p".into()],
            negatives: vec!["n".into()],
            pairs: pairs(&[("p", &["e"])]),
        };
        let t = score_voxels(&m, &sets, 10).unwrap();
        let region = Region {
            concept: "c".into(),
            voxel_ids: vec!["v1".into()],
            scores: vec![0.0],
            mode: RegionMode::TopK(1),
            selection_score_name: "s_causal".into(),
            short: false,
        };
        let r = region_scores(&m, &sets, &region, 10).unwrap();
        assert_eq!(r.s_pos, t.s_pos[1]);
        assert_eq!(r.s_causal, Some(t.s_causal[1]));
        let empty = Region { voxel_ids: vec![], ..region };
        assert!(matches!(region_scores(&m, &sets, &empty, 10), Err(Error::EmptyRegion)));
    }
}
