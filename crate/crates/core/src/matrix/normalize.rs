//! Per-voxel z-scoring and encoder reliability filtering.

use serde::{Deserialize, Serialize};

use super::ResponseMatrix;
use crate::error::{Error, Result};

/// Columns with a population standard deviation below this are dead.
pub const DEAD_VOXEL_STD: f64 = 1e-12;

pub const DEFAULT_RELIABILITY_THRESHOLD: f64 = 0.2;

/// Per-voxel mean and population standard deviation of a reference matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub voxel_ids: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub dead_voxel_ids: Vec<String>,
}

impl NormalizationStats {
    pub fn compute(m: &ResponseMatrix) -> Result<Self> {
        let n = m.n_images();
        if n < 2 {
            return Err(Error::InsufficientImages(n));
        }
        let v = m.n_voxels();
        let mut mean = vec![0.0f64; v];
        for r in 0..n {
            for (acc, &x) in mean.iter_mut().zip(m.row(r)) {
                *acc += f64::from(x);
            }
        }
        mean.iter_mut().for_each(|x| *x /= n as f64);
        let mut var = vec![0.0f64; v];
        for r in 0..n {
            for ((acc, &x), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
                let d = f64::from(x) - mu;
                *acc += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        let dead_voxel_ids = std
            .iter()
            .zip(m.voxel_ids())
            .filter(|(s, _)| **s < DEAD_VOXEL_STD)
            .map(|(_, id)| id.clone())
            .collect();
        Ok(NormalizationStats {
            voxel_ids: m.voxel_ids().to_vec(),
            mean,
            std,
            dead_voxel_ids,
        })
    }

    pub fn is_dead(&self, voxel: usize) -> bool {
        self.std[voxel] < DEAD_VOXEL_STD
    }

    /// Standardizes `m` with these statistics. Voxels are matched by id; dead
    /// voxels are dropped, or kept as all-zero columns with `zero_fill_dead`.
    pub fn apply(&self, m: &ResponseMatrix, zero_fill_dead: bool) -> Result<ResponseMatrix> {
        let cols = m.voxel_indices(&self.voxel_ids)?;
        let kept: Vec<usize> = (0..cols.len())
            .filter(|&k| zero_fill_dead || !self.is_dead(k))
            .collect();
        let mut values = Vec::with_capacity(m.n_images() * kept.len());
        for r in 0..m.n_images() {
            let row = m.row(r);
            for &k in &kept {
                if self.is_dead(k) {
                    values.push(0.0);
                } else {
                    values.push(((f64::from(row[cols[k]]) - self.mean[k]) / self.std[k]) as f32);
                }
            }
        }
        ResponseMatrix::new(
            m.image_ids().to_vec(),
            kept.iter().map(|&k| self.voxel_ids[k].clone()).collect(),
            values,
            m.provenance(),
        )
    }
}

/// Normalizes each voxel to mean 0 and population standard deviation 1 across
/// all images. Constant voxels are removed and listed in the returned stats.
pub fn zscore_normalize(m: &ResponseMatrix) -> Result<(ResponseMatrix, NormalizationStats)> {
    let stats = NormalizationStats::compute(m)?;
    let out = stats.apply(m, false)?;
    Ok((out, stats))
}

/// Sample Pearson correlation, clamped to [-1, 1].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least 2 samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityMask {
    pub voxel_ids: Vec<String>,
    pub keep: Vec<bool>,
    /// `None` where either column was constant.
    pub correlations: Vec<Option<f64>>,
    pub threshold: f64,
}

impl ReliabilityMask {
    /// A mask that keeps every voxel, used when no held-out set is available.
    pub fn keep_all(voxel_ids: &[String]) -> Self {
        ReliabilityMask {
            voxel_ids: voxel_ids.to_vec(),
            keep: vec![true; voxel_ids.len()],
            correlations: vec![None; voxel_ids.len()],
            threshold: f64::NEG_INFINITY,
        }
    }

    pub fn retained(&self) -> impl Iterator<Item = &str> {
        self.voxel_ids
            .iter()
            .zip(&self.keep)
            .filter(|(_, k)| **k)
            .map(|(id, _)| id.as_str())
    }

    pub fn n_retained(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    /// Restricts `m` to retained voxels, matching by id.
    pub fn apply(&self, m: &ResponseMatrix) -> Result<ResponseMatrix> {
        let ids: Vec<&str> = self.retained().collect();
        let cols = m.voxel_indices(&ids)?;
        let mut keep = vec![false; m.n_voxels()];
        for c in cols {
            keep[c] = true;
        }
        m.select_voxels(&keep)
    }
}

/// Keeps voxel `v` iff the correlation between predicted and measured
/// responses on a held-out set is at least `threshold`.
pub fn filter_voxels_by_reliability(
    pred: &ResponseMatrix,
    meas: &ResponseMatrix,
    threshold: f64,
) -> Result<ReliabilityMask> {
    if pred.image_ids() != meas.image_ids() {
        return Err(Error::IdMismatch("predicted and measured image ids differ".into()));
    }
    if pred.voxel_ids() != meas.voxel_ids() {
        return Err(Error::IdMismatch("predicted and measured voxel ids differ".into()));
    }
    let mut keep = Vec::with_capacity(pred.n_voxels());
    let mut correlations = Vec::with_capacity(pred.n_voxels());
    for v in 0..pred.n_voxels() {
        let x: Vec<f64> = pred.column(v).into_iter().map(f64::from).collect();
        let y: Vec<f64> = meas.column(v).into_iter().map(f64::from).collect();
        match pearson(&x, &y) {
            Ok(r) => {
                keep.push(r >= threshold);
                correlations.push(Some(r));
            }
            Err(Error::UndefinedCorrelation) => {
                log::warn!("voxel {} has a constant column; excluded", pred.voxel_ids()[v]);
                keep.push(false);
                correlations.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ReliabilityMask {
        voxel_ids: pred.voxel_ids().to_vec(),
        keep,
        correlations,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Provenance;

    fn matrix(cols: &[&[f32]]) -> ResponseMatrix {
        let n = cols[0].len();
        let rows: Vec<Vec<f32>> = (0..n).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
        ResponseMatrix::from_rows(
            (0..n).map(|i| format!("img{i}")).collect(),
            (0..cols.len()).map(|i| format!("v{i}")).collect(),
            &rows,
            Provenance::Measured,
        )
        .unwrap()
    }

    #[test]
    fn two_image_column() {
        let (out, stats) = zscore_normalize(&matrix(&[&[1.0, 3.0]])).unwrap();
        assert_eq!(out.values(), &[-1.0, 1.0]);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn constant_column_is_dead() {
        let (out, stats) = zscore_normalize(&matrix(&[&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]])).unwrap();
        assert_eq!(stats.dead_voxel_ids, vec!["v0".to_string()]);
        assert_eq!(out.voxel_ids(), &["v1".to_string()]);
    }

    #[test]
    fn needs_two_images() {
        assert!(matches!(
            zscore_normalize(&matrix(&[&[1.0]])),
            Err(Error::InsufficientImages(1))
        ));
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[1.0, 2.0, 4.0]).unwrap() - 0.98198).abs() < 1e-4);
        assert!(matches!(pearson(&a, &[2.0, 2.0, 2.0]), Err(Error::UndefinedCorrelation)));
    }

    #[test]
    fn reliability_identical_and_negated() {
        let meas = matrix(&[&[1.0, 2.0, 4.0, 3.0], &[1.0, 2.0, 4.0, 3.0], &[7.0, 7.0, 7.0, 7.0]]);
        let pred = matrix(&[&[1.0, 2.0, 4.0, 3.0], &[-1.0, -2.0, -4.0, -3.0], &[1.0, 2.0, 3.0, 4.0]]);
        let mask = filter_voxels_by_reliability(&pred, &meas, DEFAULT_RELIABILITY_THRESHOLD).unwrap();
        assert_eq!(mask.keep, vec![true, false, false]);
        assert_eq!(mask.correlations[2], None);
    }

    #[test]
    fn reliability_rejects_mismatched_ids() {
        let a = matrix(&[&[1.0, 2.0]]);
        let b = a.select_images(&["img1", "img0"]).unwrap();
        assert!(matches!(filter_voxels_by_reliability(&a, &b, 0.2), Err(Error::IdMismatch(_))));
    }
}
