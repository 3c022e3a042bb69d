//! Response matrices, embedding indices and their storage.

mod format;
mod normalize;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{
    read_index, read_matrix, write_index, write_matrix, FormatError, INDEX_MAGIC, MATRIX_MAGIC,
    FORMAT_VERSION,
};
pub use normalize::{
    filter_voxels_by_reliability, pearson, zscore_normalize, NormalizationStats, ReliabilityMask,
    DEAD_VOXEL_STD, DEFAULT_RELIABILITY_THRESHOLD,
};

/// Allowed deviation from unit norm for embedding rows.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Measured,
    Predicted,
}

/// Images x voxels activation matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    image_ids: Vec<String>,
    voxel_ids: Vec<String>,
    values: Vec<f32>,
    provenance: Provenance,
}

impl ResponseMatrix {
    pub fn new(
        image_ids: Vec<String>,
        voxel_ids: Vec<String>,
        values: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self> {
        let expected = image_ids
            .len()
            .checked_mul(voxel_ids.len())
            .ok_or_else(|| Error::InvalidMatrix("dimension overflow".into()))?;
        if values.len() != expected {
            return Err(Error::InvalidMatrix(format!(
                "{} values for {} x {} matrix",
                values.len(),
                image_ids.len(),
                voxel_ids.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite value at row {}, column {}",
                pos / voxel_ids.len(),
                pos % voxel_ids.len()
            )));
        }
        ensure_unique("image", &image_ids)?;
        ensure_unique("voxel", &voxel_ids)?;
        Ok(ResponseMatrix {
            image_ids,
            voxel_ids,
            values,
            provenance,
        })
    }

    /// Builds a matrix from per-image rows.
    pub fn from_rows(
        image_ids: Vec<String>,
        voxel_ids: Vec<String>,
        rows: &[Vec<f32>],
        provenance: Provenance,
    ) -> Result<Self> {
        if rows.len() != image_ids.len() {
            return Err(Error::LengthMismatch {
                left: rows.len(),
                right: image_ids.len(),
            });
        }
        let mut values = Vec::with_capacity(rows.len() * voxel_ids.len());
        for row in rows {
            if row.len() != voxel_ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: voxel_ids.len(),
                    actual: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        ResponseMatrix::new(image_ids, voxel_ids, values, provenance)
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn voxel_ids(&self) -> &[String] {
        &self.voxel_ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn get(&self, image: usize, voxel: usize) -> f32 {
        self.values[image * self.voxel_ids.len() + voxel]
    }

    pub fn row(&self, image: usize) -> &[f32] {
        let n = self.voxel_ids.len();
        &self.values[image * n..(image + 1) * n]
    }

    pub fn column(&self, voxel: usize) -> Vec<f32> {
        (0..self.n_images()).map(|i| self.get(i, voxel)).collect()
    }

    /// Row indices for the given image ids, in the order given.
    pub fn image_indices<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        let lookup: HashMap<&str, usize> = self
            .image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_ref())
                    .copied()
                    .ok_or_else(|| Error::UnknownImage(id.as_ref().to_string()))
            })
            .collect()
    }

    pub fn voxel_indices<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        let lookup: HashMap<&str, usize> = self
            .voxel_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_ref())
                    .copied()
                    .ok_or_else(|| Error::UnknownVoxel(id.as_ref().to_string()))
            })
            .collect()
    }

    /// Keeps the voxels whose mask entry is true, preserving order.
    pub fn select_voxels(&self, keep: &[bool]) -> Result<ResponseMatrix> {
        if keep.len() != self.n_voxels() {
            return Err(Error::LengthMismatch {
                left: keep.len(),
                right: self.n_voxels(),
            });
        }
        let cols: Vec<usize> = (0..keep.len()).filter(|&c| keep[c]).collect();
        let mut values = Vec::with_capacity(self.n_images() * cols.len());
        for r in 0..self.n_images() {
            let row = self.row(r);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        Ok(ResponseMatrix {
            image_ids: self.image_ids.clone(),
            voxel_ids: cols.iter().map(|&c| self.voxel_ids[c].clone()).collect(),
            values,
            provenance: self.provenance,
        })
    }

    /// Keeps the listed images, in the order given.
    pub fn select_images<S: AsRef<str>>(&self, ids: &[S]) -> Result<ResponseMatrix> {
        let rows = self.image_indices(ids)?;
        let mut values = Vec::with_capacity(rows.len() * self.n_voxels());
        for &r in &rows {
            values.extend_from_slice(self.row(r));
        }
        ResponseMatrix::new(
            rows.iter().map(|&r| self.image_ids[r].clone()).collect(),
            self.voxel_ids.clone(),
            values,
            self.provenance,
        )
    }

    /// Stacks matrices that share voxel ids and provenance.
    pub fn vstack(parts: &[&ResponseMatrix]) -> Result<ResponseMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
        let mut image_ids = Vec::new();
        let mut values = Vec::new();
        for p in parts {
            if p.voxel_ids != first.voxel_ids {
                return Err(Error::IdMismatch("stacked matrices differ in voxel ids".into()));
            }
            image_ids.extend(p.image_ids.iter().cloned());
            values.extend_from_slice(&p.values);
        }
        ResponseMatrix::new(image_ids, first.voxel_ids.clone(), values, first.provenance)
    }
}

fn ensure_unique(what: &str, ids: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidMatrix(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(())
}

/// Unit-normalized embedding rows keyed by image id or concept string.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
}

impl EmbeddingIndex {
    /// Accepts rows that are already unit norm; anything else is rejected.
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if ids.len().checked_mul(dim) != Some(vectors.len()) {
            return Err(Error::InvalidMatrix(format!(
                "{} values for {} x {} index",
                vectors.len(),
                ids.len(),
                dim
            )));
        }
        ensure_unique("index", &ids)?;
        for (r, row) in vectors.chunks(dim.max(1)).enumerate().take(ids.len()) {
            let norm = l2_norm(row);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(FormatError::NotUnitNorm { row: r, norm }.into());
            }
        }
        Ok(EmbeddingIndex { ids, dim, vectors })
    }

    /// Normalizes each row before building the index. Zero rows are rejected.
    pub fn from_raw(ids: Vec<String>, dim: usize, mut vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        for row in vectors.chunks_mut(dim) {
            normalize_in_place(row)?;
        }
        EmbeddingIndex::new(ids, dim, vectors)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.vectors[r * self.dim..(r + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|i| i == id).map(|r| self.row(r))
    }
}

pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Scales a vector to unit length, computing in f64.
pub fn normalize_in_place(row: &mut [f32]) -> Result<()> {
    let norm = l2_norm(row);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument("cannot normalize a zero or non-finite vector".into()));
    }
    for v in row.iter_mut() {
        *v = (f64::from(*v) / norm) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(ResponseMatrix::new(ids("i", 2), ids("v", 2), vec![0.0; 3], Provenance::Measured).is_err());
        assert!(ResponseMatrix::new(ids("i", 1), ids("v", 1), vec![f32::NAN], Provenance::Measured).is_err());
        assert!(ResponseMatrix::new(vec!["a".into(), "a".into()], ids("v", 1), vec![0.0; 2], Provenance::Measured).is_err());
    }

    #[test]
    fn selection_keeps_order() {
        let m = ResponseMatrix::new(ids("i", 2), ids("v", 3), vec![1., 2., 3., 4., 5., 6.], Provenance::Predicted).unwrap();
        let s = m.select_voxels(&[true, false, true]).unwrap();
        assert_eq!(s.values(), &[1., 3., 4., 6.]);
        let r = m.select_images(&["i1", "i0"]).unwrap();
        assert_eq!(r.values(), &[4., 5., 6., 1., 2., 3.]);
        assert!(m.select_images(&["zz"]).is_err());
    }

    #[test]
    fn index_requires_unit_rows() {
        assert!(EmbeddingIndex::new(ids("e", 1), 2, vec![1.0, 1.0]).is_err());
        let idx = EmbeddingIndex::from_raw(ids("e", 2), 2, vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        assert_eq!(idx.row(0), &[0.6, 0.8]);
        assert!(EmbeddingIndex::from_raw(ids("e", 1), 2, vec![0.0, 0.0]).is_err());
    }
}
