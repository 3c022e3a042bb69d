//! Binary container for response matrices (`BCRM`) and embedding indices (`BCEI`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        [u8; 4]   "BCRM" or "BCEI"
//! version      u32       currently 1
//! provenance   u8        0 = measured, 1 = predicted (always 0 for BCEI)
//! n_rows       u64       images (BCRM) or index entries (BCEI)
//! n_cols       u64       voxels (BCRM) or embedding dim (BCEI)
//! row ids      n_rows x (u32 byte length + UTF-8 bytes)
//! column ids   n_cols x (u32 byte length + UTF-8 bytes)   (BCRM only)
//! values       n_rows * n_cols x f32, row-major
//! ```

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{EmbeddingIndex, Provenance, ResponseMatrix};
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"BCRM";
pub const INDEX_MAGIC: &[u8; 4] = b"BCEI";
pub const FORMAT_VERSION: u32 = 1;

/// Largest element count accepted from a header (2^40 values).
const MAX_ELEMENTS: u64 = 1 << 40;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown provenance tag {0}")]
    BadProvenance(u8),
    #[error("truncated: {0}")]
    Truncated(&'static str),
    #[error("dimension overflow: {rows} x {cols}")]
    DimensionOverflow { rows: u64, cols: u64 },
    #[error("invalid UTF-8 in id table")]
    InvalidUtf8,
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("embedding row {row} has norm {norm}, expected 1")]
    NotUnitNorm { row: usize, norm: f64 },
}

impl FormatError {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad_magic",
            FormatError::UnsupportedVersion(_) => "unsupported_version",
            FormatError::BadProvenance(_) => "bad_provenance",
            FormatError::Truncated(_) => "truncated",
            FormatError::DimensionOverflow { .. } => "dimension_overflow",
            FormatError::InvalidUtf8 => "invalid_utf8",
            FormatError::TrailingBytes(_) => "trailing_bytes",
            FormatError::NonFinite { .. } => "non_finite",
            FormatError::NotUnitNorm { .. } => "not_unit_norm",
        }
    }
}

fn provenance_tag(p: Provenance) -> u8 {
    match p {
        Provenance::Measured => 0,
        Provenance::Predicted => 1,
    }
}

fn encode(
    magic: &[u8; 4],
    provenance: u8,
    row_ids: &[String],
    col_ids: Option<&[String]>,
    n_cols: usize,
    values: &[f32],
) -> Vec<u8> {
    let mut buf = Vec::with_capacity(29 + values.len() * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(provenance);
    buf.extend_from_slice(&(row_ids.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(n_cols as u64).to_le_bytes());
    for id in row_ids.iter().chain(col_ids.unwrap_or_default()) {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn matrix_to_bytes(m: &ResponseMatrix) -> Vec<u8> {
    encode(
        MATRIX_MAGIC,
        provenance_tag(m.provenance()),
        m.image_ids(),
        Some(m.voxel_ids()),
        m.n_voxels(),
        m.values(),
    )
}

pub fn index_to_bytes(index: &EmbeddingIndex) -> Vec<u8> {
    encode(INDEX_MAGIC, 0, index.ids(), None, index.dim(), index.vectors())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated(what));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn ids(&mut self, n: usize, what: &'static str) -> Result<Vec<String>, FormatError> {
        // every id needs at least its 4-byte length prefix
        if n.checked_mul(4).is_none_or(|need| need > self.remaining()) {
            return Err(FormatError::Truncated(what));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.u32(what)? as usize;
            let bytes = self.take(len, what)?;
            out.push(
                String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::InvalidUtf8)?,
            );
        }
        Ok(out)
    }
}

struct Decoded {
    provenance: u8,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    n_cols: usize,
    values: Vec<f32>,
}

fn decode(buf: &[u8], magic: &[u8; 4], with_col_ids: bool) -> Result<Decoded, FormatError> {
    let mut cur = Cursor { buf, pos: 0 };
    let found: [u8; 4] = match cur.take(4, "magic") {
        Ok(b) => b.try_into().unwrap(),
        Err(_) => {
            let mut found = [0u8; 4];
            found[..buf.len()].copy_from_slice(buf);
            return Err(FormatError::BadMagic {
                expected: *magic,
                found,
            });
        }
    };
    if &found != magic {
        return Err(FormatError::BadMagic {
            expected: *magic,
            found,
        });
    }
    let version = cur.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let provenance = cur.take(1, "header")?[0];
    if provenance > 1 {
        return Err(FormatError::BadProvenance(provenance));
    }
    let rows = cur.u64("header")?;
    let cols = cur.u64("header")?;
    let overflow = FormatError::DimensionOverflow { rows, cols };
    let elements = rows.checked_mul(cols).ok_or(overflow.clone())?;
    if elements > MAX_ELEMENTS || usize::try_from(rows).is_err() || usize::try_from(cols).is_err() {
        return Err(overflow);
    }
    let (n_rows, n_cols) = (rows as usize, cols as usize);
    let row_ids = cur.ids(n_rows, "row id table")?;
    let col_ids = if with_col_ids {
        cur.ids(n_cols, "column id table")?
    } else {
        Vec::new()
    };
    let n_values = elements as usize;
    let payload = cur.take(n_values * 4, "value payload")?;
    if cur.remaining() != 0 {
        return Err(FormatError::TrailingBytes(cur.remaining()));
    }
    let mut values = Vec::with_capacity(n_values);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                row: i / n_cols.max(1),
                col: i % n_cols.max(1),
            });
        }
        values.push(v);
    }
    Ok(Decoded {
        provenance,
        row_ids,
        col_ids,
        n_cols,
        values,
    })
}

pub fn matrix_from_bytes(buf: &[u8]) -> Result<ResponseMatrix> {
    let d = decode(buf, MATRIX_MAGIC, true)?;
    let provenance = if d.provenance == 0 {
        Provenance::Measured
    } else {
        Provenance::Predicted
    };
    ResponseMatrix::new(d.row_ids, d.col_ids, d.values, provenance)
}

pub fn index_from_bytes(buf: &[u8]) -> Result<EmbeddingIndex> {
    let d = decode(buf, INDEX_MAGIC, false)?;
    EmbeddingIndex::new(d.row_ids, d.n_cols, d.values)
}

pub fn write_matrix(m: &ResponseMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &matrix_to_bytes(m))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<ResponseMatrix> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    matrix_from_bytes(&buf).map_err(|e| e.at_path(path))
}

pub fn write_index(index: &EmbeddingIndex, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &index_to_bytes(index))
}

pub fn read_index(path: impl AsRef<Path>) -> Result<EmbeddingIndex> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    index_from_bytes(&buf).map_err(|e| e.at_path(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::from(e).at_path(path))?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ResponseMatrix {
        ResponseMatrix::new(
            vec!["img-a".into(), "img-b".into()],
            vec!["v0".into(), "v1".into(), "v2".into()],
            vec![0.5, -1.25, 3.0, 1e-30, f32::MAX, -0.0],
            Provenance::Predicted,
        )
        .unwrap()
    }

    fn format_err(e: Error) -> FormatError {
        match e {
            Error::Format(f) => f,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn round_trip_two_by_three() {
        let m = sample();
        let back = matrix_from_bytes(&matrix_to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        let bits: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = m.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = matrix_to_bytes(&sample());
        bytes[0] = b'X';
        let e = format_err(matrix_from_bytes(&bytes).unwrap_err());
        assert_eq!(e.code(), "bad_magic");
        // index reader refuses a matrix container
        let e = format_err(index_from_bytes(&matrix_to_bytes(&sample())).unwrap_err());
        assert_eq!(e.code(), "bad_magic");
        assert_eq!(format_err(matrix_from_bytes(b"BC").unwrap_err()).code(), "bad_magic");
    }

    #[test]
    fn header_claiming_more_rows_than_payload() {
        let one_row = ResponseMatrix::new(
            vec!["a".into()],
            vec!["v0".into(), "v1".into()],
            vec![1.0, 2.0],
            Provenance::Measured,
        )
        .unwrap();
        let mut bytes = matrix_to_bytes(&one_row);
        bytes[9..17].copy_from_slice(&10u64.to_le_bytes());
        let e = format_err(matrix_from_bytes(&bytes).unwrap_err());
        assert_eq!(e.code(), "truncated");

        let bytes = matrix_to_bytes(&one_row);
        let e = format_err(matrix_from_bytes(&bytes[..bytes.len() - 1]).unwrap_err());
        assert_eq!(e.code(), "truncated");
    }

    #[test]
    fn overflow_and_version() {
        let mut bytes = matrix_to_bytes(&sample());
        bytes[9..17].copy_from_slice(&u64::MAX.to_le_bytes());
        bytes[17..25].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(format_err(matrix_from_bytes(&bytes).unwrap_err()).code(), "dimension_overflow");

        let mut bytes = matrix_to_bytes(&sample());
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert_eq!(format_err(matrix_from_bytes(&bytes).unwrap_err()).code(), "unsupported_version");

        let mut bytes = matrix_to_bytes(&sample());
        bytes.push(0);
        assert_eq!(format_err(matrix_from_bytes(&bytes).unwrap_err()).code(), "trailing_bytes");
    }

    #[test]
    fn index_round_trip_and_unit_check() {
        let idx = EmbeddingIndex::from_raw(vec!["dog".into(), "cat".into()], 3, vec![1., 2., 2., 0., 0., 5.]).unwrap();
        assert_eq!(index_from_bytes(&index_to_bytes(&idx)).unwrap(), idx);

        let mut bytes = index_to_bytes(&idx);
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&3.0f32.to_le_bytes());
        assert_eq!(format_err(index_from_bytes(&bytes).unwrap_err()).code(), "not_unit_norm");
    }
}
