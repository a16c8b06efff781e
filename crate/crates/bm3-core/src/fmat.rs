//! Binary feature-matrix files and modality tags.
//!
//! Pre-extracted item features ship as a small self-describing binary
//! format: the magic bytes `FMAT`, a little-endian `u32` version (1),
//! row and column counts as little-endian `u64`, then `rows * cols`
//! little-endian `f32` values in row-major order. The same format
//! stores model checkpoints, one file per parameter tensor.

use crate::error::{Error, Result};
use crate::mat::Mat;
use std::io::Write;
use std::path::Path;

pub const FMAT_MAGIC: [u8; 4] = *b"FMAT";
pub const FMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Which kind of content an item feature matrix carries.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Visual,
    Textual,
    Other(String),
}

impl Modality {
    /// Long tag used in manifests and logs.
    pub fn tag(&self) -> &str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
            Modality::Other(s) => s,
        }
    }

    /// Short tag used in parameter-tensor names (`proj_v_W`, ...).
    pub fn short(&self) -> &str {
        match self {
            Modality::Visual => "v",
            Modality::Textual => "t",
            Modality::Other(s) => s,
        }
    }

    pub fn from_tag(tag: &str) -> Modality {
        match tag {
            "visual" | "v" => Modality::Visual,
            "textual" | "t" => Modality::Textual,
            other => Modality::Other(other.to_string()),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// An item-aligned feature table: row `i` holds the features of item
/// index `i`.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub values: Mat,
}

/// Writes `mat` to `path` in the binary format, narrowing values to f32.
pub fn write_fmat(path: &Path, mat: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + mat.len() * 4);
    buf.extend_from_slice(&FMAT_MAGIC);
    buf.extend_from_slice(&FMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(mat.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(mat.cols() as u64).to_le_bytes());
    for &v in mat.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a binary matrix file, widening values to f64.
pub fn read_fmat(path: &Path) -> Result<Mat> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || bytes[..4] != FMAT_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FMAT_VERSION {
        return Err(Error::BadVersion { path: path.into(), version });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::BadMagic { path: path.into() })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected * 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: payload.len() / 4,
        });
    }
    let mut data = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(4) {
        data.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
    }
    Mat::from_vec(rows, cols, data)
}

/// Loads an item feature table, checking that every value is finite
/// and, when the item count is known, that the row count matches it.
pub fn load_feature_matrix(
    path: &Path,
    modality: Modality,
    expected_rows: Option<usize>,
) -> Result<FeatureMatrix> {
    let values = read_fmat(path)?;
    if let Some(n) = expected_rows {
        if values.rows() != n {
            return Err(Error::FeatureRowMismatch {
                path: path.into(),
                found: values.rows(),
                expected: n,
            });
        }
    }
    for r in 0..values.rows() {
        for (c, v) in values.row(r).iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { path: path.into(), row: r, col: c });
            }
        }
    }
    Ok(FeatureMatrix { modality, values })
}
