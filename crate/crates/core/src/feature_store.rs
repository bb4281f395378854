//! Binary feature file plus JSON manifest.
//!
//! `<prefix>.feat` holds a fixed 25-byte little-endian header followed by the
//! row-major `f32` payload; `<prefix>.manifest.json` binds each row to a
//! sample id and records how the features were produced.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"COINCIDE";
pub const FEATURE_FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u8 = 0;
pub const HEADER_LEN: usize = 25;
pub const MANIFEST_VERSION: u32 = 1;
/// Allowed deviation of a row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Dense row-major `n_samples x feature_dim` matrix of unit-norm features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_samples: usize,
    feature_dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    /// Checks shape and finiteness. Row norms are checked separately by
    /// [`FeatureMatrix::check_norms`].
    pub fn new(n_samples: usize, feature_dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_samples == 0 || feature_dim == 0 {
            return Err(Error::Invariant(format!(
                "feature matrix must be non-empty, got {n_samples}x{feature_dim}"
            )));
        }
        if data.len() != n_samples * feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for {n_samples}x{feature_dim}, got {}",
                n_samples * feature_dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature row {} column {}",
                pos / feature_dim,
                pos % feature_dim
            )));
        }
        Ok(Self {
            n_samples,
            feature_dim,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "row {bad} has length {}, expected {dim}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.feature_dim)
    }

    /// Returns a new matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            if i >= self.n_samples {
                return Err(Error::InvalidArgument(format!(
                    "row index {i} out of range for {} rows",
                    self.n_samples
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.feature_dim, data)
    }

    pub fn check_norms(&self, tolerance: f64) -> Result<()> {
        for (row, values) in self.rows().enumerate() {
            let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > tolerance {
                return Err(Error::NormViolation { row, norm, tolerance });
            }
        }
        Ok(())
    }
}

/// Per-sample metadata paired with a [`FeatureMatrix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub sample_ids: Vec<String>,
    /// Either empty (no labels) or one label per sample.
    #[serde(default)]
    pub task_labels: Vec<String>,
    pub layer_indices: Vec<i64>,
    #[serde(default)]
    pub reference_model: String,
    pub hidden_dim: usize,
    pub num_layers_tapped: usize,
}

impl DatasetManifest {
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    /// Label of sample `i`, or the empty string when the manifest is unlabeled.
    pub fn task_label(&self, i: usize) -> &str {
        self.task_labels.get(i).map(String::as_str).unwrap_or("")
    }

    /// Checks the manifest on its own, and against `feature_dim` of the
    /// paired matrix when given.
    pub fn validate(&self, n_samples: usize, feature_dim: usize) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.sample_ids.len() != n_samples {
            return Err(Error::Invariant(format!(
                "manifest lists {} sample ids but feature matrix has {n_samples} rows",
                self.sample_ids.len()
            )));
        }
        if !self.task_labels.is_empty() && self.task_labels.len() != n_samples {
            return Err(Error::Invariant(format!(
                "manifest lists {} task labels for {n_samples} samples",
                self.task_labels.len()
            )));
        }
        if self.num_layers_tapped != self.layer_indices.len() {
            return Err(Error::Invariant(format!(
                "num_layers_tapped = {} but {} layer indices given",
                self.num_layers_tapped,
                self.layer_indices.len()
            )));
        }
        if self.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant("layer_indices must be strictly increasing".into()));
        }
        if 2 * self.num_layers_tapped * self.hidden_dim != feature_dim {
            return Err(Error::Invariant(format!(
                "2 * {} layers * hidden_dim {} != feature_dim {feature_dim}",
                self.num_layers_tapped, self.hidden_dim
            )));
        }
        let mut seen = HashSet::with_capacity(self.sample_ids.len());
        for id in &self.sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invariant(format!("duplicate sample id {id:?}")));
            }
        }
        Ok(())
    }
}

/// Fixed header at the start of every `.feat` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub format_version: u32,
    pub n_samples: u64,
    pub feature_dim: u32,
    pub dtype_code: u8,
}

impl FeatureFileHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..8].copy_from_slice(FEATURE_MAGIC);
        out[8..12].copy_from_slice(&self.format_version.to_le_bytes());
        out[12..20].copy_from_slice(&self.n_samples.to_le_bytes());
        out[20..24].copy_from_slice(&self.feature_dim.to_le_bytes());
        out[24] = self.dtype_code;
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Schema(format!(
                "feature file shorter than its {HEADER_LEN}-byte header"
            )));
        }
        if &bytes[0..8] != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(FEATURE_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[0..8]).into_owned(),
            });
        }
        let format_version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if format_version != FEATURE_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(format_version));
        }
        let dtype_code = bytes[24];
        if dtype_code != DTYPE_F32_LE {
            return Err(Error::UnsupportedDtype(dtype_code));
        }
        Ok(Self {
            format_version,
            n_samples: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            feature_dim: u32::from_le_bytes(bytes[20..24].try_into().unwrap()),
            dtype_code,
        })
    }
}

pub fn feature_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".feat")
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".manifest.json")
}

/// Appends `suffix` to the full path (not replacing any existing extension).
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = with_suffix(path, ".tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn encode_features(matrix: &FeatureMatrix) -> Result<Vec<u8>> {
    let feature_dim =
        u32::try_from(matrix.feature_dim).map_err(|_| Error::InvalidArgument("feature_dim exceeds u32".into()))?;
    let header = FeatureFileHeader {
        format_version: FEATURE_FORMAT_VERSION,
        n_samples: matrix.n_samples as u64,
        feature_dim,
        dtype_code: DTYPE_F32_LE,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.data.len() * 4);
    out.extend_from_slice(&header.encode());
    for v in &matrix.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let header = FeatureFileHeader::decode(bytes)?;
    let n = usize::try_from(header.n_samples).map_err(|_| Error::Schema("n_samples does not fit in memory".into()))?;
    let f = header.feature_dim as usize;
    let expected = n
        .checked_mul(f)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Schema("payload size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Schema(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(n, f, data)
}

/// Validates the pair and writes `<prefix>.feat` and `<prefix>.manifest.json`.
/// Nothing is written if validation fails.
pub fn write_features(matrix: &FeatureMatrix, manifest: &DatasetManifest, prefix: &Path) -> Result<()> {
    manifest.validate(matrix.n_samples, matrix.feature_dim)?;
    matrix.check_norms(NORM_TOLERANCE)?;
    let feat = encode_features(matrix)?;
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&feature_path(prefix), &feat)?;
    write_atomic(&manifest_path(prefix), &json)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    pub skip_norm_check: bool,
}

pub fn read_features(prefix: &Path) -> Result<(FeatureMatrix, DatasetManifest)> {
    read_features_with(prefix, ReadOptions::default())
}

pub fn read_features_with(prefix: &Path, opts: ReadOptions) -> Result<(FeatureMatrix, DatasetManifest)> {
    let fpath = feature_path(prefix);
    let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    let matrix = decode_features(&bytes)?;
    let mpath = manifest_path(prefix);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)?;
    manifest.validate(matrix.n_samples, matrix.feature_dim)?;
    if !opts.skip_norm_check {
        matrix.check_norms(NORM_TOLERANCE)?;
    }
    Ok((matrix, manifest))
}
