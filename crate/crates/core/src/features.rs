//! Per-video feature matrices: window accounting, the `VFM1` container,
//! PCA reduction, and a seeded synthetic generator.
//!
//! Feature file layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "VFM1"
//! 4..8    format version, u32 = 1
//! 8..12   rows T, u32
//! 12..16  dim D, u32
//! 16..20  dtype code, u32 (0 = f32 LE)
//! 20..    T·D values, row-major
//! footer  u64 checksum: sum of payload bytes mod 2^64
//! ```
//!
//! PCA files share the envelope with magic "VPC1", the input dimension in
//! bytes 8..12, the output dimension in 12..16, and a payload of mean (D),
//! components (k·D, row-major) and eigenvalues (k).

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"VFM1";
pub const PCA_MAGIC: &[u8; 4] = b"VPC1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u32 = 0;
const HEADER_LEN: usize = 20;

/// C3D: one 4096-d vector per 16 frames, frames capped at 500.
pub const C3D_WINDOW: usize = 16;
pub const C3D_FRAME_CAP: usize = 500;
pub const C3D_DIM: usize = 4096;
/// I3D: one 1024-d vector per 8 frames, frames capped at 400.
pub const I3D_WINDOW: usize = 8;
pub const I3D_FRAME_CAP: usize = 400;
pub const I3D_DIM: usize = 1024;
/// Width after PCA, and the width of the pre-reduced ActivityNet features.
pub const REDUCED_DIM: usize = 512;
pub const ACTIVITYNET_DIM: usize = 500;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: String,
        found: Vec<u8>,
        expected: &'static str,
    },
    #[error("{path}: unsupported format version {found}")]
    Version { path: String, found: u32 },
    #[error("{path}: unsupported dtype code {found}")]
    Dtype { path: String, found: u32 },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: checksum mismatch (stored {stored:#x}, computed {computed:#x})")]
    Checksum {
        path: String,
        stored: u64,
        computed: u64,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("video of {n_frames} frames is shorter than one {window}-frame window")]
    TooShort { n_frames: usize, window: usize },
    #[error("PCA needs more rows than components: {rows} rows for k = {k}")]
    InsufficientData { rows: usize, k: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Feature rows of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub video_id: String,
    /// `[T, D]`
    pub values: Tensor,
    pub extractor_tag: String,
}

impl FeatureMatrix {
    pub fn new(video_id: impl Into<String>, values: Tensor, extractor_tag: impl Into<String>) -> Result<Self, FeatureError> {
        if values.rank() != 2 {
            return Err(FeatureError::Invalid(format!(
                "feature matrix must be [T, D], got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(FeatureError::Invalid("feature values must be finite".into()));
        }
        Ok(Self {
            video_id: video_id.into(),
            values,
            extractor_tag: extractor_tag.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    /// Row-wise mean.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for row in self.values.rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let t = self.rows() as f64;
        m.iter_mut().for_each(|v| *v /= t);
        m
    }
}

/// Number of feature rows an extractor emits for a video of `n_frames`
/// frames when frames past `cap` are dropped from the end and each row
/// covers `window` frames.
pub fn expected_rows(n_frames: usize, cap: usize, window: usize) -> Result<usize, FeatureError> {
    if window == 0 || cap < window {
        return Err(FeatureError::Invalid(format!(
            "window {window} must be positive and no larger than cap {cap}"
        )));
    }
    if n_frames < window {
        return Err(FeatureError::TooShort { n_frames, window });
    }
    Ok(n_frames.min(cap) / window)
}

fn payload_sum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

fn encode_envelope(magic: &[u8; 4], a: usize, b: usize, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(a as u32).to_le_bytes());
    out.extend_from_slice(&(b as u32).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let sum = payload_sum(&out[HEADER_LEN..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Header fields and decoded payload of an envelope.
struct Envelope {
    a: usize,
    b: usize,
    values: Vec<f64>,
}

fn decode_envelope(
    bytes: &[u8],
    magic: &'static [u8; 4],
    path: &str,
    payload_len: impl Fn(usize, usize) -> usize,
) -> Result<Envelope, FeatureError> {
    let expected = std::str::from_utf8(magic).expect("ascii magic");
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(FeatureError::BadMagic {
            path: path.into(),
            found: bytes[..bytes.len().min(4)].to_vec(),
            expected,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Truncated {
            path: path.into(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(FeatureError::Version { path: path.into(), found: version });
    }
    let (a, b) = (word(8) as usize, word(12) as usize);
    let dtype = word(16);
    if dtype != DTYPE_F32_LE {
        return Err(FeatureError::Dtype { path: path.into(), found: dtype });
    }
    if a == 0 || b == 0 {
        return Err(FeatureError::Malformed {
            path: path.into(),
            reason: format!("zero extent in header ({a} x {b})"),
        });
    }
    let n_values = payload_len(a, b);
    let payload_bytes = n_values * 4;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload_bytes + 8 {
        return Err(FeatureError::Truncated {
            path: path.into(),
            expected: payload_bytes + 8,
            found: body.len(),
        });
    }
    if body.len() > payload_bytes + 8 {
        return Err(FeatureError::Malformed {
            path: path.into(),
            reason: format!("{} unexpected trailing bytes", body.len() - payload_bytes - 8),
        });
    }
    let payload = &body[..payload_bytes];
    let stored = u64::from_le_bytes(body[payload_bytes..].try_into().unwrap());
    let computed = payload_sum(payload);
    if stored != computed {
        return Err(FeatureError::Checksum { path: path.into(), stored, computed });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Envelope { a, b, values })
}

pub fn encode_feature_bytes(m: &FeatureMatrix) -> Vec<u8> {
    encode_envelope(FEATURE_MAGIC, m.rows(), m.dim(), m.values.data().iter().copied())
}

/// Decodes a feature file image. `video_id` is supplied by the caller since
/// the container does not store it; the extractor tag is left as "vfm1".
pub fn decode_feature_bytes(bytes: &[u8], video_id: &str, path: &str) -> Result<FeatureMatrix, FeatureError> {
    let env = decode_envelope(bytes, FEATURE_MAGIC, path, |t, d| t * d)?;
    let values = Tensor::new(&[env.a, env.b], env.values).map_err(|e| FeatureError::Malformed {
        path: path.into(),
        reason: e.to_string(),
    })?;
    FeatureMatrix::new(video_id, values, "vfm1")
}

pub fn write_feature_file(path: &Path, m: &FeatureMatrix) -> Result<(), FeatureError> {
    fs::write(path, encode_feature_bytes(m)).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a feature file; the video id is the file stem.
pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io { path: shown.clone(), source })?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    decode_feature_bytes(&bytes, id, &shown)
}

/// Mean, orthonormal principal axes and their variances.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[k, D]`, one unit-norm axis per row.
    pub components: Tensor,
    /// Non-increasing sample variances along each axis.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `(rows - mean) · componentsᵀ`
    pub fn project(&self, rows: &Tensor) -> Result<Tensor, FeatureError> {
        let d = self.input_dim();
        if rows.rank() != 2 || rows.shape()[1] != d {
            return Err(FeatureError::Dimension { expected: d, got: rows.last_dim() });
        }
        let mut centered = rows.clone();
        for row in centered.data_mut().chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered
            .matmul(&self.components.transpose())
            .map_err(|e| FeatureError::Invalid(e.to_string()))
    }

    /// `codes · components + mean`
    pub fn reconstruct(&self, codes: &Tensor) -> Result<Tensor, FeatureError> {
        let k = self.output_dim();
        if codes.rank() != 2 || codes.shape()[1] != k {
            return Err(FeatureError::Dimension { expected: k, got: codes.last_dim() });
        }
        let mut out = codes
            .matmul(&self.components)
            .map_err(|e| FeatureError::Invalid(e.to_string()))?;
        let d = self.input_dim();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(out)
    }
}

/// Fits PCA on every row of `matrices` jointly: mean over all rows and the
/// top-`k` eigenvectors of the sample covariance (divisor N−1). Each axis is
/// signed so its largest-magnitude entry is positive.
pub fn pca_fit(matrices: &[FeatureMatrix], k: usize) -> Result<PcaModel, FeatureError> {
    let first = matrices
        .first()
        .ok_or(FeatureError::InsufficientData { rows: 0, k })?;
    let d = first.dim();
    if let Some(m) = matrices.iter().find(|m| m.dim() != d) {
        return Err(FeatureError::Dimension { expected: d, got: m.dim() });
    }
    if k == 0 || k > d {
        return Err(FeatureError::Dimension { expected: d, got: k });
    }
    let n: usize = matrices.iter().map(FeatureMatrix::rows).sum();
    if n <= k {
        return Err(FeatureError::InsufficientData { rows: n, k });
    }

    let mut mean = vec![0.0; d];
    for m in matrices {
        for row in m.values.rows() {
            for (a, b) in mean.iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for m in matrices {
        for row in m.values.rows() {
            for ((c, v), mu) in centered.iter_mut().zip(row).zip(&mean) {
                *c = v - mu;
            }
            for i in 0..d {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                for j in i..d {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(k * d);
    let mut eigenvalues = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let col = eig.eigenvectors.column(idx);
        let pivot = (0..d)
            .max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).unwrap().then(b.cmp(&a)))
            .unwrap();
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        components.extend(col.iter().map(|v| sign * v / norm));
        eigenvalues.push(eig.eigenvalues[idx]);
    }
    Ok(PcaModel {
        mean,
        components: Tensor::new(&[k, d], components).expect("k x d"),
        eigenvalues,
    })
}

/// Projects a matrix onto the model's axes; the tag gains a `+pca{k}` suffix.
pub fn pca_apply(model: &PcaModel, m: &FeatureMatrix) -> Result<FeatureMatrix, FeatureError> {
    let values = model.project(&m.values)?;
    FeatureMatrix::new(
        m.video_id.clone(),
        values,
        format!("{}+pca{}", m.extractor_tag, model.output_dim()),
    )
}

pub fn encode_pca_bytes(model: &PcaModel) -> Vec<u8> {
    let values = model
        .mean
        .iter()
        .chain(model.components.data())
        .chain(&model.eigenvalues)
        .copied();
    encode_envelope(PCA_MAGIC, model.input_dim(), model.output_dim(), values)
}

pub fn decode_pca_bytes(bytes: &[u8], path: &str) -> Result<PcaModel, FeatureError> {
    let env = decode_envelope(bytes, PCA_MAGIC, path, |d, k| d + k * d + k)?;
    let (d, k) = (env.a, env.b);
    if k > d {
        return Err(FeatureError::Malformed {
            path: path.into(),
            reason: format!("output dim {k} exceeds input dim {d}"),
        });
    }
    let mean = env.values[..d].to_vec();
    let components = Tensor::new(&[k, d], env.values[d..d + k * d].to_vec()).expect("k x d");
    let eigenvalues = env.values[d + k * d..].to_vec();
    Ok(PcaModel { mean, components, eigenvalues })
}

pub fn write_pca_file(path: &Path, model: &PcaModel) -> Result<(), FeatureError> {
    fs::write(path, encode_pca_bytes(model)).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_pca_file(path: &Path) -> Result<PcaModel, FeatureError> {
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io { path: shown.clone(), source })?;
    decode_pca_bytes(&bytes, &shown)
}

/// Parameters of [`synth_features`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFeatureSpec {
    pub n_videos: usize,
    /// Inclusive row-count range per video.
    pub rows: (usize, usize),
    pub dim: usize,
    pub n_classes: usize,
    /// 1 gives noise-free rows equal to the class mean.
    pub signal_strength: f64,
}

/// Seeded stand-in for extractor output. Video `i` belongs to class
/// `i % n_classes`; each row is that class's unit-norm mean plus standard
/// Gaussian noise scaled by `1 - signal_strength`.
pub fn synth_features(seed: u64, spec: &SynthFeatureSpec) -> Result<(Vec<FeatureMatrix>, Vec<usize>), FeatureError> {
    let (lo, hi) = spec.rows;
    if spec.n_classes == 0 || spec.dim == 0 || lo == 0 || lo > hi {
        return Err(FeatureError::Invalid(format!("invalid synthetic feature spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let noise = 1.0 - spec.signal_strength;
    let mut videos = Vec::with_capacity(spec.n_videos);
    let mut labels = Vec::with_capacity(spec.n_videos);
    for i in 0..spec.n_videos {
        let class = i % spec.n_classes;
        let t = rng.gen_range(lo..=hi);
        let mut data = Vec::with_capacity(t * spec.dim);
        for _ in 0..t {
            for &m in &means[class] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + noise * z);
            }
        }
        let values = Tensor::new(&[t, spec.dim], data).expect("t x dim");
        videos.push(FeatureMatrix::new(format!("vid{i:04}"), values, "synthetic")?);
        labels.push(class);
    }
    Ok((videos, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::new("v", Tensor::from_rows(rows).unwrap(), "test").unwrap()
    }

    #[test]
    fn window_budgets() {
        assert_eq!(expected_rows(500, C3D_FRAME_CAP, C3D_WINDOW).unwrap(), 31);
        assert_eq!(expected_rows(400, I3D_FRAME_CAP, I3D_WINDOW).unwrap(), 50);
        assert_eq!(expected_rows(16, 500, 16).unwrap(), 1);
        assert_eq!(expected_rows(5000, 500, 16).unwrap(), 31);
        assert!(matches!(expected_rows(15, 500, 16), Err(FeatureError::TooShort { .. })));
        assert!(expected_rows(100, 8, 16).is_err());
    }

    #[test]
    fn expected_rows_monotone_and_flat_past_cap() {
        let mut prev = 0;
        for n in 16..1200 {
            let r = expected_rows(n, 500, 16).unwrap();
            assert!(r >= prev);
            if n >= 500 {
                assert_eq!(r, 31);
            }
            prev = r;
        }
    }

    #[test]
    fn file_errors_are_distinct() {
        let m = matrix(&[vec![1.0, 2.0], vec![3.0, 4.5]]);
        let bytes = encode_feature_bytes(&m);
        assert_eq!(bytes.len(), 20 + 16 + 8);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_feature_bytes(&bad, "v", "p"), Err(FeatureError::BadMagic { .. })));

        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(decode_feature_bytes(&ver, "v", "p"), Err(FeatureError::Version { found: 2, .. })));

        let short = &bytes[..bytes.len() - 12];
        assert!(matches!(decode_feature_bytes(short, "v", "p"), Err(FeatureError::Truncated { .. })));

        let mut flipped = bytes.clone();
        flipped[21] ^= 1;
        assert!(matches!(decode_feature_bytes(&flipped, "v", "p"), Err(FeatureError::Checksum { .. })));

        let back = decode_feature_bytes(&bytes, "v", "p").unwrap();
        assert_eq!(back.values, m.values);
    }

    #[test]
    fn header_is_bit_exact() {
        let m = matrix(&[vec![1.0, 0.0, -2.0]]);
        let bytes = encode_feature_bytes(&m);
        assert_eq!(&bytes[0..4], b"VFM1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[0, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1f32.to_le_bytes());
        let sum: u64 = bytes[20..32].iter().map(|&b| b as u64).sum();
        assert_eq!(&bytes[32..40], &sum.to_le_bytes());
    }

    #[test]
    fn two_point_pca_against_closed_form() {
        // points (±1, 0) shifted by (3, -2): covariance diag(2, 0) with N-1 = 1
        let m = matrix(&[vec![4.0, -2.0], vec![2.0, -2.0]]);
        let pca = pca_fit(&[m.clone()], 1).unwrap();
        assert_eq!(pca.mean, vec![3.0, -2.0]);
        // brute force: eigenvalues of [[a, b], [b, c]] are (a+c)/2 ± sqrt(((a-c)/2)² + b²)
        let (a, b, c) = (2.0f64, 0.0f64, 0.0f64);
        let top = (a + c) / 2.0 + (((a - c) / 2.0).powi(2) + b * b).sqrt();
        assert!((pca.eigenvalues[0] - top).abs() < 1e-12);
        assert!((pca.components.get(&[0, 0]) - 1.0).abs() < 1e-12);
        assert!(pca.components.get(&[0, 1]).abs() < 1e-12);
        let codes = pca.project(&m.values).unwrap();
        assert_eq!(codes.data(), &[1.0, -1.0]);
    }

    #[test]
    fn pca_rejects_bad_inputs() {
        let m = matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(matches!(pca_fit(&[m.clone()], 2), Err(FeatureError::InsufficientData { .. })));
        assert!(matches!(pca_fit(&[m.clone()], 3), Err(FeatureError::Dimension { .. })));
        let other = matrix(&[vec![1.0, 2.0, 3.0]]);
        assert!(pca_fit(&[m.clone(), other.clone()], 1).is_err());
        let pca = pca_fit(&[m, matrix(&[vec![0.0, 1.0]])], 1).unwrap();
        assert!(matches!(pca_apply(&pca, &other), Err(FeatureError::Dimension { .. })));
    }

    #[test]
    fn pca_file_round_trip() {
        let (videos, _) = synth_features(1, &SynthFeatureSpec { n_videos: 4, rows: (3, 5), dim: 6, n_classes: 2, signal_strength: 0.5 }).unwrap();
        let pca = pca_fit(&videos, 3).unwrap();
        let bytes = encode_pca_bytes(&pca);
        assert_eq!(&bytes[..4], b"VPC1");
        let back = decode_pca_bytes(&bytes, "p").unwrap();
        assert_eq!(back.input_dim(), 6);
        assert_eq!(back.output_dim(), 3);
        for (a, b) in back.components.data().iter().zip(pca.components.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(matches!(decode_feature_bytes(&bytes, "v", "p"), Err(FeatureError::BadMagic { .. })));
        assert_eq!(pca_apply(&pca, &videos[0]).unwrap().extractor_tag, "synthetic+pca3");
    }

    #[test]
    fn synthetic_features() {
        let spec = SynthFeatureSpec { n_videos: 6, rows: (2, 4), dim: 5, n_classes: 3, signal_strength: 1.0 };
        let (videos, labels) = synth_features(9, &spec).unwrap();
        assert_eq!(labels, vec![0, 1, 2, 0, 1, 2]);
        for v in &videos {
            let first = v.values.row(0).to_vec();
            assert!(v.values.rows().all(|r| r == first.as_slice()));
            let norm: f64 = first.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert_eq!(videos[0].values.row(0), videos[3].values.row(0));
        let again = synth_features(9, &spec).unwrap();
        assert_eq!(again.0, videos);
    }
}
