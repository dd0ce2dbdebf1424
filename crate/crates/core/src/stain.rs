//! Macenko stain estimation and normalization.
//!
//! Pixels are moved to optical-density space, where stains combine linearly.
//! The two stain vectors are estimated from the extreme angles of the tissue
//! pixels within their principal plane, each pixel is deconvolved into
//! per-stain concentrations, and the image is rebuilt from a reference
//! stain basis with concentrations rescaled to the reference maxima.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RgbImage;

pub const DEFAULT_BETA: f64 = 0.15;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_I0: f64 = 255.0;
/// Percentile used to pick each stain's "maximum" concentration.
pub const MAX_CONCENTRATION_PERCENTILE: f64 = 99.0;
/// Stain columns closer than this are treated as parallel.
pub const MIN_COLUMN_ANGLE_DEG: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum StainError {
    #[error("too few tissue pixels to estimate two distinct stains")]
    InsufficientTissue,
    #[error("stain columns are parallel; the concentration system is singular")]
    SingularSystem,
    #[error("invalid stain matrix: {0}")]
    InvalidStainMatrix(String),
    #[error("invalid reference profile: {0}")]
    InvalidProfile(String),
}

pub type Result<T, E = StainError> = std::result::Result<T, E>;

/// Row-major optical-density triples.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// Two unit, nonnegative optical-density vectors. Column 0 is the
/// hematoxylin-like stain (larger red component), column 1 eosin-like.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    cols: [[f64; 3]; 2],
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

impl StainMatrix {
    /// Normalizes both columns and validates the matrix invariants. Columns
    /// keep the order given.
    pub fn new(stain1: [f64; 3], stain2: [f64; 3]) -> Result<Self> {
        let bad = |m: &str| StainError::InvalidStainMatrix(m.to_string());
        if stain1.iter().chain(&stain2).any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(bad("components must be finite and nonnegative"));
        }
        let a = unit(stain1).ok_or_else(|| bad("zero column"))?;
        let b = unit(stain2).ok_or_else(|| bad("zero column"))?;
        let m = Self { cols: [a, b] };
        if m.column_angle_deg() <= MIN_COLUMN_ANGLE_DEG {
            return Err(bad("columns are parallel"));
        }
        Ok(m)
    }

    pub fn column(&self, i: usize) -> [f64; 3] {
        self.cols[i]
    }

    pub fn column_angle_deg(&self) -> f64 {
        dot(self.cols[0], self.cols[1]).clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Optical density of concentrations `c`.
    pub fn mix(&self, c: [f64; 2]) -> [f64; 3] {
        let [a, b] = self.cols;
        [
            a[0] * c[0] + b[0] * c[1],
            a[1] * c[0] + b[1] * c[1],
            a[2] * c[0] + b[2] * c[1],
        ]
    }
}

/// Normalization target: a stain basis and the concentration each stain
/// should reach at its 99th percentile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceProfile {
    pub stain_matrix: StainMatrix,
    pub max_concentrations: [f64; 2],
}

impl ReferenceProfile {
    pub fn new(stain_matrix: StainMatrix, max_concentrations: [f64; 2]) -> Result<Self> {
        if max_concentrations.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(StainError::InvalidProfile(
                "max concentrations must be positive".into(),
            ));
        }
        Ok(Self {
            stain_matrix,
            max_concentrations,
        })
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let raw: ProfileJson = serde_json::from_str(text).map_err(|e| e.to_string())?;
        raw.try_into().map_err(|e: StainError| e.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ProfileJson::from(*self)).expect("profile serializes")
    }
}

impl Default for ReferenceProfile {
    fn default() -> Self {
        let m = StainMatrix::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).expect("valid");
        Self {
            stain_matrix: m,
            max_concentrations: [1.9705, 1.0308],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileJson {
    pub stain1: [f64; 3],
    pub stain2: [f64; 3],
    pub max_c: [f64; 2],
}

impl From<ReferenceProfile> for ProfileJson {
    fn from(p: ReferenceProfile) -> Self {
        Self {
            stain1: p.stain_matrix.column(0),
            stain2: p.stain_matrix.column(1),
            max_c: p.max_concentrations,
        }
    }
}

impl TryFrom<ProfileJson> for ReferenceProfile {
    type Error = StainError;

    fn try_from(p: ProfileJson) -> Result<Self> {
        ReferenceProfile::new(StainMatrix::new(p.stain1, p.stain2)?, p.max_c)
    }
}

pub fn rgb_to_od(img: &RgbImage, i0: f64) -> OdImage {
    assert!(i0 >= 1.0, "i0 must be at least 1");
    let od = |v: u8| -((v.max(1) as f64) / i0).log10();
    OdImage {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(|p| [od(p[0]), od(p[1]), od(p[2])]).collect(),
    }
}

/// Inverse of [`rgb_to_od`], rounding to 8 bits.
pub fn od_to_rgb(od: &OdImage, i0: f64) -> RgbImage {
    let data = od
        .data
        .iter()
        .flat_map(|px| px.map(|v| od_channel_to_u8(v, i0)))
        .collect();
    RgbImage::new(od.width, od.height, data).expect("dimensions carried over")
}

fn od_channel_to_u8(od: f64, i0: f64) -> u8 {
    (i0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8
}

/// Linear-interpolated percentile (`p` in [0, 100]) of an unsorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&v, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Estimates the stain basis of `od`.
///
/// `beta` is the optical-density floor every channel of a pixel must exceed
/// to count as tissue; `alpha` is the angular percentile (in percent) taken
/// at each end of the angle distribution.
pub fn estimate_stain_matrix(od: &OdImage, beta: f64, alpha: f64) -> Result<StainMatrix> {
    let kept: Vec<[f64; 3]> = od
        .data
        .iter()
        .copied()
        .filter(|px| px.iter().all(|&c| c > beta))
        .collect();
    if kept.len() < 2 {
        return Err(StainError::InsufficientTissue);
    }

    let mut scatter = Matrix3::<f64>::zeros();
    for px in &kept {
        let v = Vector3::from(*px);
        scatter += v * v.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |i: usize| {
        let v = eig.eigenvectors.column(order[i]);
        let v = [v[0], v[1], v[2]];
        if v.iter().sum::<f64>() < 0.0 {
            v.map(|c| -c)
        } else {
            v
        }
    };
    let (e1, e2) = (axis(0), axis(1));

    let mut angles: Vec<f64> = kept
        .iter()
        .map(|px| dot(*px, e2).atan2(dot(*px, e1)))
        .collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&angles, alpha);
    let hi = percentile_sorted(&angles, 100.0 - alpha);

    let direction = |phi: f64| -> Option<[f64; 3]> {
        let (s, c) = phi.sin_cos();
        let mut v = [0.0; 3];
        for k in 0..3 {
            v[k] = e1[k] * c + e2[k] * s;
        }
        if v.iter().sum::<f64>() < 0.0 {
            v = v.map(|x| -x);
        }
        unit(v.map(|x| x.max(0.0)))
    };
    let (a, b) = match (direction(lo), direction(hi)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(StainError::InsufficientTissue),
    };
    let (first, second) = if a[0] >= b[0] { (a, b) } else { (b, a) };
    StainMatrix::new(first, second).map_err(|_| StainError::InsufficientTissue)
}

/// Per-pixel least-squares concentrations, negatives clamped to zero.
pub fn concentrations(od: &OdImage, m: &StainMatrix) -> Result<Vec<[f64; 2]>> {
    let (a, b) = (m.column(0), m.column(1));
    let g00 = dot(a, a);
    let g01 = dot(a, b);
    let g11 = dot(b, b);
    let det = g00 * g11 - g01 * g01;
    if det.abs() < 1e-12 {
        return Err(StainError::SingularSystem);
    }
    Ok(od
        .data
        .iter()
        .map(|px| {
            let r0 = dot(a, *px);
            let r1 = dot(b, *px);
            let c0 = (g11 * r0 - g01 * r1) / det;
            let c1 = (g00 * r1 - g01 * r0) / det;
            [c0.max(0.0), c1.max(0.0)]
        })
        .collect())
}

/// Stain basis and 99th-percentile concentrations fitted to a source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceFit {
    pub stain_matrix: StainMatrix,
    pub max_concentrations: [f64; 2],
}

pub fn fit_source(img: &RgbImage) -> Result<SourceFit> {
    let od = rgb_to_od(img, DEFAULT_I0);
    let m = estimate_stain_matrix(&od, DEFAULT_BETA, DEFAULT_ALPHA)?;
    let c = concentrations(&od, &m)?;
    Ok(SourceFit {
        stain_matrix: m,
        max_concentrations: max_concentrations(&c),
    })
}

fn max_concentrations(c: &[[f64; 2]]) -> [f64; 2] {
    let per = |k: usize| {
        let v: Vec<f64> = c.iter().map(|p| p[k]).collect();
        percentile(&v, MAX_CONCENTRATION_PERCENTILE)
    };
    [per(0), per(1)]
}

/// Rebuilds `img` in the reference basis using a previously fitted source
/// (one fit may serve every patch of a slide).
pub fn apply_fit(img: &RgbImage, fit: &SourceFit, reference: &ReferenceProfile) -> Result<RgbImage> {
    let od = rgb_to_od(img, DEFAULT_I0);
    let c = concentrations(&od, &fit.stain_matrix)?;
    let scale: [f64; 2] = std::array::from_fn(|k| {
        let src = fit.max_concentrations[k];
        if src > 1e-12 {
            reference.max_concentrations[k] / src
        } else {
            1.0
        }
    });
    let data = c
        .iter()
        .flat_map(|px| {
            let od = reference
                .stain_matrix
                .mix([px[0] * scale[0], px[1] * scale[1]]);
            od.map(|v| od_channel_to_u8(v, DEFAULT_I0))
        })
        .collect();
    let mut out = RgbImage::new(img.width(), img.height(), data).expect("same dimensions");
    out.mpp = img.mpp;
    Ok(out)
}

/// Per-image Macenko normalization to `reference`.
pub fn normalize(img: &RgbImage, reference: &ReferenceProfile) -> Result<RgbImage> {
    let fit = fit_source(img)?;
    apply_fit(img, &fit, reference)
}
