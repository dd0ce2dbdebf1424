//! Polygon annotations, their rasterization to per-pixel class labels, and
//! patch-level label assignment.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, CoverageSource, RasterError, Rect};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
    #[error("polygon {index} has {vertices} vertices; at least 3 are required")]
    DegeneratePolygon { index: usize, vertices: usize },
    #[error("malformed annotation JSON: {0}")]
    MalformedJson(#[from] serde_json::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AnnotateError> = std::result::Result<T, E>;

/// Patch tissue category. Discriminants are the label-map codes; 0 is
/// reserved for unlabeled pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TissueClass {
    Tumor = 1,
    Stroma = 2,
    Other = 3,
}

impl TissueClass {
    pub const ALL: [TissueClass; 3] = [TissueClass::Tumor, TissueClass::Stroma, TissueClass::Other];

    /// Zero-based position, matching probability-vector order.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::Tumor),
            2 => Some(Self::Stroma),
            3 => Some(Self::Other),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tumor => "tumor",
            Self::Stroma => "stroma",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TissueClass {
    type Err = AnnotateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tumor" => Ok(Self::Tumor),
            "stroma" => Ok(Self::Stroma),
            "other" => Ok(Self::Other),
            _ => Err(AnnotateError::UnknownClassName(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub class: TissueClass,
    /// Implicitly closed ring of (x, y) vertices in slide pixels.
    pub ring: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn rect(class: TissueClass, r: Rect) -> Self {
        let (x0, y0) = (r.x as f64, r.y as f64);
        let (x1, y1) = ((r.x + r.w) as f64, (r.y + r.h) as f64);
        Self {
            class,
            ring: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
        }
    }

    /// Even-odd containment test.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let mut inside = false;
        let n = self.ring.len();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = self.ring[i];
            let (xj, yj) = self.ring[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotation {
    pub polygons: Vec<Polygon>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationJson {
    polygons: Vec<PolygonJson>,
}

#[derive(Serialize, Deserialize)]
struct PolygonJson {
    class: String,
    ring: Vec<[f64; 2]>,
}

impl Annotation {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: AnnotationJson = serde_json::from_str(text)?;
        let mut polygons = Vec::with_capacity(raw.polygons.len());
        for (index, p) in raw.polygons.into_iter().enumerate() {
            let class: TissueClass = p.class.parse()?;
            if p.ring.len() < 3 {
                return Err(AnnotateError::DegeneratePolygon {
                    index,
                    vertices: p.ring.len(),
                });
            }
            polygons.push(Polygon {
                class,
                ring: p.ring.into_iter().map(|[x, y]| (x, y)).collect(),
            });
        }
        Ok(Self { polygons })
    }

    pub fn to_json(&self) -> String {
        let raw = AnnotationJson {
            polygons: self
                .polygons
                .iter()
                .map(|p| PolygonJson {
                    class: p.class.name().to_string(),
                    ring: p.ring.iter().map(|&(x, y)| [x, y]).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("annotation serializes")
    }
}

pub fn parse_annotations(path: &Path) -> Result<Annotation> {
    Annotation::from_json(&std::fs::read_to_string(path)?)
}

/// Per-pixel class codes (0 = unlabeled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height || data.iter().any(|&v| v > 3) {
            return Err(RasterError::InvalidDimensions {
                width,
                height,
                len: data.len(),
            }
            .into());
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, class: Option<TissueClass>) -> Self {
        Self {
            width,
            height,
            data: vec![class.map_or(0, TissueClass::code); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Option<TissueClass> {
        TissueClass::from_code(self.data[y * self.width + x])
    }

    pub fn set(&mut self, x: usize, y: usize, class: Option<TissueClass>) {
        self.data[y * self.width + x] = class.map_or(0, TissueClass::code);
    }
}

impl CoverageSource for LabelMap {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn is_set(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }
}

/// Labels every pixel whose center lies inside a polygon (even-odd rule).
/// Later polygons overwrite earlier ones.
pub fn rasterize(a: &Annotation, width: usize, height: usize) -> LabelMap {
    let mut lm = LabelMap::filled(width, height, None);
    let mut crossings: Vec<f64> = Vec::new();
    for poly in &a.polygons {
        let code = poly.class.code();
        let ys = poly.ring.iter().map(|v| v.1);
        let ymin = ys.clone().fold(f64::INFINITY, f64::min);
        let ymax = ys.fold(f64::NEG_INFINITY, f64::max);
        let row_lo = (ymin.floor() - 1.0).max(0.0) as usize;
        let row_hi = (ymax.ceil() as i64 + 1).min(height as i64 - 1);
        if row_hi < row_lo as i64 {
            continue;
        }
        for y in row_lo..=row_hi as usize {
            // scanline through pixel centers
            let py = y as f64 + 0.5;
            crossings.clear();
            let n = poly.ring.len();
            let mut j = n - 1;
            for i in 0..n {
                let (xi, yi) = poly.ring[i];
                let (xj, yj) = poly.ring[j];
                if (yi > py) != (yj > py) {
                    crossings.push((xj - xi) * (py - yi) / (yj - yi) + xi);
                }
                j = i;
            }
            crossings.sort_by(|a, b| a.total_cmp(b));
            // a center is inside iff it lies in [c0, c1), [c2, c3), ...
            for span in crossings.chunks_exact(2) {
                let lo = (span[0].floor() as i64 - 1).max(0);
                let hi = (span[1].ceil() as i64 + 1).min(width as i64);
                for x in lo..hi {
                    let px = x as f64 + 0.5;
                    if span[0] <= px && px < span[1] {
                        lm.data[y * width + x as usize] = code;
                    }
                }
            }
        }
    }
    lm
}

/// How a patch's label is derived from the pixel labels under it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// A single class must cover at least `min_cov` of the patch.
    #[default]
    SingleClass,
    /// Annotated pixels together must cover `min_cov`; the most frequent
    /// class wins (ties go to the lower class code).
    AnyAnnotatedMajority,
}

impl FromStr for LabelRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single-class" => Ok(Self::SingleClass),
            "any-annotated-majority" => Ok(Self::AnyAnnotatedMajority),
            _ => Err(format!("unknown label rule {s:?}")),
        }
    }
}

/// Class label of the patch under `rect`, or `None` when it is discarded.
pub fn patch_label(lm: &LabelMap, rect: Rect, min_cov: f64, rule: LabelRule) -> Result<Option<TissueClass>> {
    if !rect.fits_in(lm.width, lm.height) || rect.area() == 0 {
        return Err(RasterError::RectOutOfBounds {
            rect,
            width: lm.width,
            height: lm.height,
        }
        .into());
    }
    let mut counts = [0usize; 4];
    for y in rect.y..rect.y + rect.h {
        let row = &lm.data[y * lm.width + rect.x..y * lm.width + rect.x + rect.w];
        for &v in row {
            counts[v as usize] += 1;
        }
    }
    let area = rect.area() as f64;
    let label = match rule {
        LabelRule::SingleClass => TissueClass::ALL
            .into_iter()
            .find(|c| counts[c.code() as usize] as f64 / area >= min_cov),
        LabelRule::AnyAnnotatedMajority => {
            let annotated = counts[1] + counts[2] + counts[3];
            if (annotated as f64) / area >= min_cov {
                // max_by_key keeps the last maximum, so scan in reverse
                TissueClass::ALL
                    .into_iter()
                    .rev()
                    .max_by_key(|c| counts[c.code() as usize])
            } else {
                None
            }
        }
    };
    Ok(label)
}

/// Fraction of `rect` carrying any label.
pub fn annotated_coverage(lm: &LabelMap, rect: Rect) -> Result<f64> {
    Ok(raster::coverage(lm, rect)?)
}
