//! Seeded synthetic patches, corpora and slides with exact ground truth.
//!
//! Histology-like textures are drawn as two-stain concentration fields and
//! rendered through a known stain matrix, so every stage downstream (stain
//! recovery, masking, classification, scoring) has a reference answer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{Annotation, Polygon, TissueClass};
use crate::raster::{Rect, RgbImage};
use crate::rng::{derive, SplitMix64};
use crate::stain::StainMatrix;
use crate::tiler::DEFAULT_PATCH_SIZE;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible layout: {0}")]
    InfeasibleLayout(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Background pixels are drawn per channel from this range (inclusive), which
/// keeps their luminance above 240.
pub const BACKGROUND_RANGE: (u8, u8) = (244, 255);

/// Procedural parameters for one tissue class. Concentrations are in
/// optical-density units along each stain vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    /// Base (hematoxylin, eosin) concentrations of the tissue matrix.
    pub base: [f64; 2],
    /// Uniform per-pixel jitter amplitude on both stains.
    pub jitter: f64,
    /// Nuclei per 10,000 pixels.
    pub blob_density: f64,
    pub blob_radius: (f64, f64),
    /// Hematoxylin concentration inside nuclei.
    pub blob_h: (f64, f64),
    /// Stripe amplitude on eosin; 0 disables stripes.
    pub stripe_amplitude: f64,
    pub stripe_period: (f64, f64),
    /// Side of the speckle cells in pixels; 0 disables speckle.
    pub speckle_cell: usize,
    pub speckle_range: (f64, f64),
}

/// Per-class texture parameters plus the stain basis used for rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    pub stain_matrix: StainMatrix,
    pub tumor: ClassTexture,
    pub stroma: ClassTexture,
    pub other: ClassTexture,
}

impl TextureParams {
    pub fn for_class(&self, class: TissueClass) -> &ClassTexture {
        match class {
            TissueClass::Tumor => &self.tumor,
            TissueClass::Stroma => &self.stroma,
            TissueClass::Other => &self.other,
        }
    }
}

impl Default for TextureParams {
    fn default() -> Self {
        let none = ClassTexture {
            base: [0.4, 0.4],
            jitter: 0.05,
            blob_density: 0.0,
            blob_radius: (0.0, 0.0),
            blob_h: (0.0, 0.0),
            stripe_amplitude: 0.0,
            stripe_period: (0.0, 0.0),
            speckle_cell: 0,
            speckle_range: (0.0, 0.0),
        };
        Self {
            stain_matrix: StainMatrix::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).expect("valid"),
            // crowded large nuclei on a pale matrix
            tumor: ClassTexture {
                base: [0.35, 0.45],
                blob_density: 12.0,
                blob_radius: (7.0, 12.0),
                blob_h: (1.3, 1.8),
                ..none
            },
            // eosin-rich fibres with sparse small nuclei
            stroma: ClassTexture {
                base: [0.3, 0.55],
                blob_density: 0.25,
                blob_radius: (2.5, 4.0),
                blob_h: (1.0, 1.4),
                stripe_amplitude: 0.9,
                stripe_period: (14.0, 22.0),
                ..none
            },
            // blocky mixed speckle with small dense dots
            other: ClassTexture {
                base: [0.3, 0.3],
                blob_density: 1.5,
                blob_radius: (2.0, 3.5),
                blob_h: (1.1, 1.6),
                speckle_cell: 12,
                speckle_range: (0.0, 0.8),
                ..none
            },
        }
    }
}

/// Renders concentrations through `m`: `I = 255 * 10^(-M c)`, rounded.
pub fn render_concentrations(m: &StainMatrix, width: usize, height: usize, c: &[[f64; 2]]) -> RgbImage {
    assert_eq!(c.len(), width * height);
    let data = c
        .iter()
        .flat_map(|px| m.mix(*px).map(|od| (255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8))
        .collect();
    RgbImage::new(width, height, data).expect("dimensions match")
}

/// Concentration field of a `size` x `size` patch of `class`.
pub fn class_concentrations(class: TissueClass, params: &TextureParams, size: usize, seed: u64) -> Vec<[f64; 2]> {
    let t = params.for_class(class);
    let mut rng = SplitMix64::new(derive(seed, class.name()));
    let n = size * size;
    let mut c = vec![t.base; n];

    if t.speckle_cell > 0 {
        let cells = size.div_ceil(t.speckle_cell);
        let blocks: Vec<[f64; 2]> = (0..cells * cells)
            .map(|_| {
                [
                    rng.uniform(t.speckle_range.0, t.speckle_range.1),
                    rng.uniform(t.speckle_range.0, t.speckle_range.1),
                ]
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let b = blocks[(y / t.speckle_cell) * cells + x / t.speckle_cell];
                c[y * size + x][0] += b[0];
                c[y * size + x][1] += b[1];
            }
        }
    }

    if t.stripe_amplitude > 0.0 {
        let angle = rng.uniform(0.0, std::f64::consts::PI);
        let period = rng.uniform(t.stripe_period.0, t.stripe_period.1);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let (s, co) = angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * co + y as f64 * s) / period * std::f64::consts::TAU + phase;
                c[y * size + x][1] += t.stripe_amplitude * (0.5 + 0.5 * u.sin());
            }
        }
    }

    let n_blobs = (t.blob_density * n as f64 / 10_000.0).round() as usize;
    for _ in 0..n_blobs {
        let cx = rng.uniform(0.0, size as f64);
        let cy = rng.uniform(0.0, size as f64);
        let r = rng.uniform(t.blob_radius.0, t.blob_radius.1);
        let h = rng.uniform(t.blob_h.0, t.blob_h.1);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(size);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    let px = &mut c[y * size + x];
                    px[0] = px[0].max(h);
                    px[1] *= 0.6;
                }
            }
        }
    }

    for px in c.iter_mut() {
        px[0] = (px[0] + rng.uniform(-t.jitter, t.jitter)).max(0.0);
        px[1] = (px[1] + rng.uniform(-t.jitter, t.jitter)).max(0.0);
    }
    c
}

/// A 224 x 224 histology-like patch; identical for identical (class, seed).
pub fn gen_patch(class: TissueClass, params: &TextureParams, seed: u64) -> RgbImage {
    let size = DEFAULT_PATCH_SIZE;
    let c = class_concentrations(class, params, size, seed);
    render_concentrations(&params.stain_matrix, size, size, &c)
}

/// A 224 x 224 non-histology patch for generic pretraining: class 0 is a
/// two-color checkerboard, class 1 a linear color gradient, class 2 random
/// colored rectangles.
pub fn gen_generic_patch(class: TissueClass, seed: u64) -> RgbImage {
    let size = DEFAULT_PATCH_SIZE;
    let mut rng = SplitMix64::new(derive(seed, "generic"));
    let color = |rng: &mut SplitMix64| -> [u8; 3] { std::array::from_fn(|_| rng.below(256) as u8) };
    let mut img = RgbImage::filled(size, size, [0, 0, 0]);
    match class {
        TissueClass::Tumor => {
            let (a, b) = (color(&mut rng), color(&mut rng));
            let cell = 8 + rng.below(24) as usize;
            for y in 0..size {
                for x in 0..size {
                    img.put_pixel(x, y, if (x / cell + y / cell).is_multiple_of(2) { a } else { b });
                }
            }
        }
        TissueClass::Stroma => {
            let (a, b) = (color(&mut rng), color(&mut rng));
            let angle = rng.uniform(0.0, std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let u = ((x as f64 - 112.0) * c + (y as f64 - 112.0) * s) / 317.0 + 0.5;
                    let u = u.clamp(0.0, 1.0);
                    let px = std::array::from_fn(|k| (a[k] as f64 * (1.0 - u) + b[k] as f64 * u).round() as u8);
                    img.put_pixel(x, y, px);
                }
            }
        }
        TissueClass::Other => {
            let bg = color(&mut rng);
            for y in 0..size {
                for x in 0..size {
                    img.put_pixel(x, y, bg);
                }
            }
            for _ in 0..12 {
                let c = color(&mut rng);
                let (x0, y0) = (rng.below(size as u64) as usize, rng.below(size as u64) as usize);
                let (w, h) = (1 + rng.below(80) as usize, 1 + rng.below(80) as usize);
                for y in y0..(y0 + h).min(size) {
                    for x in x0..(x0 + w).min(size) {
                        img.put_pixel(x, y, c);
                    }
                }
            }
        }
    }
    img
}

/// Which texture family a corpus is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Histology,
    Generic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch_id: String,
    pub class: TissueClass,
    pub pixels: RgbImage,
}

/// `n_per_class` patches per class, grouped by class in `classes` order.
/// Patch `i` of class `c` uses seed `derive(seed, "<c>/<i>")`.
pub fn gen_corpus(
    kind: CorpusKind,
    classes: &[TissueClass],
    n_per_class: usize,
    params: &TextureParams,
    seed: u64,
    prefix: &str,
) -> Vec<LabeledPatch> {
    classes
        .iter()
        .flat_map(|&class| {
            (0..n_per_class).map(move |i| {
                let s = derive(seed, &format!("{}/{}", class.name(), i));
                let pixels = match kind {
                    CorpusKind::Histology => gen_patch(class, params, s),
                    CorpusKind::Generic => gen_generic_patch(class, s),
                };
                LabeledPatch {
                    patch_id: format!("{prefix}{}_{i:05}", class.name()),
                    class,
                    pixels,
                }
            })
        })
        .collect()
}

/// Slide recipe. With `target_tsr` set, the slide is a grid of 224-pixel
/// cells: a seeded shuffle of the cells assigns `background_fraction` of
/// them (rounded) to background, `other_cells` to *other*, and splits the
/// remaining G cells into `round(target_tsr * G)` stroma and the rest tumor.
/// Without `target_tsr`, `class_layout` regions are painted in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub class_layout: Vec<(TissueClassName, Rect)>,
    #[serde(default)]
    pub background_fraction: f64,
    #[serde(default)]
    pub other_cells: usize,
    #[serde(default)]
    pub target_tsr: Option<f64>,
}

/// Serde-friendly class name wrapper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TissueClassName {
    Tumor,
    Stroma,
    Other,
}

impl From<TissueClassName> for TissueClass {
    fn from(c: TissueClassName) -> Self {
        match c {
            TissueClassName::Tumor => TissueClass::Tumor,
            TissueClassName::Stroma => TissueClass::Stroma,
            TissueClassName::Other => TissueClass::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroundTruth {
    pub n_stroma: u64,
    pub n_tumor: u64,
    pub n_other: u64,
}

impl GroundTruth {
    pub fn tsr(&self) -> Option<f64> {
        crate::scoring::tsr(self.n_stroma, self.n_tumor).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlide {
    pub image: RgbImage,
    pub annotation: Annotation,
    /// Whole-cell counts on the non-overlapping 224 grid.
    pub ground_truth: GroundTruth,
}

fn background(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = SplitMix64::new(derive(seed, "background"));
    let span = (BACKGROUND_RANGE.1 - BACKGROUND_RANGE.0) as u64 + 1;
    let data = (0..width * height * 3)
        .map(|_| BACKGROUND_RANGE.0 + rng.below(span) as u8)
        .collect();
    RgbImage::new(width, height, data).expect("positive dimensions")
}

fn paint_region(img: &mut RgbImage, class: TissueClass, r: Rect, params: &TextureParams, seed: u64) {
    let p = DEFAULT_PATCH_SIZE;
    let mut y = r.y;
    while y < r.y + r.h {
        let mut x = r.x;
        while x < r.x + r.w {
            let tile = gen_patch(class, params, derive(seed, &format!("{x}/{y}")));
            let w = p.min(r.x + r.w - x);
            let h = p.min(r.y + r.h - y);
            img.blit(&tile.crop(Rect::new(0, 0, w, h)).expect("inside tile"), x, y);
            x += p;
        }
        y += p;
    }
}

/// Renders a slide and its annotation from `spec`.
pub fn gen_slide(spec: &SynthSpec, params: &TextureParams) -> Result<SynthSlide> {
    if spec.width == 0 || spec.height == 0 {
        return Err(SynthError::InvalidSpec("zero-sized slide".into()));
    }
    if !(0.0..=1.0).contains(&spec.background_fraction) {
        return Err(SynthError::InvalidSpec("background_fraction must lie in [0, 1]".into()));
    }
    let p = DEFAULT_PATCH_SIZE;
    let mut image = background(spec.width, spec.height, spec.seed);
    let mut annotation = Annotation::default();

    let layout: Vec<(TissueClass, Rect)> = match spec.target_tsr {
        Some(target) => {
            if !(target > 0.0 && target < 1.0) {
                return Err(SynthError::InvalidSpec("target_tsr must lie in (0, 1)".into()));
            }
            let (cols, rows) = (spec.width / p, spec.height / p);
            let total = cols * rows;
            let n_bg = (spec.background_fraction * total as f64).round() as usize;
            if total == 0 || n_bg + spec.other_cells >= total {
                return Err(SynthError::InfeasibleLayout(format!(
                    "{cols}x{rows} grid leaves no tumor or stroma cells"
                )));
            }
            let g = total - n_bg - spec.other_cells;
            let n_stroma = (target * g as f64).round() as usize;
            let mut cells: Vec<usize> = (0..total).collect();
            SplitMix64::new(derive(spec.seed, "layout")).shuffle(&mut cells);
            let mut assigned: Vec<(usize, TissueClass)> = cells[n_bg..]
                .iter()
                .enumerate()
                .map(|(i, &cell)| {
                    let class = if i < spec.other_cells {
                        TissueClass::Other
                    } else if i < spec.other_cells + n_stroma {
                        TissueClass::Stroma
                    } else {
                        TissueClass::Tumor
                    };
                    (cell, class)
                })
                .collect();
            assigned.sort_unstable_by_key(|&(cell, _)| cell);
            assigned
                .into_iter()
                .map(|(cell, class)| (class, Rect::new((cell % cols) * p, (cell / cols) * p, p, p)))
                .collect()
        }
        None => {
            if spec.class_layout.is_empty() {
                return Err(SynthError::InfeasibleLayout("no tissue regions".into()));
            }
            spec.class_layout.iter().map(|&(c, r)| (c.into(), r)).collect()
        }
    };

    for &(class, r) in &layout {
        if !r.fits_in(spec.width, spec.height) || r.area() == 0 {
            return Err(SynthError::InvalidSpec(format!("region {r:?} outside the slide")));
        }
        paint_region(&mut image, class, r, params, derive(spec.seed, "tissue"));
        annotation.polygons.push(Polygon::rect(class, r));
    }

    let ground_truth = grid_truth(&annotation, spec.width, spec.height);
    if ground_truth.n_stroma + ground_truth.n_tumor == 0 {
        return Err(SynthError::InfeasibleLayout(
            "no whole 224-pixel grid cell is tumor or stroma".into(),
        ));
    }
    Ok(SynthSlide {
        image,
        annotation,
        ground_truth,
    })
}

/// Counts grid cells that are entirely one class.
fn grid_truth(annotation: &Annotation, width: usize, height: usize) -> GroundTruth {
    let lm = crate::annotate::rasterize(annotation, width, height);
    let mut counts = [0u64; 3];
    for r in crate::tiler::windows(width, height, DEFAULT_PATCH_SIZE, DEFAULT_PATCH_SIZE) {
        if let Ok(Some(c)) = crate::annotate::patch_label(&lm, r, 1.0, crate::annotate::LabelRule::SingleClass) {
            counts[c.index()] += 1;
        }
    }
    GroundTruth {
        n_tumor: counts[0],
        n_stroma: counts[1],
        n_other: counts[2],
    }
}
