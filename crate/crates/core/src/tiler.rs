//! Sliding-window patch extraction.
//!
//! Two modes: annotated tiling for training (overlapping windows labeled
//! from a label map) and masked tiling for scoring (a non-overlapping grid
//! gated by tissue coverage). Windows that would cross the slide edge are
//! skipped; output is row-major by (y, x).

use std::fs;
use std::path::Path;

use log::debug;
use rayon::prelude::*;
use thiserror::Error;

use crate::annotate::{self, AnnotateError, LabelMap, LabelRule, TissueClass};
use crate::raster::{self, Mask, RasterError, Rect, RgbImage};
use crate::stain::{self, ReferenceProfile, SourceFit, StainError};

pub const DEFAULT_PATCH_SIZE: usize = 224;
pub const DEFAULT_TRAINING_OVERLAP: usize = 64;
pub const DEFAULT_MIN_COVERAGE: f64 = 0.75;

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("image is {image:?} but the {what} is {other:?}")]
    DimensionMismatch {
        what: &'static str,
        image: (usize, usize),
        other: (usize, usize),
    },
    #[error("invalid tiling config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = TilerError> = std::result::Result<T, E>;

/// Where the source stain fit for normalization comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum StainFitMode {
    /// Fit every patch on its own pixels.
    #[default]
    PerPatch,
    /// Use one fit for every patch (typically fitted on the whole slide).
    Fixed(SourceFit),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TilingConfig {
    pub patch_size: usize,
    pub overlap: usize,
    /// Overrides `patch_size - overlap` when set.
    pub stride: Option<usize>,
    pub min_coverage: f64,
    pub normalize: bool,
    pub label_rule: LabelRule,
    pub reference: ReferenceProfile,
    pub stain_fit: StainFitMode,
}

impl TilingConfig {
    /// Overlapping windows for annotated training tiles.
    pub fn annotated() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            overlap: DEFAULT_TRAINING_OVERLAP,
            stride: None,
            min_coverage: DEFAULT_MIN_COVERAGE,
            normalize: true,
            label_rule: LabelRule::SingleClass,
            reference: ReferenceProfile::default(),
            stain_fit: StainFitMode::PerPatch,
        }
    }

    /// Non-overlapping grid for scoring.
    pub fn masked() -> Self {
        Self {
            overlap: 0,
            ..Self::annotated()
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_size - self.overlap)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TilerError::InvalidConfig(m.to_string()));
        if self.patch_size == 0 {
            return bad("patch_size must be positive");
        }
        if self.overlap >= self.patch_size {
            return bad("overlap must be smaller than patch_size");
        }
        if self.stride == Some(0) {
            return bad("stride must be positive");
        }
        if !(self.min_coverage > 0.0 && self.min_coverage <= 1.0) {
            return bad("min_coverage must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub slide_id: String,
    pub rect: Rect,
    pub label: Option<TissueClass>,
    pub pixels: RgbImage,
    /// False when normalization was disabled or failed for this patch.
    pub normalized: bool,
}

impl PatchRecord {
    pub fn patch_id(&self) -> String {
        patch_id(&self.slide_id, self.rect)
    }
}

pub fn patch_id(slide_id: &str, rect: Rect) -> String {
    format!("{}_{}_{}", slide_id, rect.x, rect.y)
}

/// Window origins along one axis: 0, stride, 2*stride, ... while the window fits.
pub fn window_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len < patch {
        return Vec::new();
    }
    (0..=len - patch).step_by(stride).collect()
}

/// Every full window, row-major by (y, x).
pub fn windows(width: usize, height: usize, patch: usize, stride: usize) -> Vec<Rect> {
    let xs = window_origins(width, patch, stride);
    window_origins(height, patch, stride)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| Rect::new(x, y, patch, patch)))
        .collect()
}

fn extract(
    img: &RgbImage,
    slide_id: &str,
    rect: Rect,
    label: Option<TissueClass>,
    cfg: &TilingConfig,
) -> Result<PatchRecord> {
    let pixels = img.crop(rect)?;
    let (pixels, normalized) = if cfg.normalize {
        let out = match &cfg.stain_fit {
            StainFitMode::PerPatch => stain::normalize(&pixels, &cfg.reference),
            StainFitMode::Fixed(fit) => stain::apply_fit(&pixels, fit, &cfg.reference),
        };
        match out {
            Ok(norm) => (norm, true),
            Err(e) => {
                debug!("{}: left unnormalized ({e})", patch_id(slide_id, rect));
                (pixels, false)
            }
        }
    } else {
        (pixels, false)
    };
    Ok(PatchRecord {
        slide_id: slide_id.to_string(),
        rect,
        label,
        pixels,
        normalized,
    })
}

/// Labeled training patches from an annotated slide.
pub fn tile_annotated(
    slide_id: &str,
    img: &RgbImage,
    lm: &LabelMap,
    cfg: &TilingConfig,
) -> Result<Vec<PatchRecord>> {
    cfg.validate()?;
    if (img.width(), img.height()) != (lm.width(), lm.height()) {
        return Err(TilerError::DimensionMismatch {
            what: "label map",
            image: (img.width(), img.height()),
            other: (lm.width(), lm.height()),
        });
    }
    let rects = windows(img.width(), img.height(), cfg.patch_size, cfg.stride());
    let labeled = rects
        .into_iter()
        .map(|r| Ok((r, annotate::patch_label(lm, r, cfg.min_coverage, cfg.label_rule)?)))
        .collect::<Result<Vec<_>>>()?;
    labeled
        .into_par_iter()
        .filter_map(|(r, label)| label.map(|l| (r, l)))
        .map(|(r, label)| extract(img, slide_id, r, Some(label), cfg))
        .collect()
}

/// Unlabeled patches on a non-overlapping grid, kept where tissue coverage
/// reaches `cfg.min_coverage`.
pub fn tile_masked(
    slide_id: &str,
    img: &RgbImage,
    mask: &Mask,
    cfg: &TilingConfig,
) -> Result<Vec<PatchRecord>> {
    cfg.validate()?;
    if (img.width(), img.height()) != (mask.width(), mask.height()) {
        return Err(TilerError::DimensionMismatch {
            what: "mask",
            image: (img.width(), img.height()),
            other: (mask.width(), mask.height()),
        });
    }
    let rects = windows(img.width(), img.height(), cfg.patch_size, cfg.stride());
    let mut kept = Vec::new();
    for r in rects {
        if raster::coverage(mask, r)? >= cfg.min_coverage {
            kept.push(r);
        }
    }
    kept.into_par_iter()
        .map(|r| extract(img, slide_id, r, None, cfg))
        .collect()
}

/// Writes `manifest.csv` (`slide_id,x,y,w,h,label`) and one PPM per patch.
pub fn write_patches(dir: &Path, patches: &[PatchRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    w.write_record(["slide_id", "x", "y", "w", "h", "label"])?;
    for p in patches {
        let r = p.rect;
        w.write_record([
            p.slide_id.clone(),
            r.x.to_string(),
            r.y.to_string(),
            r.w.to_string(),
            r.h.to_string(),
            p.label.map_or(String::new(), |l| l.name().to_string()),
        ])?;
        raster::write_ppm(&dir.join(format!("{}.ppm", p.patch_id())), &p.pixels)?;
    }
    w.flush()?;
    Ok(())
}
