//! Tumor-stroma ratio scoring from stained tissue images.
//!
//! The pipeline runs raster decoding and tissue masking, stain
//! normalization, patch tiling, patch classification and slide-level
//! scoring. Synthetic data generators provide inputs with exact ground truth.

pub mod annotate;
pub mod cohort;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod scoring;
pub mod stain;
pub mod synth;
pub mod tiler;
