//! Raster buffers, the binary PPM codec, grayscale conversion, histograms,
//! Otsu thresholding and tissue masking.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scan resolution assumed when an image has no sidecar descriptor.
pub const DEFAULT_MPP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("histogram has fewer than two populated levels")]
    DegenerateHistogram,
    #[error("rect {rect:?} lies outside a {width}x{height} raster")]
    RectOutOfBounds { rect: Rect, width: usize, height: usize },
    #[error("invalid dimensions {width}x{height} for {len} data elements")]
    InvalidDimensions { width: usize, height: usize, len: usize },
    #[error("malformed sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

/// Axis-aligned pixel rectangle, origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

fn check_dims(width: usize, height: usize, len: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 || width * height * channels != len {
        return Err(RasterError::InvalidDimensions { width, height, len });
    }
    Ok(())
}

/// Row-major 8-bit RGB image with its physical pixel pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
    /// Microns per pixel.
    pub mpp: f64,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len(), 3)?;
        Ok(Self {
            width,
            height,
            data,
            mpp: DEFAULT_MPP,
        })
    }

    /// Image filled with a single color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            data,
            mpp: DEFAULT_MPP,
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the pixels under `rect` into a new image.
    pub fn crop(&self, rect: Rect) -> Result<RgbImage> {
        if !rect.fits_in(self.width, self.height) || rect.area() == 0 {
            return Err(RasterError::RectOutOfBounds {
                rect,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(rect.area() * 3);
        for y in rect.y..rect.y + rect.h {
            let start = (y * self.width + rect.x) * 3;
            data.extend_from_slice(&self.data[start..start + rect.w * 3]);
        }
        Ok(RgbImage {
            width: rect.w,
            height: rect.h,
            data,
            mpp: self.mpp,
        })
    }

    /// Pastes `src` with its top-left corner at (x, y). `src` must fit.
    pub fn blit(&mut self, src: &RgbImage, x: usize, y: usize) {
        assert!(Rect::new(x, y, src.width, src.height).fits_in(self.width, self.height));
        for row in 0..src.height {
            let dst = ((y + row) * self.width + x) * 3;
            let s = row * src.width * 3;
            self.data[dst..dst + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len(), 1)?;
        Ok(Self {
            width,
            height,
            data,
        })
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
}

/// Binary tissue mask; `true` marks tissue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(width, height, data.len(), 1)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Raster whose pixels can be tested for "set" (mask tissue, labeled pixel).
pub trait CoverageSource {
    fn dims(&self) -> (usize, usize);
    fn is_set(&self, x: usize, y: usize) -> bool;
}

impl CoverageSource for Mask {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn is_set(&self, x: usize, y: usize) -> bool {
        self.get(x, y)
    }
}

/// Fraction of pixels in `rect` that are set.
pub fn coverage<S: CoverageSource + ?Sized>(src: &S, rect: Rect) -> Result<f64> {
    let (width, height) = src.dims();
    if !rect.fits_in(width, height) || rect.area() == 0 {
        return Err(RasterError::RectOutOfBounds {
            rect,
            width,
            height,
        });
    }
    let mut set = 0usize;
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            if src.is_set(x, y) {
                set += 1;
            }
        }
    }
    Ok(set as f64 / rect.area() as f64)
}

/// Luminance counts over the 256 8-bit levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram256 {
    pub counts: [u64; 256],
}

impl Histogram256 {
    pub fn from_counts(counts: [u64; 256]) -> Self {
        Self { counts }
    }

    pub fn of(img: &GrayImage) -> Self {
        let mut counts = [0u64; 256];
        for &v in &img.data {
            counts[v as usize] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Multiplies every count by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        let mut counts = self.counts;
        for c in counts.iter_mut() {
            *c *= factor;
        }
        Self { counts }
    }
}

/// BT.601 luminance, rounded half away from zero.
pub fn luminance(rgb: [u8; 3]) -> u8 {
    let y = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    y.round().clamp(0.0, 255.0) as u8
}

pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.pixels().map(luminance).collect(),
    }
}

/// Otsu's threshold: the smallest level `t` maximizing the between-class
/// variance, with class 0 holding levels `<= t`.
///
/// Comparisons are exact. For a split with `n0` pixels summing to `s0`, the
/// between-class variance is proportional to `(N*s0 - n0*S)^2 / (n0*n1)`,
/// so candidates are ranked by cross-multiplying those integer fractions.
pub fn otsu_threshold(hist: &Histogram256) -> Result<u8> {
    let populated = hist.counts.iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(RasterError::DegenerateHistogram);
    }
    let total: u128 = hist.counts.iter().map(|&c| c as u128).sum();
    let total_sum: u128 = hist
        .counts
        .iter()
        .enumerate()
        .map(|(level, &c)| level as u128 * c as u128)
        .sum();

    // (numerator, denominator) of the best score so far
    let mut best: Option<(BigUint, BigUint, u8)> = None;
    let mut n0: u128 = 0;
    let mut s0: u128 = 0;
    for (level, &count) in hist.counts.iter().enumerate() {
        n0 += count as u128;
        s0 += level as u128 * count as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let lhs = total * s0;
        let rhs = n0 * total_sum;
        let diff = lhs.abs_diff(rhs);
        let num = BigUint::from(diff) * BigUint::from(diff);
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((bn, bd, _)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((num, den, level as u8));
        }
    }
    // populated >= 2 guarantees at least one split with both classes nonempty
    Ok(best.expect("two populated levels").2)
}

/// Tissue mask: pixels on the dark side of the Otsu threshold (class 0).
pub fn tissue_mask(img: &RgbImage) -> Result<Mask> {
    let gray = to_grayscale(img);
    let t = otsu_threshold(&Histogram256::of(&gray))?;
    Ok(Mask {
        width: gray.width,
        height: gray.height,
        data: gray.data.iter().map(|&v| v <= t).collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    mpp: f64,
}

/// `slide.ppm` -> `slide.meta.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn skip_ws_and_comments(buf: &[u8], pos: &mut usize) {
    while *pos < buf.len() {
        match buf[*pos] {
            b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => *pos += 1,
            b'#' => {
                while *pos < buf.len() && buf[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
}

fn header_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    skip_ws_and_comments(buf, pos);
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(RasterError::MalformedHeader(format!("missing {what}")));
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| RasterError::MalformedHeader(format!("{what} out of range")))
}

/// Decodes a binary (P6, maxval 255) pixmap.
pub fn decode_ppm(buf: &[u8]) -> Result<RgbImage> {
    if buf.len() < 2 || &buf[..2] != b"P6" {
        return Err(RasterError::MalformedHeader("expected magic \"P6\"".into()));
    }
    let mut pos = 2;
    let width = header_number(buf, &mut pos, "width")? as usize;
    let height = header_number(buf, &mut pos, "height")? as usize;
    let maxval = header_number(buf, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(RasterError::MalformedHeader("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(RasterError::UnsupportedMaxval(maxval));
    }
    match buf.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(RasterError::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let expected = width * height * 3;
    let found = buf.len() - pos;
    if found < expected {
        return Err(RasterError::TruncatedData { expected, found });
    }
    RgbImage::new(width, height, buf[pos..pos + expected].to_vec())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Reads a P6 file, picking up `mpp` from its sidecar when present.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let mut img = decode_ppm(&fs::read(path)?)?;
    let meta = sidecar_path(path);
    if meta.exists() {
        let text = fs::read_to_string(&meta)?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|source| RasterError::Sidecar {
                path: meta.clone(),
                source,
            })?;
        img.mpp = sidecar.mpp;
    }
    Ok(img)
}

/// Writes pixels only.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(img))?;
    Ok(())
}

/// Writes pixels plus the `mpp` sidecar.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    write_ppm(path, img)?;
    let text = serde_json::to_string(&Sidecar { mpp: img.mpp }).expect("sidecar serializes");
    fs::write(sidecar_path(path), text)?;
    Ok(())
}
