//! Raster types shared by every stage: confidence masks, pixel classes,
//! half-open boxes, sparse annotations and the MSKF file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values this far outside `[0, 1]` on disk are clamped instead of rejected.
const LOAD_CLAMP_SLACK: f32 = 1e-6;

const MSKF_MAGIC: &[u8; 4] = b"MSKF";
const MSKF_HEADER_LEN: usize = 16;

/// A single-channel raster of confidences in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMask {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl GrayMask {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput("mask dimensions must be at least 1x1"));
        }
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        if let Some((index, &v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Range {
                index,
                value: v as f64,
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// A constant mask. Panics if `value` is outside `[0, 1]` or a dimension is 0.
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be >= 1");
        assert!((0.0..=1.0).contains(&value), "mask value out of range");
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    /// Builds a mask from a per-pixel function; results are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be >= 1");
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                values.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Applies `f` pointwise; outputs are clamped into `[0, 1]`.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .map(|&v| {
                    let r = f(v);
                    if r.is_nan() {
                        0.0
                    } else {
                        r.clamp(0.0, 1.0)
                    }
                })
                .collect(),
        }
    }

    pub fn ensure_same_dims(&self, other: &GrayMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }
}

/// Zero / One / Ambiguous trichotomy of a confidence value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PixelClass {
    Zero,
    One,
    Ambiguous,
}

/// The `lo`/`hi` cut points used to classify confidences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lo: f32,
    pub hi: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { lo: 0.05, hi: 0.95 }
    }
}

impl Thresholds {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        let t = Self { lo, hi };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lo >= 0.0 && self.hi <= 1.0 && self.lo < self.hi;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidThresholds {
                lo: self.lo as f64,
                hi: self.hi as f64,
            })
        }
    }

    #[inline]
    pub fn classify(&self, v: f32) -> PixelClass {
        if v <= self.lo {
            PixelClass::Zero
        } else if v >= self.hi {
            PixelClass::One
        } else {
            PixelClass::Ambiguous
        }
    }
}

pub fn classify_pixels(mask: &GrayMask, lo: f32, hi: f32) -> Result<Vec<PixelClass>> {
    let t = Thresholds::new(lo, hi)?;
    Ok(mask.values().iter().map(|&v| t.classify(v)).collect())
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 < x1 && y0 < y1, "degenerate box");
        Self { x0, y0, x1, y1 }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Iterates pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

/// Tightest box around every pixel with confidence `>= hi`.
pub fn min_bounding_box(mask: &GrayMask, hi: f32) -> Result<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) >= hi {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::NoForeground)?;
    Ok(BBox::new(x0, y0, x1 + 1, y1 + 1))
}

/// Per-pixel label of a scribble or point annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Foreground,
    Background,
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAnnotation {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl SparseAnnotation {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} annotation needs {} labels, got {}",
                width,
                height,
                width * height,
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn unknown(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![Label::Unknown; width * height],
        }
    }

    /// Reads an annotation raster: One pixels are foreground, Zero pixels
    /// background, everything in between unlabeled.
    pub fn from_mask(mask: &GrayMask, thresholds: Thresholds) -> Self {
        let labels = mask
            .values()
            .iter()
            .map(|&v| match thresholds.classify(v) {
                PixelClass::One => Label::Foreground,
                PixelClass::Zero => Label::Background,
                PixelClass::Ambiguous => Label::Unknown,
            })
            .collect();
        Self {
            width: mask.width(),
            height: mask.height(),
            labels,
        }
    }

    /// Inverse of [`SparseAnnotation::from_mask`]: 1 / 0 / 0.5.
    pub fn to_mask(&self) -> GrayMask {
        let values = self
            .labels
            .iter()
            .map(|l| match l {
                Label::Foreground => 1.0,
                Label::Background => 0.0,
                Label::Unknown => 0.5,
            })
            .collect();
        GrayMask {
            width: self.width,
            height: self.height,
            values,
        }
    }

    pub fn set(&mut self, x: usize, y: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != Label::Unknown).count()
    }
}

/// A raw MSKF raster with any channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn encode_raster(width: usize, height: usize, channels: usize, data: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(MSKF_HEADER_LEN + data.len() * 4);
    bytes.extend_from_slice(MSKF_MAGIC);
    for dim in [width, height, channels] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<Raster> {
    if bytes.len() < MSKF_HEADER_LEN {
        return Err(Error::format(path, "file shorter than MSKF header"));
    }
    if &bytes[0..4] != MSKF_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (read_u32(4), read_u32(8), read_u32(12));
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::format(path, "zero dimension in header"));
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    let payload = &bytes[MSKF_HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} bytes, header needs {}",
                payload.len(),
                count * 4
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}

pub fn save_mask(mask: &GrayMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_raster(mask.width, mask.height, 1, &mask.values);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<GrayMask> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    mask_from_raster(raster, path)
}

fn mask_from_raster(raster: Raster, path: &Path) -> Result<GrayMask> {
    if raster.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected 1 channel, found {}", raster.channels),
        ));
    }
    let mut values = raster.data;
    for (index, v) in values.iter_mut().enumerate() {
        if v.is_nan() || *v < -LOAD_CLAMP_SLACK || *v > 1.0 + LOAD_CLAMP_SLACK {
            return Err(Error::Range {
                index,
                value: *v as f64,
            });
        }
        *v = v.clamp(0.0, 1.0);
    }
    GrayMask::new(raster.width, raster.height, values)
}

/// 8-bit binary PGM preview of a mask.
pub fn write_pgm(mask: &GrayMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend(mask.values.iter().map(|v| (v * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
