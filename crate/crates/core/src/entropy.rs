//! Base-2 binary entropy maps and the scalar uncertainty scores built on them.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Result;
use crate::raster::GrayMask;

/// Confidences are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Default entropy above which a pixel counts as high-uncertainty.
pub const DEFAULT_THETA: f64 = 0.9;

#[inline]
pub fn binary_entropy(v: f64) -> f64 {
    let p = v.clamp(EPS, 1.0 - EPS);
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

pub fn entropy_map(mask: &GrayMask) -> GrayMask {
    mask.map(|v| binary_entropy(v as f64) as f32)
}

#[inline]
fn is_high(v: f32, theta: f64) -> bool {
    binary_entropy(v as f64) > theta
}

/// Thresholds an entropy map: `true` where `e > theta` (strict).
pub fn high_uncertainty_mask(e: &GrayMask, theta: f64) -> Vec<bool> {
    e.values().iter().map(|&v| v as f64 > theta).collect()
}

/// Per-pixel `E(v) > theta`, computed straight from confidences in f64.
pub fn high_uncertainty_pixels(mask: &GrayMask, theta: f64) -> Vec<bool> {
    mask.values().iter().map(|&v| is_high(v, theta)).collect()
}

/// A non-negative ratio that may be infinite.
///
/// `Infinite` compares greater than every finite value and never passes a
/// `<` threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ratio {
    Finite(f64),
    Infinite,
}

impl Ratio {
    pub fn is_finite(&self) -> bool {
        matches!(self, Ratio::Finite(_))
    }

    pub fn lt(&self, bound: f64) -> bool {
        match self {
            Ratio::Finite(v) => *v < bound,
            Ratio::Infinite => false,
        }
    }

    /// Strictly lower; an infinite side is never lower than anything.
    pub fn strictly_below(&self, other: &Ratio) -> bool {
        match (self, other) {
            (Ratio::Finite(a), Ratio::Finite(b)) => a < b,
            (Ratio::Finite(_), Ratio::Infinite) => true,
            (Ratio::Infinite, _) => false,
        }
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            Ratio::Finite(v) => *v,
            Ratio::Infinite => f64::INFINITY,
        }
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Ratio::Finite(a), Ratio::Finite(b)) => a.partial_cmp(b),
            (Ratio::Finite(_), Ratio::Infinite) => Some(Ordering::Less),
            (Ratio::Infinite, Ratio::Finite(_)) => Some(Ordering::Greater),
            (Ratio::Infinite, Ratio::Infinite) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(v) => write!(f, "{v}"),
            Ratio::Infinite => f.write_str("inf"),
        }
    }
}

// JSON form: a number, or the string "inf".
impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Ratio::Finite(v) => s.serialize_f64(*v),
            Ratio::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v >= 0.0 => Ok(Ratio::Finite(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("negative ratio {v}"))),
            Raw::Str(s) if s == "inf" => Ok(Ratio::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unknown ratio {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScores {
    pub u_abs: f64,
    pub u_rel: Ratio,
    pub u_diff: f64,
}

/// Fraction of pixels whose entropy exceeds `theta`.
pub fn u_abs(mask: &GrayMask, theta: f64) -> f64 {
    let high = mask.values().iter().filter(|&&v| is_high(v, theta)).count();
    high as f64 / mask.len() as f64
}

/// High-uncertainty pixel count over the count of confident foreground
/// pixels (`v > 0.5` and entropy `<= theta`).
pub fn u_rel(mask: &GrayMask, theta: f64) -> Ratio {
    let mut high = 0usize;
    let mut confident_fg = 0usize;
    for &v in mask.values() {
        if is_high(v, theta) {
            high += 1;
        } else if v > 0.5 {
            confident_fg += 1;
        }
    }
    if confident_fg == 0 {
        Ratio::Infinite
    } else {
        Ratio::Finite(high as f64 / confident_fg as f64)
    }
}

/// Absolute residual `|a - b|` as a mask.
pub fn residual(a: &GrayMask, b: &GrayMask) -> Result<GrayMask> {
    a.ensure_same_dims(b)?;
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .collect();
    GrayMask::new(a.width(), a.height(), values)
}

/// High-uncertainty fraction of the entropy of `|pseudo - prev_pred|`.
pub fn u_diff(pseudo: &GrayMask, prev_pred: &GrayMask, theta: f64) -> Result<f64> {
    Ok(u_abs(&residual(pseudo, prev_pred)?, theta))
}

pub fn scores(candidate: &GrayMask, prev_pred: &GrayMask, theta: f64) -> Result<UncertaintyScores> {
    Ok(UncertaintyScores {
        u_abs: u_abs(candidate, theta),
        u_rel: u_rel(candidate, theta),
        u_diff: u_diff(candidate, prev_pred, theta)?,
    })
}
