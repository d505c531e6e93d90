//! Weak augmentation views and their inverses, plus mean fusion of the
//! back-projected masks.
//!
//! A spec is applied as flip, then clockwise rotation, then scale. The
//! inverse runs the same steps in reverse order. Flips and rotations are
//! index permutations and invert exactly. Scaling uses bilinear resampling
//! on a corner-aligned grid (view pixel `d` samples source position
//! `d * in / out`), so a x2 view maps its even pixels exactly onto source
//! pixels; other scaled views only invert approximately.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BBox, GrayMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flip {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "h")]
    Horizontal,
    #[serde(rename = "v")]
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn quarter_turns(self) -> usize {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn degrees(self) -> u32 {
        self.quarter_turns() as u32 * 90
    }
}

impl TryFrom<u32> for Rotation {
    type Error = String;

    fn try_from(deg: u32) -> Result<Self, String> {
        match deg {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            other => Err(format!("rotation must be 0, 90, 180 or 270, got {other}")),
        }
    }
}

impl From<Rotation> for u32 {
    fn from(r: Rotation) -> u32 {
        r.degrees()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum Scale {
    Half,
    One,
    Double,
}

impl Scale {
    pub fn factor(self) -> f64 {
        match self {
            Scale::Half => 0.5,
            Scale::One => 1.0,
            Scale::Double => 2.0,
        }
    }

    /// Scaled extent, rounded, never below one pixel.
    pub fn apply_extent(self, extent: usize) -> usize {
        ((extent as f64 * self.factor()).round() as usize).max(1)
    }
}

impl TryFrom<f64> for Scale {
    type Error = String;

    fn try_from(s: f64) -> Result<Self, String> {
        if s == 0.5 {
            Ok(Scale::Half)
        } else if s == 1.0 {
            Ok(Scale::One)
        } else if s == 2.0 {
            Ok(Scale::Double)
        } else {
            Err(format!("scale must be 0.5, 1.0 or 2.0, got {s}"))
        }
    }
}

impl From<Scale> for f64 {
    fn from(s: Scale) -> f64 {
        s.factor()
    }
}

const FLIPS: [Flip; 3] = [Flip::None, Flip::Horizontal, Flip::Vertical];
const ROTATIONS: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];
const SCALES: [Scale; 3] = [Scale::Half, Scale::One, Scale::Double];

/// One flip / rotation / scale combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugSpec {
    pub flip: Flip,
    #[serde(rename = "rot")]
    pub rotation: Rotation,
    pub scale: Scale,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AugSpec {
    pub const IDENTITY: AugSpec = AugSpec {
        flip: Flip::None,
        rotation: Rotation::R0,
        scale: Scale::One,
    };

    pub const COMBINATIONS: usize = 36;

    /// The `index`-th of the 36 combinations (flip-major, then rotation, then scale).
    pub fn from_index(index: usize) -> Self {
        assert!(index < Self::COMBINATIONS);
        AugSpec {
            flip: FLIPS[index / 12],
            rotation: ROTATIONS[(index / 3) % 4],
            scale: SCALES[index % 3],
        }
    }

    pub fn index(&self) -> usize {
        let f = FLIPS.iter().position(|f| *f == self.flip).unwrap();
        let r = self.rotation.quarter_turns();
        let s = SCALES.iter().position(|s| *s == self.scale).unwrap();
        f * 12 + r * 3 + s
    }

    pub fn is_permutation(&self) -> bool {
        self.scale == Scale::One
    }

    /// Dimensions of the view produced from a `width x height` source.
    pub fn view_dims(&self, width: usize, height: usize) -> (usize, usize) {
        let (w, h) = self.rotated_dims(width, height);
        (self.scale.apply_extent(w), self.scale.apply_extent(h))
    }

    fn rotated_dims(&self, width: usize, height: usize) -> (usize, usize) {
        if self.rotation.quarter_turns() % 2 == 1 {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Maps a source pixel to its view pixel (scaled coordinates rounded to the nearest pixel).
    pub fn map_point(&self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
        let (fx, fy) = flip_coords(self.flip, x, y, width, height);
        let (rx, ry) = rotate_coords(self.rotation.quarter_turns(), fx, fy, width, height);
        let (rw, rh) = self.rotated_dims(width, height);
        if self.scale == Scale::One {
            return (rx, ry);
        }
        let (vw, vh) = self.view_dims(width, height);
        let sx = vw as f64 / rw as f64;
        let sy = vh as f64 / rh as f64;
        let px = (rx as f64 * sx).round().min((vw - 1) as f64);
        let py = (ry as f64 * sy).round().min((vh - 1) as f64);
        (px as usize, py as usize)
    }

    /// Maps a source box to the view frame. Permutation specs map it
    /// exactly; scaled edges are floored/ceiled outward.
    pub fn map_box(&self, b: &BBox, width: usize, height: usize) -> BBox {
        let corners = [
            (b.x0, b.y0),
            (b.x1 - 1, b.y0),
            (b.x0, b.y1 - 1),
            (b.x1 - 1, b.y1 - 1),
        ];
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0;
        let mut y1 = 0;
        for (cx, cy) in corners {
            let (fx, fy) = flip_coords(self.flip, cx, cy, width, height);
            let (rx, ry) = rotate_coords(self.rotation.quarter_turns(), fx, fy, width, height);
            x0 = x0.min(rx);
            y0 = y0.min(ry);
            x1 = x1.max(rx + 1);
            y1 = y1.max(ry + 1);
        }
        if self.scale == Scale::One {
            return BBox::new(x0, y0, x1, y1);
        }
        let (rw, rh) = self.rotated_dims(width, height);
        let (vw, vh) = self.view_dims(width, height);
        let sx = vw as f64 / rw as f64;
        let sy = vh as f64 / rh as f64;
        let nx0 = ((x0 as f64 * sx).floor() as usize).min(vw - 1);
        let ny0 = ((y0 as f64 * sy).floor() as usize).min(vh - 1);
        let nx1 = ((x1 as f64 * sx).ceil() as usize).clamp(nx0 + 1, vw);
        let ny1 = ((y1 as f64 * sy).ceil() as usize).clamp(ny0 + 1, vh);
        BBox::new(nx0, ny0, nx1, ny1)
    }
}

fn flip_coords(flip: Flip, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
    match flip {
        Flip::None => (x, y),
        Flip::Horizontal => (width - 1 - x, y),
        Flip::Vertical => (x, height - 1 - y),
    }
}

/// Clockwise rotation by `turns` quarter turns of a point in a `width x height` frame.
fn rotate_coords(turns: usize, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
    match turns % 4 {
        0 => (x, y),
        1 => (height - 1 - y, x),
        2 => (width - 1 - x, height - 1 - y),
        _ => (y, width - 1 - x),
    }
}

/// Draws `k` views; slot 0 is always the identity, the rest are uniform
/// over the 36 combinations with replacement.
pub fn sample_augs(k: usize, seed: u64) -> Vec<AugSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(k);
    if k == 0 {
        return specs;
    }
    specs.push(AugSpec::IDENTITY);
    for _ in 1..k {
        specs.push(AugSpec::from_index(rng.gen_range(0..AugSpec::COMBINATIONS)));
    }
    specs
}

fn flip_mask(mask: &GrayMask, flip: Flip) -> GrayMask {
    if flip == Flip::None {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = flip_coords(flip, x, y, w, h);
            out[ty * w + tx] = mask.get(x, y);
        }
    }
    GrayMask::new(w, h, out).expect("permutation preserves validity")
}

fn rotate_mask(mask: &GrayMask, turns: usize) -> GrayMask {
    if turns.is_multiple_of(4) {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let (nw, nh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = rotate_coords(turns, x, y, w, h);
            out[ty * nw + tx] = mask.get(x, y);
        }
    }
    GrayMask::new(nw, nh, out).expect("permutation preserves validity")
}

/// Bilinear resampling; output pixel `d` samples source position
/// `d * in / out`, clamped to the last source pixel.
pub fn resize_bilinear(mask: &GrayMask, new_w: usize, new_h: usize) -> GrayMask {
    let (w, h) = mask.dims();
    if (w, h) == (new_w, new_h) {
        return mask.clone();
    }
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = (dst as f64 * scale).min((len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    GrayMask::from_fn(new_w, new_h, |x, y| {
        let (x0, x1, fx) = axis(x, sx, w);
        let (y0, y1, fy) = axis(y, sy, h);
        let top = mask.get(x0, y0) as f64 * (1.0 - fx) + mask.get(x1, y0) as f64 * fx;
        let bottom = mask.get(x0, y1) as f64 * (1.0 - fx) + mask.get(x1, y1) as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

pub fn apply_spec(mask: &GrayMask, spec: &AugSpec) -> GrayMask {
    let flipped = flip_mask(mask, spec.flip);
    let rotated = rotate_mask(&flipped, spec.rotation.quarter_turns());
    if spec.scale == Scale::One {
        return rotated;
    }
    let (vw, vh) = spec.view_dims(mask.width(), mask.height());
    resize_bilinear(&rotated, vw, vh)
}

/// Brings a view-frame mask back to the `target_w x target_h` source frame.
pub fn invert_spec(
    mask: &GrayMask,
    spec: &AugSpec,
    target_w: usize,
    target_h: usize,
) -> Result<GrayMask> {
    let expected = spec.view_dims(target_w, target_h);
    if mask.dims() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: mask.dims(),
        });
    }
    let (rw, rh) = spec.rotated_dims(target_w, target_h);
    let unscaled = resize_bilinear(mask, rw, rh);
    let unrotated = rotate_mask(&unscaled, 4 - spec.rotation.quarter_turns());
    Ok(flip_mask(&unrotated, spec.flip))
}

/// Pixel-wise arithmetic mean.
pub fn fuse(masks: &[GrayMask]) -> Result<GrayMask> {
    let first = masks.first().ok_or(Error::EmptyInput("fuse needs at least one mask"))?;
    for m in &masks[1..] {
        first.ensure_same_dims(m)?;
    }
    let mut acc = vec![0.0f64; first.len()];
    for m in masks {
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += v as f64;
        }
    }
    let n = masks.len() as f64;
    let values = acc.into_iter().map(|s| (s / n).clamp(0.0, 1.0) as f32).collect();
    GrayMask::new(first.width(), first.height(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(w: usize, h: usize) -> GrayMask {
        let n = (w * h) as f32;
        GrayMask::from_fn(w, h, |x, y| (y * w + x) as f32 / n)
    }

    fn blob(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> GrayMask {
        GrayMask::from_fn(w, h, |x, y| {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp() as f32
        })
    }

    #[test]
    fn identity_forced_in_slot_zero() {
        for seed in 0..20 {
            assert_eq!(sample_augs(1, seed), vec![AugSpec::IDENTITY]);
        }
        assert_eq!(sample_augs(12, 7), sample_augs(12, 7));
    }

    #[test]
    fn sampler_is_uniform_over_combinations() {
        let specs = sample_augs(10_000, 1);
        let mut counts = [0usize; AugSpec::COMBINATIONS];
        for s in &specs[1..] {
            counts[s.index()] += 1;
        }
        let n = (specs.len() - 1) as f64;
        let expected = n / 36.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 35 degrees of freedom, 0.999 quantile is about 66.6
        assert!(chi2 < 66.6, "chi-square {chi2}");
        for &c in &counts {
            assert!((c as f64 / n - 1.0 / 36.0).abs() <= 0.01);
        }
    }

    #[test]
    fn rotate_90_matches_index_map() {
        let m = labeled(4, 2);
        let spec = AugSpec {
            rotation: Rotation::R90,
            ..AugSpec::IDENTITY
        };
        let r = apply_spec(&m, &spec);
        assert_eq!(r.dims(), (2, 4));
        // clockwise: the bottom-left source pixel lands top-left
        for y in 0..2 {
            for x in 0..4 {
                assert_eq!(r.get(1 - y, x), m.get(x, y));
            }
        }
        assert_eq!(r.get(0, 0), m.get(0, 1));
        assert_eq!(r.get(1, 0), m.get(0, 0));
    }

    #[test]
    fn scale_of_constant_is_constant() {
        let m = GrayMask::filled(5, 3, 0.3);
        let s = apply_spec(
            &m,
            &AugSpec {
                scale: Scale::Double,
                ..AugSpec::IDENTITY
            },
        );
        assert_eq!(s.dims(), (10, 6));
        assert!(s.values().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let tiny = apply_spec(
            &GrayMask::filled(1, 1, 0.7),
            &AugSpec {
                scale: Scale::Half,
                ..AugSpec::IDENTITY
            },
        );
        assert_eq!(tiny.dims(), (1, 1));
    }

    #[test]
    fn hflip_then_180_inverts_exactly() {
        let m = labeled(5, 3);
        let spec = AugSpec {
            flip: Flip::Horizontal,
            rotation: Rotation::R180,
            scale: Scale::One,
        };
        let v = apply_spec(&m, &spec);
        assert_eq!(invert_spec(&v, &spec, 5, 3).unwrap(), m);
    }

    #[test]
    fn double_scale_roundtrip_on_smooth_blobs() {
        let spec = AugSpec {
            scale: Scale::Double,
            ..AugSpec::IDENTITY
        };
        for sigma in [2.0, 3.0, 5.0] {
            for (cx, cy) in [(10.0, 12.0), (3.5, 20.0), (16.0, 16.0)] {
                let m = blob(32, 28, cx, cy, sigma);
                for rot in ROTATIONS {
                    let s = AugSpec { rotation: rot, ..spec };
                    let back = invert_spec(&apply_spec(&m, &s), &s, 32, 28).unwrap();
                    let err = back
                        .values()
                        .iter()
                        .zip(m.values())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f32, f32::max);
                    assert!(err <= 0.02, "sigma {sigma} err {err}");
                }
            }
        }
    }

    #[test]
    fn invert_rejects_wrong_dims() {
        let spec = AugSpec {
            rotation: Rotation::R90,
            ..AugSpec::IDENTITY
        };
        let m = GrayMask::filled(4, 2, 0.0);
        assert!(matches!(
            invert_spec(&m, &spec, 4, 2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fuse_examples() {
        let a = GrayMask::filled(3, 3, 0.0);
        let b = GrayMask::filled(3, 3, 1.0);
        assert!(fuse(&[a.clone(), b]).unwrap().values().iter().all(|&v| v == 0.5));
        let same = vec![labeled(3, 2); 5];
        let fused = fuse(&same).unwrap();
        for (x, y) in fused.values().iter().zip(same[0].values()) {
            assert!((x - y).abs() < 1e-7);
        }
        let three: Vec<_> = [0.2f32, 0.5, 0.8]
            .iter()
            .map(|&v| GrayMask::filled(2, 2, v))
            .collect();
        assert!(fuse(&three).unwrap().values().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(matches!(fuse(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            fuse(&[a, GrayMask::filled(2, 3, 0.0)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn spec_json_shape() {
        let spec = AugSpec {
            flip: Flip::Vertical,
            rotation: Rotation::R270,
            scale: Scale::Half,
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"flip":"v","rot":270,"scale":0.5}"#);
        let back: AugSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<AugSpec>(r#"{"flip":"none","rot":45,"scale":1.0}"#).is_err());
    }

    #[test]
    fn mapped_points_track_pixels() {
        let m = labeled(6, 4);
        for idx in 0..AugSpec::COMBINATIONS {
            let spec = AugSpec::from_index(idx);
            if !spec.is_permutation() {
                continue;
            }
            let view = apply_spec(&m, &spec);
            for y in 0..4 {
                for x in 0..6 {
                    let (vx, vy) = spec.map_point(x, y, 6, 4);
                    assert_eq!(view.get(vx, vy), m.get(x, y));
                }
            }
        }
    }

    fn arb_mask() -> impl Strategy<Value = GrayMask> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            prop::collection::vec(0.0f32..=1.0, w * h)
                .prop_map(move |v| GrayMask::new(w, h, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn permutation_specs_invert_exactly(m in arb_mask(), idx in 0usize..36) {
            let spec = AugSpec::from_index(idx);
            let view = apply_spec(&m, &spec);
            prop_assert_eq!(view.dims(), spec.view_dims(m.width(), m.height()));
            if spec.is_permutation() {
                let mut a: Vec<u32> = view.values().iter().map(|v| v.to_bits()).collect();
                let mut b: Vec<u32> = m.values().iter().map(|v| v.to_bits()).collect();
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
                prop_assert_eq!(invert_spec(&view, &spec, m.width(), m.height()).unwrap(), m);
            }
        }

        #[test]
        fn fuse_is_bounded_and_order_free(ms in prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 6), 1..6)) {
            let masks: Vec<GrayMask> = ms.iter().map(|v| GrayMask::new(3, 2, v.clone()).unwrap()).collect();
            let fused = fuse(&masks).unwrap();
            let mut rev = masks.clone();
            rev.reverse();
            let fused_rev = fuse(&rev).unwrap();
            for i in 0..6 {
                let lo = masks.iter().map(|m| m.values()[i]).fold(f32::INFINITY, f32::min);
                let hi = masks.iter().map(|m| m.values()[i]).fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(fused.values()[i] >= lo && fused.values()[i] <= hi);
                prop_assert!((fused.values()[i] - fused_rev.values()[i]).abs() <= 1e-7);
            }
        }
    }
}
