//! Multi-density prompt extraction from a coarse mask: nine-block point
//! prompts, a per-direction expanded box and a hard mask prompt.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    load_mask, min_bounding_box, save_mask, BBox, GrayMask, Label, PixelClass, SparseAnnotation,
    Thresholds,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Foreground,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Point {
    pub x: usize,
    pub y: usize,
    pub polarity: Polarity,
}

impl Point {
    pub fn fg(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            polarity: Polarity::Foreground,
        }
    }

    pub fn bg(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            polarity: Polarity::Background,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub thresholds: Thresholds,
    /// Upper bound on points per polarity.
    pub max_points: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            max_points: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub fg_points: Vec<Point>,
    pub bg_points: Vec<Point>,
    pub bbox: BBox,
    pub mask_prompt: GrayMask,
    /// Set when the source mask had no Zero pixel at all.
    pub bg_missing: bool,
}

/// On-disk JSON form; the mask prompt lives in a separate MSKF file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSetJson {
    pub fg: Vec<[usize; 2]>,
    pub bg: Vec<[usize; 2]>,
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    pub mask: String,
    pub bg_missing: bool,
}

impl PromptSet {
    pub fn to_json(&self, mask_path: &str) -> PromptSetJson {
        PromptSetJson {
            fg: self.fg_points.iter().map(|p| [p.x, p.y]).collect(),
            bg: self.bg_points.iter().map(|p| [p.x, p.y]).collect(),
            bbox: [self.bbox.x0, self.bbox.y0, self.bbox.x1, self.bbox.y1],
            mask: mask_path.to_string(),
            bg_missing: self.bg_missing,
        }
    }

    /// Writes `json_path` plus the mask prompt at `mask_path`. The JSON
    /// records `mask_path` relative to the JSON file when they share a directory.
    pub fn save(&self, json_path: &Path, mask_path: &Path) -> Result<()> {
        save_mask(&self.mask_prompt, mask_path)?;
        let recorded = match (json_path.parent(), mask_path.parent()) {
            (Some(a), Some(b)) if a == b => mask_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            _ => mask_path.to_string_lossy().into_owned(),
        };
        let text = serde_json::to_string_pretty(&self.to_json(&recorded))
            .map_err(|e| Error::json(json_path, e))?;
        fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let raw: PromptSetJson =
            serde_json::from_str(&text).map_err(|e| Error::json(json_path, e))?;
        let mut mask_path = PathBuf::from(&raw.mask);
        if mask_path.is_relative() {
            if let Some(dir) = json_path.parent() {
                mask_path = dir.join(mask_path);
            }
        }
        let mask_prompt = load_mask(&mask_path)?;
        let [x0, y0, x1, y1] = raw.bbox;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::InvalidPrompts(format!("degenerate box {:?}", raw.bbox)));
        }
        let set = PromptSet {
            fg_points: raw.fg.iter().map(|&[x, y]| Point::fg(x, y)).collect(),
            bg_points: raw.bg.iter().map(|&[x, y]| Point::bg(x, y)).collect(),
            bbox: BBox::new(x0, y0, x1, y1),
            mask_prompt,
            bg_missing: raw.bg_missing,
        };
        set.validate(set.mask_prompt.width(), set.mask_prompt.height())?;
        Ok(set)
    }

    /// Checks every coordinate against a `width x height` frame.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for p in self.fg_points.iter().chain(&self.bg_points) {
            if p.x >= width || p.y >= height {
                return Err(Error::InvalidPrompts(format!(
                    "point ({}, {}) outside {}x{}",
                    p.x, p.y, width, height
                )));
            }
        }
        if !self.bbox.fits(width, height) {
            return Err(Error::InvalidPrompts(format!(
                "box {:?} outside {}x{}",
                self.bbox, width, height
            )));
        }
        if self.mask_prompt.dims() != (width, height) {
            return Err(Error::InvalidPrompts(format!(
                "mask prompt is {:?}, frame is {}x{}",
                self.mask_prompt.dims(),
                width,
                height
            )));
        }
        Ok(())
    }
}

/// Cut positions `start + floor(k * extent / 3)` for `k = 0..=3`.
fn thirds(start: usize, extent: usize) -> [usize; 4] {
    [0, 1, 2, 3].map(|k| start + k * extent / 3)
}

/// 3x3 partition of a box, row-major, with empty cells dropped.
pub fn nine_blocks(b: &BBox) -> Vec<BBox> {
    let xs = thirds(b.x0, b.width());
    let ys = thirds(b.y0, b.height());
    let mut blocks = Vec::with_capacity(9);
    for j in 0..3 {
        for i in 0..3 {
            if xs[i] < xs[i + 1] && ys[j] < ys[j + 1] {
                blocks.push(BBox::new(xs[i], ys[j], xs[i + 1], ys[j + 1]));
            }
        }
    }
    blocks
}

/// Squared distance from pixel `(x, y)` to the block center, times four so
/// the half-integer center stays in integer arithmetic.
#[inline]
fn center_dist4(b: &BBox, x: usize, y: usize) -> i64 {
    let dx = 2 * x as i64 - (b.x0 + b.x1 - 1) as i64;
    let dy = 2 * y as i64 - (b.y0 + b.y1 - 1) as i64;
    dx * dx + dy * dy
}

/// Row-major argmin over `candidates`; the first minimum wins ties.
fn first_min_by_key(
    candidates: impl Iterator<Item = (usize, usize)>,
    key: impl Fn(usize, usize) -> i64,
) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), i64)> = None;
    for (x, y) in candidates {
        let k = key(x, y);
        if best.is_none_or(|(_, bk)| k < bk) {
            best = Some(((x, y), k));
        }
    }
    best.map(|(p, _)| p)
}

fn image_pixels(width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..height).flat_map(move |y| (0..width).map(move |x| (x, y)))
}

/// One foreground point per block: the One pixel nearest the block center,
/// inside the block when possible, otherwise anywhere in the image.
pub fn extract_fg_points(mask: &GrayMask, blocks: &[BBox], hi: f32) -> Result<Vec<Point>> {
    let (w, h) = mask.dims();
    let is_one = |x: usize, y: usize| mask.get(x, y) >= hi;
    if !image_pixels(w, h).any(|(x, y)| is_one(x, y)) {
        return Err(Error::NoForeground);
    }
    let points = blocks
        .iter()
        .map(|b| {
            let dist = |x, y| center_dist4(b, x, y);
            let (x, y) = first_min_by_key(b.pixels().filter(|&(x, y)| is_one(x, y)), dist)
                .or_else(|| {
                    first_min_by_key(image_pixels(w, h).filter(|&(x, y)| is_one(x, y)), dist)
                })
                .expect("image has a One pixel");
            Point::fg(x, y)
        })
        .collect();
    Ok(points)
}

const UNREACHED: i64 = i64::MAX / 4;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[i64], out: &mut [i64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|&val| val < UNREACHED) {
        Some(i) => i,
        None => {
            out.fill(UNREACHED);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= UNREACHED {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64
                / (2 * q - 2 * p) as f64;
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *slot = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` seed;
/// `None` when there are no seeds.
pub fn squared_distance_transform(seeds: &[bool], width: usize, height: usize) -> Option<Vec<i64>> {
    if !seeds.iter().any(|&s| s) {
        return None;
    }
    let mut grid: Vec<i64> = seeds
        .iter()
        .map(|&s| if s { 0 } else { UNREACHED })
        .collect();
    let mut col = vec![0i64; height];
    let mut col_out = vec![0i64; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0i64; width];
    for y in 0..height {
        let row = &grid[y * width..(y + 1) * width];
        edt_1d(row, &mut row_out);
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    Some(grid)
}

/// One background point per block: the Zero pixel farthest from every One
/// pixel (from the image center when there is no One pixel), inside the
/// block when possible, otherwise anywhere in the image.
pub fn extract_bg_points(mask: &GrayMask, blocks: &[BBox], lo: f32, hi: f32) -> Result<Vec<Point>> {
    let (w, h) = mask.dims();
    let is_zero = |x: usize, y: usize| mask.get(x, y) <= lo;
    if !image_pixels(w, h).any(|(x, y)| is_zero(x, y)) {
        return Err(Error::NoBackground);
    }
    let ones: Vec<bool> = mask.values().iter().map(|&v| v >= hi).collect();
    let dist: Vec<i64> = match squared_distance_transform(&ones, w, h) {
        Some(d) => d,
        None => image_pixels(w, h)
            .map(|(x, y)| {
                // doubled coordinates keep the center integral
                let dx = 2 * x as i64 - (w as i64 - 1);
                let dy = 2 * y as i64 - (h as i64 - 1);
                dx * dx + dy * dy
            })
            .collect(),
    };
    let neg_dist = |x: usize, y: usize| -dist[y * w + x];
    let points = blocks
        .iter()
        .map(|b| {
            let (x, y) = first_min_by_key(b.pixels().filter(|&(x, y)| is_zero(x, y)), neg_dist)
                .or_else(|| {
                    first_min_by_key(image_pixels(w, h).filter(|&(x, y)| is_zero(x, y)), neg_dist)
                })
                .expect("image has a Zero pixel");
            Point::bg(x, y)
        })
        .collect();
    Ok(points)
}

fn round_half_away(v: f64) -> usize {
    // f64::round already rounds half away from zero
    v.round().max(0.0) as usize
}

fn ambiguous_fraction(mask: &GrayMask, region: BBox, t: &Thresholds) -> f64 {
    let ambiguous = region
        .pixels()
        .filter(|&(x, y)| t.classify(mask.get(x, y)) == PixelClass::Ambiguous)
        .count();
    ambiguous as f64 / region.area() as f64
}

/// Per-direction expansion coefficients `(left, right, up, down)`.
pub fn expansion_coefficients(mask: &GrayMask, b: &BBox, t: &Thresholds) -> [f64; 4] {
    let xs = thirds(b.x0, b.width());
    let ys = thirds(b.y0, b.height());
    // outermost non-empty column / row of the 3x3 grid on each side
    let first_col = (0..3).find(|&i| xs[i] < xs[i + 1]).unwrap();
    let last_col = (0..3).rev().find(|&i| xs[i] < xs[i + 1]).unwrap();
    let first_row = (0..3).find(|&j| ys[j] < ys[j + 1]).unwrap();
    let last_row = (0..3).rev().find(|&j| ys[j] < ys[j + 1]).unwrap();
    let left = BBox::new(xs[first_col], b.y0, xs[first_col + 1], b.y1);
    let right = BBox::new(xs[last_col], b.y0, xs[last_col + 1], b.y1);
    let up = BBox::new(b.x0, ys[first_row], b.x1, ys[first_row + 1]);
    let down = BBox::new(b.x0, ys[last_row], b.x1, ys[last_row + 1]);
    [left, right, up, down].map(|r| ambiguous_fraction(mask, r, t))
}

/// Pushes each edge outward by `C_e * extent / 3` (rounded half away from
/// zero), clamped to the image.
pub fn expand_box(mask: &GrayMask, b: &BBox, lo: f32, hi: f32) -> Result<BBox> {
    let t = Thresholds::new(lo, hi)?;
    let [left, right, up, down] = expansion_coefficients(mask, b, &t);
    let block_w = b.width() as f64 / 3.0;
    let block_h = b.height() as f64 / 3.0;
    let (w, h) = mask.dims();
    Ok(BBox::new(
        b.x0.saturating_sub(round_half_away(left * block_w)),
        b.y0.saturating_sub(round_half_away(up * block_h)),
        (b.x1 + round_half_away(right * block_w)).min(w),
        (b.y1 + round_half_away(down * block_h)).min(h),
    ))
}

/// 1 on One pixels, 0 elsewhere.
pub fn mask_prompt(mask: &GrayMask, hi: f32) -> GrayMask {
    mask.map(|v| if v >= hi { 1.0 } else { 0.0 })
}

fn dedup_first(points: Vec<Point>, limit: usize) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out.truncate(limit);
    out
}

pub fn extract_prompts(coarse: &GrayMask, config: &PromptConfig) -> Result<PromptSet> {
    let t = config.thresholds;
    t.validate()?;
    let bbox = min_bounding_box(coarse, t.hi)?;
    let blocks = nine_blocks(&bbox);
    let fg = extract_fg_points(coarse, &blocks, t.hi)?;
    let (bg, bg_missing) = match extract_bg_points(coarse, &blocks, t.lo, t.hi) {
        Ok(points) => (points, false),
        Err(Error::NoBackground) => {
            log::warn!("no background pixel in coarse mask; bg prompts left empty");
            (Vec::new(), true)
        }
        Err(e) => return Err(e),
    };
    Ok(PromptSet {
        fg_points: dedup_first(fg, config.max_points),
        bg_points: dedup_first(bg, config.max_points),
        bbox: expand_box(coarse, &bbox, t.lo, t.hi)?,
        mask_prompt: mask_prompt(coarse, t.hi),
        bg_missing,
    })
}

/// Nine-block points from a rasterized scribble: foreground points on
/// scribbled-foreground pixels, background points on scribbled-background
/// pixels farthest from the foreground scribble.
pub fn scribble_points(ann: &SparseAnnotation, config: &PromptConfig) -> Result<(Vec<Point>, Vec<Point>)> {
    let (w, h) = ann.dims();
    let fg_mask = GrayMask::from_fn(w, h, |x, y| match ann.get(x, y) {
        Label::Foreground => 1.0,
        Label::Background => 0.0,
        Label::Unknown => 0.5,
    });
    let t = config.thresholds;
    let bbox = min_bounding_box(&fg_mask, t.hi)?;
    let blocks = nine_blocks(&bbox);
    let fg = extract_fg_points(&fg_mask, &blocks, t.hi)?;
    let bg = match extract_bg_points(&fg_mask, &blocks, t.lo, t.hi) {
        Ok(p) => p,
        Err(Error::NoBackground) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok((
        dedup_first(fg, config.max_points),
        dedup_first(bg, config.max_points),
    ))
}
