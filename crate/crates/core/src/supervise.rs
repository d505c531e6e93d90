//! Image-level selection, pixel-level weighting, losses and the EMA update.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{self, binary_entropy};
use crate::error::{Error, Result};
use crate::raster::{GrayMask, Label, SparseAnnotation};

pub const DEFAULT_ETA: f64 = 0.996;
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionThresholds {
    pub tau_a: f64,
    pub tau_r: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self { tau_a: 0.1, tau_r: 0.5 }
    }
}

impl SelectionThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.tau_a > 0.0 && self.tau_r > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "selection thresholds must be positive (tau_a={}, tau_r={})",
                self.tau_a, self.tau_r
            )))
        }
    }
}

pub fn select(mask: &GrayMask, th: &SelectionThresholds, theta: f64) -> bool {
    entropy::u_abs(mask, theta) < th.tau_a && entropy::u_rel(mask, theta).lt(th.tau_r)
}

/// `1 - E(v)` per pixel when the mask is selected, zero otherwise.
pub fn weight_map(mask: &GrayMask, th: &SelectionThresholds, theta: f64) -> GrayMask {
    if select(mask, th, theta) {
        mask.map(|v| (1.0 - binary_entropy(v as f64)) as f32)
    } else {
        GrayMask::filled(mask.width(), mask.height(), 0.0)
    }
}

#[inline]
fn clamp_p(p: f32) -> f64 {
    (p as f64).clamp(CE_EPS, 1.0 - CE_EPS)
}

#[inline]
fn ce_pixel(p: f32, t: f32) -> f64 {
    let p = clamp_p(p);
    let t = t as f64;
    -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
}

fn check3(pred: &GrayMask, target: &GrayMask, weight: &GrayMask) -> Result<()> {
    pred.ensure_same_dims(target)?;
    pred.ensure_same_dims(weight)
}

/// Weighted binary cross-entropy (natural log), averaged over all pixels.
pub fn ce_loss(pred: &GrayMask, target: &GrayMask, weight: &GrayMask) -> Result<f64> {
    check3(pred, target, weight)?;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(target.values())
        .zip(weight.values())
        .map(|((&p, &t), &w)| w as f64 * ce_pixel(p, t))
        .sum();
    Ok(sum / pred.len() as f64)
}

fn iou_sums(pred: &GrayMask, target: &GrayMask, weight: &GrayMask) -> (f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for ((&p, &t), &w) in pred.values().iter().zip(target.values()).zip(weight.values()) {
        let (p, t, w) = (p as f64, t as f64, w as f64);
        inter += w * p * t;
        union += w * (p + t - p * t);
    }
    (inter, union)
}

/// `1 - sum(w p t) / sum(w (p + t - p t))`, zero when the union vanishes.
pub fn iou_loss(pred: &GrayMask, target: &GrayMask, weight: &GrayMask) -> Result<f64> {
    check3(pred, target, weight)?;
    let (inter, union) = iou_sums(pred, target, weight);
    if union == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - inter / union).clamp(0.0, 1.0))
}

/// Gradient of [`ce_loss`] with respect to each prediction pixel.
///
/// Pixels outside the clamp range get zero gradient.
pub fn ce_loss_grad(pred: &GrayMask, target: &GrayMask, weight: &GrayMask) -> Result<Vec<f64>> {
    check3(pred, target, weight)?;
    let n = pred.len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .zip(weight.values())
        .map(|((&p, &t), &w)| {
            let p = p as f64;
            if p <= CE_EPS || p >= 1.0 - CE_EPS {
                return 0.0;
            }
            let t = t as f64;
            w as f64 * (-t / p + (1.0 - t) / (1.0 - p)) / n
        })
        .collect())
}

/// Gradient of [`iou_loss`] with respect to each prediction pixel.
pub fn iou_loss_grad(pred: &GrayMask, target: &GrayMask, weight: &GrayMask) -> Result<Vec<f64>> {
    check3(pred, target, weight)?;
    let (inter, union) = iou_sums(pred, target, weight);
    if union == 0.0 {
        return Ok(vec![0.0; pred.len()]);
    }
    let u2 = union * union;
    Ok(target
        .values()
        .iter()
        .zip(weight.values())
        .map(|(&t, &w)| {
            let (t, w) = (t as f64, w as f64);
            -(w * t * union - inter * w * (1.0 - t)) / u2
        })
        .collect())
}

/// Cross-entropy averaged over the labeled pixels of a sparse annotation.
pub fn partial_ce(pred: &GrayMask, ann: &SparseAnnotation) -> Result<f64> {
    if pred.dims() != ann.dims() {
        return Err(Error::DimensionMismatch {
            expected: pred.dims(),
            actual: ann.dims(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&p, label) in pred.values().iter().zip(ann.labels()) {
        let t = match label {
            Label::Foreground => 1.0,
            Label::Background => 0.0,
            Label::Unknown => continue,
        };
        sum += ce_pixel(p, t);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(sum / count as f64)
}

/// Gradient of [`partial_ce`] with respect to each prediction pixel.
pub fn partial_ce_grad(pred: &GrayMask, ann: &SparseAnnotation) -> Result<Vec<f64>> {
    if pred.dims() != ann.dims() {
        return Err(Error::DimensionMismatch {
            expected: pred.dims(),
            actual: ann.dims(),
        });
    }
    let count = ann.labeled_count();
    if count == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(pred
        .values()
        .iter()
        .zip(ann.labels())
        .map(|(&p, label)| {
            let t = match label {
                Label::Foreground => 1.0,
                Label::Background => 0.0,
                Label::Unknown => return 0.0,
            };
            let p = p as f64;
            if p <= CE_EPS || p >= 1.0 - CE_EPS {
                return 0.0;
            }
            (-t / p + (1.0 - t) / (1.0 - p)) / count as f64
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoTerm {
    pub selected: bool,
    pub ce: f64,
    pub iou: f64,
}

/// Per-term breakdown of a weak or semi loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pseudo: Vec<PseudoTerm>,
    pub pseudo_total: f64,
    pub partial_ce: Option<f64>,
    pub full_ce: Option<f64>,
    pub full_iou: Option<f64>,
    pub total: f64,
}

/// Sum over stored pseudo-labels of weighted ce + weighted iou.
pub fn pseudo_terms(
    pred: &GrayMask,
    pool: &[GrayMask],
    th: &SelectionThresholds,
    theta: f64,
) -> Result<(Vec<PseudoTerm>, f64)> {
    let mut terms = Vec::with_capacity(pool.len());
    let mut total = 0.0;
    for label in pool {
        let w = weight_map(label, th, theta);
        let term = PseudoTerm {
            selected: select(label, th, theta),
            ce: ce_loss(pred, label, &w)?,
            iou: iou_loss(pred, label, &w)?,
        };
        total += term.ce + term.iou;
        terms.push(term);
    }
    Ok((terms, total))
}

/// Weak loss with its terms. An annotation without labeled pixels drops the
/// partial term, as long as the pool is not empty.
pub fn weak_breakdown(
    pred: &GrayMask,
    pool: &[GrayMask],
    ann: &SparseAnnotation,
    th: &SelectionThresholds,
    theta: f64,
) -> Result<LossBreakdown> {
    let (pseudo, pseudo_total) = pseudo_terms(pred, pool, th, theta)?;
    let partial = if ann.labeled_count() == 0 && !pool.is_empty() {
        None
    } else {
        Some(partial_ce(pred, ann)?)
    };
    Ok(LossBreakdown {
        total: pseudo_total + partial.unwrap_or(0.0),
        pseudo,
        pseudo_total,
        partial_ce: partial,
        ..Default::default()
    })
}

pub fn loss_weak(
    pred: &GrayMask,
    pool: &[GrayMask],
    ann: &SparseAnnotation,
    th: &SelectionThresholds,
    theta: f64,
) -> Result<f64> {
    Ok(weak_breakdown(pred, pool, ann, th, theta)?.total)
}

pub fn semi_breakdown(
    pred: &GrayMask,
    pool: &[GrayMask],
    full_label: Option<&GrayMask>,
    th: &SelectionThresholds,
    theta: f64,
) -> Result<LossBreakdown> {
    if pool.is_empty() && full_label.is_none() {
        return Err(Error::EmptyInput("pool snapshot and full label"));
    }
    let (pseudo, pseudo_total) = pseudo_terms(pred, pool, th, theta)?;
    let mut out = LossBreakdown {
        pseudo,
        pseudo_total,
        total: pseudo_total,
        ..Default::default()
    };
    if let Some(gt) = full_label {
        let ones = GrayMask::filled(pred.width(), pred.height(), 1.0);
        let ce = ce_loss(pred, gt, &ones)?;
        let iou = iou_loss(pred, gt, &ones)?;
        out.full_ce = Some(ce);
        out.full_iou = Some(iou);
        out.total += ce + iou;
    }
    Ok(out)
}

pub fn loss_semi(
    pred: &GrayMask,
    pool: &[GrayMask],
    full_label: Option<&GrayMask>,
    th: &SelectionThresholds,
    theta: f64,
) -> Result<f64> {
    Ok(semi_breakdown(pred, pool, full_label, th, theta)?.total)
}

/// Ordered named flat parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    arrays: Vec<(String, Vec<f64>)>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_arrays(arrays: Vec<(String, Vec<f64>)>) -> Self {
        Self { arrays }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.arrays.push((name.into(), values));
    }

    pub fn arrays(&self) -> &[(String, Vec<f64>)] {
        &self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.arrays.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn ensure_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.arrays.len() != other.arrays.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} arrays vs {}",
                self.arrays.len(),
                other.arrays.len()
            )));
        }
        for ((na, va), (nb, vb)) in self.arrays.iter().zip(&other.arrays) {
            if na != nb || va.len() != vb.len() {
                return Err(Error::ShapeMismatch(format!(
                    "array {na:?}[{}] vs {nb:?}[{}]",
                    va.len(),
                    vb.len()
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.total_len() * 4);
        out.extend_from_slice(b"PVEC");
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != b"PVEC" {
            return Err(Error::format(path, "bad magic"));
        }
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "array name is not UTF-8"))?
                .to_string();
            let len = r.u32()? as usize;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format(path, "length overflow"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            arrays.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self { arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// `eta * teacher + (1 - eta) * student`, elementwise.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, eta: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    teacher.ensure_compatible(student)?;
    let arrays = teacher
        .arrays
        .iter()
        .zip(&student.arrays)
        .map(|((name, t), (_, s))| {
            let v = t.iter().zip(s).map(|(&a, &b)| eta * a + (1.0 - eta) * b).collect();
            (name.clone(), v)
        })
        .collect();
    Ok(ParamVector { arrays })
}
