//! Hybrid-granularity feature grouping: prototype attention, GRU prototype
//! updates, prototype broadcast, and a gated two-stage aggregation, with an
//! analytic backward pass and a finite-difference checker.
//!
//! Feature maps are `H*W` rows of `C` channels (row-major pixels,
//! channel-last). All math is f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervise::ParamVector;

pub const DEFAULT_T: usize = 3;
pub const DEFAULT_N1: usize = 2;
pub const DEFAULT_N2: usize = 4;
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative gradient errors.
pub const REL_FLOOR: f64 = 1e-3;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    fn random(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    fn expect_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.rows == rows && self.cols == cols {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: expected {rows}x{cols}, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    fn add(&self, other: &Mat) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a * b^T`.
fn mul_nt(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a * b`.
fn mul_nn(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let x = a.at(i, k);
            if x == 0.0 {
                continue;
            }
            let br = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, y) in orow.iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a^T * b`.
fn mul_tn(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let ar = a.row(k);
        let br = b.row(k);
        for (i, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, y) in orow.iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum that does not depend on the order of `values`.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} feature map",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn random(height: usize, width: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mat::random(height * width, channels, 1.0, &mut rng);
        Self {
            height,
            width,
            channels,
            data: m.data,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn to_mat(&self) -> Mat {
        Mat {
            rows: self.pixels(),
            cols: self.channels,
            data: self.data.clone(),
        }
    }

    fn from_mat(&self, m: Mat) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: m.data,
        }
    }

    fn same_shape(&self, other: &FeatureMap) -> Result<()> {
        if (self.height, self.width, self.channels) == (other.height, other.width, other.channels) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "feature map {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }
}

/// Per-prototype GRU weights, shared across prototypes. `w_*` act on the
/// attention readout, `u_*` on the prototype state.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Mat,
    pub u_z: Mat,
    pub b_z: Vec<f64>,
    pub w_r: Mat,
    pub u_r: Mat,
    pub b_r: Vec<f64>,
    pub w_h: Mat,
    pub u_h: Mat,
    pub b_h: Vec<f64>,
}

impl GruParams {
    fn random(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (c as f64).sqrt();
        let bias = |rng: &mut ChaCha8Rng| Mat::random(1, c, 0.1, rng).data;
        Self {
            w_z: Mat::random(c, c, s, rng),
            u_z: Mat::random(c, c, s, rng),
            b_z: bias(rng),
            w_r: Mat::random(c, c, s, rng),
            u_r: Mat::random(c, c, s, rng),
            b_r: bias(rng),
            w_h: Mat::random(c, c, s, rng),
            u_h: Mat::random(c, c, s, rng),
            b_h: bias(rng),
        }
    }

    fn zeros_like(&self) -> Self {
        let c = self.b_z.len();
        Self {
            w_z: self.w_z.zeros_like(),
            u_z: self.u_z.zeros_like(),
            b_z: vec![0.0; c],
            w_r: self.w_r.zeros_like(),
            u_r: self.u_r.zeros_like(),
            b_r: vec![0.0; c],
            w_h: self.w_h.zeros_like(),
            u_h: self.u_h.zeros_like(),
            b_h: vec![0.0; c],
        }
    }

    fn validate(&self, c: usize) -> Result<()> {
        for (m, name) in [
            (&self.w_z, "gru.w_z"),
            (&self.u_z, "gru.u_z"),
            (&self.w_r, "gru.w_r"),
            (&self.u_r, "gru.u_r"),
            (&self.w_h, "gru.w_h"),
            (&self.u_h, "gru.u_h"),
        ] {
            m.expect_shape(c, c, name)?;
        }
        for (b, name) in [(&self.b_z, "gru.b_z"), (&self.b_r, "gru.b_r"), (&self.b_h, "gru.b_h")] {
            if b.len() != c {
                return Err(Error::ShapeMismatch(format!("{name}: expected {c}, got {}", b.len())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    /// Initial prototypes, `N x C`.
    pub p0: Mat,
    /// Positional embedding, `H*W x C`.
    pub p_e: Mat,
    pub gru: GruParams,
    /// Shared `C x C/N` downsample map.
    pub down: Mat,
}

impl GroupParams {
    pub fn random(height: usize, width: usize, c: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_divisible(c, n)?;
        let s = 1.0 / (c as f64).sqrt();
        Ok(Self {
            w_q: Mat::random(c, c, s, rng),
            w_k: Mat::random(c, c, s, rng),
            w_v: Mat::random(c, c, s, rng),
            p0: Mat::random(n, c, 1.0, rng),
            p_e: Mat::random(height * width, c, 0.5, rng),
            gru: GruParams::random(c, rng),
            down: Mat::random(c, c / n, s, rng),
        })
    }

    pub fn prototypes(&self) -> usize {
        self.p0.rows
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: self.w_q.zeros_like(),
            w_k: self.w_k.zeros_like(),
            w_v: self.w_v.zeros_like(),
            p0: self.p0.zeros_like(),
            p_e: self.p_e.zeros_like(),
            gru: self.gru.zeros_like(),
            down: self.down.zeros_like(),
        }
    }

    pub fn validate(&self, pixels: usize, c: usize, n: usize) -> Result<()> {
        check_divisible(c, n)?;
        self.w_q.expect_shape(c, c, "w_q")?;
        self.w_k.expect_shape(c, c, "w_k")?;
        self.w_v.expect_shape(c, c, "w_v")?;
        self.p0.expect_shape(n, c, "p0")?;
        self.p_e.expect_shape(pixels, c, "p_e")?;
        self.down.expect_shape(c, c / n, "down")?;
        self.gru.validate(c)?;
        if self.p0.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("p0 has non-finite rows".into()));
        }
        Ok(())
    }

    fn arrays(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let g = &self.gru;
        vec![
            ("w_q", self.w_q.shape(), &self.w_q.data[..]),
            ("w_k", self.w_k.shape(), &self.w_k.data[..]),
            ("w_v", self.w_v.shape(), &self.w_v.data[..]),
            ("p0", self.p0.shape(), &self.p0.data[..]),
            ("p_e", self.p_e.shape(), &self.p_e.data[..]),
            ("gru.w_z", g.w_z.shape(), &g.w_z.data[..]),
            ("gru.u_z", g.u_z.shape(), &g.u_z.data[..]),
            ("gru.b_z", vec![g.b_z.len()], &g.b_z[..]),
            ("gru.w_r", g.w_r.shape(), &g.w_r.data[..]),
            ("gru.u_r", g.u_r.shape(), &g.u_r.data[..]),
            ("gru.b_r", vec![g.b_r.len()], &g.b_r[..]),
            ("gru.w_h", g.w_h.shape(), &g.w_h.data[..]),
            ("gru.u_h", g.u_h.shape(), &g.u_h.data[..]),
            ("gru.b_h", vec![g.b_h.len()], &g.b_h[..]),
            ("down", self.down.shape(), &self.down.data[..]),
        ]
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let g = &mut self.gru;
        vec![
            &mut self.w_q.data[..],
            &mut self.w_k.data[..],
            &mut self.w_v.data[..],
            &mut self.p0.data[..],
            &mut self.p_e.data[..],
            &mut g.w_z.data[..],
            &mut g.u_z.data[..],
            &mut g.b_z[..],
            &mut g.w_r.data[..],
            &mut g.u_r.data[..],
            &mut g.b_r[..],
            &mut g.w_h.data[..],
            &mut g.u_h.data[..],
            &mut g.b_h[..],
            &mut self.down.data[..],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// Weights over the `2C` concatenation of both branch outputs.
    pub g_w: Vec<f64>,
    pub g_b: f64,
}

impl GateParams {
    pub fn zeros(c: usize) -> Self {
        Self {
            g_w: vec![0.0; 2 * c],
            g_b: 0.0,
        }
    }

    fn validate(&self, c: usize) -> Result<()> {
        if self.g_w.len() != 2 * c {
            return Err(Error::ShapeMismatch(format!(
                "gate weights: expected {}, got {}",
                2 * c,
                self.g_w.len()
            )));
        }
        if !self.g_b.is_finite() || self.g_w.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("gate parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Full parameter set of the two-stage aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct HgfgParams {
    pub phi1: GroupParams,
    pub phi2: GroupParams,
    pub gate: GateParams,
}

impl HgfgParams {
    pub fn random(height: usize, width: usize, c: usize, n1: usize, n2: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi1 = GroupParams::random(height, width, c, n1, &mut rng)?;
        let phi2 = GroupParams::random(height, width, c, n2, &mut rng)?;
        let g = Mat::random(1, 2 * c, 1.0 / (2.0 * c as f64).sqrt(), &mut rng);
        Ok(Self {
            phi1,
            phi2,
            gate: GateParams {
                g_w: g.data,
                g_b: 0.1,
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            phi1: self.phi1.zeros_like(),
            phi2: self.phi2.zeros_like(),
            gate: GateParams::zeros(self.gate.g_w.len() / 2),
        }
    }

    /// Named arrays in a fixed order, with shapes.
    pub fn arrays(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (prefix, g) in [("phi1", &self.phi1), ("phi2", &self.phi2)] {
            for (name, shape, data) in g.arrays() {
                out.push((format!("{prefix}.{name}"), shape, data));
            }
        }
        out.push(("gate.g_w".into(), vec![self.gate.g_w.len()], &self.gate.g_w[..]));
        out.push(("gate.g_b".into(), vec![], std::slice::from_ref(&self.gate.g_b)));
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.phi1.arrays_mut();
        out.extend(self.phi2.arrays_mut());
        out.push(&mut self.gate.g_w[..]);
        out.push(std::slice::from_mut(&mut self.gate.g_b));
        out
    }

    pub fn to_param_vector(&self) -> ParamVector {
        ParamVector::from_arrays(self.arrays().into_iter().map(|(n, _, d)| (n, d.to_vec())).collect())
    }

    pub fn manifest(&self, config: &HgfgConfig) -> Manifest {
        Manifest {
            pixels: self.phi1.p_e.rows,
            channels: self.phi1.w_q.rows,
            n1: config.n1,
            n2: config.n2,
            t: config.t,
            arrays: self
                .arrays()
                .into_iter()
                .map(|(name, shape, _)| ManifestEntry { name, shape })
                .collect(),
        }
    }

    /// Rebuilds parameters from a parameter vector laid out as in `manifest`.
    pub fn from_param_vector(pv: &ParamVector, manifest: &Manifest) -> Result<Self> {
        let mut params = Self::random(manifest.pixels, 1, manifest.channels, manifest.n1, manifest.n2, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            params.arrays().into_iter().map(|(n, s, _)| (n, s)).collect();
        let listed: Vec<(String, Vec<usize>)> =
            manifest.arrays.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        if expected != listed {
            return Err(Error::ShapeMismatch("manifest does not match the parameter layout".into()));
        }
        if pv.len() != expected.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} arrays in parameter file, manifest lists {}",
                pv.len(),
                expected.len()
            )));
        }
        for (slot, ((name, values), (ename, _))) in params.arrays_mut().into_iter().zip(pv.arrays().iter().zip(&expected)) {
            if name != ename || values.len() != slot.len() {
                return Err(Error::ShapeMismatch(format!("array {name:?} does not match {ename:?}")));
            }
            slot.copy_from_slice(values);
        }
        Ok(params)
    }

    /// Writes `params.pvec` and `manifest.json` into `dir`.
    pub fn save(&self, config: &HgfgConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_param_vector().save(dir.join("params.pvec"))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest(config)).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, HgfgConfig)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let pv = ParamVector::load(dir.join("params.pvec"))?;
        let params = Self::from_param_vector(&pv, &manifest)?;
        Ok((
            params,
            HgfgConfig {
                n1: manifest.n1,
                n2: manifest.n2,
                t: manifest.t,
            },
        ))
    }
}

/// Parameter bundle manifest: array names and shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `H*W`, the row count of the positional embeddings.
    pub pixels: usize,
    pub channels: usize,
    pub n1: usize,
    pub n2: usize,
    pub t: usize,
    pub arrays: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HgfgConfig {
    pub n1: usize,
    pub n2: usize,
    pub t: usize,
}

impl Default for HgfgConfig {
    fn default() -> Self {
        Self {
            n1: DEFAULT_N1,
            n2: DEFAULT_N2,
            t: DEFAULT_T,
        }
    }
}

fn check_divisible(c: usize, n: usize) -> Result<()> {
    if n == 0 || !c.is_multiple_of(n) {
        Err(Error::IndivisibleChannels { channels: c, groups: n })
    } else {
        Ok(())
    }
}

/// Attention readout for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOut {
    /// Softmax over prototypes, `H*W x N`.
    pub a_bar: Mat,
    /// `a_bar` normalized over pixels, `H*W x N`.
    pub d: Mat,
    /// Per-prototype readout, `N x C`.
    pub u: Mat,
    /// Prototypes whose attention column summed to zero and fell back to uniform.
    pub degenerate: Vec<bool>,
}

struct AttnCache {
    k: Mat,
    q: Mat,
    v: Mat,
    a_bar: Mat,
    d: Mat,
    colsum: Vec<f64>,
    degenerate: Vec<bool>,
}

fn attention_forward(p: &Mat, fp: &Mat, gp: &GroupParams) -> (AttnCache, Mat) {
    let hw = fp.rows;
    let n = p.rows;
    let scale = 1.0 / (fp.cols as f64).sqrt();
    let k = mul_nt(fp, &gp.w_k);
    let q = mul_nt(p, &gp.w_q);
    let v = mul_nt(fp, &gp.w_v);
    let mut a_bar = mul_nt(&k, &q);
    let mut buf = vec![0.0; n];
    for i in 0..hw {
        let row = &mut a_bar.data[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for x in row.iter_mut() {
            *x *= scale;
            max = max.max(*x);
        }
        for (x, b) in row.iter_mut().zip(buf.iter_mut()) {
            *x = (*x - max).exp();
            *b = *x;
        }
        let z = sorted_sum(&mut buf);
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    let mut d = a_bar.zeros_like();
    let mut colsum = vec![0.0; n];
    let mut degenerate = vec![false; n];
    for j in 0..n {
        let s: f64 = (0..hw).map(|i| a_bar.at(i, j)).sum();
        colsum[j] = s;
        if s > 0.0 && s.is_finite() {
            for i in 0..hw {
                *d.at_mut(i, j) = a_bar.at(i, j) / s;
            }
        } else {
            degenerate[j] = true;
            for i in 0..hw {
                *d.at_mut(i, j) = 1.0 / hw as f64;
            }
        }
    }
    let u = mul_tn(&d, &v);
    (
        AttnCache {
            k,
            q,
            v,
            a_bar,
            d,
            colsum,
            degenerate,
        },
        u,
    )
}

/// One attention step of prototypes `p` (`N x C`) over positional features
/// `fp` (`H*W x C`).
pub fn attention_step(p: &Mat, fp: &Mat, params: &GroupParams) -> Result<AttentionOut> {
    let c = fp.cols;
    p.expect_shape(p.rows, c, "prototypes")?;
    params.w_q.expect_shape(c, c, "w_q")?;
    params.w_k.expect_shape(c, c, "w_k")?;
    params.w_v.expect_shape(c, c, "w_v")?;
    let (cache, u) = attention_forward(p, fp, params);
    Ok(AttentionOut {
        a_bar: cache.a_bar,
        d: cache.d,
        u,
        degenerate: cache.degenerate,
    })
}

struct GruCache {
    z: Mat,
    r: Mat,
    h: Mat,
}

fn affine(u: &Mat, w: &Mat, p: &Mat, uw: &Mat, b: &[f64]) -> Mat {
    let mut a = mul_nt(u, w);
    a.add_assign(&mul_nt(p, uw));
    for row in a.data.chunks_mut(b.len()) {
        for (x, bb) in row.iter_mut().zip(b) {
            *x += bb;
        }
    }
    a
}

fn gru_forward(u: &Mat, p: &Mat, g: &GruParams) -> (Mat, GruCache) {
    let mut z = affine(u, &g.w_z, p, &g.u_z, &g.b_z);
    z.data.iter_mut().for_each(|x| *x = sigmoid(*x));
    let mut r = affine(u, &g.w_r, p, &g.u_r, &g.b_r);
    r.data.iter_mut().for_each(|x| *x = sigmoid(*x));
    let rp = Mat {
        rows: p.rows,
        cols: p.cols,
        data: r.data.iter().zip(&p.data).map(|(a, b)| a * b).collect(),
    };
    let mut h = affine(u, &g.w_h, &rp, &g.u_h, &g.b_h);
    h.data.iter_mut().for_each(|x| *x = x.tanh());
    let next = Mat {
        rows: p.rows,
        cols: p.cols,
        data: (0..p.data.len())
            .map(|i| (1.0 - z.data[i]) * p.data[i] + z.data[i] * h.data[i])
            .collect(),
    };
    (next, GruCache { z, r, h })
}

/// Standard GRU cell applied to every prototype row.
pub fn gru_step(u: &Mat, p: &Mat, gru: &GruParams) -> Result<Mat> {
    u.expect_shape(p.rows, p.cols, "readout")?;
    gru.validate(p.cols)?;
    Ok(gru_forward(u, p, gru).0)
}

struct IterCache {
    p: Mat,
    attn: AttnCache,
    u: Mat,
    gru: GruCache,
}

struct GroupCache {
    fp: Mat,
    iters: Vec<IterCache>,
    p_final: Mat,
}

fn group_forward(f: &Mat, gp: &GroupParams, t: usize) -> (Mat, GroupCache) {
    let fp = f.add(&gp.p_e);
    let mut p = gp.p0.clone();
    let mut iters = Vec::with_capacity(t);
    for _ in 0..t {
        let (attn, u) = attention_forward(&p, &fp, gp);
        let (next, gru) = gru_forward(&u, &p, &gp.gru);
        iters.push(IterCache { p, attn, u, gru });
        p = next;
    }
    let n = p.rows;
    let m = gp.down.cols;
    let p_down = mul_nn(&p, &gp.down);
    let pe_down = mul_nn(&gp.p_e, &gp.down);
    let mut out = Mat::zeros(f.rows, n * m);
    for i in 0..f.rows {
        for k in 0..n {
            for j in 0..m {
                *out.at_mut(i, k * m + j) = p_down.at(k, j) + pe_down.at(i, j);
            }
        }
    }
    (out, GroupCache { fp, iters, p_final: p })
}

fn validate_group_input(f: &FeatureMap, params: &GroupParams, n: usize, t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("at least one grouping iteration is required".into()));
    }
    params.validate(f.pixels(), f.channels, n)
}

/// Groups `f` around `n` prototypes refined over `t` iterations; the output
/// has the input's shape.
pub fn group(f: &FeatureMap, params: &GroupParams, n: usize, t: usize) -> Result<FeatureMap> {
    validate_group_input(f, params, n, t)?;
    Ok(f.from_mat(group_forward(&f.to_mat(), params, t).0))
}

fn group_backward(d_out: &Mat, gp: &GroupParams, cache: &GroupCache) -> (Mat, GroupParams) {
    let mut g = gp.zeros_like();
    let n = cache.p_final.rows;
    let m = gp.down.cols;
    let hw = d_out.rows;

    let mut dp_down = Mat::zeros(n, m);
    let mut dpe_down = Mat::zeros(hw, m);
    for i in 0..hw {
        for k in 0..n {
            for j in 0..m {
                let v = d_out.at(i, k * m + j);
                *dp_down.at_mut(k, j) += v;
                *dpe_down.at_mut(i, j) += v;
            }
        }
    }
    g.down = mul_tn(&cache.p_final, &dp_down);
    g.down.add_assign(&mul_tn(&gp.p_e, &dpe_down));
    let mut dp = mul_nt(&dp_down, &gp.down);
    g.p_e = mul_nt(&dpe_down, &gp.down);
    let mut dfp = cache.fp.zeros_like();
    let scale = 1.0 / (cache.fp.cols as f64).sqrt();

    for it in cache.iters.iter().rev() {
        // GRU
        let gru = &gp.gru;
        let (z, r, h, p) = (&it.gru.z, &it.gru.r, &it.gru.h, &it.p);
        let len = p.data.len();
        let mut da_z = p.zeros_like();
        let mut da_h = p.zeros_like();
        let mut dp_prev = p.zeros_like();
        for i in 0..len {
            let dn = dp.data[i];
            let dz = dn * (h.data[i] - p.data[i]);
            let dh = dn * z.data[i];
            dp_prev.data[i] = dn * (1.0 - z.data[i]);
            da_z.data[i] = dz * z.data[i] * (1.0 - z.data[i]);
            da_h.data[i] = dh * (1.0 - h.data[i] * h.data[i]);
        }
        let rp = Mat {
            rows: p.rows,
            cols: p.cols,
            data: r.data.iter().zip(&p.data).map(|(a, b)| a * b).collect(),
        };
        g.gru.w_h.add_assign(&mul_tn(&da_h, &it.u));
        g.gru.u_h.add_assign(&mul_tn(&da_h, &rp));
        let d_rp = mul_nn(&da_h, &gru.u_h);
        let mut du = mul_nn(&da_h, &gru.w_h);
        let mut da_r = p.zeros_like();
        for i in 0..len {
            da_r.data[i] = d_rp.data[i] * p.data[i] * r.data[i] * (1.0 - r.data[i]);
            dp_prev.data[i] += d_rp.data[i] * r.data[i];
        }
        for (da, w, uu, gw, gu, gb) in [
            (&da_z, &gru.w_z, &gru.u_z, &mut g.gru.w_z, &mut g.gru.u_z, &mut g.gru.b_z),
            (&da_r, &gru.w_r, &gru.u_r, &mut g.gru.w_r, &mut g.gru.u_r, &mut g.gru.b_r),
        ] {
            gw.add_assign(&mul_tn(da, &it.u));
            gu.add_assign(&mul_tn(da, p));
            du.add_assign(&mul_nn(da, w));
            dp_prev.add_assign(&mul_nn(da, uu));
            for row in da.data.chunks(da.cols) {
                for (b, x) in gb.iter_mut().zip(row) {
                    *b += x;
                }
            }
        }
        for row in da_h.data.chunks(da_h.cols) {
            for (b, x) in g.gru.b_h.iter_mut().zip(row) {
                *b += x;
            }
        }

        // attention
        let a = &it.attn;
        let dd = mul_nt(&a.v, &du); // HW x N
        let dv = mul_nn(&a.d, &du); // HW x C
        g.w_v.add_assign(&mul_tn(&dv, &cache.fp));
        dfp.add_assign(&mul_nn(&dv, &gp.w_v));
        let mut da_bar = a.a_bar.zeros_like();
        for j in 0..n {
            if a.degenerate[j] {
                continue;
            }
            let dot: f64 = (0..hw).map(|i| dd.at(i, j) * a.d.at(i, j)).sum();
            for i in 0..hw {
                *da_bar.at_mut(i, j) = (dd.at(i, j) - dot) / a.colsum[j];
            }
        }
        let mut dlogit = a.a_bar.zeros_like();
        for i in 0..hw {
            let dot: f64 = (0..n).map(|j| da_bar.at(i, j) * a.a_bar.at(i, j)).sum();
            for j in 0..n {
                *dlogit.at_mut(i, j) = a.a_bar.at(i, j) * (da_bar.at(i, j) - dot) * scale;
            }
        }
        let dk = mul_nn(&dlogit, &a.q); // HW x C
        let dq = mul_tn(&dlogit, &a.k); // N x C
        g.w_k.add_assign(&mul_tn(&dk, &cache.fp));
        dfp.add_assign(&mul_nn(&dk, &gp.w_k));
        g.w_q.add_assign(&mul_tn(&dq, p));
        dp_prev.add_assign(&mul_nn(&dq, &gp.w_q));
        dp = dp_prev;
    }
    g.p0 = dp;
    g.p_e.add_assign(&dfp);
    (dfp, g)
}

struct Rk2Cache {
    f: Mat,
    phi1: Mat,
    c1: GroupCache,
    phi2: Mat,
    c2: GroupCache,
    alpha: Vec<f64>,
}

fn rk2_forward(f: &Mat, params: &HgfgParams, t: usize) -> (Mat, Rk2Cache) {
    let c = f.cols;
    let (phi1, c1) = group_forward(f, &params.phi1, t);
    let (phi2, c2) = group_forward(&f.add(&phi1), &params.phi2, t);
    let (gw1, gw2) = params.gate.g_w.split_at(c);
    let mut out = f.zeros_like();
    let mut alpha = vec![0.0; f.rows];
    for i in 0..f.rows {
        let s: f64 = phi1.row(i).iter().zip(gw1).map(|(x, w)| x * w).sum::<f64>()
            + phi2.row(i).iter().zip(gw2).map(|(x, w)| x * w).sum::<f64>()
            + params.gate.g_b;
        let a = sigmoid(s);
        alpha[i] = a;
        for ch in 0..c {
            *out.at_mut(i, ch) = f.at(i, ch) + a * phi1.at(i, ch) + (1.0 - a) * phi2.at(i, ch);
        }
    }
    (
        out,
        Rk2Cache {
            f: f.clone(),
            phi1,
            c1,
            phi2,
            c2,
            alpha,
        },
    )
}

fn validate_rk2(f: &FeatureMap, params: &HgfgParams, t: usize) -> Result<()> {
    validate_group_input(f, &params.phi1, params.phi1.prototypes(), t)?;
    validate_group_input(f, &params.phi2, params.phi2.prototypes(), t)?;
    params.gate.validate(f.channels)
}

/// `F + a * phi1(F) + (1 - a) * phi2(F + phi1(F))` with a per-pixel gate `a`.
pub fn rk2_aggregate(
    f: &FeatureMap,
    params_n1: &GroupParams,
    params_n2: &GroupParams,
    gate: &GateParams,
    t: usize,
) -> Result<FeatureMap> {
    let params = HgfgParams {
        phi1: params_n1.clone(),
        phi2: params_n2.clone(),
        gate: gate.clone(),
    };
    hgfg_forward(f, &params, t)
}

pub fn hgfg_forward(f: &FeatureMap, params: &HgfgParams, t: usize) -> Result<FeatureMap> {
    validate_rk2(f, params, t)?;
    Ok(f.from_mat(rk2_forward(&f.to_mat(), params, t).0))
}

/// Per-pixel gate values of the aggregation.
pub fn gate_values(f: &FeatureMap, params: &HgfgParams, t: usize) -> Result<Vec<f64>> {
    validate_rk2(f, params, t)?;
    Ok(rk2_forward(&f.to_mat(), params, t).1.alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HgfgGrads {
    pub input: FeatureMap,
    pub params: HgfgParams,
}

/// Gradients of `<upstream, hgfg_forward(f)>` with respect to `f` and every
/// parameter.
pub fn hgfg_backward(f: &FeatureMap, params: &HgfgParams, t: usize, upstream: &FeatureMap) -> Result<HgfgGrads> {
    validate_rk2(f, params, t)?;
    f.same_shape(upstream)?;
    let (_, cache) = rk2_forward(&f.to_mat(), params, t);
    let g = upstream.to_mat();
    let c = f.channels;
    let (gw1, gw2) = params.gate.g_w.split_at(c);

    let mut df = g.clone();
    let mut dphi1 = g.zeros_like();
    let mut dphi2 = g.zeros_like();
    let mut gate = GateParams::zeros(c);
    for i in 0..g.rows {
        let a = cache.alpha[i];
        let dalpha: f64 = (0..c)
            .map(|ch| g.at(i, ch) * (cache.phi1.at(i, ch) - cache.phi2.at(i, ch)))
            .sum();
        let ds = dalpha * a * (1.0 - a);
        gate.g_b += ds;
        for ch in 0..c {
            gate.g_w[ch] += ds * cache.phi1.at(i, ch);
            gate.g_w[c + ch] += ds * cache.phi2.at(i, ch);
            *dphi1.at_mut(i, ch) = a * g.at(i, ch) + ds * gw1[ch];
            *dphi2.at_mut(i, ch) = (1.0 - a) * g.at(i, ch) + ds * gw2[ch];
        }
    }
    let (din2, g2) = group_backward(&dphi2, &params.phi2, &cache.c2);
    df.add_assign(&din2);
    dphi1.add_assign(&din2);
    let (din1, g1) = group_backward(&dphi1, &params.phi1, &cache.c1);
    df.add_assign(&din1);
    debug_assert_eq!(cache.f.rows, df.rows);
    Ok(HgfgGrads {
        input: f.from_mat(df),
        params: HgfgParams {
            phi1: g1,
            phi2: g2,
            gate,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub dims: [usize; 3],
    pub n1: usize,
    pub n2: usize,
    pub t: usize,
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub degenerate_columns: bool,
    pub passed: bool,
}

fn objective(f: &Mat, params: &HgfgParams, t: usize, upstream: &Mat) -> f64 {
    let (out, _) = rk2_forward(f, params, t);
    out.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients with central differences on a seeded
/// instance of `dims = (H, W, C)`.
pub fn check_gradients(seed: u64, dims: (usize, usize, usize)) -> Result<GradCheckReport> {
    check_gradients_with(seed, dims, HgfgConfig::default())
}

pub fn check_gradients_with(seed: u64, dims: (usize, usize, usize), config: HgfgConfig) -> Result<GradCheckReport> {
    let (h, w, c) = dims;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::EmptyInput("feature map dimensions"));
    }
    let params = HgfgParams::random(h, w, c, config.n1, config.n2, seed)?;
    let f = FeatureMap::random(h, w, c, seed ^ 0x5EED_F00D);
    let upstream = FeatureMap::random(h, w, c, seed ^ 0xBAC4_0A2D);
    let grads = hgfg_backward(&f, &params, config.t, &upstream)?;
    let fm = f.to_mat();
    let um = upstream.to_mat();
    let step = FD_STEP;
    let t = config.t;

    let mut groups = Vec::new();
    {
        let mut x = fm.clone();
        let mut err = GroupError {
            name: "input".into(),
            count: x.data.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in 0..x.data.len() {
            let v = x.data[i];
            x.data[i] = v + step;
            let up = objective(&x, &params, t, &um);
            x.data[i] = v - step;
            let dn = objective(&x, &params, t, &um);
            x.data[i] = v;
            let num = (up - dn) / (2.0 * step);
            let ana = grads.input.data[i];
            err.max_rel_error = err.max_rel_error.max(rel_error(ana, num));
            err.max_abs_error = err.max_abs_error.max((ana - num).abs());
        }
        groups.push(err);
    }

    let names: Vec<String> = params.arrays().into_iter().map(|(n, _, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.params.arrays().into_iter().map(|(_, _, d)| d.to_vec()).collect();
    let mut probe = params.clone();
    for (gi, name) in names.into_iter().enumerate() {
        let len = analytic[gi].len();
        let mut err = GroupError {
            name,
            count: len,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in 0..len {
            let v = probe.arrays_mut()[gi][i];
            probe.arrays_mut()[gi][i] = v + step;
            let up = objective(&fm, &probe, t, &um);
            probe.arrays_mut()[gi][i] = v - step;
            let dn = objective(&fm, &probe, t, &um);
            probe.arrays_mut()[gi][i] = v;
            let num = (up - dn) / (2.0 * step);
            let ana = analytic[gi][i];
            err.max_rel_error = err.max_rel_error.max(rel_error(ana, num));
            err.max_abs_error = err.max_abs_error.max((ana - num).abs());
        }
        groups.push(err);
    }

    let (_, cache) = rk2_forward(&fm, &params, t);
    let degenerate = cache
        .c1
        .iters
        .iter()
        .chain(&cache.c2.iters)
        .any(|it| it.attn.degenerate.iter().any(|&d| d));
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed,
        dims: [h, w, c],
        n1: config.n1,
        n2: config.n2,
        t,
        step,
        tolerance: GRAD_TOLERANCE,
        passed: max_rel_error <= GRAD_TOLERANCE,
        groups,
        max_rel_error,
        degenerate_columns: degenerate,
    })
}

/// Attention statistics of every iteration of both branches, keyed by branch.
pub fn attention_trace(f: &FeatureMap, params: &HgfgParams, t: usize) -> Result<BTreeMap<&'static str, Vec<AttentionOut>>> {
    validate_rk2(f, params, t)?;
    let (_, cache) = rk2_forward(&f.to_mat(), params, t);
    let collect = |c: &GroupCache| {
        c.iters
            .iter()
            .map(|it| AttentionOut {
                a_bar: it.attn.a_bar.clone(),
                d: it.attn.d.clone(),
                u: it.u.clone(),
                degenerate: it.attn.degenerate.clone(),
            })
            .collect::<Vec<_>>()
    };
    let mut out = BTreeMap::new();
    out.insert("phi1", collect(&cache.c1));
    out.insert("phi2", collect(&cache.c2));
    Ok(out)
}
