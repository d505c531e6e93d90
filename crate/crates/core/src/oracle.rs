//! Segmenter abstraction: the teacher/student segmenter and the promptable
//! foundation model are both opaque [`Segmenter`]s.
//!
//! Two implementations ship with the engine. [`SyntheticOracle`] is a
//! deterministic, prompt-sensitive test double that blends a registered
//! ground truth with seeded noise. [`SubprocessOracle`] hands each request
//! to an external command through a request directory.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::augment::{apply_spec, fuse, invert_spec, AugSpec};
use crate::error::{Error, Result};
use crate::prompts::{Point, PromptSet};
use crate::raster::{load_mask, min_bounding_box, save_mask, GrayMask};

pub trait Segmenter: Send + Sync {
    /// Predicts a mask for one augmented view of `image_id`.
    fn segment(&self, image_id: &str, view: &GrayMask, spec: &AugSpec) -> Result<GrayMask>;

    /// Predicts a mask for one view given prompts in the original frame.
    fn segment_prompted(
        &self,
        image_id: &str,
        view: &GrayMask,
        spec: &AugSpec,
        prompts: &PromptSet,
    ) -> Result<GrayMask>;
}

/// Moves original-frame prompts into the frame of `spec`'s view.
pub fn transform_prompts(prompts: &PromptSet, spec: &AugSpec) -> PromptSet {
    let (w, h) = prompts.mask_prompt.dims();
    let map = |p: &Point| {
        let (x, y) = spec.map_point(p.x, p.y, w, h);
        Point { x, y, ..*p }
    };
    PromptSet {
        fg_points: prompts.fg_points.iter().map(map).collect(),
        bg_points: prompts.bg_points.iter().map(map).collect(),
        bbox: spec.map_box(&prompts.bbox, w, h),
        mask_prompt: apply_spec(&prompts.mask_prompt, spec).map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        bg_missing: prompts.bg_missing,
    }
}

/// Segments every view, maps each prediction back and averages them.
pub fn coarse_fused_mask(
    image_id: &str,
    image: &GrayMask,
    augs: &[AugSpec],
    teacher: &dyn Segmenter,
) -> Result<GrayMask> {
    if augs.is_empty() {
        return Err(Error::EmptyInput("at least one augmentation is required"));
    }
    let (w, h) = image.dims();
    let masks = augs
        .iter()
        .map(|spec| {
            let view = apply_spec(image, spec);
            let pred = teacher.segment(image_id, &view, spec)?;
            invert_spec(&pred, spec, w, h)
        })
        .collect::<Result<Vec<_>>>()?;
    fuse(&masks)
}

/// Same as [`coarse_fused_mask`] but through the promptable segmenter.
pub fn generate_pseudo_label(
    image_id: &str,
    image: &GrayMask,
    augs: &[AugSpec],
    prompts: &PromptSet,
    sam: &dyn Segmenter,
) -> Result<GrayMask> {
    if augs.is_empty() {
        return Err(Error::EmptyInput("at least one augmentation is required"));
    }
    let (w, h) = image.dims();
    prompts.validate(w, h)?;
    let masks = augs
        .iter()
        .map(|spec| {
            let view = apply_spec(image, spec);
            let pred = sam.segment_prompted(image_id, &view, spec, prompts)?;
            invert_spec(&pred, spec, w, h)
        })
        .collect::<Result<Vec<_>>>()?;
    fuse(&masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticOracleConfig {
    /// Blend weight of the ground truth before prompt effects.
    pub base_quality: f64,
    /// How strongly prompt accuracy moves the blend weight.
    pub prompt_gain: f64,
    /// Amplitude of the additive smoothed Gaussian field.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticOracleConfig {
    fn default() -> Self {
        Self {
            base_quality: 1.0,
            prompt_gain: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.base_quality) {
            return Err(Error::Config(format!(
                "base_quality {} outside [0, 1]",
                self.base_quality
            )));
        }
        if !(self.prompt_gain >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("prompt_gain and noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic stand-in for a trained segmenter or a promptable model.
///
/// A view prediction is
/// `clamp(q * gt + (1 - q) * u + noise_sigma * z, 0, 1)` where `gt` is the
/// ground truth carried into the view, `u` is seeded uniform noise and `z`
/// seeded standard-normal noise, both smoothed by a 3x3 box filter (`z` is
/// rescaled to unit variance). Noise depends only on the seed, the image id
/// and the view's spec.
///
/// Without prompts `q = base_quality`. With prompts
/// `q = clamp(base_quality + prompt_gain * (2 * accuracy - 1), 0, 1)`,
/// where accuracy in `[0, 1]` averages four agreement terms; 0.5 is the
/// neutral accuracy that leaves `q` untouched.
#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    config: SyntheticOracleConfig,
    truths: Arc<BTreeMap<String, GrayMask>>,
}

impl SyntheticOracle {
    pub fn new(config: SyntheticOracleConfig, truths: Arc<BTreeMap<String, GrayMask>>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, truths })
    }

    /// An oracle that knows a single image.
    pub fn single(image_id: &str, ground_truth: GrayMask, config: SyntheticOracleConfig) -> Result<Self> {
        let mut truths = BTreeMap::new();
        truths.insert(image_id.to_string(), ground_truth);
        Self::new(config, Arc::new(truths))
    }

    pub fn config(&self) -> &SyntheticOracleConfig {
        &self.config
    }

    /// Same ground truths, different behaviour.
    pub fn with_config(&self, config: SyntheticOracleConfig) -> Result<Self> {
        Self::new(config, Arc::clone(&self.truths))
    }

    fn truth_view(&self, image_id: &str, view: &GrayMask, spec: &AugSpec) -> Result<GrayMask> {
        let gt = self
            .truths
            .get(image_id)
            .ok_or_else(|| Error::OracleFailure(format!("no ground truth registered for {image_id:?}")))?;
        let gt_view = apply_spec(gt, spec);
        if gt_view.dims() != view.dims() {
            return Err(Error::DimensionMismatch {
                expected: gt_view.dims(),
                actual: view.dims(),
            });
        }
        Ok(gt_view)
    }

    fn noise_seed(&self, image_id: &str, spec: &AugSpec) -> u64 {
        let mut h = fnv1a(image_id.as_bytes());
        h ^= self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h = h.rotate_left(17) ^ (spec.index() as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h
    }

    fn render(&self, gt_view: &GrayMask, quality: f64, seed: u64) -> GrayMask {
        let (w, h) = gt_view.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
        let normal: Vec<f64> = (0..w * h).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let u = box3(&uniform, w, h);
        let z = box3(&normal, w, h);
        let sigma = self.config.noise_sigma;
        GrayMask::from_fn(w, h, |x, y| {
            let i = y * w + x;
            let gt = gt_view.get(x, y) as f64;
            // a 3x3 mean of unit normals has variance 1/9
            let v = quality * gt + (1.0 - quality) * u[i] + sigma * 3.0 * z[i];
            v.clamp(0.0, 1.0) as f32
        })
    }

    /// Quality after prompt effects, given prompts already in the view frame.
    pub fn prompted_quality(&self, gt_view: &GrayMask, view_prompts: &PromptSet) -> f64 {
        let accuracy = prompt_accuracy(gt_view, view_prompts);
        (self.config.base_quality + self.config.prompt_gain * (2.0 * accuracy - 1.0)).clamp(0.0, 1.0)
    }
}

impl Segmenter for SyntheticOracle {
    fn segment(&self, image_id: &str, view: &GrayMask, spec: &AugSpec) -> Result<GrayMask> {
        let gt_view = self.truth_view(image_id, view, spec)?;
        Ok(self.render(&gt_view, self.config.base_quality, self.noise_seed(image_id, spec)))
    }

    fn segment_prompted(
        &self,
        image_id: &str,
        view: &GrayMask,
        spec: &AugSpec,
        prompts: &PromptSet,
    ) -> Result<GrayMask> {
        let (w, h) = prompts.mask_prompt.dims();
        prompts.validate(w, h)?;
        if spec.view_dims(w, h) != view.dims() {
            return Err(Error::InvalidPrompts(format!(
                "prompts for a {w}x{h} frame do not match view {:?}",
                view.dims()
            )));
        }
        let gt_view = self.truth_view(image_id, view, spec)?;
        let view_prompts = transform_prompts(prompts, spec);
        let quality = self.prompted_quality(&gt_view, &view_prompts);
        Ok(self.render(&gt_view, quality, self.noise_seed(image_id, spec)))
    }
}

/// Mean of four agreement terms between prompts and a ground truth
/// (binarized at 0.5): fg points on foreground, bg points on background,
/// box IoU against the ground-truth box, and mask-prompt IoU. An empty
/// point list scores a neutral 0.5.
pub fn prompt_accuracy(gt: &GrayMask, prompts: &PromptSet) -> f64 {
    let is_fg = |p: &Point| gt.get(p.x, p.y) >= 0.5;
    let point_term = |points: &[Point], want_fg: bool| {
        if points.is_empty() {
            0.5
        } else {
            points.iter().filter(|p| is_fg(p) == want_fg).count() as f64 / points.len() as f64
        }
    };
    let fg_term = point_term(&prompts.fg_points, true);
    let bg_term = point_term(&prompts.bg_points, false);
    let box_term = match min_bounding_box(gt, 0.5) {
        Ok(gt_box) => prompts.bbox.iou(&gt_box),
        Err(_) => 0.0,
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &g) in prompts.mask_prompt.values().iter().zip(gt.values()) {
        let (a, b) = (m >= 0.5, g >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    let mask_term = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    (fg_term + bg_term + box_term + mask_term) / 4.0
}

/// 3x3 box mean with edge replication.
fn box3(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        values[cy * w + cx]
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(x + dx, y + dy);
                }
            }
            out.push(s / 9.0);
        }
    }
    out
}

/// FNV-1a, stable across platforms and toolchains.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubprocessConfig {
    /// Program followed by fixed arguments; the request directory is appended.
    pub command: Vec<String>,
    pub timeout_ms: u64,
    /// Parent for request directories (system temp dir when unset).
    pub scratch_dir: Option<PathBuf>,
}

impl Default for SubprocessConfig {
    fn default() -> Self {
        Self {
            command: Vec::new(),
            timeout_ms: 60_000,
            scratch_dir: None,
        }
    }
}

/// Client for an external segmenter.
///
/// Per request the engine writes `<reqdir>/image.mskf` (the view) and, for
/// prompted requests, `<reqdir>/prompts.json` plus `<reqdir>/mask_prompt.mskf`
/// with prompts in view coordinates. It then runs the command with the
/// request directory as its last argument and reads `<reqdir>/mask.mskf`
/// after a zero exit. One request is in flight per client.
#[derive(Debug)]
pub struct SubprocessOracle {
    config: SubprocessConfig,
    lock: Mutex<()>,
}

impl SubprocessOracle {
    pub fn new(config: SubprocessConfig) -> Result<Self> {
        if config.command.is_empty() {
            return Err(Error::Config("subprocess oracle needs a command".into()));
        }
        Ok(Self {
            config,
            lock: Mutex::new(()),
        })
    }

    fn request(&self, view: &GrayMask, prompts: Option<&PromptSet>) -> Result<GrayMask> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = match &self.config.scratch_dir {
            Some(parent) => tempfile::Builder::new().prefix("see-req-").tempdir_in(parent),
            None => tempfile::Builder::new().prefix("see-req-").tempdir(),
        }
        .map_err(|e| Error::OracleFailure(format!("cannot create request dir: {e}")))?;
        save_mask(view, dir.path().join("image.mskf"))?;
        if let Some(p) = prompts {
            p.save(&dir.path().join("prompts.json"), &dir.path().join("mask_prompt.mskf"))?;
        }

        let mut child = Command::new(&self.config.command[0])
            .args(&self.config.command[1..])
            .arg(dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::OracleFailure(format!("cannot spawn {:?}: {e}", self.config.command[0])))?;
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let status = match child
            .wait_timeout(timeout)
            .map_err(|e| Error::OracleFailure(format!("wait failed: {e}")))?
        {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::OracleFailure(format!(
                    "timed out after {} ms",
                    self.config.timeout_ms
                )));
            }
        };
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut pipe) = child.stderr.take() {
                use std::io::Read;
                let _ = pipe.read_to_string(&mut stderr);
            }
            return Err(Error::OracleFailure(format!(
                "command exited with {status}: {}",
                stderr.trim()
            )));
        }
        let reply = dir.path().join("mask.mskf");
        if !reply.exists() {
            return Err(Error::OracleFailure("command produced no mask.mskf".into()));
        }
        let mask = load_mask(&reply).map_err(|e| Error::OracleFailure(format!("invalid reply: {e}")))?;
        if mask.dims() != view.dims() {
            return Err(Error::OracleFailure(format!(
                "reply is {:?}, view is {:?}",
                mask.dims(),
                view.dims()
            )));
        }
        Ok(mask)
    }
}

impl Segmenter for SubprocessOracle {
    fn segment(&self, _image_id: &str, view: &GrayMask, _spec: &AugSpec) -> Result<GrayMask> {
        self.request(view, None)
    }

    fn segment_prompted(
        &self,
        _image_id: &str,
        view: &GrayMask,
        spec: &AugSpec,
        prompts: &PromptSet,
    ) -> Result<GrayMask> {
        let (w, h) = prompts.mask_prompt.dims();
        prompts.validate(w, h)?;
        self.request(view, Some(&transform_prompts(prompts, spec)))
    }
}

/// Serializable description of a segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterSpec {
    Synthetic(SyntheticOracleConfig),
    Subprocess(SubprocessConfig),
}

/// A configured segmenter of either kind.
#[derive(Debug)]
pub enum SegmenterHandle {
    Synthetic(SyntheticOracle),
    Subprocess(SubprocessOracle),
}

impl SegmenterHandle {
    pub fn from_spec(spec: &SegmenterSpec, truths: Arc<BTreeMap<String, GrayMask>>) -> Result<Self> {
        Ok(match spec {
            SegmenterSpec::Synthetic(c) => SegmenterHandle::Synthetic(SyntheticOracle::new(*c, truths)?),
            SegmenterSpec::Subprocess(c) => SegmenterHandle::Subprocess(SubprocessOracle::new(c.clone())?),
        })
    }

    fn inner(&self) -> &dyn Segmenter {
        match self {
            SegmenterHandle::Synthetic(s) => s,
            SegmenterHandle::Subprocess(s) => s,
        }
    }
}

impl Segmenter for SegmenterHandle {
    fn segment(&self, image_id: &str, view: &GrayMask, spec: &AugSpec) -> Result<GrayMask> {
        self.inner().segment(image_id, view, spec)
    }

    fn segment_prompted(
        &self,
        image_id: &str,
        view: &GrayMask,
        spec: &AugSpec,
        prompts: &PromptSet,
    ) -> Result<GrayMask> {
        self.inner().segment_prompted(image_id, view, spec, prompts)
    }
}
