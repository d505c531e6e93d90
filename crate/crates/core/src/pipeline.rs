//! Epoch driver: coarse fused mask, prompts, pseudo-label, pool update,
//! weighting, loss and EMA bookkeeping for every image of a dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_augs, AugSpec};
use crate::entropy::{UncertaintyScores, DEFAULT_THETA};
use crate::error::{Error, Result};
use crate::oracle::{
    coarse_fused_mask, fnv1a, generate_pseudo_label, SegmenterHandle, SegmenterSpec, Segmenter, SyntheticOracle,
    SyntheticOracleConfig,
};
use crate::pool::{score_candidate, LabelPool, PoolUpdate, DEFAULT_CAPACITY};
use crate::prompts::{extract_prompts, scribble_points, PromptConfig};
use crate::raster::{load_mask, GrayMask, Label, SparseAnnotation, Thresholds};
use crate::supervise::{
    ema_update, select, semi_breakdown, weak_breakdown, LossBreakdown, ParamVector, SelectionThresholds, DEFAULT_ETA,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    #[default]
    Weak,
    Semi,
}

/// How new pseudo-labels enter the per-image store.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPolicy {
    /// Fill to capacity, then replace by 2-of-3 dominance.
    #[default]
    Dominance,
    /// Keep only the newest label.
    Latest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub b: usize,
    pub theta: f64,
    pub selection: SelectionThresholds,
    pub eta: f64,
    pub thresholds: Thresholds,
    pub max_points: usize,
    pub mode: SupervisionMode,
    pub pool_policy: PoolPolicy,
    pub merge_scribble_points: bool,
    pub seed: u64,
    pub workers: usize,
    pub pool_dir: Option<PathBuf>,
    pub teacher: Option<SegmenterSpec>,
    pub sam: Option<SegmenterSpec>,
    pub student: Option<SegmenterSpec>,
    pub teacher_params: Option<PathBuf>,
    pub student_params: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 12,
            b: DEFAULT_CAPACITY,
            theta: DEFAULT_THETA,
            selection: SelectionThresholds::default(),
            eta: DEFAULT_ETA,
            thresholds: Thresholds::default(),
            max_points: 9,
            mode: SupervisionMode::Weak,
            pool_policy: PoolPolicy::Dominance,
            merge_scribble_points: false,
            seed: 0,
            workers: 1,
            pool_dir: None,
            teacher: None,
            sam: None,
            student: None,
            teacher_params: None,
            student_params: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.b == 0 {
            return Err(Error::Config("b must be at least 1".into()));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta {} outside (0, 1]", self.theta)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.max_points == 0 {
            return Err(Error::Config("max_points must be at least 1".into()));
        }
        self.selection.validate()?;
        self.thresholds.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            thresholds: self.thresholds,
            max_points: self.max_points,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub image: GrayMask,
    pub annotation: Option<SparseAnnotation>,
    pub label: Option<GrayMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub annotation: Option<String>,
    pub label: Option<String>,
}

/// Reads a dataset manifest; relative paths resolve against its directory.
pub fn load_dataset(manifest: &Path, thresholds: Thresholds) -> Result<Vec<DatasetItem>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&text).map_err(|e| Error::json(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    let mut items = Vec::with_capacity(records.len());
    for rec in records {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::format(manifest, format!("duplicate image id {:?}", rec.id)));
        }
        let image = load_mask(base.join(&rec.image))?;
        let annotation = match &rec.annotation {
            Some(p) => {
                let m = load_mask(base.join(p))?;
                image.ensure_same_dims(&m)?;
                Some(SparseAnnotation::from_mask(&m, thresholds))
            }
            None => None,
        };
        let label = match &rec.label {
            Some(p) => {
                let m = load_mask(base.join(p))?;
                image.ensure_same_dims(&m)?;
                Some(m)
            }
            None => None,
        };
        items.push(DatasetItem {
            id: rec.id,
            image,
            annotation,
            label,
        });
    }
    Ok(items)
}

/// Ground-truth table for synthetic oracles, taken from dataset labels.
pub fn truths_from_labels(dataset: &[DatasetItem]) -> Arc<BTreeMap<String, GrayMask>> {
    Arc::new(
        dataset
            .iter()
            .filter_map(|d| d.label.clone().map(|l| (d.id.clone(), l)))
            .collect(),
    )
}

/// The segmenters an epoch talks to. Without a student, the student
/// prediction is the teacher's prediction on the unaugmented image.
#[derive(Clone, Copy)]
pub struct Oracles<'a> {
    pub teacher: &'a dyn Segmenter,
    pub sam: &'a dyn Segmenter,
    pub student: Option<&'a dyn Segmenter>,
}

/// Owned segmenters built from a configuration.
#[derive(Debug)]
pub struct OracleSet {
    pub teacher: SegmenterHandle,
    pub sam: SegmenterHandle,
    pub student: Option<SegmenterHandle>,
}

impl OracleSet {
    pub fn from_config(config: &PipelineConfig, truths: Arc<BTreeMap<String, GrayMask>>) -> Result<Self> {
        let teacher = config
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Config("no teacher segmenter configured".into()))?;
        let sam = config
            .sam
            .as_ref()
            .ok_or_else(|| Error::Config("no promptable segmenter configured".into()))?;
        Ok(Self {
            teacher: SegmenterHandle::from_spec(teacher, Arc::clone(&truths))?,
            sam: SegmenterHandle::from_spec(sam, Arc::clone(&truths))?,
            student: config
                .student
                .as_ref()
                .map(|s| SegmenterHandle::from_spec(s, truths))
                .transpose()?,
        })
    }

    pub fn as_oracles(&self) -> Oracles<'_> {
        Oracles {
            teacher: &self.teacher,
            sam: &self.sam,
            student: self.student.as_ref().map(|s| s as &dyn Segmenter),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochState {
    /// Number of completed epochs.
    pub epoch: u32,
    pub prev_preds: BTreeMap<String, GrayMask>,
    pub pools: BTreeMap<String, LabelPool>,
    pub teacher_params: Option<ParamVector>,
    pub student_params: Option<ParamVector>,
}

impl EpochState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(teacher: ParamVector, student: ParamVector) -> Result<Self> {
        teacher.ensure_compatible(&student)?;
        Ok(Self {
            teacher_params: Some(teacher),
            student_params: Some(student),
            ..Self::default()
        })
    }

    /// Previous student prediction, or the all-0.5 mask before the first epoch.
    pub fn prev_pred(&self, id: &str, width: usize, height: usize) -> GrayMask {
        match self.prev_preds.get(id) {
            Some(m) if m.dims() == (width, height) => m.clone(),
            _ => GrayMask::filled(width, height, 0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub status: ImageStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_update: Option<PoolUpdate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<UncertaintyScores>,
    pub pool_size: usize,
    pub selected: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub images: Vec<ImageReport>,
    pub processed: usize,
    pub failures: usize,
    pub mean_loss: Option<f64>,
    pub ema_steps: usize,
}

impl EpochReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Mixes the run seed, epoch, image id and a stream tag into one seed.
pub fn derive_seed(seed: u64, epoch: u32, id: &str, stream: u64) -> u64 {
    let mut z = seed ^ fnv1a(id.as_bytes()).rotate_left(29) ^ ((epoch as u64) << 32) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_AUGS: u64 = 1;
const STREAM_POOL: u64 = 2;

struct ImageOutcome {
    report: ImageReport,
    pool: Option<LabelPool>,
    pred: Option<GrayMask>,
}

fn process_image(
    item: &DatasetItem,
    state: &EpochState,
    config: &PipelineConfig,
    oracles: Oracles<'_>,
    epoch: u32,
) -> Result<(ImageReport, LabelPool, GrayMask)> {
    let (w, h) = item.image.dims();
    let augs: Vec<AugSpec> = sample_augs(config.k, derive_seed(config.seed, epoch, &item.id, STREAM_AUGS));
    let coarse = coarse_fused_mask(&item.id, &item.image, &augs, oracles.teacher)?;
    let mut prompts = extract_prompts(&coarse, &config.prompt_config())?;
    if config.merge_scribble_points {
        if let Some(ann) = &item.annotation {
            if ann.labels().contains(&Label::Foreground) {
                let (fg, bg) = scribble_points(ann, &config.prompt_config())?;
                prompts.fg_points.extend(fg);
                prompts.bg_points.extend(bg);
                prompts.fg_points.dedup();
                prompts.bg_points.dedup();
            }
        }
    }
    let candidate = generate_pseudo_label(&item.id, &item.image, &augs, &prompts, oracles.sam)?;

    let prev = state.prev_pred(&item.id, w, h);
    let scores = score_candidate(&candidate, &prev, config.theta)?;
    let mut pool = state
        .pools
        .get(&item.id)
        .cloned()
        .unwrap_or_else(|| LabelPool::new(config.b));
    let update = match config.pool_policy {
        PoolPolicy::Dominance => pool.update(
            &candidate,
            &prev,
            config.theta,
            epoch,
            derive_seed(config.seed, epoch, &item.id, STREAM_POOL),
        )?,
        PoolPolicy::Latest => pool.replace_all(&candidate, config.theta, epoch),
    };

    let identity = AugSpec::IDENTITY;
    let pred = match oracles.student {
        Some(s) => s.segment(&item.id, &item.image, &identity)?,
        None => oracles.teacher.segment(&item.id, &item.image, &identity)?,
    };
    let labels: Vec<GrayMask> = pool.entries().iter().map(|e| e.mask.clone()).collect();
    let selected = labels.iter().filter(|m| select(m, &config.selection, config.theta)).count();
    let loss = match config.mode {
        SupervisionMode::Weak => {
            let unknown;
            let ann = match &item.annotation {
                Some(a) => a,
                None => {
                    unknown = SparseAnnotation::unknown(w, h);
                    &unknown
                }
            };
            weak_breakdown(&pred, &labels, ann, &config.selection, config.theta)?
        }
        SupervisionMode::Semi => semi_breakdown(&pred, &labels, item.label.as_ref(), &config.selection, config.theta)?,
    };
    let report = ImageReport {
        id: item.id.clone(),
        status: ImageStatus::Ok,
        error_code: None,
        error: None,
        pool_update: Some(update),
        candidate_scores: Some(scores),
        pool_size: pool.len(),
        selected,
        loss: Some(loss),
    };
    Ok((report, pool, pred))
}

fn run_one(item: &DatasetItem, state: &EpochState, config: &PipelineConfig, oracles: Oracles<'_>, epoch: u32) -> ImageOutcome {
    match process_image(item, state, config, oracles, epoch) {
        Ok((report, pool, pred)) => ImageOutcome {
            report,
            pool: Some(pool),
            pred: Some(pred),
        },
        Err(e) => {
            log::warn!("epoch {epoch}: image {:?} failed: {e}", item.id);
            ImageOutcome {
                report: ImageReport {
                    id: item.id.clone(),
                    status: ImageStatus::Failed,
                    error_code: Some(e.code().to_string()),
                    error: Some(e.to_string()),
                    pool_update: None,
                    candidate_scores: None,
                    pool_size: state.pools.get(&item.id).map_or(0, LabelPool::len),
                    selected: 0,
                    loss: None,
                },
                pool: None,
                pred: None,
            }
        }
    }
}

/// Runs one epoch over `dataset`. Per-image failures are reported and leave
/// that image's state untouched; they never abort the epoch.
pub fn run_epoch(
    state: &EpochState,
    config: &PipelineConfig,
    dataset: &[DatasetItem],
    oracles: Oracles<'_>,
) -> Result<(EpochState, EpochReport)> {
    config.validate()?;
    let epoch = state.epoch + 1;
    let outcomes: Vec<ImageOutcome> = if config.workers <= 1 {
        dataset.iter().map(|d| run_one(d, state, config, oracles, epoch)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| dataset.par_iter().map(|d| run_one(d, state, config, oracles, epoch)).collect())
    };

    let mut next = state.clone();
    next.epoch = epoch;
    let mut images = Vec::with_capacity(outcomes.len());
    let mut ok_losses = Vec::new();
    for (item, out) in dataset.iter().zip(outcomes) {
        if let Some(pool) = out.pool {
            if let Some(dir) = &config.pool_dir {
                pool.save(&dir.join(&item.id))?;
            }
            next.pools.insert(item.id.clone(), pool);
        }
        if let Some(pred) = out.pred {
            next.prev_preds.insert(item.id.clone(), pred);
        }
        if let Some(loss) = &out.report.loss {
            ok_losses.push(loss.total);
        }
        images.push(out.report);
    }

    let mut ema_steps = 0;
    if let (Some(t), Some(s)) = (&next.teacher_params, &next.student_params) {
        let mut t = t.clone();
        for _ in 0..ok_losses.len() {
            t = ema_update(&t, s, config.eta)?;
            ema_steps += 1;
        }
        next.teacher_params = Some(t);
    }

    let failures = images.iter().filter(|r| r.status == ImageStatus::Failed).count();
    let mean_loss = if ok_losses.is_empty() {
        None
    } else {
        Some(ok_losses.iter().sum::<f64>() / ok_losses.len() as f64)
    };
    Ok((
        next,
        EpochReport {
            epoch,
            processed: images.len() - failures,
            failures,
            images,
            mean_loss,
            ema_steps,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<Metrics>,
    pub mean_mae: f64,
    pub mean_iou: f64,
}

/// MAE and IoU of the masks binarized at 0.5; two empty masks have IoU 1.
pub fn metrics(mask: &GrayMask, gt: &GrayMask) -> Result<Metrics> {
    mask.ensure_same_dims(gt)?;
    let mut abs = 0.0;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in mask.values().iter().zip(gt.values()) {
        abs += (p as f64 - g as f64).abs();
        let (bp, bg) = (p >= 0.5, g >= 0.5);
        inter += (bp && bg) as usize;
        union += (bp || bg) as usize;
    }
    Ok(Metrics {
        mae: abs / mask.len() as f64,
        iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
    })
}

pub fn evaluate(masks: &[GrayMask], gts: &[GrayMask]) -> Result<EvalReport> {
    if masks.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} ground truths", masks.len(), gts.len())));
    }
    if masks.is_empty() {
        return Err(Error::EmptyInput("no masks to evaluate"));
    }
    let per_image = masks.iter().zip(gts).map(|(m, g)| metrics(m, g)).collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    Ok(EvalReport {
        mean_mae: per_image.iter().map(|m| m.mae).sum::<f64>() / n,
        mean_iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
        per_image,
    })
}

/// A procedurally generated image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub item: DatasetItem,
    pub truth: GrayMask,
}

/// Low-contrast blobs on a textured background, with a short foreground
/// scribble inside the first blob and a background scribble near a corner.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<SyntheticSample> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, &format!("blob{i:03}"), 7));
            let s = size as f64;
            let n_blobs = rng.gen_range(1..=3);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
                .map(|_| {
                    (
                        rng.gen_range(0.3 * s..0.7 * s),
                        rng.gen_range(0.3 * s..0.7 * s),
                        rng.gen_range(0.12 * s..0.25 * s),
                        rng.gen_range(0.12 * s..0.25 * s),
                    )
                })
                .collect();
            let inside = |x: usize, y: usize| {
                blobs.iter().any(|&(cx, cy, rx, ry)| {
                    let dx = (x as f64 - cx) / rx;
                    let dy = (y as f64 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                })
            };
            let truth = GrayMask::from_fn(size, size, |x, y| if inside(x, y) { 1.0 } else { 0.0 });
            let texture: Vec<f32> = (0..size * size).map(|_| rng.gen_range(-0.15f32..0.15)).collect();
            let image = GrayMask::from_fn(size, size, |x, y| {
                let base = if inside(x, y) { 0.52 } else { 0.48 };
                (base + texture[y * size + x]).clamp(0.0, 1.0)
            });
            let mut ann = SparseAnnotation::unknown(size, size);
            let (cx, cy, _, _) = blobs[0];
            let (cx, cy) = (cx.round() as usize, cy.round() as usize);
            for x in cx.saturating_sub(2)..=(cx + 2).min(size - 1) {
                if truth.get(x, cy) >= 0.5 {
                    ann.set(x, cy, Label::Foreground);
                }
            }
            for x in 1..size.min(8) {
                if truth.get(x, 1) < 0.5 {
                    ann.set(x, 1, Label::Background);
                }
            }
            SyntheticSample {
                item: DatasetItem {
                    id: format!("blob{i:03}"),
                    image,
                    annotation: Some(ann),
                    label: None,
                },
                truth,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub images: usize,
    pub size: usize,
    pub epochs: u32,
    pub quality_start: f64,
    pub quality_end: f64,
    /// Prompt sensitivity of the promptable segmenter.
    pub prompt_gain: f64,
    pub noise_sigma: f64,
    pub pipeline: PipelineConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            images: 16,
            size: 64,
            epochs: 20,
            quality_start: 0.5,
            quality_end: 0.95,
            prompt_gain: 0.2,
            noise_sigma: 0.6,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.size < 3 || self.epochs == 0 {
            return Err(Error::Config("simulation needs images, size >= 3 and epochs".into()));
        }
        for q in [self.quality_start, self.quality_end] {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("quality {q} outside [0, 1]")));
            }
        }
        if !(self.prompt_gain >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("prompt_gain and noise_sigma must be >= 0".into()));
        }
        self.pipeline.validate()
    }

    /// Linear quality ramp, epoch 1 at `quality_start`, last epoch at `quality_end`.
    pub fn quality(&self, epoch: u32) -> f64 {
        if self.epochs <= 1 {
            return self.quality_end;
        }
        let f = (epoch - 1) as f64 / (self.epochs - 1) as f64;
        self.quality_start + f * (self.quality_end - self.quality_start)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationEpoch {
    pub epoch: u32,
    pub quality: f64,
    /// Mean over images of the highest IoU among stored labels (0 for an empty pool).
    pub mean_best_iou: f64,
    /// Mean IoU of the most recently stored label.
    pub mean_latest_iou: f64,
    pub mean_loss: Option<f64>,
    pub failures: usize,
    pub report: EpochReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub epochs: Vec<SimulationEpoch>,
    pub initial_mean_best_iou: f64,
    pub final_mean_best_iou: f64,
}

impl SimulationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Seeded end-to-end run on a synthetic corpus with oracles whose quality
/// ramps linearly across epochs.
pub fn simulate(config: &SimulationConfig) -> Result<SimulationReport> {
    config.validate()?;
    let pc = &config.pipeline;
    let corpus = synthetic_corpus(config.images, config.size, pc.seed);
    let truths: Arc<BTreeMap<String, GrayMask>> =
        Arc::new(corpus.iter().map(|s| (s.item.id.clone(), s.truth.clone())).collect());
    let dataset: Vec<DatasetItem> = corpus.iter().map(|s| s.item.clone()).collect();
    let base = SyntheticOracle::new(SyntheticOracleConfig::default(), truths)?;

    let mut state = EpochState::new();
    let mut epochs = Vec::with_capacity(config.epochs as usize);
    for n in 1..=config.epochs {
        let q = config.quality(n);
        let teacher = base.with_config(SyntheticOracleConfig {
            base_quality: q,
            prompt_gain: 0.0,
            noise_sigma: config.noise_sigma,
            seed: derive_seed(pc.seed, n, "teacher", 11),
        })?;
        let sam = base.with_config(SyntheticOracleConfig {
            base_quality: q,
            prompt_gain: config.prompt_gain,
            noise_sigma: config.noise_sigma,
            seed: derive_seed(pc.seed, n, "sam", 12),
        })?;
        let oracles = Oracles {
            teacher: &teacher,
            sam: &sam,
            student: None,
        };
        let (next, report) = run_epoch(&state, pc, &dataset, oracles)?;
        state = next;

        let mut best = 0.0;
        let mut latest = 0.0;
        for sample in &corpus {
            if let Some(pool) = state.pools.get(&sample.item.id) {
                let ious = pool
                    .entries()
                    .iter()
                    .map(|e| metrics(&e.mask, &sample.truth).map(|m| (e.epoch_added, m.iou)))
                    .collect::<Result<Vec<_>>>()?;
                best += ious.iter().map(|&(_, v)| v).fold(0.0, f64::max);
                // newest entry; ties cannot occur since one label enters per epoch
                latest += ious.iter().max_by_key(|&&(e, _)| e).map_or(0.0, |&(_, v)| v);
            }
        }
        let count = corpus.len() as f64;
        epochs.push(SimulationEpoch {
            epoch: n,
            quality: q,
            mean_best_iou: best / count,
            mean_latest_iou: latest / count,
            mean_loss: report.mean_loss,
            failures: report.failures,
            report,
        });
    }
    Ok(SimulationReport {
        initial_mean_best_iou: epochs.first().map_or(0.0, |e| e.mean_best_iou),
        final_mean_best_iou: epochs.last().map_or(0.0, |e| e.mean_best_iou),
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perfect() -> SyntheticOracleConfig {
        SyntheticOracleConfig::default()
    }

    fn square(size: usize) -> GrayMask {
        GrayMask::from_fn(size, size, |x, y| if (4..12).contains(&x) && (5..11).contains(&y) { 1.0 } else { 0.0 })
    }

    fn single(id: &str, gt: &GrayMask) -> (Vec<DatasetItem>, SyntheticOracle) {
        let mut ann = SparseAnnotation::unknown(16, 16);
        ann.set(7, 7, Label::Foreground);
        ann.set(0, 0, Label::Background);
        let item = DatasetItem {
            id: id.into(),
            image: gt.clone(),
            annotation: Some(ann),
            label: Some(gt.clone()),
        };
        (vec![item], SyntheticOracle::single(id, gt.clone(), perfect()).unwrap())
    }

    #[test]
    fn perfect_oracles_first_epoch() {
        let gt = square(16);
        let (data, oracle) = single("a", &gt);
        let oracles = Oracles {
            teacher: &oracle,
            sam: &oracle,
            student: None,
        };
        let config = PipelineConfig {
            k: 1,
            ..PipelineConfig::default()
        };
        let (state, report) = run_epoch(&EpochState::new(), &config, &data, oracles).unwrap();
        assert_eq!(report.failures, 0);
        let pool = &state.pools["a"];
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.entries()[0].mask, gt);
        assert!(report.images[0].loss.as_ref().unwrap().total < 1e-5);
        assert_eq!(state.epoch, 1);
        assert_eq!(state.prev_preds["a"], gt);

        // downscaled views soften edges but keep the shape
        let (state, report) = run_epoch(&EpochState::new(), &PipelineConfig::default(), &data, oracles).unwrap();
        assert_eq!(report.failures, 0);
        assert!(metrics(&state.pools["a"].entries()[0].mask, &gt).unwrap().iou > 0.9);
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let gt = square(16);
        let (mut data, oracle) = single("a", &gt);
        data.push(DatasetItem {
            id: "unknown".into(),
            image: gt.clone(),
            annotation: None,
            label: None,
        });
        let oracles = Oracles {
            teacher: &oracle,
            sam: &oracle,
            student: None,
        };
        let (state, report) = run_epoch(&EpochState::new(), &PipelineConfig::default(), &data, oracles).unwrap();
        assert_eq!(report.failures, 1);
        assert_eq!(report.images[1].error_code.as_deref(), Some("E_ORACLE_FAILURE"));
        assert!(state.pools.contains_key("a"));
        assert!(!state.pools.contains_key("unknown"));

        let empty = GrayMask::filled(16, 16, 0.0);
        let (data, oracle) = single("z", &empty);
        let oracles = Oracles {
            teacher: &oracle,
            sam: &oracle,
            student: None,
        };
        let (_, report) = run_epoch(&EpochState::new(), &PipelineConfig::default(), &data, oracles).unwrap();
        assert_eq!(report.images[0].error_code.as_deref(), Some("E_NO_FOREGROUND"));
    }

    #[test]
    fn inputs_untouched_and_replay_identical() {
        let gt = square(16);
        let (data, _) = single("a", &gt);
        let before = data.clone();
        let noisy = SyntheticOracle::single(
            "a",
            gt.clone(),
            SyntheticOracleConfig {
                base_quality: 0.95,
                prompt_gain: 0.1,
                noise_sigma: 0.05,
                seed: 5,
            },
        )
        .unwrap();
        let oracles = Oracles {
            teacher: &noisy,
            sam: &noisy,
            student: None,
        };
        let run = |workers| {
            let dir = tempfile::tempdir().unwrap();
            let config = PipelineConfig {
                workers,
                pool_dir: Some(dir.path().to_path_buf()),
                ..PipelineConfig::default()
            };
            let mut state = EpochState::new();
            let mut reports = Vec::new();
            for _ in 0..4 {
                let (s, r) = run_epoch(&state, &config, &data, oracles).unwrap();
                state = s;
                reports.push(serde_json::to_string(&r).unwrap());
            }
            let files: Vec<Vec<u8>> = (0..3)
                .filter_map(|b| fs::read(dir.path().join("a").join(format!("entry_{b}.mskf"))).ok())
                .chain(std::iter::once(fs::read(dir.path().join("a/scores.json")).unwrap()))
                .collect();
            (reports, files, state)
        };
        let (r1, f1, s1) = run(1);
        let (r2, f2, s2) = run(3);
        assert_eq!(r1, r2);
        assert_eq!(f1, f2);
        assert_eq!(s1, s2);
        assert_eq!(data, before);
    }

    #[test]
    fn ema_runs_once_per_processed_image() {
        let gt = square(16);
        let (data, oracle) = single("a", &gt);
        let oracles = Oracles {
            teacher: &oracle,
            sam: &oracle,
            student: None,
        };
        let t = ParamVector::from_arrays(vec![("w".into(), vec![1.0])]);
        let s = ParamVector::from_arrays(vec![("w".into(), vec![0.0])]);
        let state = EpochState::with_params(t, s).unwrap();
        let (state, report) = run_epoch(&state, &PipelineConfig::default(), &data, oracles).unwrap();
        assert_eq!(report.ema_steps, 1);
        assert_eq!(state.teacher_params.unwrap().get("w").unwrap()[0], 0.996);
    }

    #[test]
    fn metric_examples() {
        let gt = square(16);
        let m = metrics(&gt, &gt).unwrap();
        assert_eq!((m.mae, m.iou), (0.0, 1.0));
        let m = metrics(&gt.map(|v| 1.0 - v), &gt).unwrap();
        assert_eq!((m.mae, m.iou), (1.0, 0.0));
        let m = metrics(&GrayMask::filled(4, 4, 0.25), &GrayMask::filled(4, 4, 0.0)).unwrap();
        assert_eq!(m.mae, 0.25);
        assert!(evaluate(std::slice::from_ref(&gt), &[GrayMask::filled(3, 3, 0.0)]).is_err());
        let r = evaluate(&[gt.clone(), gt.map(|v| 1.0 - v)], &[gt.clone(), gt.clone()]).unwrap();
        assert_eq!(r.mean_iou, 0.5);
    }

    #[test]
    fn manifest_loading() {
        let dir = tempfile::tempdir().unwrap();
        let gt = square(16);
        crate::raster::save_mask(&gt, dir.path().join("img.mskf")).unwrap();
        crate::raster::save_mask(&gt, dir.path().join("gt.mskf")).unwrap();
        let manifest = dir.path().join("data.json");
        fs::write(
            &manifest,
            r#"[{"id":"a","image":"img.mskf","annotation":"gt.mskf","label":"gt.mskf"},
                {"id":"b","image":"img.mskf","annotation":null,"label":null}]"#,
        )
        .unwrap();
        let data = load_dataset(&manifest, Thresholds::default()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].annotation.as_ref().unwrap().labeled_count(), 256);
        assert!(data[1].label.is_none());
        assert_eq!(truths_from_labels(&data).len(), 1);
        fs::write(&manifest, r#"[{"id":"a","image":"img.mskf","annotation":null,"label":null},{"id":"a","image":"img.mskf","annotation":null,"label":null}]"#).unwrap();
        assert!(load_dataset(&manifest, Thresholds::default()).is_err());
    }

    #[test]
    fn corpus_is_seeded() {
        let a = synthetic_corpus(3, 32, 1);
        assert_eq!(a, synthetic_corpus(3, 32, 1));
        assert_ne!(a, synthetic_corpus(3, 32, 2));
        for s in &a {
            assert!(s.truth.values().contains(&1.0));
            assert!(s.item.annotation.as_ref().unwrap().labeled_count() > 0);
        }
    }
}
