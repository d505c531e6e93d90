//! `see`: command-line front end for the pseudo-label engine.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use see_core::augment::{fuse, sample_augs};
use see_core::hgfg::check_gradients;
use see_core::oracle::{generate_pseudo_label, SegmenterHandle, SegmenterSpec, SubprocessConfig};
use see_core::pipeline::{
    evaluate, load_dataset, run_epoch, simulate, truths_from_labels, EpochState, OracleSet, PipelineConfig,
    PoolPolicy, SimulationConfig, SupervisionMode,
};
use see_core::pool::{score_candidate, LabelPool};
use see_core::prompts::{extract_prompts, PromptSet};
use see_core::raster::{load_mask, save_mask, write_pgm, GrayMask, SparseAnnotation};
use see_core::supervise::{ema_update, select, semi_breakdown, weak_breakdown, weight_map, ParamVector};

const ORACLE_ENV: &str = "SEE_ORACLE_CMD";

#[derive(Parser, Debug)]
#[command(name = "see", version, about = "Pseudo-label engine for incompletely supervised segmentation")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path.
    #[arg(short = 'o', long = "out", global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-image processing.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Also write an 8-bit PGM preview next to every mask written.
    #[arg(long, global = true)]
    dump_pgm: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Weak,
    Semi,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Average several masks into one.
    Fuse {
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
    /// Extract point, box and mask prompts from a coarse mask.
    Prompts {
        coarse: PathBuf,
        /// Where to write the mask prompt (defaults next to the JSON output).
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Generate a pseudo-label through the promptable segmenter.
    Pseudo {
        image: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Image identifier passed to the segmenter.
        #[arg(long, default_value = "image")]
        id: String,
        /// Ground truth for a synthetic segmenter.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Number of augmented views (overrides the configuration).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Offer a candidate label to a pool directory.
    PoolUpdate {
        pool_dir: PathBuf,
        candidate: PathBuf,
        prev_pred: PathBuf,
        #[arg(long, default_value_t = 1)]
        epoch: u32,
    },
    /// Selection verdict and pixel weight map of a mask.
    Weight { mask: PathBuf },
    /// Loss terms of a prediction against a pool and annotations.
    Loss {
        pred: PathBuf,
        pool_dir: PathBuf,
        #[arg(long)]
        annotation: Option<PathBuf>,
        #[arg(long)]
        label: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Exponential moving average of teacher parameters toward the student.
    Ema {
        teacher: PathBuf,
        student: PathBuf,
        #[arg(long, default_value_t = see_core::supervise::DEFAULT_ETA)]
        eta: f64,
    },
    /// Finite-difference check of the grouping kernel's gradients.
    HgfgCheck {
        /// HxWxC
        #[arg(long, default_value = "3x3x4")]
        dims: String,
    },
    /// Run epochs, on a dataset manifest or on the built-in synthetic corpus.
    Simulate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        pool_dir: Option<PathBuf>,
    },
    /// MAE and IoU of predicted masks against ground truths with matching names.
    Eval { pred_dir: PathBuf, gt_dir: PathBuf },
}

#[derive(Debug)]
enum CliError {
    Core(see_core::Error),
    Usage(String),
    Other { code: &'static str, message: String },
}

impl From<see_core::Error> for CliError {
    fn from(e: see_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "E_USAGE",
            CliError::Other { code, .. } => code,
        }
    }

    fn exit(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Other {
            code: "E_IO",
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
            CliError::Other { message, .. } => f.write_str(message),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            ExitCode::from(e.exit())
        }
    }
}

fn require_out(cli: &Cli) -> CliResult<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this subcommand needs -o/--out".into()))
}

fn pipeline_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    apply_oracle_env(&mut config);
    Ok(config)
}

/// Points every subprocess segmenter at the command from the environment.
fn apply_oracle_env(config: &mut PipelineConfig) {
    let Ok(cmd) = std::env::var(ORACLE_ENV) else {
        return;
    };
    let command: Vec<String> = cmd.split_whitespace().map(String::from).collect();
    if command.is_empty() {
        return;
    }
    for spec in [&mut config.teacher, &mut config.sam, &mut config.student] {
        match spec {
            Some(SegmenterSpec::Subprocess(s)) => s.command = command.clone(),
            None => {}
            Some(SegmenterSpec::Synthetic(_)) => {}
        }
    }
    if config.sam.is_none() {
        config.sam = Some(SegmenterSpec::Subprocess(SubprocessConfig {
            command,
            ..SubprocessConfig::default()
        }));
    }
}

fn write_mask(mask: &GrayMask, path: &Path, dump_pgm: bool) -> CliResult {
    save_mask(mask, path)?;
    if dump_pgm {
        write_pgm(mask, path.with_extension("pgm"))?;
    }
    Ok(())
}

fn emit(value: &Value, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("json values always serialize");
    match out {
        Some(path) => fs::write(path, text + "\n").map_err(|e| CliError::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types always serialize")
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Fuse { masks } => {
            let out = require_out(&cli)?;
            let loaded = masks.iter().map(load_mask).collect::<Result<Vec<_>, _>>()?;
            write_mask(&fuse(&loaded)?, out, cli.dump_pgm)
        }
        Command::Prompts { coarse, mask_out } => {
            let out = require_out(&cli)?;
            let config = pipeline_config(&cli)?;
            let set = extract_prompts(&load_mask(coarse)?, &config.prompt_config())?;
            let mask_path = mask_out.clone().unwrap_or_else(|| out.with_extension("mask.mskf"));
            set.save(out, &mask_path)?;
            if cli.dump_pgm {
                write_pgm(&set.mask_prompt, mask_path.with_extension("pgm"))?;
            }
            Ok(())
        }
        Command::Pseudo {
            image,
            prompts,
            id,
            truth,
            k,
        } => {
            let out = require_out(&cli)?;
            let mut config = pipeline_config(&cli)?;
            if let Some(k) = k {
                config.k = *k;
            }
            config.validate()?;
            let spec = config
                .sam
                .clone()
                .ok_or_else(|| see_core::Error::Config(format!("no promptable segmenter configured (set `sam` or {ORACLE_ENV})")))?;
            let image = load_mask(image)?;
            let mut truths = std::collections::BTreeMap::new();
            if let Some(t) = truth {
                truths.insert(id.clone(), load_mask(t)?);
            }
            let sam = SegmenterHandle::from_spec(&spec, Arc::new(truths))?;
            let prompts = PromptSet::load(prompts)?;
            let augs = sample_augs(config.k, config.seed);
            let label = generate_pseudo_label(id, &image, &augs, &prompts, &sam)?;
            write_mask(&label, out, cli.dump_pgm)
        }
        Command::PoolUpdate {
            pool_dir,
            candidate,
            prev_pred,
            epoch,
        } => {
            let config = pipeline_config(&cli)?;
            config.validate()?;
            let candidate = load_mask(candidate)?;
            let prev = load_mask(prev_pred)?;
            let mut pool = LabelPool::load(pool_dir, config.b)?;
            let scores = score_candidate(&candidate, &prev, config.theta)?;
            let update = match config.pool_policy {
                PoolPolicy::Dominance => pool.update(&candidate, &prev, config.theta, *epoch, config.seed)?,
                PoolPolicy::Latest => pool.replace_all(&candidate, config.theta, *epoch),
            };
            pool.save(pool_dir)?;
            if cli.dump_pgm {
                for (b, e) in pool.entries().iter().enumerate() {
                    write_pgm(&e.mask, pool_dir.join(format!("entry_{b}.pgm")))?;
                }
            }
            emit(
                &json!({ "update": to_value(&update), "candidate_scores": to_value(&scores), "pool_size": pool.len() }),
                cli.out.as_deref(),
            )
        }
        Command::Weight { mask } => {
            let config = pipeline_config(&cli)?;
            config.validate()?;
            let mask = load_mask(mask)?;
            let selected = select(&mask, &config.selection, config.theta);
            if let Some(out) = &cli.out {
                write_mask(&weight_map(&mask, &config.selection, config.theta), out, cli.dump_pgm)?;
            }
            println!("{}", if selected { "selected" } else { "rejected" });
            Ok(())
        }
        Command::Loss {
            pred,
            pool_dir,
            annotation,
            label,
            mode,
        } => {
            let config = pipeline_config(&cli)?;
            config.validate()?;
            let pred = load_mask(pred)?;
            let pool = LabelPool::load(pool_dir, config.b)?;
            let labels: Vec<GrayMask> = pool.entries().iter().map(|e| e.mask.clone()).collect();
            let mode = match mode {
                Some(Mode::Weak) => SupervisionMode::Weak,
                Some(Mode::Semi) => SupervisionMode::Semi,
                None => config.mode,
            };
            let breakdown = match mode {
                SupervisionMode::Weak => {
                    let ann = match annotation {
                        Some(p) => {
                            let m = load_mask(p)?;
                            pred.ensure_same_dims(&m)?;
                            SparseAnnotation::from_mask(&m, config.thresholds)
                        }
                        None => SparseAnnotation::unknown(pred.width(), pred.height()),
                    };
                    weak_breakdown(&pred, &labels, &ann, &config.selection, config.theta)?
                }
                SupervisionMode::Semi => {
                    let full = label.as_ref().map(load_mask).transpose()?;
                    semi_breakdown(&pred, &labels, full.as_ref(), &config.selection, config.theta)?
                }
            };
            emit(&to_value(&breakdown), cli.out.as_deref())
        }
        Command::Ema { teacher, student, eta } => {
            let out = require_out(&cli)?;
            let t = ParamVector::load(teacher)?;
            let s = ParamVector::load(student)?;
            ema_update(&t, &s, *eta)?.save(out)?;
            Ok(())
        }
        Command::HgfgCheck { dims } => {
            let parsed = parse_dims(dims)?;
            let report = check_gradients(cli.seed.unwrap_or(1), parsed)?;
            emit(&to_value(&report), cli.out.as_deref())?;
            if report.passed {
                Ok(())
            } else {
                Err(CliError::Other {
                    code: "E_GRADIENT_CHECK",
                    message: format!(
                        "max relative error {:e} exceeds {:e}",
                        report.max_rel_error, report.tolerance
                    ),
                })
            }
        }
        Command::Simulate {
            dataset,
            epochs,
            pool_dir,
        } => match dataset {
            Some(manifest) => run_dataset(&cli, manifest, epochs.unwrap_or(1), pool_dir.clone()),
            None => run_synthetic(&cli, *epochs, pool_dir.clone()),
        },
        Command::Eval { pred_dir, gt_dir } => run_eval(&cli, pred_dir, gt_dir),
    }
}

fn parse_dims(s: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || CliError::Usage(format!("--dims expects HxWxC, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    if n.contains(&0) {
        return Err(bad());
    }
    Ok((n[0], n[1], n[2]))
}

fn run_synthetic(cli: &Cli, epochs: Option<u32>, pool_dir: Option<PathBuf>) -> CliResult {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str::<SimulationConfig>(&text).map_err(|e| CliError::Core(see_core::Error::Config(format!("{}: {e}", path.display()))))?
        }
        None => SimulationConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.pipeline.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.pipeline.workers = w;
    }
    if let Some(n) = epochs {
        config.epochs = n;
    }
    if pool_dir.is_some() {
        config.pipeline.pool_dir = pool_dir;
    }
    let report = simulate(&config)?;
    match &cli.out {
        Some(path) => report.save(path)?,
        None => {
            let summary: Vec<Value> = report
                .epochs
                .iter()
                .map(|e| {
                    json!({
                        "epoch": e.epoch,
                        "quality": e.quality,
                        "mean_best_iou": e.mean_best_iou,
                        "mean_latest_iou": e.mean_latest_iou,
                        "failures": e.failures,
                    })
                })
                .collect();
            emit(&Value::Array(summary), None)?;
        }
    }
    Ok(())
}

fn run_dataset(cli: &Cli, manifest: &Path, epochs: u32, pool_dir: Option<PathBuf>) -> CliResult {
    let mut config = pipeline_config(cli)?;
    if pool_dir.is_some() {
        config.pool_dir = pool_dir;
    }
    config.validate()?;
    let dataset = load_dataset(manifest, config.thresholds)?;
    let oracles = OracleSet::from_config(&config, truths_from_labels(&dataset))?;
    let mut state = match (&config.teacher_params, &config.student_params) {
        (Some(t), Some(s)) => EpochState::with_params(ParamVector::load(t)?, ParamVector::load(s)?)?,
        _ => EpochState::new(),
    };
    if let Some(out) = &cli.out {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    }
    let mut summary = Vec::new();
    for _ in 0..epochs {
        let (next, report) = run_epoch(&state, &config, &dataset, oracles.as_oracles())?;
        state = next;
        if let Some(out) = &cli.out {
            report.save(&out.join(format!("epoch_{:03}.json", report.epoch)))?;
        }
        summary.push(json!({
            "epoch": report.epoch,
            "processed": report.processed,
            "failures": report.failures,
            "mean_loss": report.mean_loss,
        }));
    }
    if let (Some(out), Some(t)) = (&cli.out, &state.teacher_params) {
        t.save(out.join("teacher.pvec"))?;
    }
    emit(&Value::Array(summary), None)
}

fn run_eval(cli: &Cli, pred_dir: &Path, gt_dir: &Path) -> CliResult {
    let mut names: Vec<String> = fs::read_dir(pred_dir)
        .map_err(|e| CliError::io(pred_dir, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".mskf"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(see_core::Error::EmptyInput("no .mskf files in the prediction directory").into());
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    for n in &names {
        preds.push(load_mask(pred_dir.join(n))?);
        gts.push(load_mask(gt_dir.join(n))?);
    }
    let report = evaluate(&preds, &gts)?;
    let images: Vec<Value> = names
        .iter()
        .zip(&report.per_image)
        .map(|(n, m)| json!({ "name": n, "mae": m.mae, "iou": m.iou }))
        .collect();
    emit(
        &json!({ "images": images, "mean_mae": report.mean_mae, "mean_iou": report.mean_iou }),
        cli.out.as_deref(),
    )
}
