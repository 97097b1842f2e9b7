use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use assemkit::codec::{detokenize, pose_to_vector, tokenize, PoseTokens, PoseVector9, NUM_BINS};
use assemkit::encoder::ModelConfig;
use assemkit::io::{
    load_checkpoint, load_manifest, load_step, read_json, read_jsonl, read_point_cloud, save_checkpoint, validate_manifest,
    write_json, write_jsonl, write_point_cloud, Manifest, PredictionRecord, Split, StepRecord,
};
use assemkit::mesh::{canonical_normalize, sample_surface};
use assemkit::metrics::{aggregate, EvalResult};
use assemkit::planner::{build_connectivity, infer_order};
use assemkit::rng::derive_seed;
use assemkit::synth::{generate_dataset, specs_for, write_asset, DatasetConfig, Family};
use assemkit::trainer::{predict, train_warmup, PlateauSchedule, TrainSample, WarmupConfig};
use assemkit::{Error, PointCloud, Result, RigidTransform, TriangleMesh};

#[derive(Parser)]
#[command(name = "assemkit", version, about = "Assembly pose toolkit: data generation, planning, codec, training and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Connectivity threshold in canonical units.
    #[arg(long, global = true, default_value_t = assemkit::DEFAULT_TAU)]
    tau: f64,
    /// Surface samples per part before farthest point sampling.
    #[arg(long, global = true, default_value_t = assemkit::DEFAULT_POINTS_COARSE)]
    points_coarse: usize,
    /// Points per fixed/moving step cloud.
    #[arg(long, global = true, default_value_t = assemkit::DEFAULT_POINTS)]
    points: usize,
    /// Pose vocabulary size; only the 201-bin codec is implemented.
    #[arg(long, global = true, default_value_t = NUM_BINS as usize)]
    bins: usize,
    #[arg(long, global = true, default_value_t = assemkit::DEFAULT_SR_THRESHOLD)]
    sr_threshold: f64,
    /// Bound on the random rotation of moving parts (full SO(3) when absent).
    #[arg(long, global = true)]
    rotation_limit_deg: Option<f64>,
    #[arg(long, global = true, default_value_t = 1.0)]
    translation_scale: f64,
    /// Bound on the random translation of moving parts.
    #[arg(long, global = true, default_value_t = 0.0)]
    translation_limit: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Rescale OBJ assets into the canonical frame.
    Normalize {
        /// Directory of asset subdirectories (or of the OBJ parts of one asset).
        input: PathBuf,
        output: PathBuf,
    },
    /// Generate a synthetic dataset.
    GenSynth {
        #[arg(long, value_delimiter = ',', default_value = "stack,table,peg_board,fractured_block")]
        families: Vec<Family>,
        /// Assets per family.
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Use the fixed default dimensions instead of random ones.
        #[arg(long)]
        fixed_dims: bool,
        #[arg(long, default_value_t = 0.1)]
        validation_fraction: f64,
        /// Apply one shared random motion to the fixed cloud and label too.
        #[arg(long)]
        randomize_fixed: bool,
        /// Largest tolerated fraction of failed assets.
        #[arg(long, default_value_t = 0.01)]
        max_failure_rate: f64,
    },
    /// Area-weighted surface sample of one OBJ mesh.
    Sample {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of samples (defaults to --points-coarse).
        #[arg(long)]
        count: Option<usize>,
        /// Farthest-point downsample of the surface sample.
        #[arg(long)]
        fps: Option<usize>,
    },
    /// Connectivity and assembly order of the parts in a directory.
    Plan {
        /// Directory of OBJ parts or point-cloud files.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build assembly steps for the OBJ parts in a directory.
    Steps {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "custom")]
        category: String,
        #[arg(long)]
        randomize_fixed: bool,
    },
    /// Encode a pose to tokens or decode tokens to a pose.
    Tokenize {
        /// JSON file holding a rigid transform.
        #[arg(long, conflicts_with_all = ["vector", "decode"])]
        pose: Option<PathBuf>,
        /// Nine comma-separated pose-vector entries.
        #[arg(long, allow_hyphen_values = true, conflicts_with = "decode")]
        vector: Option<String>,
        /// Token text to decode.
        #[arg(long)]
        decode: Option<String>,
    },
    /// Check every reference and codec record of a dataset.
    Validate { data: PathBuf },
    /// Geometry warm-up training on a dataset's training split.
    TrainWarmup {
        data: PathBuf,
        /// Checkpoint of the best parameters.
        #[arg(long)]
        out: PathBuf,
        /// Per-evaluation training log (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Full training configuration (JSON); overrides the flags below.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 256)]
        encoder_points: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 10.0)]
        grad_clip: f64,
    },
    /// Write predictions for a split from a checkpoint or a baseline.
    Predict {
        data: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        baseline: Option<Baseline>,
        #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = Form::Pose)]
        form: Form,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset.
    Eval {
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate evaluation results per category.
    Report {
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Identity,
    Target,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Pose,
    Tokens,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotFound(_) => 4,
        Error::Validation(_) | Error::SchemaVersion { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::NanLoss { .. } | Error::Generation { .. } => 1,
        _ => 2,
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_file() {
        data.to_path_buf()
    } else {
        data.join("manifest.json")
    }
}

fn dataset_root(data: &Path) -> PathBuf {
    if data.is_file() {
        data.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        data.to_path_buf()
    }
}

fn open_dataset(data: &Path) -> Result<(Manifest, PathBuf)> {
    Ok((load_manifest(&manifest_path(data))?, dataset_root(data)))
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

fn read_parts(dir: &Path) -> Result<Vec<TriangleMesh>> {
    sorted_files(dir, "obj")?.iter().map(|p| TriangleMesh::read_obj(p)).collect()
}

fn dataset_config(c: &Common, validation_fraction: f64, randomize_fixed: bool) -> DatasetConfig {
    DatasetConfig {
        points_coarse: c.points_coarse,
        points: c.points,
        tau: c.tau,
        rotation_limit_degrees: c.rotation_limit_deg,
        translation_limit: c.translation_limit,
        randomize_fixed,
        translation_scale: c.translation_scale,
        validation_fraction,
    }
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn normalize(input: &Path, output: &Path) -> Result<()> {
    let mut assets: Vec<(PathBuf, PathBuf)> = Vec::new();
    if !sorted_files(input, "obj")?.is_empty() {
        assets.push((input.to_path_buf(), output.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        if !sorted_files(&d, "obj")?.is_empty() {
            let name = d.file_name().expect("directory entry has a name");
            assets.push((d.clone(), output.join(name)));
        }
    }
    if assets.is_empty() {
        return Err(Error::InvalidArgument(format!("no assets found in {}", input.display())));
    }
    for (src, dst) in assets {
        let files = sorted_files(&src, "obj")?;
        let parts = files.iter().map(|p| TriangleMesh::read_obj(p)).collect::<Result<Vec<_>>>()?;
        let (parts, norm) = canonical_normalize(&parts)?;
        std::fs::create_dir_all(&dst)?;
        for (file, part) in files.iter().zip(&parts) {
            let name = file.file_name().expect("file has a name");
            assemkit::io::write_atomic(&dst.join(name), part.to_obj().as_bytes())?;
        }
        write_json(&dst.join("normalization.json"), &norm)?;
        info!("{} -> {} (scale {})", src.display(), dst.display(), norm.scale);
    }
    Ok(())
}

fn plan(c: &Common, input: &Path, out: Option<&Path>) -> Result<()> {
    // meshes win when both are present; asset directories also hold step clouds
    let parts = read_parts(input)?;
    let clouds: Vec<PointCloud> = if !parts.is_empty() {
        parts
            .iter()
            .enumerate()
            .map(|(k, m)| sample_surface(m, c.points_coarse, derive_seed(c.seed, 0x5A00 + k as u64)))
            .collect::<Result<_>>()?
    } else {
        sorted_files(input, "pc")?.iter().map(|p| read_point_cloud(p)).collect::<Result<_>>()?
    };
    let m = build_connectivity(&clouds, c.tau)?;
    let order = infer_order(&clouds, &m)?;
    emit(
        out,
        &json!({ "tau": c.tau, "parts": clouds.len(), "edges": m.edges(), "order": order }),
    )
}

fn steps(c: &Common, input: &Path, out: &Path, id: Option<String>, category: &str, randomize_fixed: bool) -> Result<()> {
    let parts = read_parts(input)?;
    if parts.is_empty() {
        return Err(Error::InvalidArgument(format!("no OBJ parts in {}", input.display())));
    }
    let id = id.unwrap_or_else(|| {
        input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "asset".into())
    });
    let config = dataset_config(c, 0.0, randomize_fixed);
    let (asset, records) = write_asset(&id, category, &parts, c.seed, &config, out)?;
    write_json(&out.join("asset.json"), &asset)?;
    write_jsonl(&out.join("steps.jsonl"), &records)
}

fn parse_vector(s: &str) -> Result<PoseVector9> {
    let values = s
        .split(|ch: char| ch == ',' || ch.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number '{t}': {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    let arr: [f64; 9] = values
        .try_into()
        .map_err(|v: Vec<f64>| Error::InvalidArgument(format!("expected 9 values, got {}", v.len())))?;
    if arr.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("pose vector must be finite".into()));
    }
    Ok(PoseVector9(arr))
}

fn tokenize_cmd(c: &Common, pose: Option<PathBuf>, vector: Option<String>, decode: Option<String>) -> Result<()> {
    if let Some(text) = decode {
        let tokens: PoseTokens = text.parse()?;
        let pose = detokenize(&tokens, c.translation_scale)?;
        return emit(None, &json!({ "tokens": tokens, "pose": pose }));
    }
    let (vector, saturated) = match (pose, vector) {
        (Some(p), _) => {
            let t: RigidTransform = read_json(&p)?;
            let e = pose_to_vector(&t, c.translation_scale)?;
            (e.vector, e.saturated)
        }
        (None, Some(v)) => parse_vector(&v)?.clamped(),
        (None, None) => return Err(Error::InvalidArgument("one of --pose, --vector or --decode is required".into())),
    };
    let tokens = tokenize(&vector);
    emit(
        None,
        &json!({ "tokens": tokens, "text": tokens.to_string(), "pose_vector": vector.0, "saturated": saturated }),
    )
}

fn load_samples<'a>(
    manifest: &'a Manifest,
    root: &Path,
    split: Option<Split>,
    k: usize,
    encoder_points: Option<usize>,
) -> Result<Vec<(&'a StepRecord, TrainSample)>> {
    use rayon::prelude::*;
    let records: Vec<&StepRecord> = manifest
        .steps
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .collect();
    records
        .par_iter()
        .map(|r| {
            let step = load_step(root, r)?;
            Ok((*r, TrainSample::from_step(&r.id, &r.category, &step, k, encoder_points)?))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    c: &Common,
    data: &Path,
    out: &Path,
    log_path: Option<&Path>,
    config_path: Option<&Path>,
    channels: usize,
    encoder_points: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    grad_clip: f64,
) -> Result<()> {
    let (manifest, root) = open_dataset(data)?;
    let config = match config_path {
        Some(p) => read_json::<WarmupConfig>(p)?,
        None => WarmupConfig {
            model: ModelConfig::desk(channels),
            learning_rate: lr,
            momentum,
            batch_size,
            epochs,
            seed: c.seed,
            rotation_limit_degrees: manifest.config.rotation_limit_degrees,
            eval_every: None,
            plateau: Some(PlateauSchedule::default()),
            grad_clip: Some(grad_clip),
            encoder_points: Some(encoder_points),
            ..WarmupConfig::default()
        },
    };
    config.validate()?;
    let k = config.model.encoder.k;
    let train = load_samples(&manifest, &root, Some(Split::Train), k, config.encoder_points)?;
    let validation = load_samples(&manifest, &root, Some(Split::Validation), k, config.encoder_points)?;
    let train: Vec<TrainSample> = train.into_iter().map(|(_, s)| s).collect();
    let validation: Vec<TrainSample> = validation.into_iter().map(|(_, s)| s).collect();
    info!("training on {} steps, monitoring {}", train.len(), validation.len());
    let outcome = train_warmup(&train, &validation, &config)?;
    let meta = json!({ "config": config, "best_loss": outcome.best_loss });
    save_checkpoint(out, &outcome.best, &meta)?;
    if let Some(p) = log_path {
        // wall-clock time would make logs differ between runs
        let mut records = outcome.records;
        for r in &mut records {
            r.wall_time = 0.0;
        }
        write_jsonl(p, &records)?;
    }
    info!("best monitored loss {:.6}", outcome.best_loss);
    Ok(())
}

fn predict_cmd(
    data: &Path,
    checkpoint: Option<&Path>,
    baseline: Option<Baseline>,
    split: SplitArg,
    form: Form,
    out: &Path,
) -> Result<()> {
    let (manifest, root) = open_dataset(data)?;
    let split = match split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Validation => Some(Split::Validation),
        SplitArg::All => None,
    };
    let selected: Vec<&StepRecord> = manifest
        .steps
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .collect();
    let poses: Vec<(&StepRecord, RigidTransform)> = match (checkpoint, baseline) {
        (_, Some(Baseline::Identity)) => selected.iter().map(|r| (*r, RigidTransform::identity())).collect(),
        (_, Some(Baseline::Target)) => selected.iter().map(|r| (*r, r.target_pose)).collect(),
        (Some(ckpt), None) => {
            let (model, meta) = load_checkpoint(ckpt)?;
            let encoder_points = meta
                .pointer("/config/encoder_points")
                .and_then(|v| v.as_u64())
                .map(|v| v as usize);
            let samples = load_samples(&manifest, &root, split, model.config().encoder.k, encoder_points)?;
            use rayon::prelude::*;
            samples
                .par_iter()
                .map(|(r, s)| Ok((*r, predict(&model, s)?)))
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::InvalidArgument("--checkpoint or --baseline is required".into())),
    };
    let records: Vec<PredictionRecord> = poses
        .into_iter()
        .map(|(r, pose)| -> Result<PredictionRecord> {
            Ok(match form {
                Form::Pose => PredictionRecord::from_pose(&r.id, pose),
                Form::Tokens => {
                    let e = pose_to_vector(&pose, r.translation_scale)?;
                    PredictionRecord::from_tokens(&r.id, tokenize(&e.vector))
                }
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(out, &records)
}

fn eval_cmd(c: &Common, data: &Path, predictions: &Path, out: &Path) -> Result<()> {
    use std::collections::HashMap;
    let (manifest, root) = open_dataset(data)?;
    let by_id: HashMap<&str, &StepRecord> = manifest.steps.iter().map(|s| (s.id.as_str(), s)).collect();
    let preds: Vec<PredictionRecord> = read_jsonl(predictions)?;
    if preds.is_empty() {
        return Err(Error::InvalidArgument("predictions file is empty".into()));
    }
    let results = preds
        .iter()
        .map(|p| {
            let record = by_id
                .get(p.step_id.as_str())
                .ok_or_else(|| Error::Validation(format!("prediction for unknown step {}", p.step_id)))?;
            let pose = p.resolve(record.translation_scale)?;
            let moving = read_point_cloud(&root.join(&record.moving_cloud))?;
            Ok(EvalResult::new(
                &record.id,
                &record.category,
                &pose,
                &record.target_pose,
                &moving,
                c.sr_threshold,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &results)
}

fn report_cmd(results: &Path, out: Option<&Path>) -> Result<()> {
    let results: Vec<EvalResult> = read_jsonl(results)?;
    let report = aggregate(&results)?;
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if c.bins != NUM_BINS as usize {
        return Err(Error::InvalidArgument(format!("only the {NUM_BINS}-bin pose codec is supported")));
    }
    if !(c.tau > 0.0) || !(c.translation_scale > 0.0) || !(c.sr_threshold > 0.0) {
        return Err(Error::InvalidArgument("--tau, --translation-scale and --sr-threshold must be positive".into()));
    }
    match cli.command {
        Command::Normalize { input, output } => normalize(&input, &output),
        Command::GenSynth {
            families,
            count,
            out,
            fixed_dims,
            validation_fraction,
            randomize_fixed,
            max_failure_rate,
        } => {
            let specs = specs_for(&families, count, !fixed_dims, c.seed);
            let config = dataset_config(c, validation_fraction, randomize_fixed);
            let manifest = generate_dataset(&specs, &config, c.seed, &out)?;
            let rate = manifest.failures.len() as f64 / specs.len() as f64;
            info!(
                "{} assets, {} steps, {} failures",
                manifest.assets.len(),
                manifest.steps.len(),
                manifest.failures.len()
            );
            if rate > max_failure_rate {
                return Err(Error::Generation {
                    attempts: assemkit::synth::MAX_ATTEMPTS,
                    reason: format!("{:.1}% of assets failed", 100.0 * rate),
                });
            }
            Ok(())
        }
        Command::Sample { input, out, count, fps } => {
            let mesh = TriangleMesh::read_obj(&input)?;
            let mut cloud = sample_surface(&mesh, count.unwrap_or(c.points_coarse), c.seed)?;
            if let Some(n) = fps {
                cloud = assemkit::geometry::farthest_point_sample(&cloud, n)?;
            }
            write_point_cloud(&out, &cloud)
        }
        Command::Plan { input, out } => plan(c, &input, out.as_deref()),
        Command::Steps {
            input,
            out,
            id,
            category,
            randomize_fixed,
        } => steps(c, &input, &out, id, &category, randomize_fixed),
        Command::Tokenize { pose, vector, decode } => tokenize_cmd(c, pose, vector, decode),
        Command::Validate { data } => {
            let (manifest, root) = open_dataset(&data)?;
            let summary = validate_manifest(&manifest, &root)?;
            println!(
                "ok: {} assets, {} steps, {} files",
                summary.assets, summary.steps, summary.files
            );
            Ok(())
        }
        Command::TrainWarmup {
            data,
            out,
            log,
            config,
            channels,
            encoder_points,
            epochs,
            batch_size,
            lr,
            momentum,
            grad_clip,
        } => train_cmd(
            c,
            &data,
            &out,
            log.as_deref(),
            config.as_deref(),
            channels,
            encoder_points,
            epochs,
            batch_size,
            lr,
            momentum,
            grad_clip,
        ),
        Command::Predict {
            data,
            checkpoint,
            baseline,
            split,
            form,
            out,
        } => predict_cmd(&data, checkpoint.as_deref(), baseline, split, form, &out),
        Command::Eval { data, predictions, out } => eval_cmd(c, &data, &predictions, &out),
        Command::Report { results, out } => report_cmd(&results, out.as_deref()),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("ASMK_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("ASMK_THREADS must be a positive integer, got '{value}'")))?;
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        warn!("could not size the thread pool: {e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
