//! `handpose` command line: fixture generation, training phases,
//! evaluation and single-image inference.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{TrainConfig, CONFIG_ENV};
use crate::dataio::{
    gen_fixture_splits, load_dataset, read_rgb, write_depth, DepthMap, DepthPool, DepthUnit, HandSample, LoadOptions,
    RgbImage, Split,
};
use crate::eval::{decode_2d, emit_report, evaluate, write_predictions, PREDICTIONS_FILE};
use crate::trainer::{
    joint_state, load_checkpoint_for, save_checkpoint, Phase, PreparedPool, PreparedSet, TrainState,
    LOG_FILE,
};
use crate::{Error, Result};

/// Outcome of one invocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "handpose", version, about = "3D hand pose from RGB with adversarial depth regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic dataset in the fixture layout.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Additional held-out records in the `eval` split.
        #[arg(long, default_value_t = 0)]
        eval_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run one training phase or the whole schedule.
    Train {
        #[arg(long, env = CONFIG_ENV)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = PhaseArg::All)]
        phase: PhaseArg,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the phase checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split and write report files.
    Eval {
        #[arg(long, env = CONFIG_ENV)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
        /// Report directory (default: `<output_dir>/report_<split>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict keypoints and a depth map for one RGB image.
    Infer {
        #[arg(long, env = CONFIG_ENV)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    InitPose,
    InitGan,
    Joint,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Messages go to stderr; the exit code is 0 on success, 2 for usage or
/// configuration errors and 1 for anything that fails at run time.
pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return CommandResult {
                exit_code: if e.use_stderr() { 2 } else { 0 },
                artifacts: Vec::new(),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(artifacts) => CommandResult { exit_code: 0, artifacts },
        Err(e) => {
            let exit_code = match e {
                Error::Config { .. } => 2,
                _ => 1,
            };
            eprintln!("error: {e}");
            CommandResult {
                exit_code,
                artifacts: Vec::new(),
            }
        }
    }
}

fn dispatch(command: Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::GenFixtures {
            out,
            count,
            eval_count,
            seed,
            size,
        } => {
            let manifest = gen_fixture_splits(count, eval_count, size, seed, &out)?;
            eprintln!("wrote {} records to {}", manifest.records.len(), out.display());
            Ok(vec![out])
        }
        Command::Train {
            config,
            phase,
            seed,
            resume,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            train(&cfg, phase, resume)
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let split = Split::from(split);
            let out = out.unwrap_or_else(|| cfg.output_dir.join(format!("report_{split}")));
            eval_command(&cfg, &checkpoint, split, &out)
        }
        Command::Infer {
            config,
            checkpoint,
            image,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            infer(&cfg, &checkpoint, &image, &out)
        }
    }
}

fn load_split(cfg: &TrainConfig, root: &Path, layout: crate::dataio::Layout, split: Split, depth: bool) -> Result<Vec<HandSample>> {
    load_dataset(
        root,
        layout,
        split,
        &LoadOptions {
            read_depth: depth,
            palm_gamma: cfg.data.palm_gamma,
            crop_size: cfg.data.crop_size,
            trace: None,
        },
    )
}

fn depth_pool(cfg: &TrainConfig) -> Result<DepthPool> {
    let (root, layout) = cfg.data.depth_source();
    let samples = load_split(cfg, root, layout, Split::Train, true)?;
    DepthPool::from_samples(&samples, root.display().to_string())
}

fn task_set(cfg: &TrainConfig) -> Result<Vec<HandSample>> {
    load_split(cfg, &cfg.data.root, cfg.data.layout, Split::Train, false)
}

/// Resumed state for `phase` if requested and present, else `fresh()`.
fn start_state(
    cfg: &TrainConfig,
    phase: Phase,
    resume: bool,
    fresh: impl FnOnce() -> Result<TrainState>,
) -> Result<TrainState> {
    let path = cfg.output_dir.join(phase.checkpoint_name());
    let mut state = if resume && path.exists() {
        let mut s = load_checkpoint_for(&path, cfg)?;
        s.reconfigure(cfg)?;
        if s.phase != phase {
            return Err(Error::Checkpoint {
                path,
                reason: format!("holds phase `{}`, expected `{phase}`", s.phase),
            });
        }
        s
    } else {
        fresh()?
    };
    state.set_log(Some(cfg.output_dir.join(LOG_FILE)));
    Ok(state)
}

fn remaining(state: &TrainState, phase: Phase, total: u64) -> u64 {
    if state.phase == phase {
        total.saturating_sub(state.phase_step)
    } else {
        total
    }
}

fn finish(state: &TrainState, cfg: &TrainConfig, phase: Phase, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    let path = cfg.output_dir.join(phase.checkpoint_name());
    save_checkpoint(state, &path)?;
    eprintln!("{phase}: {} steps, checkpoint {}", state.phase_step, path.display());
    artifacts.push(path);
    Ok(())
}

fn init_checkpoint(cfg: &TrainConfig, phase: Phase) -> Result<Option<TrainState>> {
    let path = cfg.output_dir.join(phase.checkpoint_name());
    if cfg.schedule.skip_init && !path.exists() {
        return Ok(None);
    }
    match load_checkpoint_for(&path, cfg) {
        Err(Error::MissingCheckpoint { path, .. }) => Err(Error::MissingCheckpoint {
            path,
            phase: Phase::Joint.to_string(),
        }),
        other => other.map(Some),
    }
}

fn train(cfg: &TrainConfig, phase: PhaseArg, resume: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(format!("creating {}", cfg.output_dir.display()), e))?;
    let mut artifacts = Vec::new();
    let sched = &cfg.schedule;
    if matches!(phase, PhaseArg::InitPose | PhaseArg::All) {
        let (root, layout) = cfg.data.init_source();
        let data = PreparedSet::new(&load_split(cfg, root, layout, Split::Train, true)?, cfg)?;
        data.has_all_depth()?;
        let mut state = start_state(cfg, Phase::InitPose, resume, || TrainState::new(cfg))?;
        state.run_pose(&data, remaining(&state, Phase::InitPose, sched.init_pose_steps))?;
        finish(&state, cfg, Phase::InitPose, &mut artifacts)?;
    }
    if matches!(phase, PhaseArg::InitGan | PhaseArg::All) {
        let pool = PreparedPool::new(&depth_pool(cfg)?, cfg)?;
        let (root, layout) = cfg.data.init_source();
        let data = PreparedSet::new(&load_split(cfg, root, layout, Split::Train, false)?, cfg)?;
        let mut state = start_state(cfg, Phase::InitGan, resume, || TrainState::new(cfg))?;
        state.run_gan(&data, &pool, remaining(&state, Phase::InitGan, sched.init_gan_steps))?;
        finish(&state, cfg, Phase::InitGan, &mut artifacts)?;
    }
    if matches!(phase, PhaseArg::Joint | PhaseArg::All) {
        let mut state = start_state(cfg, Phase::Joint, resume, || {
            let pose = init_checkpoint(cfg, Phase::InitPose)?;
            let gan = init_checkpoint(cfg, Phase::InitGan)?;
            joint_state(cfg, pose.as_ref(), gan.as_ref())
        })?;
        let pool = PreparedPool::new(&depth_pool(cfg)?, cfg)?;
        let data = PreparedSet::new(&task_set(cfg)?, cfg)?;
        state.run_joint(&data, &pool, remaining(&state, Phase::Joint, sched.joint_steps))?;
        finish(&state, cfg, Phase::Joint, &mut artifacts)?;
    }
    artifacts.push(cfg.output_dir.join(LOG_FILE));
    Ok(artifacts)
}

fn eval_command(cfg: &TrainConfig, checkpoint: &Path, split: Split, out: &Path) -> Result<Vec<PathBuf>> {
    let state = load_checkpoint_for(checkpoint, cfg)?;
    let samples = load_split(cfg, &cfg.data.root, cfg.data.layout, split, false)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` has no records")));
    }
    let evaluation = evaluate(&state.pose, &samples, cfg)?;
    let mut artifacts = emit_report(&evaluation.report, out)?;
    let predictions = out.join(PREDICTIONS_FILE);
    write_predictions(&predictions, &evaluation.predictions)?;
    artifacts.push(predictions);
    let r = &evaluation.report;
    eprintln!(
        "{split}: n={} excluded={} EPE mean {:.2} mm, median {:.2} mm, AUC(20-50) {:.3}",
        r.n, r.excluded, r.epe_mean, r.epe_median, r.auc_20_50
    );
    Ok(artifacts)
}

#[derive(Serialize)]
struct InferOutput {
    image: String,
    keypoints2d: Vec<[f64; 2]>,
    relative_depths: Vec<f64>,
}

pub const INFER_KEYPOINTS_FILE: &str = "keypoints.json";
pub const INFER_DEPTH_FILE: &str = "depth.png";

/// Bilinear resize to the network input, if needed.
fn fit_input(rgb: RgbImage, size: usize) -> RgbImage {
    if rgb.width == size && rgb.height == size {
        return rgb;
    }
    let buf = image::RgbImage::from_raw(rgb.width as u32, rgb.height as u32, rgb.to_rgb8())
        .expect("buffer size matches dimensions");
    let resized = image::imageops::resize(&buf, size as u32, size as u32, image::imageops::FilterType::Triangle);
    RgbImage::from_rgb8(size, size, resized.as_raw())
}

fn infer(cfg: &TrainConfig, checkpoint: &Path, image: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let state = load_checkpoint_for(checkpoint, cfg)?;
    let n = cfg.posenet.input_size;
    let raw = read_rgb(image)?;
    let (orig_w, orig_h) = (raw.width, raw.height);
    let rgb = fit_input(raw, n);
    let chw: Vec<f32> = rgb.to_chw().into_iter().map(|v| v - 0.5).collect();
    let x = Tensor::from_vec(chw, (1, 3, n, n), &Device::Cpu)?;
    let pose = state.pose.forward(&x)?;
    let stages = pose.heatmaps.dim(1)?;
    let maps = pose.heatmaps.narrow(1, stages - 1, 1)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let (k, h) = (cfg.posenet.num_joints, cfg.posenet.heatmap_size);
    let keypoints2d = decode_2d(&maps, k, h, h, (orig_w, orig_h))?;
    let relative_depths = pose.z.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;

    let depth = state.generator.forward(&x)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let size = cfg.generator.output_size;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let depth_path = out.join(INFER_DEPTH_FILE);
    write_depth(
        &depth_path,
        &DepthMap {
            width: size,
            height: size,
            values: depth,
            unit: DepthUnit::Normalized,
        },
    )?;
    let kp_path = out.join(INFER_KEYPOINTS_FILE);
    let body = serde_json::to_string_pretty(&InferOutput {
        image: image.display().to_string(),
        keypoints2d,
        relative_depths,
    })
    .expect("plain data serializes");
    fs::write(&kp_path, body).map_err(|e| Error::io(format!("writing {}", kp_path.display()), e))?;
    Ok(vec![kp_path, depth_path])
}
