//! Two-phase training: separate initialization of the pose network and the
//! depth GAN, then joint min-max fine-tuning. Also checkpoints and the CSV
//! training log.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataio::{
    make_heatmap_targets, relative_depths, DepthPool, HandSample, RngState, UnpairedSampler,
};
use crate::depthgan::{gan_loss_discriminator, gan_loss_generator, DiscriminatorNet, GeneratorNet};
use crate::nn::{sub_rng, Adam, AdamParams, ParamStore};
use crate::posenet::{loss_2d, loss_dep, loss_z, task_loss, PoseNet};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "handpose-checkpoint";
const META_KEY: &str = "handpose";
pub const CHECKPOINT_VERSION: &str = "1";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,phase,l_2d,l_z,l_dep,task,gan_d,gan_g,total";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InitPose,
    InitGan,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::InitPose => "init_pose",
            Phase::InitGan => "init_gan",
            Phase::Joint => "joint",
        }
    }

    /// Default checkpoint file name written at the end of the phase.
    pub fn checkpoint_name(self) -> String {
        format!("{}.ckpt", self.as_str())
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "init_pose" => Ok(Phase::InitPose),
            "init_gan" => Ok(Phase::InitGan),
            "joint" => Ok(Phase::Joint),
            _ => Err(Error::InvalidArgument(format!("unknown phase `{s}`"))),
        }
    }
}

/// Loss components of one optimization step. Fields that do not apply to
/// the step's phase are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub l_2d: Option<f64>,
    pub l_z: Option<f64>,
    pub l_dep: Option<f64>,
    pub task: Option<f64>,
    /// Discriminator objective (the value it ascends).
    pub gan_d: Option<f64>,
    /// Generator objective (the value it descends).
    pub gan_g: Option<f64>,
    /// The quantity descended by the pose/generator update.
    pub total: f64,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            f(self.l_2d),
            f(self.l_z),
            f(self.l_dep),
            f(self.task),
            f(self.gan_d),
            f(self.gan_g),
            self.total
        )
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Training records converted to network-ready arrays.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub ids: Vec<String>,
    input_size: usize,
    heatmap_size: usize,
    depth_size: usize,
    num_joints: usize,
    rgb: Vec<Vec<f32>>,
    heatmaps: Vec<Vec<f32>>,
    z: Vec<Vec<f32>>,
    depth: Vec<Option<Vec<f32>>>,
}

impl PreparedSet {
    pub fn new(samples: &[HandSample], config: &TrainConfig) -> Result<Self> {
        let pc = &config.posenet;
        let n = pc.input_size;
        let mut set = Self {
            ids: Vec::new(),
            input_size: n,
            heatmap_size: pc.heatmap_size,
            depth_size: pc.depth_size,
            num_joints: pc.num_joints,
            rgb: Vec::new(),
            heatmaps: Vec::new(),
            z: Vec::new(),
            depth: Vec::new(),
        };
        let bone = (config.data.bone[0], config.data.bone[1]);
        for s in samples {
            let bad = |reason: String| Error::Record {
                id: s.source_id.clone(),
                reason,
            };
            if (s.rgb.width, s.rgb.height) != (n, n) {
                return Err(bad(format!(
                    "image is {}×{}, network expects {n}×{n}",
                    s.rgb.width, s.rgb.height
                )));
            }
            if s.num_joints() != pc.num_joints {
                return Err(bad(format!(
                    "{} joints, network expects {}",
                    s.num_joints(),
                    pc.num_joints
                )));
            }
            set.ids.push(s.source_id.clone());
            set.rgb.push(s.rgb.to_chw().into_iter().map(|v| v - 0.5).collect());
            let h = pc.heatmap_size;
            set.heatmaps
                .push(make_heatmap_targets(&s.keypoints2d, (n, n), (h, h), pc.heatmap_sigma)?.maps);
            set.z.push(
                relative_depths(&s.keypoints3d, config.data.root_joint, bone)
                    .map_err(|e| bad(e.to_string()))?
                    .into_iter()
                    .map(|v| v as f32)
                    .collect(),
            );
            let depth = match &s.depth {
                Some(d) => {
                    let pool = DepthPool::new(vec![d.clone()], &s.source_id).map_err(|e| bad(e.to_string()))?;
                    Some(pool.items[0].resized(pc.depth_size, pc.depth_size).values)
                }
                None => None,
            };
            set.depth.push(depth);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_all_depth(&self) -> Result<()> {
        match self.depth.iter().position(|d| d.is_none()) {
            Some(i) => Err(Error::MissingDepth {
                id: self.ids[i].clone(),
            }),
            None => Ok(()),
        }
    }

    fn stack(rows: Vec<&[f32]>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        let flat: Vec<f32> = rows.concat();
        Ok(Tensor::from_vec(flat, shape, &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn rgb_batch(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let n = self.input_size;
        Self::stack(idx.iter().map(|&i| self.rgb[i].as_slice()).collect(), &[idx.len(), 3, n, n], dtype)
    }

    pub fn heatmap_batch(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let (k, h) = (self.num_joints, self.heatmap_size);
        Self::stack(idx.iter().map(|&i| self.heatmaps[i].as_slice()).collect(), &[idx.len(), k, h, h], dtype)
    }

    pub fn z_batch(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        Self::stack(idx.iter().map(|&i| self.z[i].as_slice()).collect(), &[idx.len(), self.num_joints], dtype)
    }

    /// Normalized ground-truth depth; fails on the first record without one.
    pub fn depth_batch(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let n = self.depth_size;
        let rows = idx
            .iter()
            .map(|&i| {
                self.depth[i].as_deref().ok_or_else(|| Error::MissingDepth {
                    id: self.ids[i].clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::stack(rows, &[idx.len(), 1, n, n], dtype)
    }
}

/// Real depth maps resampled to the network's depth resolution.
#[derive(Clone, Debug)]
pub struct PreparedPool {
    pub pool: DepthPool,
    size: usize,
}

impl PreparedPool {
    pub fn new(pool: &DepthPool, config: &TrainConfig) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let size = config.posenet.depth_size;
        let items = pool.items.iter().map(|d| d.resized(size, size)).collect();
        Ok(Self {
            pool: DepthPool::new(items, pool.origin.clone())?,
            size,
        })
    }

    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let n = self.size;
        PreparedSet::stack(
            idx.iter().map(|&i| self.pool.items[i].values.as_slice()).collect(),
            &[idx.len(), 1, n, n],
            dtype,
        )
    }
}

/// Inputs of one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub rgb: Tensor,
    pub heatmaps: Tensor,
    pub z: Tensor,
    pub depth: Option<Tensor>,
    pub real_depth: Option<Tensor>,
}

/// Differentiable terms of the joint objective for one batch.
#[derive(Debug)]
pub struct JointLosses {
    pub l_2d: Tensor,
    pub l_z: Tensor,
    pub l_dep: Tensor,
    pub task: Tensor,
    pub gan_g: Tensor,
    /// `λ_t·task + λ_g·gan_g`
    pub total: Tensor,
}

/// Everything needed to continue training bit-for-bit: all three networks,
/// their optimizer moments, the batch-order stream and the depth sampler.
pub struct TrainState {
    pub config: TrainConfig,
    pub phase: Phase,
    /// Steps taken across all phases.
    pub step: u64,
    /// Steps taken in the current phase.
    pub phase_step: u64,
    pub pose: PoseNet,
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub opt_pose: Adam,
    pub opt_generator: Adam,
    pub opt_discriminator: Adam,
    rng: ChaCha8Rng,
    pub sampler: UnpairedSampler,
    pub history: Vec<LossRecord>,
    log_path: Option<PathBuf>,
}

impl fmt::Debug for TrainState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainState")
            .field("phase", &self.phase)
            .field("step", &self.step)
            .field("phase_step", &self.phase_step)
            .finish_non_exhaustive()
    }
}

const DTYPE: DType = DType::F32;

fn adam_params(lr: f64, beta1: f64, c: &TrainConfig) -> AdamParams {
    AdamParams {
        lr,
        beta1,
        beta2: c.optim.beta2,
        eps: c.optim.eps,
    }
}

impl TrainState {
    /// Freshly initialized networks for `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let pose = PoseNet::new(&config.posenet, seed, DTYPE)?;
        let generator = GeneratorNet::new(&config.generator, seed, DTYPE)?;
        let discriminator = DiscriminatorNet::new(&config.discriminator, seed, DTYPE)?;
        let o = &config.optim;
        Ok(Self {
            opt_pose: Adam::new(&pose.params, adam_params(o.lr_pose, o.beta1_pose, config))?,
            opt_generator: Adam::new(&generator.params, adam_params(o.lr_generator, o.beta1_gan, config))?,
            opt_discriminator: Adam::new(
                &discriminator.params,
                adam_params(o.lr_discriminator, o.beta1_gan, config),
            )?,
            config: config.clone(),
            phase: Phase::InitPose,
            step: 0,
            phase_step: 0,
            pose,
            generator,
            discriminator,
            rng: sub_rng(seed, "batches"),
            sampler: UnpairedSampler::from_state(&RngState::capture(&sub_rng(seed, "depth-pool"))),
            history: Vec::new(),
            log_path: None,
        })
    }

    /// Appends one CSV line per step to `path` (header written if the file is new).
    pub fn set_log(&mut self, path: Option<PathBuf>) {
        self.log_path = path;
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    fn enter(&mut self, phase: Phase) {
        if self.phase != phase {
            self.phase = phase;
            self.phase_step = 0;
        }
    }

    fn batch_indices(&mut self, n: usize) -> Vec<usize> {
        let b = self.config.schedule.batch_size;
        if b >= n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut self.rng, n, b).into_vec()
        }
    }

    /// Draws the next batch from the task set (and the depth pool, if given).
    pub fn next_batch(&mut self, data: &PreparedSet, pool: Option<&PreparedPool>, with_depth: bool) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("task set is empty".into()));
        }
        let indices = self.batch_indices(data.len());
        let real_depth = match pool {
            Some(p) => {
                let idx = (0..self.config.schedule.batch_size)
                    .map(|_| self.sampler.draw_index(&p.pool))
                    .collect::<Result<Vec<_>>>()?;
                Some(p.batch(&idx, DTYPE)?)
            }
            None => None,
        };
        Ok(Batch {
            rgb: data.rgb_batch(&indices, DTYPE)?,
            heatmaps: data.heatmap_batch(&indices, DTYPE)?,
            z: data.z_batch(&indices, DTYPE)?,
            depth: if with_depth { Some(data.depth_batch(&indices, DTYPE)?) } else { None },
            real_depth,
            indices,
        })
    }

    fn record(&mut self, mut rec: LossRecord) -> Result<LossRecord> {
        self.step += 1;
        self.phase_step += 1;
        rec.step = self.step;
        rec.phase = self.phase;
        if let Some(path) = &self.log_path {
            let fresh = !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
            let mut text = String::new();
            if fresh {
                text.push_str(LOG_HEADER);
                text.push('\n');
            }
            text.push_str(&rec.csv_line());
            text.push('\n');
            f.write_all(text.as_bytes())
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        self.history.push(rec);
        Ok(rec)
    }

    /// Task-loss terms against the target map `d_star`.
    fn task_terms(&self, batch: &Batch, d_star: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let w = &self.config.loss;
        let out = self.pose.forward(&batch.rgb)?;
        let l_2d = loss_2d(&out.heatmaps, &batch.heatmaps)?;
        let l_z = loss_z(&out.z, &batch.z, self.config.posenet.z_loss)?;
        let l_dep = if w.lambda_dep == 0.0 {
            Tensor::new(0f32, &Device::Cpu)?.to_dtype(DTYPE)?
        } else {
            loss_dep(&self.pose.depth_regularizer_forward(&out.z)?, d_star)?
        };
        let task = task_loss(&l_z, &l_2d, &l_dep, w)?;
        Ok((l_2d, l_z, l_dep, task))
    }

    /// One pose update supervised by ground-truth depth.
    pub fn pose_step(&mut self, data: &PreparedSet) -> Result<LossRecord> {
        self.enter(Phase::InitPose);
        let batch = self.next_batch(data, None, true)?;
        let d_star = batch.depth.clone().expect("depth requested");
        let (l_2d, l_z, l_dep, task) = self.task_terms(&batch, &d_star)?;
        let grads = task.backward()?;
        self.opt_pose.step(&grads)?;
        let task_v = scalar(&task)?;
        self.record(LossRecord {
            step: 0,
            phase: Phase::InitPose,
            l_2d: Some(scalar(&l_2d)?),
            l_z: Some(scalar(&l_z)?),
            l_dep: Some(scalar(&l_dep)?),
            task: Some(task_v),
            gan_d: None,
            gan_g: None,
            total: task_v,
        })
    }

    /// Discriminator ascent on `weight · L_GAN` with generated maps detached.
    /// Only discriminator parameters change.
    pub fn discriminator_step(&mut self, batch: &Batch, weight: f64) -> Result<f64> {
        let real = batch.real_depth.as_ref().expect("pool batch");
        let fake = self.generator.forward(&batch.rgb)?.detach();
        let objective = gan_loss_discriminator(
            &self.discriminator.forward(real)?,
            &self.discriminator.forward(&fake)?,
        )?;
        let grads = (&objective * -weight)?.backward()?;
        self.opt_discriminator.step(&grads)?;
        scalar(&objective)
    }

    /// One alternating GAN iteration: a discriminator step, then a
    /// generator step (skipped when the generator is frozen).
    pub fn gan_step(&mut self, data: &PreparedSet, pool: &PreparedPool) -> Result<LossRecord> {
        self.enter(Phase::InitGan);
        let batch = self.next_batch(data, Some(pool), false)?;
        let gan_d = self.discriminator_step(&batch, 1.0)?;
        let fake = self.generator.forward(&batch.rgb)?;
        let gan_g = gan_loss_generator(&self.discriminator.forward(&fake)?, self.config.gan.generator_loss)?;
        if !self.config.gan.freeze_generator {
            let grads = gan_g.backward()?;
            self.opt_generator.step(&grads)?;
        }
        let g = scalar(&gan_g)?;
        self.record(LossRecord {
            step: 0,
            phase: Phase::InitGan,
            l_2d: None,
            l_z: None,
            l_dep: None,
            task: None,
            gan_d: Some(gan_d),
            gan_g: Some(g),
            total: g,
        })
    }

    /// The generator/pose objective of a joint step, before any update.
    pub fn joint_losses(&self, batch: &Batch) -> Result<JointLosses> {
        let w = &self.config.loss;
        let fake = self.generator.forward(&batch.rgb)?;
        let d_star = if self.config.gan.regularizer_grad_to_generator {
            fake.clone()
        } else {
            fake.detach()
        };
        let (l_2d, l_z, l_dep, task) = self.task_terms(batch, &d_star)?;
        let gan_g = gan_loss_generator(&self.discriminator.forward(&fake)?, self.config.gan.generator_loss)?;
        let total = ((&task * w.lambda_t)? + (&gan_g * w.lambda_g)?)?;
        Ok(JointLosses {
            l_2d,
            l_z,
            l_dep,
            task,
            gan_g,
            total,
        })
    }

    /// Descent on `λ_t·L_task + λ_g·L_GAN` for the generator and the pose
    /// network together. Discriminator parameters are left alone.
    pub fn joint_descent(&mut self, batch: &Batch) -> Result<JointLosses> {
        let losses = self.joint_losses(batch)?;
        let grads = losses.total.backward()?;
        self.opt_pose.step(&grads)?;
        self.opt_generator.step(&grads)?;
        Ok(losses)
    }

    /// One joint iteration: discriminator ascent on `λ_g·L_GAN`, then
    /// [`Self::joint_descent`]. Ground-truth depth is never touched.
    pub fn joint_step(&mut self, data: &PreparedSet, pool: &PreparedPool) -> Result<LossRecord> {
        self.enter(Phase::Joint);
        let batch = self.next_batch(data, Some(pool), false)?;
        let gan_d = self.discriminator_step(&batch, self.config.loss.lambda_g)?;
        let losses = self.joint_descent(&batch)?;
        self.record(LossRecord {
            step: 0,
            phase: Phase::Joint,
            l_2d: Some(scalar(&losses.l_2d)?),
            l_z: Some(scalar(&losses.l_z)?),
            l_dep: Some(scalar(&losses.l_dep)?),
            task: Some(scalar(&losses.task)?),
            gan_d: Some(gan_d),
            gan_g: Some(scalar(&losses.gan_g)?),
            total: scalar(&losses.total)?,
        })
    }

    fn maybe_checkpoint(&self) -> Result<()> {
        let every = self.config.schedule.checkpoint_every;
        if every > 0 && self.phase_step % every == 0 {
            fs::create_dir_all(&self.config.output_dir)
                .map_err(|e| Error::io(format!("creating {}", self.config.output_dir.display()), e))?;
            save_checkpoint(self, &self.config.output_dir.join(self.phase.checkpoint_name()))?;
        }
        Ok(())
    }

    pub fn run_pose(&mut self, data: &PreparedSet, steps: u64) -> Result<()> {
        data.has_all_depth()?;
        self.enter(Phase::InitPose);
        for _ in 0..steps {
            self.pose_step(data)?;
            self.maybe_checkpoint()?;
        }
        Ok(())
    }

    pub fn run_gan(&mut self, data: &PreparedSet, pool: &PreparedPool, steps: u64) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("RGB set is empty".into()));
        }
        self.enter(Phase::InitGan);
        for _ in 0..steps {
            self.gan_step(data, pool)?;
            self.maybe_checkpoint()?;
        }
        Ok(())
    }

    pub fn run_joint(&mut self, data: &PreparedSet, pool: &PreparedPool, steps: u64) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("RGB set is empty".into()));
        }
        self.enter(Phase::Joint);
        for _ in 0..steps {
            self.joint_step(data, pool)?;
            self.maybe_checkpoint()?;
        }
        Ok(())
    }

    /// Independent copy (parameters and optimizer moments are duplicated).
    pub fn duplicate(&self) -> Result<Self> {
        let mut copy = TrainState::new(&self.config)?;
        copy.pose.params.load(&self.pose.params.snapshot()?)?;
        copy.generator.params.load(&self.generator.params.snapshot()?)?;
        copy.discriminator.params.load(&self.discriminator.params.snapshot()?)?;
        for (dst, src) in [
            (&mut copy.opt_pose, &self.opt_pose),
            (&mut copy.opt_generator, &self.opt_generator),
            (&mut copy.opt_discriminator, &self.opt_discriminator),
        ] {
            let (m, v) = src.slots();
            dst.restore(src.step, m.clone(), v.clone())?;
        }
        copy.phase = self.phase;
        copy.step = self.step;
        copy.phase_step = self.phase_step;
        copy.rng = self.rng.clone();
        copy.sampler = self.sampler.clone();
        copy.history = self.history.clone();
        Ok(copy)
    }

    /// Replaces the schedule/optimizer/loss settings while keeping the
    /// learned state; the architectures must match.
    pub fn reconfigure(&mut self, config: &TrainConfig) -> Result<()> {
        check_architecture(config, &self.config)?;
        let o = &config.optim;
        self.opt_pose.params = adam_params(o.lr_pose, o.beta1_pose, config);
        self.opt_generator.params = adam_params(o.lr_generator, o.beta1_gan, config);
        self.opt_discriminator.params = adam_params(o.lr_discriminator, o.beta1_gan, config);
        self.config = config.clone();
        Ok(())
    }
}

/// Trains the pose network with normalized ground-truth depth as the
/// regularizer target. The GAN networks stay at their initialization.
pub fn init_phase_pose(config: &TrainConfig, dataset: &[HandSample]) -> Result<TrainState> {
    let data = PreparedSet::new(dataset, config)?;
    data.has_all_depth()?;
    let mut state = TrainState::new(config)?;
    state.run_pose(&data, config.schedule.init_pose_steps)?;
    Ok(state)
}

/// Alternating discriminator / generator updates on an RGB set and an
/// unpaired pool of real depth maps. The pose network stays untouched.
pub fn init_phase_gan(config: &TrainConfig, rgb_set: &[HandSample], depth_pool: &DepthPool) -> Result<TrainState> {
    if rgb_set.is_empty() {
        return Err(Error::InvalidArgument("RGB set is empty".into()));
    }
    let pool = PreparedPool::new(depth_pool, config)?;
    let data = PreparedSet::new(rgb_set, config)?;
    let mut state = TrainState::new(config)?;
    state.enter(Phase::InitGan);
    state.run_gan(&data, &pool, config.schedule.init_gan_steps)?;
    Ok(state)
}

/// Starts joint fine-tuning from the two initialization states. Either may
/// be absent only when `schedule.skip_init` is set, in which case the
/// corresponding networks start from their random initialization.
pub fn joint_state(config: &TrainConfig, pose_init: Option<&TrainState>, gan_init: Option<&TrainState>) -> Result<TrainState> {
    let mut state = match pose_init {
        Some(s) => {
            let mut s = s.duplicate()?;
            s.reconfigure(config)?;
            s
        }
        None if config.schedule.skip_init => TrainState::new(config)?,
        None => {
            return Err(Error::InvalidArgument(
                "joint phase needs the init_pose state (or schedule.skip_init)".into(),
            ))
        }
    };
    match gan_init {
        Some(g) => {
            check_architecture(config, &g.config)?;
            state.generator.params.load(&g.generator.params.snapshot()?)?;
            state.discriminator.params.load(&g.discriminator.params.snapshot()?)?;
            for (dst, src) in [
                (&mut state.opt_generator, &g.opt_generator),
                (&mut state.opt_discriminator, &g.opt_discriminator),
            ] {
                let (m, v) = src.slots();
                dst.restore(src.step, m.clone(), v.clone())?;
            }
            state.sampler = g.sampler.clone();
        }
        None if config.schedule.skip_init => {}
        None => {
            return Err(Error::InvalidArgument(
                "joint phase needs the init_gan state (or schedule.skip_init)".into(),
            ))
        }
    }
    state.enter(Phase::Joint);
    Ok(state)
}

pub fn joint_finetune(
    config: &TrainConfig,
    pose_init: Option<&TrainState>,
    gan_init: Option<&TrainState>,
    rgb_set: &[HandSample],
    depth_pool: &DepthPool,
) -> Result<TrainState> {
    let mut state = joint_state(config, pose_init, gan_init)?;
    let pool = PreparedPool::new(depth_pool, config)?;
    let data = PreparedSet::new(rgb_set, config)?;
    state.run_joint(&data, &pool, config.schedule.joint_steps)?;
    Ok(state)
}

/// First architecture key on which two configs differ.
fn check_architecture(expected: &TrainConfig, found: &TrainConfig) -> Result<()> {
    fn diff(prefix: &str, a: &toml::Value, b: &toml::Value) -> Option<(String, String, String)> {
        match (a, b) {
            (toml::Value::Table(ta), toml::Value::Table(tb)) => {
                let keys: std::collections::BTreeSet<_> = ta.keys().chain(tb.keys()).collect();
                keys.into_iter().find_map(|k| {
                    let key = format!("{prefix}.{k}");
                    match (ta.get(k), tb.get(k)) {
                        (Some(x), Some(y)) => diff(&key, x, y),
                        (x, y) => Some((key, format!("{x:?}"), format!("{y:?}"))),
                    }
                })
            }
            _ if a == b => None,
            _ => Some((prefix.to_string(), a.to_string(), b.to_string())),
        }
    }
    for (name, a, b) in [
        ("posenet", to_value(&expected.posenet), to_value(&found.posenet)),
        ("generator", to_value(&expected.generator), to_value(&found.generator)),
        ("discriminator", to_value(&expected.discriminator), to_value(&found.discriminator)),
    ] {
        if let Some((key, exp, got)) = diff(name, &a?, &b?) {
            return Err(Error::ConfigMismatch {
                key,
                expected: exp,
                found: got,
            });
        }
    }
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Result<toml::Value> {
    toml::Value::try_from(v).map_err(|e| Error::Config {
        key: "<document>".into(),
        reason: e.to_string(),
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn add_store(out: &mut HashMap<String, Tensor>, prefix: &str, store: &ParamStore) -> Result<()> {
    for (name, t) in store.snapshot()? {
        out.insert(format!("{prefix}.{name}"), t);
    }
    Ok(())
}

fn add_adam(out: &mut HashMap<String, Tensor>, prefix: &str, opt: &Adam) {
    let (m, v) = opt.slots();
    for (name, t) in m {
        out.insert(format!("opt.{prefix}.m.{name}"), t.clone());
    }
    for (name, t) in v {
        out.insert(format!("opt.{prefix}.v.{name}"), t.clone());
    }
}

/// Single-file archive: every parameter and optimizer moment as a named
/// array, plus the config snapshot, phase, step counters and RNG positions.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = HashMap::new();
    add_store(&mut tensors, "pose", &state.pose.params)?;
    add_store(&mut tensors, "gen", &state.generator.params)?;
    add_store(&mut tensors, "disc", &state.discriminator.params)?;
    add_adam(&mut tensors, "pose", &state.opt_pose);
    add_adam(&mut tensors, "gen", &state.opt_generator);
    add_adam(&mut tensors, "disc", &state.opt_discriminator);
    let fields: BTreeMap<String, String> = [
        ("format", CHECKPOINT_FORMAT.to_string()),
        ("version", CHECKPOINT_VERSION.to_string()),
        ("config", state.config.to_toml_string()?),
        ("phase", state.phase.to_string()),
        ("step", state.step.to_string()),
        ("phase_step", state.phase_step.to_string()),
        ("opt.pose.step", state.opt_pose.step.to_string()),
        ("opt.gen.step", state.opt_generator.step.to_string()),
        ("opt.disc.step", state.opt_discriminator.step.to_string()),
        ("rng", to_json(&state.rng_state())),
        ("sampler", to_json(&state.sampler.state())),
        ("history", to_json(&state.history)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    // One sorted entry keeps the header byte-stable across processes.
    let meta = HashMap::from([(META_KEY.to_string(), to_json(&fields))]);
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    safetensors::serialize_to_file(sorted, Some(meta), path).map_err(|e| ckpt_err(path, e.to_string()))
}

/// Restores a state exactly as saved, using the config stored inside.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingCheckpoint {
            path: path.to_path_buf(),
            phase: "requested".into(),
        },
        _ => Error::io(format!("reading {}", path.display()), e),
    })?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, format!("corrupt archive: {e}")))?;
    let meta: BTreeMap<String, String> = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .map(|text| serde_json::from_str(text))
        .transpose()
        .map_err(|e| ckpt_err(path, format!("bad metadata: {e}")))?
        .unwrap_or_default();
    let get = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(path, format!("missing metadata `{k}`")));
    if get("format")? != CHECKPOINT_FORMAT {
        return Err(ckpt_err(path, "not a handpose checkpoint"));
    }
    let version = get("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            path,
            format!("version mismatch: file has {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let config = TrainConfig::from_toml_str(get("config")?)?;
    let parse_u64 = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| ckpt_err(path, format!("bad `{k}`"))) };
    let parse_json = |k: &str| -> Result<serde_json::Value> {
        serde_json::from_str(get(k)?).map_err(|e| ckpt_err(path, format!("bad `{k}`: {e}")))
    };
    let archive = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, format!("corrupt archive: {e}")))?;
    let mut all: BTreeMap<String, Tensor> = BTreeMap::new();
    for name in archive.names() {
        let view = archive.tensor(name).map_err(|e| ckpt_err(path, e.to_string()))?;
        all.insert(name.to_string(), view.load(&Device::Cpu)?);
    }
    let section = |prefix: &str| -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        all.iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    };

    let mut state = TrainState::new(&config)?;
    let wrap = |e: Error| ckpt_err(path, e.to_string());
    state.pose.params.load(&section("pose")).map_err(wrap)?;
    state.generator.params.load(&section("gen")).map_err(wrap)?;
    state.discriminator.params.load(&section("disc")).map_err(wrap)?;
    for (opt, key) in [
        (&mut state.opt_pose, "pose"),
        (&mut state.opt_generator, "gen"),
        (&mut state.opt_discriminator, "disc"),
    ] {
        let step = parse_u64(&format!("opt.{key}.step"))?;
        opt.restore(step, section(&format!("opt.{key}.m")), section(&format!("opt.{key}.v")))
            .map_err(wrap)?;
    }
    state.phase = get("phase")?.parse()?;
    state.step = parse_u64("step")?;
    state.phase_step = parse_u64("phase_step")?;
    let rng: RngState = serde_json::from_value(parse_json("rng")?).map_err(|e| ckpt_err(path, e.to_string()))?;
    state.rng = rng.restore();
    let sampler: RngState = serde_json::from_value(parse_json("sampler")?).map_err(|e| ckpt_err(path, e.to_string()))?;
    state.sampler = UnpairedSampler::from_state(&sampler);
    state.history = serde_json::from_value(parse_json("history")?).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(state)
}

/// Loads a checkpoint and adopts `config`, failing with a config-mismatch
/// error when the stored architectures differ from it.
pub fn load_checkpoint_for(path: &Path, config: &TrainConfig) -> Result<TrainState> {
    let mut state = load_checkpoint(path)?;
    state.reconfigure(config)?;
    Ok(state)
}
