//! Experiment configuration: one TOML file with nested sections for data,
//! schedule, optimizer, loss weights and every architecture descriptor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{Layout, MIDDLE_MCP, WRIST};
use crate::depthgan::{DiscriminatorConfig, GeneratorConfig, GeneratorLoss};
use crate::posenet::{LossWeights, PoseNetConfig};
use crate::{Error, Result};

/// Environment variable consulted when no `--config` flag is given.
pub const CONFIG_ENV: &str = "DGGAN_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// RGB task set: the `train` split feeds training, `eval` feeds evaluation.
    pub root: PathBuf,
    pub layout: Layout,
    /// Unpaired real depth maps for the adversarial phases. Defaults to `root`.
    pub depth_root: Option<PathBuf>,
    pub depth_layout: Option<Layout>,
    /// Dataset with ground-truth depth used by both initialization phases.
    /// Defaults to `root`.
    pub init_root: Option<PathBuf>,
    pub init_layout: Option<Layout>,
    pub crop_size: Option<usize>,
    pub palm_gamma: f64,
    pub root_joint: usize,
    /// Reference bone `(a, b)` used to scale relative depths.
    pub bone: [usize; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            layout: Layout::Fixture,
            depth_root: None,
            depth_layout: None,
            init_root: None,
            init_layout: None,
            crop_size: None,
            palm_gamma: 1.0,
            root_joint: WRIST,
            bone: [WRIST, MIDDLE_MCP],
        }
    }
}

impl DataConfig {
    pub fn depth_source(&self) -> (&Path, Layout) {
        (
            self.depth_root.as_deref().unwrap_or(&self.root),
            self.depth_layout.unwrap_or(self.layout),
        )
    }

    pub fn init_source(&self) -> (&Path, Layout) {
        (
            self.init_root.as_deref().unwrap_or(&self.root),
            self.init_layout.unwrap_or(self.layout),
        )
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.root);
        self.depth_root.iter_mut().for_each(fix);
        self.init_root.iter_mut().for_each(fix);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub init_pose_steps: u64,
    pub init_gan_steps: u64,
    pub joint_steps: u64,
    pub batch_size: usize,
    /// Write a checkpoint every this many steps within a phase (0: only at the end).
    pub checkpoint_every: u64,
    /// Allow the joint phase to start from freshly initialized networks.
    pub skip_init: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            init_pose_steps: 2000,
            init_gan_steps: 2000,
            joint_steps: 2000,
            batch_size: 8,
            checkpoint_every: 0,
            skip_init: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_pose: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1_pose: f64,
    pub beta1_gan: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_pose: 1e-4,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            beta1_pose: 0.9,
            beta1_gan: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub generator_loss: GeneratorLoss,
    /// Let the depth-regularizer loss backpropagate into the generator
    /// during joint fine-tuning.
    pub regularizer_grad_to_generator: bool,
    /// Keep the generator fixed during the GAN initialization phase.
    pub freeze_generator: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            generator_loss: GeneratorLoss::NonSaturating,
            regularizer_grad_to_generator: true,
            freeze_generator: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub device: String,
    /// Directory for checkpoints, the training log and reports.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub gan: GanConfig,
    pub posenet: PoseNetConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            gan: GanConfig::default(),
            posenet: PoseNetConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    /// Parses and validates; errors name the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." { "<document>".to_string() } else { key };
            config_err(&key, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("<document>", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(config_err("device", format!("unsupported device `{}` (only `cpu`)", self.device)));
        }
        if self.schedule.batch_size == 0 {
            return Err(config_err("schedule.batch_size", "must be at least 1"));
        }
        let o = &self.optim;
        for (key, lr) in [
            ("optim.lr_pose", o.lr_pose),
            ("optim.lr_generator", o.lr_generator),
            ("optim.lr_discriminator", o.lr_discriminator),
            ("optim.eps", o.eps),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config_err(key, format!("must be positive, got {lr}")));
            }
        }
        for (key, b) in [
            ("optim.beta1_pose", o.beta1_pose),
            ("optim.beta1_gan", o.beta1_gan),
            ("optim.beta2", o.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.data.palm_gamma.is_finite()) {
            return Err(config_err("data.palm_gamma", "must be finite"));
        }
        self.loss.validate()?;
        self.posenet.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let k = self.posenet.num_joints;
        if self.data.root_joint >= k || self.data.bone.iter().any(|&j| j >= k) {
            return Err(config_err("data.bone", format!("joint indices must be below {k}")));
        }
        if self.data.bone[0] == self.data.bone[1] {
            return Err(config_err("data.bone", "needs two distinct joints"));
        }
        if self.generator.output_size != self.posenet.depth_size {
            return Err(config_err(
                "generator.output_size",
                format!("must equal posenet.depth_size ({})", self.posenet.depth_size),
            ));
        }
        if self.discriminator.input_size != self.posenet.depth_size {
            return Err(config_err(
                "discriminator.input_size",
                format!("must equal posenet.depth_size ({})", self.posenet.depth_size),
            ));
        }
        if self.generator.input_size != self.posenet.input_size {
            return Err(config_err(
                "generator.input_size",
                format!("must equal posenet.input_size ({})", self.posenet.input_size),
            ));
        }
        Ok(())
    }

    /// Small networks sized for the procedural fixtures on one CPU core.
    pub fn fixture(root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            data: DataConfig {
                root: root.into(),
                ..DataConfig::default()
            },
            schedule: ScheduleConfig {
                batch_size: 4,
                ..ScheduleConfig::default()
            },
            optim: OptimConfig {
                lr_pose: 2e-3,
                ..OptimConfig::default()
            },
            posenet: PoseNetConfig {
                heatmap_size: 16,
                backbone_widths: vec![8, 8],
                stage_convs: 4,
                stage_width: 16,
                regression_width: 8,
                fc_widths: vec![64, 32],
                regularizer_widths: vec![32, 16, 16, 8, 8],
                ..PoseNetConfig::default()
            },
            generator: GeneratorConfig {
                down_widths: vec![8, 8, 16, 16],
                res_blocks: 1,
                up_widths: vec![16, 8, 8, 4],
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig {
                widths: vec![4, 8, 16, 16],
                ..DiscriminatorConfig::default()
            },
            ..Self::default()
        }
    }
}
