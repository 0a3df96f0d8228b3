//! Pose network: a multi-stage heatmap predictor, a relative-depth
//! regression head, a transposed-convolution depth regularizer, and their
//! losses.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{self, sub_rng, Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::{Error, Result};

/// Number of transposed-convolution layers in the depth regularizer.
pub const REGULARIZER_LAYERS: usize = 6;

/// Branch point of the relative-depth loss.
pub const SMOOTH_L1_KNEE: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothL1Variant {
    /// `½d²` up to the knee and `|d|` beyond it, with the jump left in.
    #[default]
    Verbatim,
    /// Huber form with the same knee: `0.5·|d| − 0.125` beyond it, so value
    /// and slope both meet the quadratic piece.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseNetConfig {
    pub num_joints: usize,
    pub input_size: usize,
    pub heatmap_size: usize,
    /// Gaussian σ of heatmap targets, in heatmap cells.
    pub heatmap_sigma: f64,
    pub depth_size: usize,
    /// Shared feature extractor. Each entry is a 3×3 conv that halves the
    /// resolution until `heatmap_size` is reached, and keeps it afterwards.
    pub backbone_widths: Vec<usize>,
    pub stages: usize,
    pub stage_convs: usize,
    pub stage_width: usize,
    pub regression_convs: usize,
    pub regression_width: usize,
    pub fc_widths: Vec<usize>,
    /// Output channels of the first five transposed layers; the sixth emits one channel.
    pub regularizer_widths: Vec<usize>,
    pub z_loss: SmoothL1Variant,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            num_joints: 21,
            input_size: 64,
            heatmap_size: 8,
            heatmap_sigma: 1.0,
            depth_size: 64,
            backbone_widths: vec![16, 32, 32],
            stages: 6,
            stage_convs: 7,
            stage_width: 32,
            regression_convs: 7,
            regression_width: 32,
            fc_widths: vec![512, 256],
            regularizer_widths: vec![128, 64, 32, 16, 8],
            z_loss: SmoothL1Variant::Verbatim,
        }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("posenet.{key}"),
                reason: reason.to_string(),
            })
        };
        if self.num_joints == 0 {
            return bad("num_joints", "must be positive");
        }
        if self.stages == 0 {
            return bad("stages", "must be positive");
        }
        if self.stage_convs < 2 {
            return bad("stage_convs", "must be at least 2");
        }
        if self.regression_convs == 0 {
            return bad("regression_convs", "must be positive");
        }
        if [self.stage_width, self.regression_width].contains(&0)
            || self.fc_widths.contains(&0)
            || self.backbone_widths.contains(&0)
        {
            return bad("stage_width", "layer widths must be positive");
        }
        if self.backbone_widths.is_empty() {
            return bad("backbone_widths", "must be non-empty");
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return bad("heatmap_sigma", "must be positive");
        }
        if self.heatmap_size == 0 || self.backbone_output_size() != self.heatmap_size {
            return bad("heatmap_size", "backbone strides do not reach this size from input_size");
        }
        if self.regularizer_widths.len() != REGULARIZER_LAYERS - 1 || self.regularizer_widths.contains(&0) {
            return bad("regularizer_widths", "needs five positive widths");
        }
        if !self.depth_size.is_power_of_two() || self.depth_size > 1 << REGULARIZER_LAYERS {
            return bad("depth_size", "must be a power of two no larger than 64");
        }
        Ok(())
    }

    fn backbone_output_size(&self) -> usize {
        let mut s = self.input_size;
        for _ in &self.backbone_widths {
            if s > self.heatmap_size {
                s = (s + 1) / 2;
            }
        }
        s
    }

    /// Input pixels per heatmap cell.
    pub fn heatmap_stride(&self) -> f64 {
        self.input_size as f64 / self.heatmap_size as f64
    }
}

/// Per-layer pose network outputs for one batch.
#[derive(Clone, Debug)]
pub struct PoseOutput {
    /// B×S×K×h×w
    pub heatmaps: Tensor,
    /// B×K
    pub z: Tensor,
}

#[derive(Clone, Debug)]
struct Stage {
    convs: Vec<Conv2d>,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < last {
                x = nn::relu(&x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct PoseNet {
    pub config: PoseNetConfig,
    pub params: ParamStore,
    backbone: Vec<Conv2d>,
    stages: Vec<Stage>,
    reg_convs: Vec<Conv2d>,
    reg_fc: Vec<Linear>,
    regularizer: Vec<ConvTranspose2d>,
}

impl PoseNet {
    pub fn new(config: &PoseNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let k = config.num_joints;
        let mut params = ParamStore::new(dtype);

        let mut rng = sub_rng(seed, "cpm");
        let mut backbone = Vec::new();
        let (mut c, mut size) = (3, config.input_size);
        for (i, &w) in config.backbone_widths.iter().enumerate() {
            let stride = if size > config.heatmap_size { 2 } else { 1 };
            size = (size + stride - 1) / stride;
            backbone.push(Conv2d::new(&mut params, &format!("cpm.backbone{i}"), c, w, 3, stride, 1, &mut rng)?);
            c = w;
        }
        let features = c;
        let mut stages = Vec::new();
        for s in 0..config.stages {
            let mut c = if s == 0 { features } else { features + k };
            let mut convs = Vec::new();
            for j in 0..config.stage_convs {
                let name = format!("cpm.stage{s}.conv{j}");
                let (out, kernel) = match config.stage_convs - j {
                    1 => (k, 1),
                    2 => (config.stage_width, 1),
                    _ => (config.stage_width, 3),
                };
                convs.push(Conv2d::new(&mut params, &name, c, out, kernel, 1, kernel / 2, &mut rng)?);
                c = out;
            }
            stages.push(Stage { convs });
        }

        let mut rng = sub_rng(seed, "regression");
        let mut reg_convs = Vec::new();
        let mut c = k;
        for j in 0..config.regression_convs {
            let kernel = if j + 1 == config.regression_convs { 1 } else { 3 };
            let name = format!("reg.conv{j}");
            reg_convs.push(Conv2d::new(&mut params, &name, c, config.regression_width, kernel, 1, kernel / 2, &mut rng)?);
            c = config.regression_width;
        }
        let mut reg_fc = Vec::new();
        for (j, &w) in config.fc_widths.iter().chain(std::iter::once(&k)).enumerate() {
            reg_fc.push(Linear::new(&mut params, &format!("reg.fc{j}"), c, w, &mut rng)?);
            c = w;
        }

        let mut rng = sub_rng(seed, "regularizer");
        let upsample = config.depth_size.trailing_zeros() as usize;
        let mut regularizer = Vec::new();
        let mut c = k;
        for (j, &w) in config.regularizer_widths.iter().chain(std::iter::once(&1)).enumerate() {
            let name = format!("dr.deconv{j}");
            let layer = if j < upsample {
                ConvTranspose2d::new(&mut params, &name, c, w, 4, 2, 1, &mut rng)?
            } else {
                ConvTranspose2d::new(&mut params, &name, c, w, 3, 1, 1, &mut rng)?
            };
            regularizer.push(layer);
            c = w;
        }

        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            stages,
            reg_convs,
            reg_fc,
            regularizer,
        })
    }

    pub fn regularizer_layers(&self) -> &[ConvTranspose2d] {
        &self.regularizer
    }

    pub fn regression_output(&self) -> &Linear {
        self.reg_fc.last().expect("at least one fc layer")
    }

    pub fn cpm_forward(&self, rgb: &Tensor) -> Result<Tensor> {
        let n = self.config.input_size;
        match rgb.dims() {
            [_, 3, h, w] if *h == n && *w == n => {}
            dims => return Err(Error::Shape(format!("pose network expects B×3×{n}×{n}, got {dims:?}"))),
        }
        let mut features = rgb.clone();
        for conv in &self.backbone {
            features = nn::relu(&conv.forward(&features)?)?;
        }
        let mut maps = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let input = if s == 0 {
                features.clone()
            } else {
                Tensor::cat(&[&features, &maps[s - 1]], 1)?
            };
            maps.push(stage.forward(&input)?);
        }
        Ok(Tensor::stack(&maps, 1)?)
    }

    pub fn regression_forward(&self, heatmaps: &Tensor) -> Result<Tensor> {
        let (k, h) = (self.config.num_joints, self.config.heatmap_size);
        match heatmaps.dims() {
            [_, c, a, b] if *c == k && *a == h && *b == h => {}
            dims => return Err(Error::Shape(format!("regression head expects B×{k}×{h}×{h}, got {dims:?}"))),
        }
        let mut x = heatmaps.clone();
        for conv in &self.reg_convs {
            x = nn::relu(&conv.forward(&x)?)?;
        }
        let mut x = x.mean(3)?.mean(2)?;
        let last = self.reg_fc.len() - 1;
        for (j, fc) in self.reg_fc.iter().enumerate() {
            x = fc.forward(&x)?;
            if j < last {
                x = nn::relu(&x)?;
            }
        }
        Ok(x)
    }

    pub fn depth_regularizer_forward(&self, z: &Tensor) -> Result<Tensor> {
        let k = self.config.num_joints;
        let b = match z.dims() {
            [b, c] if *c == k => *b,
            dims => return Err(Error::Shape(format!("depth regularizer expects B×{k}, got {dims:?}"))),
        };
        let mut x = z.reshape((b, k, 1, 1))?;
        let last = self.regularizer.len() - 1;
        for (j, layer) in self.regularizer.iter().enumerate() {
            x = layer.forward(&x)?;
            x = if j < last { nn::relu(&x)? } else { nn::sigmoid(&x)? };
        }
        Ok(x)
    }

    pub fn forward(&self, rgb: &Tensor) -> Result<PoseOutput> {
        let heatmaps = self.cpm_forward(rgb)?;
        let last = heatmaps.dim(1)? - 1;
        let z = self.regression_forward(&heatmaps.narrow(1, last, 1)?.squeeze(1)?)?;
        Ok(PoseOutput { heatmaps, z })
    }
}

pub fn cpm_forward(net: &PoseNet, rgb: &Tensor) -> Result<Tensor> {
    net.cpm_forward(rgb)
}

pub fn regression_forward(net: &PoseNet, final_heatmaps: &Tensor) -> Result<Tensor> {
    net.regression_forward(final_heatmaps)
}

pub fn depth_regularizer_forward(net: &PoseNet, z: &Tensor) -> Result<Tensor> {
    net.depth_regularizer_forward(z)
}

/// Squared Frobenius error summed over stages and joints, scaled by
/// `1/(S·K)` and averaged over the batch. `pred` is B×S×K×h×w, `target` B×K×h×w.
pub fn loss_2d(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (b, s, k, h, w) = pred.dims5()?;
    if target.dims() != [b, k, h, w] {
        return Err(Error::Shape(format!(
            "heatmap target {:?} does not match prediction {:?}",
            target.dims(),
            pred.dims()
        )));
    }
    let diff = pred.broadcast_sub(&target.unsqueeze(1)?)?;
    Ok((diff.sqr()?.sum_all()? / (b * s * k) as f64)?)
}

/// Relative-depth loss averaged over joints and batch. Inputs are B×K (or K).
pub fn loss_z(z: &Tensor, z_star: &Tensor, variant: SmoothL1Variant) -> Result<Tensor> {
    if z.dims() != z_star.dims() {
        return Err(Error::Shape(format!(
            "relative depth {:?} vs target {:?}",
            z.dims(),
            z_star.dims()
        )));
    }
    let d = (z - z_star)?;
    let abs = d.abs()?;
    let quadratic = (d.sqr()? * 0.5)?;
    let linear = match variant {
        SmoothL1Variant::Verbatim => abs.clone(),
        SmoothL1Variant::Continuous => ((&abs - 0.5 * SMOOTH_L1_KNEE)? * SMOOTH_L1_KNEE)?,
    };
    let inner = abs.le(SMOOTH_L1_KNEE)?;
    Ok(inner.where_cond(&quadratic, &linear)?.mean_all()?)
}

/// Mean absolute difference between predicted and target depth maps.
pub fn loss_dep(d: &Tensor, d_star: &Tensor) -> Result<Tensor> {
    if d.dims() != d_star.dims() {
        return Err(Error::Shape(format!(
            "depth map {:?} vs target {:?}",
            d.dims(),
            d_star.dims()
        )));
    }
    Ok((d - d_star)?.abs()?.mean_all()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_z: f64,
    pub lambda_2d: f64,
    pub lambda_dep: f64,
    pub lambda_t: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_z: 1.0,
            lambda_2d: 1.0,
            lambda_dep: 0.1,
            lambda_t: 1.0,
            lambda_g: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_z", self.lambda_z),
            ("lambda_2d", self.lambda_2d),
            ("lambda_dep", self.lambda_dep),
            ("lambda_t", self.lambda_t),
            ("lambda_g", self.lambda_g),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: format!("loss.{key}"),
                    reason: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        if self.lambda_t == 0.0 && self.lambda_g == 0.0 {
            return Err(Error::Config {
                key: "loss.lambda_t".into(),
                reason: "lambda_t and lambda_g cannot both be zero".into(),
            });
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda_z: self.lambda_z * c,
            lambda_2d: self.lambda_2d * c,
            lambda_dep: self.lambda_dep * c,
            lambda_t: self.lambda_t * c,
            lambda_g: self.lambda_g * c,
        }
    }
}

/// `λ_z·l_z + λ_2D·l_2d + λ_dep·l_dep`.
pub fn task_loss(l_z: &Tensor, l_2d: &Tensor, l_dep: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((l_z * w.lambda_z)? + (l_2d * w.lambda_2d)? + (l_dep * w.lambda_dep)?)?)
}

/// Scalar version of [`task_loss`] for bookkeeping.
pub fn task_loss_value(l_z: f64, l_2d: f64, l_dep: f64, w: &LossWeights) -> f64 {
    w.lambda_z * l_z + w.lambda_2d * l_2d + w.lambda_dep * l_dep
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn loss_z_hand_values() {
        let zero = vec1(&[0.0, 0.0]);
        let v = scalar(&loss_z(&vec1(&[0.4, 2.0]), &zero, SmoothL1Variant::Verbatim).unwrap());
        assert!((v - 1.04).abs() < 1e-12);
        let at_knee = scalar(&loss_z(&vec1(&[0.5]), &vec1(&[0.0]), SmoothL1Variant::Verbatim).unwrap());
        assert_eq!(at_knee, 0.125);
        let above = scalar(&loss_z(&vec1(&[0.5 + 1e-9]), &vec1(&[0.0]), SmoothL1Variant::Verbatim).unwrap());
        assert!((above - 0.5).abs() < 1e-8);
        let cont = scalar(&loss_z(&vec1(&[0.5 + 1e-9]), &vec1(&[0.0]), SmoothL1Variant::Continuous).unwrap());
        assert!((cont - 0.125).abs() < 1e-8);
    }

    #[test]
    fn loss_2d_hand_value() {
        let dev = Device::Cpu;
        let target = Tensor::zeros((1, 1, 2, 2), DType::F64, &dev).unwrap();
        let pred = Tensor::ones((1, 6, 1, 2, 2), DType::F64, &dev).unwrap();
        assert_eq!(scalar(&loss_2d(&pred, &target).unwrap()), 4.0);
        let bad = Tensor::zeros((1, 2, 2, 2), DType::F64, &dev).unwrap();
        assert!(loss_2d(&pred, &bad).is_err());
    }

    #[test]
    fn loss_dep_uniform_offset() {
        let dev = Device::Cpu;
        for n in [4, 16] {
            let a = Tensor::full(0.3f64, (2, 1, n, n), &dev).unwrap();
            let b = Tensor::full(0.2f64, (2, 1, n, n), &dev).unwrap();
            assert!((scalar(&loss_dep(&a, &b).unwrap()) - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn task_loss_weighting() {
        let w = LossWeights {
            lambda_z: 1.0,
            lambda_2d: 1.0,
            lambda_dep: 1.0,
            lambda_t: 1.0,
            lambda_g: 1.0,
        };
        let t = task_loss(&vec1(&[1.0]).squeeze(0).unwrap(), &vec1(&[2.0]).squeeze(0).unwrap(), &vec1(&[3.0]).squeeze(0).unwrap(), &w).unwrap();
        assert_eq!(scalar(&t), 6.0);
        assert_eq!(task_loss_value(1.0, 2.0, 3.0, &w.scaled(2.5)), 15.0);
    }

    #[test]
    fn loss_weights_validation_names_key() {
        let w = LossWeights {
            lambda_dep: -1.0,
            ..LossWeights::default()
        };
        assert!(matches!(w.validate(), Err(Error::Config { key, .. }) if key == "loss.lambda_dep"));
        let w = LossWeights {
            lambda_t: 0.0,
            lambda_g: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn default_network_has_six_regularizer_layers() {
        let cfg = PoseNetConfig {
            stage_width: 4,
            regression_width: 4,
            backbone_widths: vec![4, 4, 4],
            fc_widths: vec![8],
            ..PoseNetConfig::default()
        };
        let net = PoseNet::new(&cfg, 0, DType::F32).unwrap();
        assert_eq!(net.regularizer_layers().len(), REGULARIZER_LAYERS);
        let z = Tensor::zeros((2, 21), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(net.depth_regularizer_forward(&z).unwrap().dims(), &[2, 1, 64, 64]);
    }
}
