//! RGB-to-depth translation: an encoder-decoder generator, a whole-image
//! realness discriminator and the adversarial losses.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::{self, sub_rng, Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::{Error, Result};

/// Clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-7;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub output_size: usize,
    /// Output channels of each stride-2 encoder block.
    pub down_widths: Vec<usize>,
    pub res_blocks: usize,
    /// Output channels of each stride-2 transposed-conv decoder block.
    pub up_widths: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            output_size: 64,
            down_widths: vec![16, 32, 64, 64],
            res_blocks: 2,
            up_widths: vec![64, 32, 16, 16],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: format!("generator.{key}"), reason });
        if self.down_widths.is_empty() || self.down_widths.contains(&0) {
            return bad("down_widths", "must be non-empty and positive".into());
        }
        if self.up_widths.contains(&0) {
            return bad("up_widths", "must be positive".into());
        }
        let scale = 1usize << self.down_widths.len();
        if self.input_size == 0 || self.input_size % scale != 0 {
            return bad("input_size", format!("must be a positive multiple of {scale}"));
        }
        let out = (self.input_size / scale) << self.up_widths.len();
        if out != self.output_size {
            return bad(
                "output_size",
                format!("encoder/decoder depths produce {out}, not {}", self.output_size),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub widths: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: vec![16, 32, 64, 64],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: format!("discriminator.{key}"), reason });
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths", "must be non-empty and positive".into());
        }
        let scale = 1usize << self.widths.len();
        if self.input_size == 0 || self.input_size % scale != 0 {
            return bad("input_size", format!("must be a positive multiple of {scale}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    Minimax,
    #[default]
    NonSaturating,
}

fn check_image(x: &Tensor, channels: usize, size: usize, what: &str) -> Result<()> {
    match x.dims() {
        [_, c, h, w] if *c == channels && *h == size && *w == size => Ok(()),
        dims => Err(Error::Shape(format!(
            "{what} expects B×{channels}×{size}×{size}, got {dims:?}"
        ))),
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    down: Vec<Conv2d>,
    res: Vec<ResBlock>,
    up: Vec<ConvTranspose2d>,
    head: Conv2d,
}

impl GeneratorNet {
    pub fn new(config: &GeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = sub_rng(seed, "generator");
        let mut params = ParamStore::new(dtype);
        let mut c = 3;
        let mut down = Vec::new();
        for (i, &w) in config.down_widths.iter().enumerate() {
            down.push(Conv2d::new(&mut params, &format!("down{i}"), c, w, 4, 2, 1, &mut rng)?);
            c = w;
        }
        let mut res = Vec::new();
        for i in 0..config.res_blocks {
            res.push(ResBlock {
                a: Conv2d::new(&mut params, &format!("res{i}.a"), c, c, 3, 1, 1, &mut rng)?,
                b: Conv2d::new(&mut params, &format!("res{i}.b"), c, c, 3, 1, 1, &mut rng)?,
            });
        }
        let mut up = Vec::new();
        for (i, &w) in config.up_widths.iter().enumerate() {
            up.push(ConvTranspose2d::new(&mut params, &format!("up{i}"), c, w, 4, 2, 1, &mut rng)?);
            c = w;
        }
        let head = Conv2d::new(&mut params, "head", c, 1, 1, 1, 0, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params,
            down,
            res,
            up,
            head,
        })
    }

    /// Final 1×1 projection before the squashing nonlinearity.
    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    pub fn forward(&self, rgb: &Tensor) -> Result<Tensor> {
        check_image(rgb, 3, self.config.input_size, "generator")?;
        let mut x = rgb.clone();
        for conv in &self.down {
            x = nn::leaky_relu(&conv.forward(&x)?, LEAKY_SLOPE)?;
        }
        for block in &self.res {
            let y = block.b.forward(&nn::relu(&block.a.forward(&x)?)?)?;
            x = nn::relu(&(x + y)?)?;
        }
        for deconv in &self.up {
            x = nn::relu(&deconv.forward(&x)?)?;
        }
        nn::sigmoid(&self.head.forward(&x)?)
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    convs: Vec<Conv2d>,
    out: Linear,
}

impl DiscriminatorNet {
    pub fn new(config: &DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = sub_rng(seed, "discriminator");
        let mut params = ParamStore::new(dtype);
        let mut c = 1;
        let mut convs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("conv{i}"), c, w, 4, 2, 1, &mut rng)?);
            c = w;
        }
        let out = Linear::new(&mut params, "out", c, 1, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params,
            convs,
            out,
        })
    }

    /// Pre-sigmoid realness, shape B.
    pub fn logits(&self, depth: &Tensor) -> Result<Tensor> {
        check_image(depth, 1, self.config.input_size, "discriminator")?;
        let mut x = depth.clone();
        for conv in &self.convs {
            x = nn::leaky_relu(&conv.forward(&x)?, LEAKY_SLOPE)?;
        }
        let pooled = x.mean(3)?.mean(2)?;
        Ok(self.out.forward(&pooled)?.squeeze(1)?)
    }

    /// Realness scores in (0,1), shape B.
    pub fn forward(&self, depth: &Tensor) -> Result<Tensor> {
        Ok(nn::sigmoid(&self.logits(depth)?)?.clamp(LOG_EPS, 1.0 - LOG_EPS)?)
    }
}

pub fn generator_forward(net: &GeneratorNet, rgb: &Tensor) -> Result<Tensor> {
    net.forward(rgb)
}

pub fn discriminator_forward(net: &DiscriminatorNet, depth: &Tensor) -> Result<Tensor> {
    net.forward(depth)
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(LOG_EPS, 1.0 - LOG_EPS)?.log()?)
}

/// `mean log D(real) + mean log(1 − D(fake))`. The discriminator ascends it.
pub fn gan_loss_discriminator(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let real = clamped_log(real_scores)?.mean_all()?;
    let fake = clamped_log(&fake_scores.affine(-1.0, 1.0)?)?.mean_all()?;
    Ok((real + fake)?)
}

/// Generator objective to descend.
pub fn gan_loss_generator(fake_scores: &Tensor, variant: GeneratorLoss) -> Result<Tensor> {
    Ok(match variant {
        GeneratorLoss::Minimax => clamped_log(&fake_scores.affine(-1.0, 1.0)?)?.mean_all()?,
        GeneratorLoss::NonSaturating => clamped_log(fake_scores)?.mean_all()?.neg()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn scores(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn default_configs_validate() {
        GeneratorConfig::default().validate().unwrap();
        DiscriminatorConfig::default().validate().unwrap();
        let bad = GeneratorConfig {
            output_size: 32,
            ..GeneratorConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "generator.output_size"));
    }

    #[test]
    fn discriminator_loss_closed_form() {
        let v = scalar(&gan_loss_discriminator(&scores(&[0.5]), &scores(&[0.5])).unwrap());
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 1.3863).abs() < 1e-4);
        let better = scalar(&gan_loss_discriminator(&scores(&[0.9]), &scores(&[0.1])).unwrap());
        assert!(better > v);
    }

    #[test]
    fn perfect_discriminator_approaches_zero() {
        let v = scalar(&gan_loss_discriminator(&scores(&[1.0, 1.0]), &scores(&[0.0])).unwrap());
        assert!(v <= 0.0 && v > -1e-6);
    }

    #[test]
    fn generator_loss_closed_form() {
        let mm = scalar(&gan_loss_generator(&scores(&[0.5]), GeneratorLoss::Minimax).unwrap());
        let ns = scalar(&gan_loss_generator(&scores(&[0.5]), GeneratorLoss::NonSaturating).unwrap());
        assert!((mm - 0.5f64.ln()).abs() < 1e-12);
        assert!((ns + 0.5f64.ln()).abs() < 1e-12);
        let fooled_mm = scalar(&gan_loss_generator(&scores(&[1.0]), GeneratorLoss::Minimax).unwrap());
        let fooled_ns = scalar(&gan_loss_generator(&scores(&[1.0]), GeneratorLoss::NonSaturating).unwrap());
        assert!(fooled_mm.is_finite() && fooled_mm < -15.0);
        assert!(fooled_ns.abs() < 1e-6);
    }

    #[test]
    fn extreme_scores_stay_finite() {
        let v = scalar(&gan_loss_discriminator(&scores(&[0.0, 1.0]), &scores(&[1.0, 0.0])).unwrap());
        assert!(v.is_finite());
    }
}
