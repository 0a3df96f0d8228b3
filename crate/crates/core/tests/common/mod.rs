//! Helpers shared by the integration tests: finite-difference gradient
//! checks and tiny network configurations.
#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use handpose::config::TrainConfig;
use handpose::depthgan::{DiscriminatorConfig, GeneratorConfig};
use handpose::nn::ParamStore;
use handpose::posenet::PoseNetConfig;

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = norm(a.iter().copied()).max(norm(b.iter().copied()));
    if scale == 0.0 {
        return 0.0;
    }
    norm(a.iter().zip(b).map(|(x, y)| x - y)) / scale
}

/// Central differences of `f` with respect to every element of `var`.
pub fn numeric_grad(var: &Var, f: &dyn Fn() -> f64, h: f64) -> Vec<f64> {
    let base = values(var.as_tensor());
    let shape = var.shape().clone();
    let dtype = var.dtype();
    let set = |v: &[f64]| {
        let t = Tensor::from_vec(v.to_vec(), shape.clone(), var.device()).unwrap();
        var.set(&t.to_dtype(dtype).unwrap()).unwrap();
    };
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        set(&probe);
        let up = f();
        probe[i] = base[i] - h;
        set(&probe);
        let down = f();
        probe[i] = base[i];
        grad.push((up - down) / (2.0 * h));
    }
    set(&base);
    grad
}

/// Adds uniform noise in `[-scale, scale]` to every parameter. Zero-initialized
/// biases otherwise leave pre-activations sitting exactly on ReLU kinks,
/// where central differences are meaningless.
pub fn jitter(store: &ParamStore, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in store.iter() {
        let noise: Vec<f64> = (0..var.elem_count()).map(|_| rng.random_range(-scale..scale)).collect();
        let noise = Tensor::from_vec(noise, var.shape().clone(), var.device())
            .unwrap()
            .to_dtype(var.dtype())
            .unwrap();
        var.set(&(var.as_tensor() + noise).unwrap()).unwrap();
    }
}

/// Analytic gradient of `loss` for `var` (zeros when it does not depend on it).
pub fn analytic_grad(var: &Var, loss: &Tensor) -> Vec<f64> {
    let grads = loss.backward().unwrap();
    match grads.get(var.as_tensor()) {
        Some(g) => values(g),
        None => vec![0.0; var.elem_count()],
    }
}

/// Worst per-tensor relative error between backprop and central
/// differences over every parameter in `store`.
pub fn check_store(store: &ParamStore, loss: &dyn Fn() -> Tensor) -> (f64, usize) {
    let grads = loss().backward().unwrap();
    let f = || scalar(&loss());
    let mut worst = 0.0f64;
    let mut count = 0;
    for (_, var) in store.iter() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; var.elem_count()],
        };
        let numeric = numeric_grad(var, &f, 1e-6);
        worst = worst.max(rel_err(&analytic, &numeric));
        count += analytic.len();
    }
    (worst, count)
}

/// Pose network small enough for exhaustive finite differences: 8×8 input,
/// 4×4 heatmaps, three joints, 8×8 regularizer output.
pub fn tiny_posenet() -> PoseNetConfig {
    PoseNetConfig {
        num_joints: 3,
        input_size: 8,
        heatmap_size: 4,
        depth_size: 8,
        backbone_widths: vec![2],
        stages: 6,
        stage_convs: 2,
        stage_width: 2,
        regression_convs: 1,
        regression_width: 4,
        fc_widths: vec![6],
        regularizer_widths: vec![2, 2, 2, 2, 2],
        ..PoseNetConfig::default()
    }
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        input_size: 8,
        output_size: 8,
        down_widths: vec![2, 3],
        res_blocks: 1,
        up_widths: vec![3, 2],
    }
}

pub fn tiny_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        input_size: 8,
        widths: vec![2, 3],
    }
}

/// Everything at 32×32 with narrow layers; fast enough for many training
/// steps inside a unit-test budget.
pub fn small_config(root: &std::path::Path, out: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::fixture(root, out);
    cfg.posenet = PoseNetConfig {
        input_size: 32,
        heatmap_size: 8,
        depth_size: 32,
        backbone_widths: vec![4, 4],
        stages: 2,
        stage_convs: 2,
        stage_width: 4,
        regression_convs: 2,
        regression_width: 4,
        fc_widths: vec![16],
        regularizer_widths: vec![8, 8, 4, 4, 4],
        ..PoseNetConfig::default()
    };
    cfg.generator = GeneratorConfig {
        input_size: 32,
        output_size: 32,
        down_widths: vec![4, 8],
        res_blocks: 1,
        up_widths: vec![8, 4],
    };
    cfg.discriminator = DiscriminatorConfig {
        input_size: 32,
        widths: vec![4, 8],
    };
    cfg.schedule.batch_size = 2;
    cfg
}

/// Brute-force PCK: count errors at or below each threshold one by one.
pub fn oracle_pck(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            let mut hits = 0usize;
            for &e in errors {
                if e <= t {
                    hits += 1;
                }
            }
            if errors.is_empty() {
                0.0
            } else {
                hits as f64 / errors.len() as f64
            }
        })
        .collect()
}

/// Left Riemann sum of the piecewise-constant curve through `(t, pck)` over
/// [20, 50] with `subdivisions` equal cells.
pub fn oracle_auc(curve: &[(f64, f64)], subdivisions: usize) -> f64 {
    let h = 30.0 / subdivisions as f64;
    let mut area = 0.0;
    for i in 0..subdivisions {
        let x = 20.0 + i as f64 * h + 1e-9;
        let value = curve.iter().rev().find(|(t, _)| *t <= x).map_or(0.0, |p| p.1);
        area += value * h;
    }
    area / 30.0
}

pub fn oracle_mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

/// Median by selecting the middle rank(s) after a plain insertion sort.
pub fn oracle_median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = Vec::with_capacity(v.len());
    for &x in v {
        let at = s.iter().position(|&y| y > x).unwrap_or(s.len());
        s.insert(at, x);
    }
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
