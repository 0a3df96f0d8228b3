//! Evaluation: heatmap decoding, 3D lifting with root alignment, EPE / PCK /
//! AUC metrics, and report files.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataio::{bone_length, CameraIntrinsics, HandSample};
use crate::posenet::PoseNet;
use crate::{Error, Result};

pub const AUC_LOW_MM: f64 = 20.0;
pub const AUC_HIGH_MM: f64 = 50.0;
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const META_FILE: &str = "report_meta.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SUMMARY_HEADER: &str = "auc_20_50,epe_mean_mm,epe_median_mm,n";
pub const CURVE_HEADER: &str = "threshold_mm,pck";

/// 31 thresholds at 1 mm spacing on [20, 50].
pub fn default_thresholds() -> Vec<f64> {
    (20..=50).map(f64::from).collect()
}

/// Argmax location of each of the `K × h × w` maps, mapped to image pixels
/// at the centre of the winning cell. Ties go to the first cell in
/// row-major order.
pub fn decode_2d(heatmaps: &[f32], num_joints: usize, h: usize, w: usize, image_size: (usize, usize)) -> Result<Vec<[f64; 2]>> {
    if h == 0 || w == 0 || heatmaps.len() != num_joints * h * w {
        return Err(Error::Shape(format!(
            "{} heatmap values for {num_joints}×{h}×{w}",
            heatmaps.len()
        )));
    }
    let (sx, sy) = (image_size.0 as f64 / w as f64, image_size.1 as f64 / h as f64);
    Ok(heatmaps
        .chunks(h * w)
        .map(|map| {
            let mut best = 0;
            for (i, &v) in map.iter().enumerate() {
                if v > map[best] {
                    best = i;
                }
            }
            let (row, col) = (best / w, best % w);
            [(col as f64 + 0.5) * sx, (row as f64 + 0.5) * sy]
        })
        .collect())
}

/// Lifts 2D keypoints and relative depths to camera space given the root
/// depth and reference bone length. Returns `None` when any joint would lie
/// at or behind the camera.
pub fn reconstruct_3d(
    kp2d: &[[f64; 2]],
    z: &[f64],
    intrinsics: &CameraIntrinsics,
    root_depth: f64,
    bone_length: f64,
) -> Result<Option<Vec<[f64; 3]>>> {
    if !(bone_length > 0.0) {
        return Err(Error::InvalidArgument(format!("bone length must be positive, got {bone_length}")));
    }
    if kp2d.len() != z.len() {
        return Err(Error::Shape(format!("{} keypoints vs {} depths", kp2d.len(), z.len())));
    }
    let mut out = Vec::with_capacity(z.len());
    for (uv, &zk) in kp2d.iter().zip(z) {
        let depth = root_depth + zk * bone_length;
        if !(depth > 0.0) {
            return Ok(None);
        }
        out.push(intrinsics.unproject(*uv, depth));
    }
    Ok(Some(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpeStats {
    pub per_joint: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Middle value, averaging the two central ones for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn epe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<EpeStats> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted vs {} ground-truth joints", pred.len(), gt.len())));
    }
    let per_joint: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .collect();
    Ok(EpeStats {
        mean: mean(&per_joint),
        median: median(&per_joint),
        per_joint,
    })
}

/// Fraction of errors at or below each threshold (all joints pooled).
pub fn pck_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidArgument("thresholds must be sorted ascending".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = sorted.partition_point(|&e| e <= t);
            (t, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect())
}

/// Normalized area under the PCK curve on [20, 50] mm. The curve is a
/// right-continuous step function, so each sample's value is held until the
/// next threshold.
pub fn auc_20_50(curve: &[(f64, f64)]) -> Result<f64> {
    const TOL: f64 = 1e-9;
    let inside: Vec<(f64, f64)> = curve
        .iter()
        .copied()
        .filter(|&(t, _)| t >= AUC_LOW_MM - TOL && t <= AUC_HIGH_MM + TOL)
        .collect();
    let covers = |x: f64| inside.iter().any(|&(t, _)| (t - x).abs() <= TOL);
    if inside.len() < 2 || !covers(AUC_LOW_MM) || !covers(AUC_HIGH_MM) {
        return Err(Error::InvalidArgument(
            "PCK curve must include both 20 mm and 50 mm".into(),
        ));
    }
    if inside.windows(2).any(|w| !(w[0].0 <= w[1].0)) {
        return Err(Error::InvalidArgument("curve thresholds must be ascending".into()));
    }
    let area: f64 = inside.windows(2).map(|w| w[0].1 * (w[1].0 - w[0].0)).sum();
    Ok(area / (AUC_HIGH_MM - AUC_LOW_MM))
}

/// `100·(before − after)/before`, rounded to one decimal.
pub fn percent_reduction(before: f64, after: f64) -> Result<f64> {
    if !(before > 0.0) {
        return Err(Error::InvalidArgument(format!("baseline must be positive, got {before}")));
    }
    Ok((1000.0 * (before - after) / before).round() / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epe_mean: f64,
    pub epe_median: f64,
    pub pck: Vec<(f64, f64)>,
    pub auc_20_50: f64,
    /// Samples that entered the metrics.
    pub n: usize,
    /// Samples dropped because the lifted pose had non-positive depth.
    pub excluded: usize,
}

impl MetricsReport {
    /// Pools per-joint errors from all evaluated samples.
    pub fn from_errors(errors: &[f64], n: usize, excluded: usize) -> Result<Self> {
        let pck = pck_curve(errors, &default_thresholds())?;
        Ok(Self {
            epe_mean: mean(errors),
            epe_median: median(errors),
            auc_20_50: auc_20_50(&pck)?,
            pck,
            n,
            excluded,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ReportMeta {
    root_alignment: String,
    excluded: usize,
}

const ROOT_ALIGNMENT_NOTE: &str =
    "ground-truth root depth and reference bone length supplied at lifting time";

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Writes `summary.csv`, `curve.csv` and `report_meta.json` into `dir`.
pub fn emit_report(metrics: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let summary = dir.join(SUMMARY_FILE);
    write_file(
        &summary,
        &format!(
            "{SUMMARY_HEADER}\n{:?},{:?},{:?},{}\n",
            metrics.auc_20_50, metrics.epe_mean, metrics.epe_median, metrics.n
        ),
    )?;
    let curve = dir.join(CURVE_FILE);
    let mut text = format!("{CURVE_HEADER}\n");
    for (t, p) in &metrics.pck {
        text.push_str(&format!("{t:?},{p:?}\n"));
    }
    write_file(&curve, &text)?;
    let meta = dir.join(META_FILE);
    let body = serde_json::to_string_pretty(&ReportMeta {
        root_alignment: ROOT_ALIGNMENT_NOTE.into(),
        excluded: metrics.excluded,
    })
    .expect("plain data serializes");
    write_file(&meta, &body)?;
    Ok(vec![summary, curve, meta])
}

fn parse_row(line: &str, path: &Path) -> Result<Vec<f64>> {
    line.split(',')
        .map(|f| {
            f.trim().parse::<f64>().map_err(|_| Error::Record {
                id: path.display().to_string(),
                reason: format!("bad number `{f}`"),
            })
        })
        .collect()
}

/// Parses the files written by [`emit_report`].
pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let summary_path = dir.join(SUMMARY_FILE);
    let summary = read_file(&summary_path)?;
    let mut lines = summary.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Record {
            id: summary_path.display().to_string(),
            reason: "unexpected header".into(),
        });
    }
    let row = parse_row(lines.next().unwrap_or(""), &summary_path)?;
    if row.len() != 4 {
        return Err(Error::Record {
            id: summary_path.display().to_string(),
            reason: "expected four columns".into(),
        });
    }
    let curve_path = dir.join(CURVE_FILE);
    let curve = read_file(&curve_path)?;
    let pck = curve
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r = parse_row(l, &curve_path)?;
            Ok((r[0], r[1]))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: ReportMeta = serde_json::from_str(&read_file(&dir.join(META_FILE))?).map_err(|e| Error::Record {
        id: META_FILE.into(),
        reason: e.to_string(),
    })?;
    Ok(MetricsReport {
        auc_20_50: row[0],
        epe_mean: row[1],
        epe_median: row[2],
        n: row[3] as usize,
        pck,
        excluded: meta.excluded,
    })
}

/// Network output for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPrediction {
    pub record_id: String,
    pub keypoints2d_pred: Vec<[f64; 2]>,
    pub relative_depths: Vec<f64>,
    /// `None` when lifting produced a non-positive depth.
    pub keypoints3d_pred: Option<Vec<[f64; 3]>>,
}

/// Runs the pose network over `samples` in batches of `batch_size` and
/// decodes keypoints and relative depths.
pub fn predict(net: &PoseNet, samples: &[HandSample], batch_size: usize) -> Result<Vec<(Vec<[f64; 2]>, Vec<f64>)>> {
    let cfg = &net.config;
    let (n, k, h) = (cfg.input_size, cfg.num_joints, cfg.heatmap_size);
    let dtype = net.params.dtype();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut flat = Vec::with_capacity(chunk.len() * 3 * n * n);
        for s in chunk {
            if (s.rgb.width, s.rgb.height) != (n, n) {
                return Err(Error::Record {
                    id: s.source_id.clone(),
                    reason: format!("image is {}×{}, network expects {n}×{n}", s.rgb.width, s.rgb.height),
                });
            }
            flat.extend(s.rgb.to_chw().into_iter().map(|v| v - 0.5));
        }
        let x = Tensor::from_vec(flat, (chunk.len(), 3, n, n), &Device::Cpu)?.to_dtype(dtype)?;
        let result = net.forward(&x)?;
        let stages = result.heatmaps.dim(1)?;
        let last = result.heatmaps.narrow(1, stages - 1, 1)?.squeeze(1)?.to_dtype(DType::F32)?;
        let z = result.z.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (i, zi) in z.into_iter().enumerate() {
            let maps = last.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            out.push((decode_2d(&maps, k, h, h, (n, n))?, zi));
        }
    }
    Ok(out)
}

/// Metrics plus per-record predictions for one split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<JointPrediction>,
    /// Mean 2D keypoint error in heatmap cells.
    pub mean_2d_error_cells: f64,
}

/// Predicts, lifts with ground-truth root depth and bone length, and scores.
pub fn evaluate(net: &PoseNet, samples: &[HandSample], config: &TrainConfig) -> Result<Evaluation> {
    let root = config.data.root_joint;
    let bone = (config.data.bone[0], config.data.bone[1]);
    let stride = config.posenet.heatmap_stride();
    let raw = predict(net, samples, config.schedule.batch_size.max(8))?;
    let (mut errors, mut errors_2d, mut predictions) = (Vec::new(), Vec::new(), Vec::new());
    let mut excluded = 0;
    for (s, (kp2d, z)) in samples.iter().zip(raw) {
        for (p, g) in kp2d.iter().zip(&s.keypoints2d) {
            errors_2d.push((p[0] - g[0]).hypot(p[1] - g[1]) / stride);
        }
        let lifted = reconstruct_3d(
            &kp2d,
            &z,
            &s.intrinsics,
            s.keypoints3d[root][2],
            bone_length(&s.keypoints3d, bone),
        )?;
        match &lifted {
            Some(p) => errors.extend(epe(p, &s.keypoints3d)?.per_joint),
            None => excluded += 1,
        }
        predictions.push(JointPrediction {
            record_id: s.source_id.clone(),
            keypoints2d_pred: kp2d,
            relative_depths: z,
            keypoints3d_pred: lifted,
        });
    }
    Ok(Evaluation {
        report: MetricsReport::from_errors(&errors, samples.len() - excluded, excluded)?,
        predictions,
        mean_2d_error_cells: mean(&errors_2d),
    })
}

/// One row per record: `record_id` then `u v Z` for each joint.
pub fn write_predictions(path: &Path, predictions: &[JointPrediction]) -> Result<()> {
    let k = predictions.first().map_or(0, |p| p.relative_depths.len());
    let mut text = String::from("record_id");
    for j in 0..k {
        text.push_str(&format!(",u{j},v{j},z{j}"));
    }
    text.push('\n');
    for p in predictions {
        text.push_str(&p.record_id);
        for (uv, z) in p.keypoints2d_pred.iter().zip(&p.relative_depths) {
            text.push_str(&format!(",{:?},{:?},{:?}", uv[0], uv[1], z));
        }
        text.push('\n');
    }
    write_file(path, &text)
}
