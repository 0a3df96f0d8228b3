//! Dataset records, preprocessing and training-target construction.

mod fixture;
mod layout;
mod sampler;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use fixture::{gen_fixture_splits, gen_fixtures, FixtureGenerator, FixtureRecord, HAND_RADIUS_MM, VISIBLE_RADIUS_MM};
pub use layout::{
    load_dataset, read_depth, read_rgb, write_dataset, write_depth, write_rgb, AccessEvent, AccessKind, AccessTrace, Layout, LoadOptions,
    Manifest, ManifestRecord, Split,
};
pub use sampler::{sample_unpaired_depth, RngState, UnpairedSampler};

/// Joint count of the default kinematic tree: wrist plus four joints per finger.
pub const NUM_JOINTS: usize = 21;
pub const WRIST: usize = 0;
pub const MIDDLE_MCP: usize = 9;

/// Joint ordering: wrist, then thumb (CMC, MCP, IP, tip), index, middle,
/// ring and pinky (MCP, PIP, DIP, tip each).
pub const JOINT_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(0),
    Some(5),
    Some(6),
    Some(7),
    Some(0),
    Some(9),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
    Some(15),
    Some(0),
    Some(17),
    Some(18),
    Some(19),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Pinhole projection into continuous pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ]
    }

    pub fn unproject(&self, uv: [f64; 2], z: f64) -> [f64; 3] {
        [
            (uv[0] - self.cx) * z / self.fx,
            (uv[1] - self.cy) * z / self.fy,
            z,
        ]
    }
}

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Channel-major copy (`3 × H × W`), the layout networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel-index coordinates; outside pixels read as black.
    fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut acc = [0f32; 3];
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (xi, yi) = (x0 + dx, y0 + dy);
                if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                    continue;
                }
                let p = self.pixel(xi as usize, yi as usize);
                for c in 0..3 {
                    acc[c] += w * p[c];
                }
            }
        }
        acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthUnit {
    RawMm,
    Normalized,
}

/// Single-channel depth image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub unit: DepthUnit,
}

impl DepthMap {
    pub fn raw(width: usize, height: usize, values: Vec<f32>) -> Self {
        Self {
            width,
            height,
            values,
            unit: DepthUnit::RawMm,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Nearest-neighbour resampling at cell centres; identity when the size is unchanged.
    pub fn resized(&self, width: usize, height: usize) -> DepthMap {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                values.push(self.at(sx, sy));
            }
        }
        DepthMap {
            width,
            height,
            values,
            unit: self.unit,
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandSide {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandSample {
    pub source_id: String,
    pub rgb: RgbImage,
    pub keypoints2d: Vec<[f64; 2]>,
    pub keypoints3d: Vec<[f64; 3]>,
    pub intrinsics: CameraIntrinsics,
    pub depth: Option<DepthMap>,
    pub hand_side: HandSide,
}

impl HandSample {
    pub fn num_joints(&self) -> usize {
        self.keypoints3d.len()
    }
}

/// Axis-aligned pixel rectangle in continuous coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    /// The box a second crop selects, expressed in the frame before the first crop.
    pub fn compose(&self, first_out_size: usize, inner: &BBox) -> BBox {
        let sx = first_out_size as f64 / self.width;
        let sy = first_out_size as f64 / self.height;
        BBox {
            x: self.x + inner.x / sx,
            y: self.y + inner.y / sy,
            width: inner.width / sx,
            height: inner.height / sy,
        }
    }
}

/// Crops `bbox` out of the sample and resizes it to `out_size × out_size`.
///
/// RGB is resampled bilinearly, depth with nearest neighbour so that no
/// depth values are invented across occlusion edges. Keypoints and the
/// principal point follow the same affine map `p' = (p - origin) * scale`.
pub fn crop_hand(sample: &HandSample, bbox: &BBox, out_size: usize) -> Result<HandSample> {
    if out_size == 0 {
        return Err(Error::InvalidArgument("crop out_size must be positive".into()));
    }
    if !(bbox.width > 0.0 && bbox.height > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "crop box must have positive extent, got {}x{}",
            bbox.width, bbox.height
        )));
    }
    let (w, h) = (sample.rgb.width as f64, sample.rgb.height as f64);
    if bbox.x >= w || bbox.y >= h || bbox.x + bbox.width <= 0.0 || bbox.y + bbox.height <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "crop box {bbox:?} lies outside the {w}x{h} image"
        )));
    }
    let sx = out_size as f64 / bbox.width;
    let sy = out_size as f64 / bbox.height;
    let src_x = |j: usize| bbox.x + (j as f64 + 0.5) / sx - 0.5;
    let src_y = |i: usize| bbox.y + (i as f64 + 0.5) / sy - 0.5;

    let mut rgb = RgbImage::new(out_size, out_size);
    for i in 0..out_size {
        for j in 0..out_size {
            rgb.set_pixel(j, i, sample.rgb.sample_bilinear(src_x(j), src_y(i)));
        }
    }

    let depth = sample.depth.as_ref().map(|d| {
        let mut values = Vec::with_capacity(out_size * out_size);
        for i in 0..out_size {
            for j in 0..out_size {
                let (x, y) = (src_x(j).round(), src_y(i).round());
                let inside = x >= 0.0 && y >= 0.0 && x < d.width as f64 && y < d.height as f64;
                values.push(if inside {
                    d.at(x as usize, y as usize)
                } else {
                    0.0
                });
            }
        }
        DepthMap {
            width: out_size,
            height: out_size,
            values,
            unit: d.unit,
        }
    });

    let k = &sample.intrinsics;
    Ok(HandSample {
        source_id: sample.source_id.clone(),
        rgb,
        keypoints2d: sample
            .keypoints2d
            .iter()
            .map(|p| [(p[0] - bbox.x) * sx, (p[1] - bbox.y) * sy])
            .collect(),
        keypoints3d: sample.keypoints3d.clone(),
        intrinsics: CameraIntrinsics {
            fx: k.fx * sx,
            fy: k.fy * sy,
            cx: (k.cx - bbox.x) * sx,
            cy: (k.cy - bbox.y) * sy,
        },
        depth,
        hand_side: sample.hand_side,
    })
}

/// Moves a palm-centre annotation to the wrist by extrapolating along the
/// middle-MCP → palm direction: `palm + gamma * (palm - middle_mcp)`.
pub fn palm_to_wrist(
    keypoints3d: &[[f64; 3]],
    keypoints2d: &[[f64; 2]],
    palm_idx: usize,
    middle_mcp_idx: usize,
    gamma: f64,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 2]>)> {
    let k = keypoints3d.len();
    if keypoints2d.len() != k {
        return Err(Error::Shape(format!(
            "{} 3D keypoints vs {} 2D keypoints",
            k,
            keypoints2d.len()
        )));
    }
    if palm_idx >= k || middle_mcp_idx >= k || palm_idx == middle_mcp_idx {
        return Err(Error::InvalidArgument(format!(
            "palm/middle-MCP indices must be distinct and < {k}, got {palm_idx}/{middle_mcp_idx}"
        )));
    }
    let mut out3 = keypoints3d.to_vec();
    let mut out2 = keypoints2d.to_vec();
    let (p3, m3) = (keypoints3d[palm_idx], keypoints3d[middle_mcp_idx]);
    let (p2, m2) = (keypoints2d[palm_idx], keypoints2d[middle_mcp_idx]);
    for a in 0..3 {
        out3[palm_idx][a] = p3[a] + gamma * (p3[a] - m3[a]);
    }
    for a in 0..2 {
        out2[palm_idx][a] = p2[a] + gamma * (p2[a] - m2[a]);
    }
    Ok((out3, out2))
}

/// Per-joint Gaussian confidence maps, row-major `K × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapTargets {
    pub num_joints: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub maps: Vec<f32>,
}

impl HeatmapTargets {
    pub fn map(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.maps[k * n..(k + 1) * n]
    }
}

/// Builds unnormalized Gaussian heatmaps (peak 1) for keypoints given in
/// image pixels. `sigma` is measured in heatmap cells; cell `(i, j)` is
/// evaluated at its centre. Joints outside the image get an all-zero map.
pub fn make_heatmap_targets(
    keypoints2d: &[[f64; 2]],
    image_size: (usize, usize),
    resolution: (usize, usize),
    sigma: f64,
) -> Result<HeatmapTargets> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let (img_w, img_h) = image_size;
    let (w, h) = resolution;
    let scale_x = w as f64 / img_w as f64;
    let scale_y = h as f64 / img_h as f64;
    let denom = 2.0 * sigma * sigma;
    let mut maps = vec![0f32; keypoints2d.len() * h * w];
    for (k, kp) in keypoints2d.iter().enumerate() {
        let (u, v) = (kp[0] * scale_x, kp[1] * scale_y);
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            continue;
        }
        let map = &mut maps[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let dy = i as f64 + 0.5 - v;
            for j in 0..w {
                let dx = j as f64 + 0.5 - u;
                map[i * w + j] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    Ok(HeatmapTargets {
        num_joints: keypoints2d.len(),
        height: h,
        width: w,
        sigma,
        maps,
    })
}

/// Min-max normalizes a raw depth map to `[0, 1]`.
pub fn normalize_depth(raw: &DepthMap) -> Result<DepthMap> {
    if raw.unit != DepthUnit::RawMm {
        return Err(Error::InvalidArgument(
            "normalize_depth expects a raw (mm) depth map".into(),
        ));
    }
    let (lo, hi) = raw.min_max();
    if !(hi > lo) {
        return Err(Error::DegenerateDepth { value: lo });
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    Ok(DepthMap {
        width: raw.width,
        height: raw.height,
        values: raw
            .values
            .iter()
            .map(|&v| ((v as f64 - lo) / range) as f32)
            .collect(),
        unit: DepthUnit::Normalized,
    })
}

/// Root-relative joint depths in units of one reference bone length.
pub fn relative_depths(
    keypoints3d: &[[f64; 3]],
    root_idx: usize,
    ref_bone: (usize, usize),
) -> Result<Vec<f64>> {
    let k = keypoints3d.len();
    let (a, b) = ref_bone;
    if root_idx >= k || a >= k || b >= k {
        return Err(Error::InvalidArgument(format!(
            "joint index out of range for {k} joints"
        )));
    }
    if a == b {
        return Err(Error::InvalidArgument(
            "reference bone endpoints must be distinct".into(),
        ));
    }
    let len = bone_length(keypoints3d, ref_bone);
    if !(len > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference bone ({a}, {b}) has zero length"
        )));
    }
    let z_root = keypoints3d[root_idx][2];
    Ok(keypoints3d.iter().map(|p| (p[2] - z_root) / len).collect())
}

pub fn bone_length(keypoints3d: &[[f64; 3]], (a, b): (usize, usize)) -> f64 {
    let (p, q) = (keypoints3d[a], keypoints3d[b]);
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Collection of real (normalized) depth maps used as the unpaired target domain.
#[derive(Clone, Debug)]
pub struct DepthPool {
    pub items: Vec<DepthMap>,
    pub origin: String,
}

impl DepthPool {
    /// Normalizes every raw map on entry; normalized maps are kept as-is.
    pub fn new(items: Vec<DepthMap>, origin: impl Into<String>) -> Result<Self> {
        let items = items
            .into_iter()
            .map(|d| match d.unit {
                DepthUnit::RawMm => normalize_depth(&d),
                DepthUnit::Normalized => Ok(d),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            origin: origin.into(),
        })
    }

    pub fn from_samples(samples: &[HandSample], origin: impl Into<String>) -> Result<Self> {
        let items = samples
            .iter()
            .map(|s| {
                s.depth.clone().ok_or_else(|| Error::MissingDepth {
                    id: s.source_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, origin)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
