//! Manifest-driven on-disk dataset layouts.
//!
//! A dataset root holds `manifest.json` plus, per record, a lossless 8-bit
//! RGB PNG, an optional 16-bit single-channel depth PNG in millimetres and a
//! keypoint text file with one `u v x y z` line per joint.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{
    crop_hand, palm_to_wrist, BBox, CameraIntrinsics, DepthMap, DepthUnit, HandSample, HandSide,
    RgbImage, MIDDLE_MCP, NUM_JOINTS,
};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    RhdLike,
    StbLike,
    MhpLike,
    Fixture,
}

impl Layout {
    /// Layouts whose joint 0 is annotated at the palm centre instead of the wrist.
    pub fn palm_centered(self) -> bool {
        matches!(self, Layout::StbLike | Layout::MhpLike)
    }

    pub fn has_dense_depth(self) -> bool {
        self != Layout::MhpLike
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Layout::RhdLike => "rhd_like",
            Layout::StbLike => "stb_like",
            Layout::MhpLike => "mhp_like",
            Layout::Fixture => "fixture",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "rhd_like" => Ok(Layout::RhdLike),
            "stb_like" => Ok(Layout::StbLike),
            "mhp_like" => Ok(Layout::MhpLike),
            "fixture" => Ok(Layout::Fixture),
            other => Err(Error::InvalidArgument(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layout: Layout,
    pub num_joints: usize,
    pub records: Vec<ManifestRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub rgb: String,
    pub depth: Option<String>,
    pub keypoints: String,
    pub intrinsics: CameraIntrinsics,
    pub hand_side: HandSide,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::LayoutMismatch {
            root: root.to_path_buf(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::LayoutMismatch {
            root: root.to_path_buf(),
            reason: format!("malformed {MANIFEST_FILE}: {e}"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Rgb,
    Keypoints,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessEvent {
    pub root: PathBuf,
    pub record_id: String,
    pub kind: AccessKind,
}

/// Shared log of every file the loader touched.
#[derive(Clone, Debug, Default)]
pub struct AccessTrace {
    events: Arc<Mutex<Vec<AccessEvent>>>,
}

impl AccessTrace {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, root: &Path, record_id: &str, kind: AccessKind) {
        self.events.lock().unwrap().push(AccessEvent {
            root: root.to_path_buf(),
            record_id: record_id.to_string(),
            kind,
        });
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn count(&self, kind: AccessKind) -> usize {
        self.events.lock().unwrap().iter().filter(|e| e.kind == kind).count()
    }

    pub fn count_under(&self, root: &Path, kind: AccessKind) -> usize {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.kind == kind && e.root == root)
            .count()
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// When false the depth files listed in the manifest are never opened.
    pub read_depth: bool,
    /// Extrapolation factor for the palm-centre → wrist remap.
    pub palm_gamma: f64,
    /// Crop records that carry a bbox to this square size.
    pub crop_size: Option<usize>,
    pub trace: Option<AccessTrace>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            read_depth: true,
            palm_gamma: 1.0,
            crop_size: None,
            trace: None,
        }
    }
}

pub fn load_dataset(
    root: &Path,
    layout: Layout,
    split: Split,
    opts: &LoadOptions,
) -> Result<Vec<HandSample>> {
    let manifest = Manifest::read(root)?;
    if manifest.layout != layout {
        return Err(Error::LayoutMismatch {
            root: root.to_path_buf(),
            reason: format!("manifest declares `{}`, expected `{layout}`", manifest.layout),
        });
    }
    manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_record(root, &manifest, r, opts))
        .collect()
}

fn load_record(
    root: &Path,
    manifest: &Manifest,
    rec: &ManifestRecord,
    opts: &LoadOptions,
) -> Result<HandSample> {
    let record_err = |reason: String| Error::Record {
        id: rec.id.clone(),
        reason,
    };
    let trace = |kind| {
        if let Some(t) = &opts.trace {
            t.record(root, &rec.id, kind);
        }
    };
    rec.intrinsics
        .validate()
        .map_err(|e| record_err(e.to_string()))?;

    trace(AccessKind::Rgb);
    let rgb = read_rgb(&root.join(&rec.rgb)).map_err(|e| record_err(e.to_string()))?;

    trace(AccessKind::Keypoints);
    let (mut kp2, mut kp3) =
        read_keypoints(&root.join(&rec.keypoints)).map_err(|e| record_err(e.to_string()))?;
    if kp3.len() != manifest.num_joints {
        return Err(record_err(format!(
            "{} keypoints, manifest declares {}",
            kp3.len(),
            manifest.num_joints
        )));
    }

    let depth = match (&rec.depth, opts.read_depth && manifest.layout.has_dense_depth()) {
        (Some(file), true) => {
            trace(AccessKind::Depth);
            let d = read_depth(&root.join(file)).map_err(|e| record_err(e.to_string()))?;
            if (d.width, d.height) != (rgb.width, rgb.height) {
                return Err(record_err(format!(
                    "depth {}x{} does not match rgb {}x{}",
                    d.width, d.height, rgb.width, rgb.height
                )));
            }
            Some(d)
        }
        _ => None,
    };

    if manifest.layout.palm_centered() && manifest.num_joints == NUM_JOINTS {
        (kp3, kp2) = palm_to_wrist(&kp3, &kp2, 0, MIDDLE_MCP, opts.palm_gamma)?;
    }

    let sample = HandSample {
        source_id: rec.id.clone(),
        rgb,
        keypoints2d: kp2,
        keypoints3d: kp3,
        intrinsics: rec.intrinsics,
        depth,
        hand_side: rec.hand_side,
    };
    match (rec.bbox, opts.crop_size) {
        (Some(bbox), Some(size)) => crop_hand(&sample, &bbox, size),
        _ => Ok(sample),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::from_rgb8(w as usize, h as usize, img.as_raw()))
}

pub fn write_rgb(path: &Path, rgb: &RgbImage) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(rgb.width as u32, rgb.height as u32, rgb.to_rgb8())
            .expect("buffer size matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma16();
    let (w, h) = img.dimensions();
    Ok(DepthMap::raw(
        w as usize,
        h as usize,
        img.as_raw().iter().map(|&v| v as f32).collect(),
    ))
}

/// Writes a 16-bit single-channel PNG. Raw maps are stored in millimetres,
/// normalized maps are rescaled from `[0, 1]` to `[0, 65535]`.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let scale = match depth.unit {
        DepthUnit::RawMm => 1.0,
        DepthUnit::Normalized => 65535.0,
    };
    let data: Vec<u16> = depth
        .values
        .iter()
        .map(|&v| (v as f64 * scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, data)
            .expect("buffer size matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_keypoints(path: &Path) -> Result<(Vec<[f64; 2]>, Vec<[f64; 3]>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut kp2 = Vec::new();
    let mut kp3 = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals = line
            .split_whitespace()
            .map(f64::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if vals.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "{} line {}: expected `u v x y z`, got {} values",
                path.display(),
                n + 1,
                vals.len()
            )));
        }
        kp2.push([vals[0], vals[1]]);
        kp3.push([vals[2], vals[3], vals[4]]);
    }
    Ok((kp2, kp3))
}

pub fn write_keypoints(path: &Path, kp2: &[[f64; 2]], kp3: &[[f64; 3]]) -> Result<()> {
    let mut text = String::new();
    for (p, q) in kp2.iter().zip(kp3) {
        text.push_str(&format!("{} {} {} {} {}\n", p[0], p[1], q[0], q[1], q[2]));
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes samples in the given layout, one file set per record.
/// Depth is omitted for layouts without dense depth or samples without it.
pub fn write_dataset(root: &Path, layout: Layout, records: &[(HandSample, Split)]) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(format!("create {}", root.display()), e))?;
    let num_joints = records.first().map_or(NUM_JOINTS, |(s, _)| s.num_joints());
    let mut manifest = Manifest {
        layout,
        num_joints,
        records: Vec::with_capacity(records.len()),
    };
    for (sample, split) in records {
        let id = &sample.source_id;
        let rgb = format!("{id}_rgb.png");
        let keypoints = format!("{id}_kp.txt");
        write_rgb(&root.join(&rgb), &sample.rgb)?;
        write_keypoints(&root.join(&keypoints), &sample.keypoints2d, &sample.keypoints3d)?;
        let depth = match (&sample.depth, layout.has_dense_depth()) {
            (Some(d), true) => {
                let name = format!("{id}_depth.png");
                write_depth(&root.join(&name), d)?;
                Some(name)
            }
            _ => None,
        };
        manifest.records.push(ManifestRecord {
            id: id.clone(),
            split: *split,
            rgb,
            depth,
            keypoints,
            intrinsics: sample.intrinsics,
            hand_side: sample.hand_side,
            bbox: None,
        });
    }
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}
