//! Procedural hand fixtures.
//!
//! A 21-joint hand is posed on a kinematic tree, built from capsule phalanges
//! plus a triangulated palm, and ray-cast through a pinhole camera whose
//! intrinsics frame the hand. Every record carries the shaded RGB image, the
//! exact z-buffer in millimetres and keypoints that project consistently.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::{write_dataset, Layout, Manifest, Split};
use super::{CameraIntrinsics, DepthMap, HandSample, HandSide, RgbImage, NUM_JOINTS};
use crate::{Error, Result};

pub const HAND_RADIUS_MM: f64 = 4.0;

/// A keypoint counts as visible when the first surface along its pixel ray
/// lies within this distance of the joint centre.
pub const VISIBLE_RADIUS_MM: f64 = 4.5;

type Vec3 = [f64; 3];

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}
fn unit(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}
fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}
fn rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}
fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}
fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

struct Finger {
    base: Vec3,
    dir: [f64; 2],
    segments: [f64; 3],
    albedo: [f32; 3],
}

// Right hand, palm facing -z, fingers along +y, thumb on the -x side.
const FINGERS: [Finger; 5] = [
    Finger {
        base: [-22.0, 20.0, -3.0],
        dir: [-0.75, 0.66],
        segments: [38.0, 32.0, 27.0],
        albedo: [0.92, 0.55, 0.50],
    },
    Finger {
        base: [-26.0, 86.0, 0.0],
        dir: [-0.1, 1.0],
        segments: [40.0, 24.0, 20.0],
        albedo: [0.90, 0.78, 0.42],
    },
    Finger {
        base: [-6.0, 92.0, 0.0],
        dir: [0.0, 1.0],
        segments: [44.0, 27.0, 22.0],
        albedo: [0.62, 0.80, 0.52],
    },
    Finger {
        base: [13.0, 87.0, 0.0],
        dir: [0.08, 1.0],
        segments: [41.0, 26.0, 21.0],
        albedo: [0.55, 0.68, 0.90],
    },
    Finger {
        base: [30.0, 77.0, 0.0],
        dir: [0.18, 1.0],
        segments: [32.0, 20.0, 18.0],
        albedo: [0.82, 0.58, 0.88],
    },
];

const PALM_ALBEDO: [f32; 3] = [0.88, 0.70, 0.60];

/// Shape or triangle the renderer can hit.
enum Primitive {
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    Triangle { p: [Vec3; 3] },
}

struct Hit {
    t: f64,
    normal: Vec3,
    albedo: [f32; 3],
}

fn sphere_hit(dir: Vec3, c: Vec3, r: f64) -> Option<(f64, Vec3)> {
    // Ray origin is the camera centre (0, 0, 0).
    let oc = scale(c, -1.0);
    let a = dot(dir, dir);
    let b = 2.0 * dot(dir, oc);
    let cc = dot(oc, oc) - r * r;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    (t > 0.0).then(|| (t, unit(sub(scale(dir, t), c))))
}

fn capsule_hit(dir: Vec3, a: Vec3, b: Vec3, r: f64) -> Option<(f64, Vec3)> {
    let mut best = sphere_hit(dir, a, r);
    let mut keep = |cand: Option<(f64, Vec3)>| {
        if let Some(c) = cand {
            if best.map_or(true, |b| c.0 < b.0) {
                best = Some(c);
            }
        }
    };
    keep(sphere_hit(dir, b, r));
    let axis = sub(b, a);
    let len = norm(axis);
    if len > 0.0 {
        let w = scale(axis, 1.0 / len);
        let oa = scale(a, -1.0);
        let d_perp = sub(dir, scale(w, dot(dir, w)));
        let o_perp = sub(oa, scale(w, dot(oa, w)));
        let qa = dot(d_perp, d_perp);
        if qa > 1e-12 {
            let qb = 2.0 * dot(d_perp, o_perp);
            let qc = dot(o_perp, o_perp) - r * r;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let t = (-qb - disc.sqrt()) / (2.0 * qa);
                let s = dot(add(oa, scale(dir, t)), w);
                if t > 0.0 && (0.0..=len).contains(&s) {
                    let p = scale(dir, t);
                    keep(Some((t, unit(sub(p, add(a, scale(w, s)))))));
                }
            }
        }
    }
    best
}

fn triangle_hit(dir: Vec3, p: &[Vec3; 3]) -> Option<(f64, Vec3)> {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let h = cross(dir, e2);
    let det = dot(e1, h);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = 1.0 / det;
    let s = scale(p[0], -1.0);
    let u = inv * dot(s, h);
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = inv * dot(dir, q);
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = inv * dot(e2, q);
    if t <= 0.0 {
        return None;
    }
    let mut n = unit(cross(e1, e2));
    if dot(n, dir) > 0.0 {
        n = scale(n, -1.0);
    }
    Some((t, n))
}

struct Scene {
    prims: Vec<(Primitive, [f32; 3])>,
}

impl Scene {
    fn build(joints: &[Vec3]) -> Self {
        let mut prims = Vec::new();
        let r = HAND_RADIUS_MM;
        for (f, finger) in FINGERS.iter().enumerate() {
            let j0 = 1 + 4 * f;
            prims.push((
                Primitive::Capsule {
                    a: joints[0],
                    b: joints[j0],
                    radius: r,
                },
                PALM_ALBEDO,
            ));
            for s in 0..3 {
                prims.push((
                    Primitive::Capsule {
                        a: joints[j0 + s],
                        b: joints[j0 + s + 1],
                        radius: r,
                    },
                    finger.albedo,
                ));
            }
        }
        // knuckle line and palm surface
        for f in 1..4 {
            prims.push((
                Primitive::Capsule {
                    a: joints[1 + 4 * f],
                    b: joints[5 + 4 * f],
                    radius: r,
                },
                PALM_ALBEDO,
            ));
        }
        let fan = [1, 5, 9, 13, 17];
        for w in fan.windows(2) {
            prims.push((
                Primitive::Triangle {
                    p: [joints[0], joints[w[0]], joints[w[1]]],
                },
                PALM_ALBEDO,
            ));
        }
        Self { prims }
    }

    fn cast(&self, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (prim, albedo) in &self.prims {
            let hit = match prim {
                Primitive::Capsule { a, b, radius } => capsule_hit(dir, *a, *b, *radius),
                Primitive::Triangle { p } => triangle_hit(dir, p),
            };
            if let Some((t, normal)) = hit {
                if best.as_ref().map_or(true, |h| t < h.t) {
                    best = Some(Hit {
                        t,
                        normal,
                        albedo: *albedo,
                    });
                }
            }
        }
        best
    }
}

/// One generated record plus renderer-side ground truth not stored on disk.
#[derive(Clone, Debug)]
pub struct FixtureRecord {
    pub sample: HandSample,
    /// Whether the first surface hit through the keypoint's pixel centre lies
    /// within [`VISIBLE_RADIUS_MM`] of the joint.
    pub visible: Vec<bool>,
}

/// Deterministic per-index generator; record `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct FixtureGenerator {
    pub seed: u64,
    pub image_size: usize,
}

impl FixtureGenerator {
    pub fn new(seed: u64, image_size: usize) -> Self {
        Self { seed, image_size }
    }

    fn pose(rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let size = rng.random_range(0.9..1.1);
        let mut joints = vec![[0.0; 3]; NUM_JOINTS];
        let palm_normal = [0.0, 0.0, -1.0];
        for (f, finger) in FINGERS.iter().enumerate() {
            let thumb = f == 0;
            let spread: f64 = if thumb {
                rng.random_range(-0.35..0.35)
            } else {
                rng.random_range(-0.18..0.18)
            };
            let d0 = unit([finger.dir[0], finger.dir[1], 0.0]);
            let (s, c) = spread.sin_cos();
            let dir = [c * d0[0] - s * d0[1], s * d0[0] + c * d0[1], 0.0];
            let flex: [f64; 3] = if thumb {
                [
                    rng.random_range(0.0..0.9),
                    rng.random_range(0.0..0.8),
                    rng.random_range(0.0..0.8),
                ]
            } else {
                let pip = rng.random_range(0.0..1.6);
                [
                    rng.random_range(-0.15..1.4),
                    pip,
                    (0.66 * pip + rng.random_range(-0.15..0.15)).max(0.0),
                ]
            };
            let j0 = 1 + 4 * f;
            joints[j0] = scale(finger.base, size);
            let mut angle = 0.0;
            for s in 0..3 {
                angle += flex[s];
                let seg_dir = add(scale(dir, angle.cos()), scale(palm_normal, angle.sin()));
                joints[j0 + s + 1] = add(joints[j0 + s], scale(seg_dir, finger.segments[s] * size));
            }
        }
        let rot = mat_mul(
            &rot_z(std::f64::consts::PI + rng.random_range(-1.0..1.0)),
            &mat_mul(
                &rot_y(rng.random_range(-0.7..0.7)),
                &rot_x(rng.random_range(-0.6..0.6)),
            ),
        );
        let depth = rng.random_range(380.0..460.0);
        joints
            .iter()
            .map(|&p| add(mat_vec(&rot, sub(p, [0.0, 50.0, 0.0])), [0.0, 0.0, depth]))
            .collect()
    }

    fn frame(&self, joints: &[Vec3]) -> CameraIntrinsics {
        let size = self.image_size as f64;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in joints {
            let r = HAND_RADIUS_MM / p[2];
            for a in 0..2 {
                lo[a] = lo[a].min(p[a] / p[2] - r);
                hi[a] = hi[a].max(p[a] / p[2] + r);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let f = (0.8 * size / extent).clamp(size, 6.0 * size);
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: size / 2.0 - f * 0.5 * (lo[0] + hi[0]),
            cy: size / 2.0 - f * 0.5 * (lo[1] + hi[1]),
        }
    }

    pub fn record(&self, index: usize) -> FixtureRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let joints = Self::pose(&mut rng);
        let k = self.frame(&joints);
        let scene = Scene::build(&joints);

        let n = self.image_size;
        let z_far = joints.iter().map(|p| p[2]).fold(f64::MIN, f64::max);
        let wall = (z_far + rng.random_range(120.0..200.0)).round();
        let bg_base: f32 = rng.random_range(0.15..0.3);
        let light = unit([
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.8..-0.2),
            -1.0,
        ]);

        let ray = |u: f64, v: f64| -> Vec3 { [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0] };
        let mut rgb = RgbImage::new(n, n);
        let mut depth = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let dir = ray(j as f64 + 0.5, i as f64 + 0.5);
                match scene.cast(dir).filter(|h| h.t < wall) {
                    Some(hit) => {
                        let shade = 0.3 + 0.7 * dot(hit.normal, light).max(0.0) as f32;
                        rgb.set_pixel(j, i, hit.albedo.map(|c| (c * shade).min(1.0)));
                        depth.push(hit.t.round() as f32);
                    }
                    None => {
                        let g = bg_base + 0.1 * i as f32 / n as f32;
                        rgb.set_pixel(j, i, [g * 0.8, g * 0.9, g * 1.1]);
                        depth.push(wall as f32);
                    }
                }
            }
        }

        let keypoints2d: Vec<[f64; 2]> = joints.iter().map(|&p| k.project(p)).collect();
        let visible = keypoints2d
            .iter()
            .zip(&joints)
            .map(|(uv, &p)| {
                let (px, py) = (uv[0].floor(), uv[1].floor());
                if px < 0.0 || py < 0.0 || px >= n as f64 || py >= n as f64 {
                    return false;
                }
                let dir = ray(px + 0.5, py + 0.5);
                scene
                    .cast(dir)
                    .is_some_and(|h| norm(sub(scale(dir, h.t), p)) <= VISIBLE_RADIUS_MM)
            })
            .collect();

        FixtureRecord {
            sample: HandSample {
                source_id: format!("{index:06}"),
                rgb,
                keypoints2d,
                keypoints3d: joints,
                intrinsics: k,
                depth: Some(DepthMap::raw(n, n, depth)),
                hand_side: HandSide::Right,
            },
            visible,
        }
    }
}

/// Writes a `fixture` layout with `count` training records.
pub fn gen_fixtures(count: usize, image_size: usize, seed: u64, out_root: &Path) -> Result<Manifest> {
    gen_fixture_splits(count, 0, image_size, seed, out_root)
}

/// Like [`gen_fixtures`] with `eval_count` additional held-out records,
/// indexed after the training ones.
pub fn gen_fixture_splits(
    count: usize,
    eval_count: usize,
    image_size: usize,
    seed: u64,
    out_root: &Path,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::InvalidArgument("fixture count must be positive".into()));
    }
    if image_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "fixture image size must be at least 8, got {image_size}"
        )));
    }
    let gen = FixtureGenerator::new(seed, image_size);
    let records: Vec<_> = (0..count + eval_count)
        .map(|i| {
            let split = if i < count { Split::Train } else { Split::Eval };
            (gen.record(i).sample, split)
        })
        .collect();
    write_dataset(out_root, Layout::Fixture, &records)
}
