//! Deterministic synthetic multi-view scenes.
//!
//! Each scene holds two timesteps of yaw-oriented 3D boxes observed by a ring
//! of pinhole cameras riding a moving ego. The renderer ray-casts every pixel
//! against the boxes and emits two kinds of depth supervision per pixel: the
//! first ray-surface intersection depth (what a lidar would return) and the
//! camera-frame depth of the hit box's 3D center (what box annotations give).
//! On front-face pixels the surface target is strictly closer than the center
//! target, which is the asymmetry the object-wise depth encoder exploits.

use crate::autodiff::Tensor;
use crate::geom::{lidar_to_pixel, CameraParams, LidarPoint, Mat4, PerceptionRange};
use crate::threads;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const DATASET_MAGIC: &[u8; 8] = b"OPENSCN1";
const DATASET_VERSION: u32 = 1;
/// Fixed basis seed: the feature synthesis map is a dataset-wide constant,
/// never a per-scene draw, so models can learn it across scenes.
const FEATURE_BASIS_SEED: u64 = 0x0BA5_E0BA_5E;
/// Values per serialized box record (center 3, size 3, yaw, velocity 2,
/// two reserved slots kept zero).
const BOX_F64S: usize = 11;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset 0: expected OPENSCN1")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("truncated dataset at byte offset {0}")]
    Truncated(u64),
    #[error("invalid camera in dataset: {0}")]
    BadCamera(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Geometry and rendering parameters of the synthetic rig.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_views: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub boxes_min: usize,
    pub boxes_max: usize,
    pub classes: usize,
    pub noise: f64,
    /// Ego displacement along +x between the two timesteps, meters.
    pub ego_step: f64,
    /// Time between the two timesteps, seconds.
    pub dt: f64,
    /// Radial band the box centers are sampled from, meters.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Depth normalization constant used by the feature synthesizer; should
    /// match the depth head's d_max.
    pub d_max: f64,
    pub range: PerceptionRange,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_views: 4,
            channels: 12,
            height: 16,
            width: 16,
            boxes_min: 2,
            boxes_max: 6,
            classes: 3,
            noise: 0.25,
            ego_step: 1.5,
            dt: 0.5,
            radius_min: 6.0,
            radius_max: 48.0,
            d_max: 72.0,
            range: PerceptionRange::default(),
        }
    }
}

/// One annotated 3D box. `yaw` rotates the box's length axis about world +z.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
    pub velocity: [f64; 2],
}

impl GroundTruthBox {
    pub fn half_diagonal(&self) -> f64 {
        0.5 * (self.size[0] * self.size[0]
            + self.size[1] * self.size[1]
            + self.size[2] * self.size[2])
            .sqrt()
    }

    fn advanced(&self, dt: f64) -> GroundTruthBox {
        let mut b = self.clone();
        b.center[0] += self.velocity[0] * dt;
        b.center[1] += self.velocity[1] * dt;
        b
    }

    /// Hit parameter of a ray against this box (slab test in the box frame),
    /// or None. When `dir` has unit z in some camera frame, `t` is that
    /// camera's depth at the hit point.
    pub fn ray_hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let (ob, db) = self.to_box_frame(origin, dir);
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for a in 0..3 {
            if db[a].abs() < 1e-12 {
                if ob[a].abs() > half[a] {
                    return None;
                }
                continue;
            }
            let mut t0 = (-half[a] - ob[a]) / db[a];
            let mut t1 = (half[a] - ob[a]) / db[a];
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        (t_near > 1e-9).then_some(t_near)
    }

    fn to_box_frame(&self, origin: [f64; 3], dir: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let (s, c) = self.yaw.sin_cos();
        let rel = [
            origin[0] - self.center[0],
            origin[1] - self.center[1],
            origin[2] - self.center[2],
        ];
        let rot = |v: [f64; 3]| [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]];
        (rot(rel), rot(dir))
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let (q, _) = self.to_box_frame(p, [0.0; 3]);
        q[0].abs() < self.size[0] / 2.0 - margin
            && q[1].abs() < self.size[1] / 2.0 - margin
            && q[2].abs() < self.size[2] / 2.0 - margin
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (s, c) = self.yaw.sin_cos();
        let half = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            let local = [sx * half[0], sy * half[1], sz * half[2]];
            *corner = [
                self.center[0] + c * local[0] - s * local[1],
                self.center[1] + s * local[0] + c * local[1],
                self.center[2] + local[2],
            ];
        }
        out
    }
}

/// A two-timestep multi-view scene. Index 0 is the earlier frame.
#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    pub boxes: [Vec<GroundTruthBox>; 2],
    pub cameras: [Vec<CameraParams>; 2],
}

/// Per-view supervision produced by the renderer. All per-pixel buffers are
/// row-major `H*W`.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub features: Tensor,
    pub surf_depth: Vec<f64>,
    pub surf_valid: Vec<bool>,
    pub center_depth: Vec<f64>,
    pub center_px: Vec<[f64; 2]>,
    /// 0 = unassigned, otherwise box index + 1.
    pub assign: Vec<u8>,
    pub front_face: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub scene: Scene,
    pub rendered: [Vec<RenderedView>; 2],
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SceneConfig,
    pub records: Vec<SceneRecord>,
}

/// splitmix64 — derives per-scene and per-view rng streams so parallel
/// generation order can never change the output.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_scene_seed(dataset_seed: u64, scene_index: u64) -> u64 {
    mix64(dataset_seed ^ mix64(scene_index.wrapping_add(1)))
}

fn class_size(class_id: u32, jitter: f64) -> [f64; 3] {
    let base = match class_id % 3 {
        0 => [4.5, 2.0, 1.8],
        1 => [8.0, 2.6, 3.2],
        _ => [3.0, 3.0, 2.5],
    };
    [base[0] * jitter, base[1] * jitter, base[2] * jitter]
}

fn camera_rig(cfg: &SceneConfig, ego_x: f64) -> Vec<CameraParams> {
    // 90 degree horizontal field of view so n_views = 4 tiles the full ring;
    // the vertical field is much narrower (like automotive cameras), which
    // keeps distant boxes taller than a pixel row.
    let fx = cfg.width as f64 / 2.0;
    let fy = cfg.height as f64 * 1.5;
    let intr =
        CameraParams::intrinsic_matrix(fx, fy, cfg.width as f64 / 2.0, cfg.height as f64 / 2.0);
    (0..cfg.n_views)
        .map(|i| {
            let yaw = i as f64 * std::f64::consts::TAU / cfg.n_views as f64;
            let (s, c) = yaw.sin_cos();
            let pos = [ego_x, 0.0, 1.6];
            // camera axes in world coordinates: x right, y down, z forward
            let right = [s, -c, 0.0];
            let down = [0.0, 0.0, -1.0];
            let forward = [c, s, 0.0];
            let mut e = Mat4::identity();
            for (r, axis) in [right, down, forward].iter().enumerate() {
                for k in 0..3 {
                    e.set(r, k, axis[k]);
                }
                let t: f64 = (0..3).map(|k| -axis[k] * pos[k]).sum();
                e.set(r, 3, t);
            }
            CameraParams::new(intr, e).expect("rig extrinsic is rigid")
        })
        .collect()
}

/// Sample a scene: boxes uniform over the radial band with overlap rejection,
/// the second timestep advanced by per-box velocity and the configured ego
/// motion. Deterministic in (config, seed).
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    if cfg.boxes_min < 1 || cfg.boxes_max < cfg.boxes_min {
        return Err(SceneError::Config(format!(
            "box count range {}..={} must start at 1",
            cfg.boxes_min, cfg.boxes_max
        )));
    }
    if cfg.classes == 0 || cfg.classes > 3 {
        return Err(SceneError::Config("classes must be 1..=3".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix64(seed));
    let n_boxes = rng.gen_range(cfg.boxes_min..=cfg.boxes_max);
    let mut current: Vec<GroundTruthBox> = Vec::with_capacity(n_boxes);

    for _ in 0..n_boxes {
        let mut placed = false;
        for _attempt in 0..1000 {
            let class_id = rng.gen_range(0..cfg.classes) as u32;
            let size = class_size(class_id, rng.gen_range(0.85..1.15));
            let r = rng
                .gen_range(cfg.radius_min * cfg.radius_min..cfg.radius_max * cfg.radius_max)
                .sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            let velocity = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let cand = GroundTruthBox {
                center: [
                    r * theta.cos(),
                    r * theta.sin(),
                    size[2] / 2.0 + rng.gen_range(0.0..0.4),
                ],
                size,
                yaw,
                class_id,
                velocity,
            };
            let prev = cand.advanced(-cfg.dt);
            let in_range = cfg.range.contains(LidarPoint::new(
                cand.center[0],
                cand.center[1],
                cand.center[2],
            )) && cfg.range.contains(LidarPoint::new(
                prev.center[0],
                prev.center[1],
                prev.center[2],
            ));
            let clear = current.iter().all(|b| {
                dist3(b.center, cand.center) > b.half_diagonal() + cand.half_diagonal()
            });
            if in_range && clear {
                current.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::Generation(
                "overlap rejection budget exhausted".into(),
            ));
        }
    }

    let previous: Vec<GroundTruthBox> = current.iter().map(|b| b.advanced(-cfg.dt)).collect();
    let cams_prev = camera_rig(cfg, -cfg.ego_step);
    let cams_now = camera_rig(cfg, 0.0);
    Ok(Scene {
        seed,
        boxes: [previous, current],
        cameras: [cams_prev, cams_now],
    })
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// The fixed projection taking the 12 hit descriptors to feature channels.
fn feature_basis(channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha12Rng::seed_from_u64(FEATURE_BASIS_SEED);
    let basis: Vec<f64> = (0..channels * 12)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    let phase: Vec<f64> = (0..channels)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    (basis, phase)
}

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; the second draw is discarded for simplicity.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Ray-cast one timestep of a scene into per-view feature grids and depth
/// supervision.
pub fn render_views(scene: &Scene, timestep: usize, cfg: &SceneConfig) -> Vec<RenderedView> {
    let boxes = &scene.boxes[timestep];
    let cams = &scene.cameras[timestep];
    let (basis, phase) = feature_basis(cfg.channels);
    let hw = cfg.height * cfg.width;

    cams.iter()
        .enumerate()
        .map(|(view_idx, cam)| {
            let mut rng = ChaCha12Rng::seed_from_u64(mix64(
                scene.seed ^ mix64(timestep as u64 * 31 + view_idx as u64 + 1),
            ));
            let origin = cam.position().to_array();
            let [fx, fy, cx, cy] = cam.focal_center();
            let cam_yaw = {
                // forward axis in world coordinates is row 2 of the rotation
                let e = cam.extrinsic();
                e.at(2, 1).atan2(e.at(2, 0))
            };
            let mut features = vec![0.0; cfg.channels * hw];
            let mut surf_depth = vec![0.0; hw];
            let mut surf_valid = vec![false; hw];
            let mut center_depth = vec![0.0; hw];
            let mut center_px = vec![[0.0; 2]; hw];
            let mut assign = vec![0u8; hw];
            let mut front_face = vec![false; hw];

            for m in 0..cfg.height {
                for n in 0..cfg.width {
                    let p = m * cfg.width + n;
                    let u = n as f64 + 0.5;
                    let v = m as f64 + 0.5;
                    let dir_cam = [(u - cx) / fx, (v - cy) / fy, 1.0];
                    let dw = {
                        let e = cam.extrinsic_inv();
                        let d = e.mul_vec([dir_cam[0], dir_cam[1], dir_cam[2], 0.0]);
                        [d[0], d[1], d[2]]
                    };

                    // nearest surface hit over all boxes
                    let mut first: Option<(usize, f64)> = None;
                    for (bi, b) in boxes.iter().enumerate() {
                        if let Some(t) = b.ray_hit(origin, dw) {
                            if first.map_or(true, |(_, bt)| t < bt) {
                                first = Some((bi, t));
                            }
                        }
                    }

                    // object assignment: among hit boxes the nearest center wins
                    let mut assigned: Option<(usize, f64, f64, f64)> = None;
                    for (bi, b) in boxes.iter().enumerate() {
                        if b.ray_hit(origin, dw).is_none() {
                            continue;
                        }
                        let c = LidarPoint::new(b.center[0], b.center[1], b.center[2]);
                        let Ok(px) = lidar_to_pixel(c, cam) else {
                            continue;
                        };
                        let d = px.depth.expect("projection carries depth");
                        if assigned.map_or(true, |(_, _, _, dz)| d < dz) {
                            assigned = Some((bi, px.u, px.v, d));
                        }
                    }

                    let mut desc = [0.0f64; 12];
                    if let Some((bi, t)) = first {
                        let b = &boxes[bi];
                        if t <= cfg.d_max {
                            surf_depth[p] = t;
                            surf_valid[p] = true;
                        }
                        let hit = [
                            origin[0] + dw[0] * t,
                            origin[1] + dw[1] * t,
                            origin[2] + dw[2] * t,
                        ];
                        let (off, _) = b.to_box_frame(hit, [0.0; 3]);
                        let rel_yaw = b.yaw - cam_yaw;
                        desc = [
                            (2.1 * (b.class_id as f64 + 1.0)).sin(),
                            (2.1 * (b.class_id as f64 + 1.0)).cos(),
                            2.0 * off[0] / b.size[0],
                            2.0 * off[1] / b.size[1],
                            2.0 * off[2] / b.size[2],
                            b.size[0] / 10.0,
                            b.size[1] / 10.0,
                            b.size[2] / 10.0,
                            rel_yaw.sin(),
                            rel_yaw.cos(),
                            t / cfg.d_max,
                            1.0 / t.max(1.0),
                        ];
                    }

                    if let Some((bi, cu, cv, cd)) = assigned {
                        if cd <= cfg.d_max {
                            assign[p] = bi as u8 + 1;
                            center_depth[p] = cd;
                            center_px[p] = [cu, cv];
                            // front-face: the ray passes strictly inside the
                            // assigned box at the center's depth plane, and
                            // that box is also the first surface hit.
                            if first.map(|(fb, _)| fb) == Some(bi) {
                                let at_center = [
                                    origin[0] + dw[0] * cd,
                                    origin[1] + dw[1] * cd,
                                    origin[2] + dw[2] * cd,
                                ];
                                front_face[p] = boxes[bi].contains(at_center, 1e-9);
                            }
                        }
                    }

                    for ch in 0..cfg.channels {
                        let mut acc = phase[ch];
                        for (k, dv) in desc.iter().enumerate() {
                            acc += basis[ch * 12 + k] * dv;
                        }
                        features[ch * hw + p] = acc.sin() + cfg.noise * gauss(&mut rng);
                    }
                }
            }

            RenderedView {
                features: Tensor::from_vec(vec![cfg.channels, cfg.height, cfg.width], features)
                    .expect("feature shape"),
                surf_depth,
                surf_valid,
                center_depth,
                center_px,
                assign,
                front_face,
            }
        })
        .collect()
}

/// Generate and render `count` scenes, parallel across scenes with per-scene
/// derived rng streams.
pub fn generate_dataset(cfg: &SceneConfig, seed: u64, count: usize) -> Result<Dataset, SceneError> {
    let records: Result<Vec<SceneRecord>, SceneError> = threads::pool().install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let scene = generate_scene(cfg, derive_scene_seed(seed, i as u64))?;
                let rendered = [render_views(&scene, 0, cfg), render_views(&scene, 1, cfg)];
                Ok(SceneRecord { scene, rendered })
            })
            .collect()
    });
    Ok(Dataset {
        config: cfg.clone(),
        records: records?,
    })
}

// ---------------------------------------------------------------------------
// dataset file format
// ---------------------------------------------------------------------------

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), SceneError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(SceneError::Truncated(self.offset))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self) -> Result<u32, SceneError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, SceneError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64, SceneError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SceneError> {
        let mut bytes = vec![0u8; n * 8];
        self.exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, SceneError> {
        let mut b = vec![0u8; n];
        self.exact(&mut b)?;
        Ok(b)
    }
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), SceneError> {
    let cfg = &ds.config;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.records.len() as u32).to_le_bytes())?;
    for v in [cfg.n_views, cfg.channels, cfg.height, cfg.width] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for v in cfg.range.min().iter().chain(cfg.range.max().iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    for rec in &ds.records {
        w.write_all(&rec.scene.seed.to_le_bytes())?;
        for t in 0..2 {
            for cam in &rec.scene.cameras[t] {
                for v in cam.intrinsic().row_major() {
                    w.write_all(&v.to_le_bytes())?;
                }
                for v in cam.extrinsic().row_major() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.write_all(&(rec.scene.boxes[t].len() as u32).to_le_bytes())?;
            for b in &rec.scene.boxes[t] {
                let vals = [
                    b.center[0],
                    b.center[1],
                    b.center[2],
                    b.size[0],
                    b.size[1],
                    b.size[2],
                    b.yaw,
                    b.velocity[0],
                    b.velocity[1],
                    0.0,
                    0.0,
                ];
                for v in vals {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&b.class_id.to_le_bytes())?;
            }
            for view in &rec.rendered[t] {
                for v in view.features.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
                for v in &view.surf_depth {
                    w.write_all(&v.to_le_bytes())?;
                }
                let mask: Vec<u8> = view.surf_valid.iter().map(|&b| b as u8).collect();
                w.write_all(&mask)?;
                for v in &view.center_depth {
                    w.write_all(&v.to_le_bytes())?;
                }
                for v in &view.center_px {
                    w.write_all(&v[0].to_le_bytes())?;
                    w.write_all(&v[1].to_le_bytes())?;
                }
                w.write_all(&view.assign)?;
                let ff: Vec<u8> = view.front_face.iter().map(|&b| b as u8).collect();
                w.write_all(&ff)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, SceneError> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(SceneError::BadMagic);
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(SceneError::BadVersion(version));
    }
    let scene_count = r.u32()? as usize;
    let n_views = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let lo = [r.f64()?, r.f64()?, r.f64()?];
    let hi = [r.f64()?, r.f64()?, r.f64()?];
    let range =
        PerceptionRange::new(lo, hi).map_err(|e| SceneError::BadCamera(format!("range: {e}")))?;
    let cfg = SceneConfig {
        n_views,
        channels,
        height,
        width,
        range,
        ..SceneConfig::default()
    };
    let hw = height * width;

    let mut records = Vec::with_capacity(scene_count);
    for _ in 0..scene_count {
        let seed = r.u64()?;
        let mut boxes: [Vec<GroundTruthBox>; 2] = [Vec::new(), Vec::new()];
        let mut cameras: [Vec<CameraParams>; 2] = [Vec::new(), Vec::new()];
        let mut rendered: [Vec<RenderedView>; 2] = [Vec::new(), Vec::new()];
        for t in 0..2 {
            for _ in 0..n_views {
                let intr = Mat4(r.f64s(16)?.try_into().unwrap());
                let extr = Mat4(r.f64s(16)?.try_into().unwrap());
                let cam = CameraParams::new(intr, extr)
                    .map_err(|e| SceneError::BadCamera(e.to_string()))?;
                cameras[t].push(cam);
            }
            let n_boxes = r.u32()? as usize;
            for _ in 0..n_boxes {
                let v = r.f64s(BOX_F64S)?;
                let class_id = r.u32()?;
                boxes[t].push(GroundTruthBox {
                    center: [v[0], v[1], v[2]],
                    size: [v[3], v[4], v[5]],
                    yaw: v[6],
                    velocity: [v[7], v[8]],
                    class_id,
                });
            }
            for _ in 0..n_views {
                let features =
                    Tensor::from_vec(vec![channels, height, width], r.f64s(channels * hw)?)
                        .expect("feature shape");
                let surf_depth = r.f64s(hw)?;
                let surf_valid = r.bytes(hw)?.into_iter().map(|b| b != 0).collect();
                let center_depth = r.f64s(hw)?;
                let raw_px = r.f64s(2 * hw)?;
                let center_px = raw_px.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
                let assign = r.bytes(hw)?;
                let front_face = r.bytes(hw)?.into_iter().map(|b| b != 0).collect();
                rendered[t].push(RenderedView {
                    features,
                    surf_depth,
                    surf_valid,
                    center_depth,
                    center_px,
                    assign,
                    front_face,
                });
            }
        }
        records.push(SceneRecord {
            scene: Scene {
                seed,
                boxes,
                cameras,
            },
            rendered,
        });
    }
    Ok(Dataset {
        config: cfg,
        records,
    })
}
