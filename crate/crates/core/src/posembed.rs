//! Position embeddings added to image features on the decoder's key side.
//!
//! Three generators share one pipeline (lift to 3D, normalize by the
//! perception range, sinusoidal encoding, 2-layer MLP) and one output
//! dimension, so the decoder is agnostic to which is active:
//!
//! - object-wise: lifts the object-wise depth encoder's predicted 2D center
//!   and center depth, so every pixel's key carries its object's 3D center;
//! - point-aware: lifts the pixel itself through its predicted surface depth;
//! - ray-aware: lifts the pixel at several fixed candidate depths and
//!   concatenates all their encodings, carrying the whole ray instead of a
//!   depth estimate.

use crate::autodiff::{AutodiffError, LinNodes, LinearParams, NodeId, Tape, Tensor};
use crate::depthnet::DepthConfig;
use crate::geom::{
    camera_to_lidar, pixel_to_camera, CameraParams, LidarPoint, PerceptionRange, PixelPoint,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PosEmbedError {
    #[error("dim_per_axis must be even and positive, got {0}")]
    OddAxisDim(usize),
    #[error("geometry failed: {0}")]
    Geometry(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// 2-layer MLP mapping raw sinusoidal features to the decoder dimension.
#[derive(Debug, Clone)]
pub struct PeMlpParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

impl PeMlpParams {
    pub fn out_dim(&self) -> usize {
        self.l2.out_dim()
    }
}

pub struct PeMlpNodes {
    pub l1: LinNodes,
    pub l2: LinNodes,
}

impl PeMlpNodes {
    pub fn stage(tape: &mut Tape, params: &PeMlpParams) -> Self {
        PeMlpNodes {
            l1: LinNodes::stage(tape, &params.l1),
            l2: LinNodes::stage(tape, &params.l2),
        }
    }
}

/// Frequencies of the sinusoidal encoding: 10000^(-2i/dim_per_axis).
fn frequencies(dim_per_axis: usize) -> Vec<f64> {
    (0..dim_per_axis / 2)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / dim_per_axis as f64))
        .collect()
}

/// Sinusoidal encoding of a normalized 3D point: per axis value x, pairs
/// (sin(2 pi x w_i), cos(2 pi x w_i)) for each frequency, axes concatenated
/// x, y, z. Output length is 3 * dim_per_axis.
pub fn pe3d(norm: [f64; 3], dim_per_axis: usize) -> Result<Vec<f64>, PosEmbedError> {
    if dim_per_axis == 0 || dim_per_axis % 2 != 0 {
        return Err(PosEmbedError::OddAxisDim(dim_per_axis));
    }
    let freqs = frequencies(dim_per_axis);
    let mut out = Vec::with_capacity(3 * dim_per_axis);
    for &x in &norm {
        for &w in &freqs {
            let phase = std::f64::consts::TAU * x * w;
            out.push(phase.sin());
            out.push(phase.cos());
        }
    }
    Ok(out)
}

/// Tape form of [`pe3d`] over `[P,3]` normalized points -> `[P, 3*dpa]`.
pub fn pe3d_node(
    tape: &mut Tape,
    norm01: NodeId,
    dim_per_axis: usize,
) -> Result<NodeId, PosEmbedError> {
    if dim_per_axis == 0 || dim_per_axis % 2 != 0 {
        return Err(PosEmbedError::OddAxisDim(dim_per_axis));
    }
    let freqs = frequencies(dim_per_axis);
    let hp = freqs.len();
    // block-diagonal phase matrix: column a*hp + i responds to axis a only
    let mut fm = vec![0.0; 3 * 3 * hp];
    for a in 0..3 {
        for (i, &w) in freqs.iter().enumerate() {
            fm[a * 3 * hp + a * hp + i] = std::f64::consts::TAU * w;
        }
    }
    let fmat = tape.leaf(Tensor::from_vec(vec![3, 3 * hp], fm)?);
    let phases = tape.matmul(norm01, fmat)?;
    let s = tape.sin(phases);
    let c = tape.cos(phases);
    Ok(tape.interleave_pairs(s, c)?)
}

/// Lift pixel-frame centers-with-depth to normalized lidar coordinates:
/// o' = (x d, y d, d, 1), O = R^-1 K^-1 o', then range-normalize and clamp.
/// `xy` is `[P,2]`, `depth` is `[P,1]`; result is `[P,3]` in [0,1].
pub fn center_geometry_node(
    tape: &mut Tape,
    xy: NodeId,
    depth: NodeId,
    cam: &CameraParams,
    range: &PerceptionRange,
) -> Result<NodeId, PosEmbedError> {
    let p = tape.value(xy).lead();
    let x = tape.slice_cols(xy, 0, 1)?;
    let y = tape.slice_cols(xy, 1, 1)?;
    let xd = tape.mul(x, depth)?;
    let yd = tape.mul(y, depth)?;
    let ones = tape.leaf(Tensor::filled(vec![p, 1], 1.0));
    let a = tape.concat_cols(xd, yd)?;
    let b = tape.concat_cols(depth, ones)?;
    let oprime = tape.concat_cols(a, b)?;

    let m = cam.extrinsic_inv().mul(cam.intrinsic_inv());
    let mnode = tape.leaf(Tensor::from_vec(vec![4, 4], m.row_major().to_vec())?);
    let oh = tape.matmul_nt(oprime, mnode)?;
    let wcol = tape.slice_cols(oh, 3, 1)?;

    let (lo, ext) = (range.min(), range.extent());
    let mut cols = Vec::with_capacity(3);
    for axis in 0..3 {
        let raw = tape.slice_cols(oh, axis, 1)?;
        let v = tape.div(raw, wcol)?;
        let n = tape.affine(v, 1.0 / ext[axis], -lo[axis] / ext[axis]);
        cols.push(n);
    }
    let xy01 = tape.concat_cols(cols[0], cols[1])?;
    let xyz01 = tape.concat_cols(xy01, cols[2])?;
    Ok(tape.clamp01(xyz01))
}

/// Object-wise position embedding rows (tape form): predicted centers `[P,2]`
/// and depths `[P,1]` to `[P, out_dim]` embeddings.
pub fn ope_node(
    tape: &mut Tape,
    center: NodeId,
    depth: NodeId,
    cam: &CameraParams,
    range: &PerceptionRange,
    dim_per_axis: usize,
    mlp: &PeMlpNodes,
) -> Result<NodeId, PosEmbedError> {
    let norm = center_geometry_node(tape, center, depth, cam, range)?;
    let raw = pe3d_node(tape, norm, dim_per_axis)?;
    let h = tape.linear_n(raw, mlp.l1)?;
    let h = tape.relu(h);
    Ok(tape.linear_n(h, mlp.l2)?)
}

/// Point-aware variant: own pixel coordinates lifted through the predicted
/// surface depth (`[P,1]` node).
#[allow(clippy::too_many_arguments)]
pub fn point_pe_node(
    tape: &mut Tape,
    surface_depth: NodeId,
    cam: &CameraParams,
    range: &PerceptionRange,
    height: usize,
    width: usize,
    dim_per_axis: usize,
    mlp: &PeMlpNodes,
) -> Result<NodeId, PosEmbedError> {
    let own = own_pixel_coords(height, width);
    let xy = tape.leaf(Tensor::from_vec(vec![height * width, 2], own)?);
    ope_node(tape, xy, surface_depth, cam, range, dim_per_axis, mlp)
}

/// Uniformly spaced candidate depths in [d_min, d_max]; a single candidate
/// degenerates to the midpoint.
pub fn ray_depths(cfg: &DepthConfig, candidates: usize) -> Vec<f64> {
    if candidates == 1 {
        return vec![cfg.midpoint()];
    }
    let step = (cfg.d_max - cfg.d_min) / (candidates - 1) as f64;
    (0..candidates).map(|i| cfg.d_min + i as f64 * step).collect()
}

/// Ray-aware variant: every pixel lifted at each candidate depth, all
/// candidate encodings concatenated before the MLP. The raw encoding is a
/// constant per view, so it is computed off-tape.
#[allow(clippy::too_many_arguments)]
pub fn ray_pe_node(
    tape: &mut Tape,
    cam: &CameraParams,
    range: &PerceptionRange,
    depth_cfg: &DepthConfig,
    candidates: usize,
    height: usize,
    width: usize,
    dim_per_axis: usize,
    mlp: &PeMlpNodes,
) -> Result<NodeId, PosEmbedError> {
    let raw = ray_raw_features(cam, range, depth_cfg, candidates, height, width, dim_per_axis)?;
    let raw = tape.leaf(raw);
    let h = tape.linear_n(raw, mlp.l1)?;
    let h = tape.relu(h);
    Ok(tape.linear_n(h, mlp.l2)?)
}

/// The constant `[H*W, candidates * 3 * dpa]` raw encoding of the frustum.
pub fn ray_raw_features(
    cam: &CameraParams,
    range: &PerceptionRange,
    depth_cfg: &DepthConfig,
    candidates: usize,
    height: usize,
    width: usize,
    dim_per_axis: usize,
) -> Result<Tensor, PosEmbedError> {
    let depths = ray_depths(depth_cfg, candidates.max(1));
    let mut data = Vec::with_capacity(height * width * depths.len() * 3 * dim_per_axis);
    for m in 0..height {
        for n in 0..width {
            let (u, v) = (n as f64 + 0.5, m as f64 + 0.5);
            for &d in &depths {
                let o = lift_center(u, v, d, cam)?;
                let norm = crate::geom::normalize_center(o, range);
                data.extend(pe3d(norm, dim_per_axis)?);
            }
        }
    }
    Ok(Tensor::from_vec(
        vec![height * width, depths.len() * 3 * dim_per_axis],
        data,
    )?)
}

fn own_pixel_coords(height: usize, width: usize) -> Vec<f64> {
    let mut own = Vec::with_capacity(height * width * 2);
    for m in 0..height {
        for n in 0..width {
            own.push(n as f64 + 0.5);
            own.push(m as f64 + 0.5);
        }
    }
    own
}

/// The geometry of the object-wise embedding at value level: pixel-frame
/// center plus depth to the lidar-frame 3D center.
pub fn lift_center(
    x: f64,
    y: f64,
    depth: f64,
    cam: &CameraParams,
) -> Result<LidarPoint, PosEmbedError> {
    let p = pixel_to_camera(PixelPoint::with_depth(x, y, depth), cam)?;
    Ok(camera_to_lidar(p, cam))
}

fn mlp_apply(tape: &mut Tape, raw: Tensor, mlp: &PeMlpParams) -> Result<Vec<f64>, PosEmbedError> {
    let nodes = PeMlpNodes::stage(tape, mlp);
    let r = tape.leaf(raw);
    let h = tape.linear_n(r, nodes.l1)?;
    let h = tape.relu(h);
    let out = tape.linear_n(h, nodes.l2)?;
    Ok(tape.value(out).data().to_vec())
}

/// Value-level object-wise position embedding for one predicted center.
pub fn ope(
    center: [f64; 2],
    depth: f64,
    cam: &CameraParams,
    range: &PerceptionRange,
    dim_per_axis: usize,
    mlp: &PeMlpParams,
) -> Result<Vec<f64>, PosEmbedError> {
    let o = lift_center(center[0], center[1], depth, cam)?;
    let norm = crate::geom::normalize_center(o, range);
    let raw = pe3d(norm, dim_per_axis)?;
    let mut tape = Tape::new();
    let raw = Tensor::from_vec(vec![1, raw.len()], raw)?;
    mlp_apply(&mut tape, raw, mlp)
}

/// Value-level point-aware embedding for one pixel with its surface depth.
pub fn point_pe(
    pixel: [f64; 2],
    surface_depth: f64,
    cam: &CameraParams,
    range: &PerceptionRange,
    dim_per_axis: usize,
    mlp: &PeMlpParams,
) -> Result<Vec<f64>, PosEmbedError> {
    ope(pixel, surface_depth, cam, range, dim_per_axis, mlp)
}

/// Value-level ray-aware embedding for one pixel.
#[allow(clippy::too_many_arguments)]
pub fn ray_pe(
    pixel: [f64; 2],
    cam: &CameraParams,
    range: &PerceptionRange,
    depth_cfg: &DepthConfig,
    candidates: usize,
    dim_per_axis: usize,
    mlp: &PeMlpParams,
) -> Result<Vec<f64>, PosEmbedError> {
    let depths = ray_depths(depth_cfg, candidates.max(1));
    let mut raw = Vec::with_capacity(depths.len() * 3 * dim_per_axis);
    for &d in &depths {
        let o = lift_center(pixel[0], pixel[1], d, cam)?;
        let norm = crate::geom::normalize_center(o, range);
        raw.extend(pe3d(norm, dim_per_axis)?);
    }
    let mut tape = Tape::new();
    let raw = Tensor::from_vec(vec![1, raw.len()], raw)?;
    mlp_apply(&mut tape, raw, mlp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::linear_forward;
    use crate::geom::Mat4;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn identity_cam() -> CameraParams {
        CameraParams::new(Mat4::identity(), Mat4::identity()).unwrap()
    }

    fn rand_mlp(rng: &mut ChaCha12Rng, raw: usize, dim: usize) -> PeMlpParams {
        let mk = |rng: &mut ChaCha12Rng, i: usize, o: usize| LinearParams {
            w: Tensor::from_vec(vec![i, o], (0..i * o).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .unwrap(),
            b: Tensor::from_vec(vec![o], (0..o).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .unwrap(),
        };
        PeMlpParams {
            l1: mk(rng, raw, 4 * dim),
            l2: mk(rng, 4 * dim, dim),
        }
    }

    #[test]
    fn pe3d_zero_phase() {
        let v = pe3d([0.0, 0.0, 0.0], 6).unwrap();
        assert_eq!(v.len(), 18);
        for pair in v.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn pe3d_half_period_first_pair() {
        let v = pe3d([0.5, 0.0, 0.0], 4).unwrap();
        // first pair of the x axis: sin(pi) ~ 0, cos(pi) = -1
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pe3d_quarter_by_hand() {
        let v = pe3d([0.25, 0.0, 0.0], 4).unwrap();
        let w1 = 10000f64.powf(-0.5);
        let expect = [
            (std::f64::consts::TAU * 0.25).sin(),
            (std::f64::consts::TAU * 0.25).cos(),
            (std::f64::consts::TAU * 0.25 * w1).sin(),
            (std::f64::consts::TAU * 0.25 * w1).cos(),
        ];
        for (g, e) in v[..4].iter().zip(expect) {
            assert!((g - e).abs() < 1e-15);
        }
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
    }

    #[test]
    fn pe3d_odd_dim_rejected() {
        assert!(matches!(pe3d([0.1; 3], 3), Err(PosEmbedError::OddAxisDim(3))));
        assert!(matches!(pe3d([0.1; 3], 0), Err(PosEmbedError::OddAxisDim(0))));
    }

    #[test]
    fn pe3d_node_matches_value_path() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let pts: Vec<[f64; 3]> = (0..16)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let mut tape = Tape::new();
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let n = tape.leaf(Tensor::from_vec(vec![16, 3], flat).unwrap());
        let raw = pe3d_node(&mut tape, n, 8).unwrap();
        let got = tape.value(raw);
        for (i, p) in pts.iter().enumerate() {
            let expect = pe3d(*p, 8).unwrap();
            for (j, e) in expect.iter().enumerate() {
                assert!((got.data()[i * 24 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pe3d_injective_on_lattice() {
        // per-axis exhaustive scan: since axes are encoded independently and
        // concatenated, per-axis injectivity implies injectivity on the
        // 3D lattice in the max norm.
        let n = 64;
        let enc: Vec<Vec<f64>> = (0..=n)
            .map(|i| pe3d([i as f64 / n as f64, 0.0, 0.0], 8).unwrap()[..8].to_vec())
            .collect();
        let mut min_gap = f64::INFINITY;
        for i in 0..enc.len() {
            for j in i + 1..enc.len() {
                let gap = enc[i]
                    .iter()
                    .zip(&enc[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                min_gap = min_gap.min(gap);
            }
        }
        assert!(min_gap > 1e-6, "lattice encodings collide: gap {min_gap}");
    }

    #[test]
    fn ope_geometry_identity_cameras() {
        // identity K and R, center (2,3), depth 4 -> O = (8,12,4)
        let cam = identity_cam();
        let o = lift_center(2.0, 3.0, 4.0, &cam).unwrap();
        assert!((o.x - 8.0).abs() < 1e-12);
        assert!((o.y - 12.0).abs() < 1e-12);
        assert!((o.z - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ope_is_pure() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let cam = identity_cam();
        let range = PerceptionRange::default();
        let mlp = rand_mlp(&mut rng, 24, 6);
        let a = ope([2.0, 3.0], 4.0, &cam, &range, 8, &mlp).unwrap();
        let b = ope([2.0, 3.0], 4.0, &cam, &range, 8, &mlp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ope_matches_composition_oracle() {
        // compose geom ops + pe3d + linear_forward independently
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let intr = CameraParams::intrinsic_matrix(8.0, 24.0, 8.0, 8.0);
        let extr = Mat4::rotation_z(0.7);
        let cam = CameraParams::new(intr, extr).unwrap();
        let range = PerceptionRange::default();
        let mlp = rand_mlp(&mut rng, 24, 6);
        let got = ope([5.0, 9.0], 17.0, &cam, &range, 8, &mlp).unwrap();

        let p = pixel_to_camera(PixelPoint::with_depth(5.0, 9.0, 17.0), &cam).unwrap();
        let o = camera_to_lidar(p, &cam);
        let norm = crate::geom::normalize_center(o, &range);
        let raw = pe3d(norm, 8).unwrap();
        let x = Tensor::from_vec(vec![1, 24], raw).unwrap();
        let h = linear_forward(&x, &mlp.l1).unwrap().map(|v| v.max(0.0));
        let e = linear_forward(&h, &mlp.l2).unwrap();
        for (g, o) in got.iter().zip(e.data()) {
            assert!((g - o).abs() < 1e-12);
        }
    }

    #[test]
    fn ope_node_matches_value_path() {
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        let intr = CameraParams::intrinsic_matrix(8.0, 24.0, 8.0, 8.0);
        let cam = CameraParams::new(intr, Mat4::rotation_z(-0.4)).unwrap();
        let range = PerceptionRange::default();
        let mlp = rand_mlp(&mut rng, 24, 6);
        let centers = [[3.0, 4.0], [7.5, 2.25]];
        let depths = [11.0, 29.0];

        let mut tape = Tape::new();
        let nodes = PeMlpNodes::stage(&mut tape, &mlp);
        let c = tape
            .leaf(Tensor::from_vec(vec![2, 2], centers.concat()).unwrap());
        let d = tape.leaf(Tensor::from_vec(vec![2, 1], depths.to_vec()).unwrap());
        let out = ope_node(&mut tape, c, d, &cam, &range, 8, &nodes).unwrap();
        for (i, (center, depth)) in centers.iter().zip(depths).enumerate() {
            let expect = ope(*center, depth, &cam, &range, 8, &mlp).unwrap();
            for (j, e) in expect.iter().enumerate() {
                let g = tape.value(out).data()[i * 6 + j];
                assert!((g - e).abs() < 1e-12, "row {i} dim {j}");
            }
        }
    }

    #[test]
    fn point_pe_equals_ope_on_coinciding_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(36);
        let cam = identity_cam();
        let range = PerceptionRange::default();
        let mlp = rand_mlp(&mut rng, 24, 6);
        let a = point_pe([4.5, 2.5], 12.0, &cam, &range, 8, &mlp).unwrap();
        let b = ope([4.5, 2.5], 12.0, &cam, &range, 8, &mlp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_pe_differs_before_mlp_when_depth_differs() {
        // distinct lifted points -> distinct raw encodings (injectivity at
        // the geometry stage)
        let cam = identity_cam();
        let range = PerceptionRange::default();
        let a = lift_center(4.5, 2.5, 10.0, &cam).unwrap();
        let b = lift_center(4.5, 2.5, 12.0, &cam).unwrap();
        let ra = pe3d(crate::geom::normalize_center(a, &range), 8).unwrap();
        let rb = pe3d(crate::geom::normalize_center(b, &range), 8).unwrap();
        let gap = ra
            .iter()
            .zip(&rb)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-6);
    }

    #[test]
    fn ray_single_candidate_degenerates_to_midpoint() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let cam = identity_cam();
        let range = PerceptionRange::default();
        let cfg = DepthConfig::new(2.0, 10.0, 4).unwrap();
        let mlp = rand_mlp(&mut rng, 24, 6);
        let a = ray_pe([3.0, 1.0], &cam, &range, &cfg, 1, 8, &mlp).unwrap();
        let b = ope([3.0, 1.0], cfg.midpoint(), &cam, &range, 8, &mlp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ray_candidates_are_collinear() {
        let cam = identity_cam();
        let cfg = DepthConfig::new(1.0, 61.0, 4).unwrap();
        let pts: Vec<LidarPoint> = ray_depths(&cfg, 6)
            .iter()
            .map(|&d| lift_center(2.0, 5.0, d, &cam).unwrap())
            .collect();
        for w in pts.windows(3) {
            let u = [w[1].x - w[0].x, w[1].y - w[0].y, w[1].z - w[0].z];
            let v = [w[2].x - w[1].x, w[2].y - w[1].y, w[2].z - w[1].z];
            let cross = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            for c in cross {
                assert!(c.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ray_depths_hand_spaced() {
        let cfg = DepthConfig::new(1.0, 7.0, 4).unwrap();
        assert_eq!(ray_depths(&cfg, 4), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(ray_depths(&cfg, 1), vec![4.0]);
    }

    #[test]
    fn all_variants_share_output_dimension() {
        let mut rng = ChaCha12Rng::seed_from_u64(38);
        let cam = identity_cam();
        let range = PerceptionRange::default();
        let cfg = DepthConfig::new(1.0, 10.0, 4).unwrap();
        let dim = 6;
        let mlp_pt = rand_mlp(&mut rng, 24, dim);
        let mlp_ray = rand_mlp(&mut rng, 24 * 4, dim);
        let o = ope([1.0, 1.0], 5.0, &cam, &range, 8, &mlp_pt).unwrap();
        let p = point_pe([1.0, 1.0], 5.0, &cam, &range, 8, &mlp_pt).unwrap();
        let r = ray_pe([1.0, 1.0], &cam, &range, &cfg, 4, 8, &mlp_ray).unwrap();
        assert_eq!(o.len(), dim);
        assert_eq!(p.len(), dim);
        assert_eq!(r.len(), dim);
    }
}
