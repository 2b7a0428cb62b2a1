//! The two depth encoders.
//!
//! The pixel-wise encoder predicts a surface depth map per view by fusing a
//! sigmoid regression branch with the expectation of a softmax over uniform
//! depth bins, after modulating features with an embedding of the camera
//! intrinsics. The object-wise encoder lifts every pixel to 3D through the
//! predicted surface depth, gathers k offset samples from the current and
//! previous frames (projected through each frame's own extrinsics, so ego
//! motion is pure geometry), combines them with a per-pixel attention simplex,
//! and regresses the object center depth plus a 2D center offset.
//!
//! Every stage exists twice: a tape builder used by the trainable model, and
//! a value-level wrapper with the module's public contract used by tests and
//! oracles. The wrappers drive the same builders, so the two cannot diverge.

use crate::autodiff::{AutodiffError, LinNodes, LinearParams, NodeId, Tape, Tensor};
use crate::geom::{pixel_to_camera, CameraParams, CamPoint, PixelPoint};
use thiserror::Error;

/// Sample coordinate used for projections that fall behind a camera; far
/// enough outside any grid that bilinear sampling returns exact zeros.
const OFF_GRID: f64 = -1e4;
/// Minimum camera-frame depth for a sample projection to count as visible.
const MIN_SAMPLE_DEPTH: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum DepthNetError {
    #[error("invalid depth config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Depth range and discretization of the pixel-wise head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub n_bins: usize,
}

impl DepthConfig {
    pub fn new(d_min: f64, d_max: f64, n_bins: usize) -> Result<Self, DepthNetError> {
        if !(d_min > 0.0 && d_max > d_min) {
            return Err(DepthNetError::Config(format!(
                "need 0 < d_min < d_max, got {d_min}..{d_max}"
            )));
        }
        if n_bins < 2 {
            return Err(DepthNetError::Config(format!(
                "need at least 2 bins, got {n_bins}"
            )));
        }
        Ok(DepthConfig {
            d_min,
            d_max,
            n_bins,
        })
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let step = (self.d_max - self.d_min) / self.n_bins as f64;
        (0..self.n_bins)
            .map(|i| self.d_min + (i as f64 + 0.5) * step)
            .collect()
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.d_min + self.d_max)
    }
}

/// Per-view surface depth predictions at feature resolution.
#[derive(Debug, Clone)]
pub struct PixelDepthMap {
    pub views: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
}

/// k 3D offsets with their attention weights for one pixel.
#[derive(Debug, Clone)]
pub struct OffsetSet {
    pub offsets: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl OffsetSet {
    /// Weight simplex check: nonnegative, sums to 1 within 1e-9.
    pub fn is_simplex(&self) -> bool {
        self.weights.len() == self.offsets.len()
            && self.weights.iter().all(|&w| w >= 0.0)
            && (self.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9
    }
}

/// Per-pixel depth embedding of one view, `[H*W, E]`.
#[derive(Debug, Clone)]
pub struct DepthEmbedding {
    pub values: Tensor,
    pub attention: Tensor,
}

/// Per-pixel object depth and absolute 2D center prediction of one view.
#[derive(Debug, Clone)]
pub struct ObjectDepthPred {
    pub depth: Vec<f64>,
    pub center: Vec<[f64; 2]>,
}

/// Parameters of the pixel-wise depth head.
#[derive(Debug, Clone)]
pub struct PdeParams {
    /// Embeds (fx, fy, cx, cy) into a per-channel feature gate.
    pub kmod: LinearParams,
    pub l1: LinearParams,
    pub l2: LinearParams,
}

impl PdeParams {
    pub fn zeros(channels: usize, hidden: usize, cfg: &DepthConfig) -> Self {
        PdeParams {
            kmod: LinearParams::zeros(4, channels),
            l1: LinearParams::zeros(channels, hidden),
            l2: LinearParams::zeros(hidden, 1 + cfg.n_bins),
        }
    }
}

/// Parameters of the object-wise depth head.
#[derive(Debug, Clone)]
pub struct OdeParams {
    pub offsets: LinearParams,
    pub attn: LinearParams,
    pub phi: LinearParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
}

impl OdeParams {
    pub fn k(&self) -> usize {
        self.attn.out_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.phi.out_dim()
    }
}

pub struct PdeNodes {
    pub kmod: LinNodes,
    pub l1: LinNodes,
    pub l2: LinNodes,
}

pub struct OdeNodes {
    pub offsets: LinNodes,
    pub attn: LinNodes,
    pub phi: LinNodes,
    pub ffn1: LinNodes,
    pub ffn2: LinNodes,
}

/// Normalized (fx, fy, cx, cy) row used to modulate features.
fn intrinsic_descriptor(cam: &CameraParams, height: usize, width: usize) -> Tensor {
    let [fx, fy, cx, cy] = cam.focal_center();
    Tensor::from_vec(
        vec![1, 4],
        vec![
            fx / width as f64,
            fy / height as f64,
            cx / width as f64,
            cy / height as f64,
        ],
    )
    .expect("descriptor shape")
}

/// Pixel-wise depth head for one view. `feat` is a `[C,H,W]` leaf; returns
/// the fused `[H*W, 1]` depth column.
pub fn pde_forward_node(
    tape: &mut Tape,
    feat: NodeId,
    cam: &CameraParams,
    cfg: &DepthConfig,
    nodes: &PdeNodes,
) -> Result<NodeId, AutodiffError> {
    let shape = tape.value(feat).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);

    // intrinsics gate: 2*sigmoid keeps the zero-initialized head neutral
    let kdesc = tape.leaf(intrinsic_descriptor(cam, h, w));
    let kraw = tape.linear_n(kdesc, nodes.kmod)?;
    let kgate = tape.sigmoid(kraw);
    let kgate = tape.affine(kgate, 2.0, 0.0);
    let kgate = tape.reshape(kgate, vec![c])?;
    let modulated = tape.scale_channels(feat, kgate)?;

    let rows = tape.chw_to_rows(modulated)?;
    let hidden = tape.linear_n(rows, nodes.l1)?;
    let hidden = tape.relu(hidden);
    let out = tape.linear_n(hidden, nodes.l2)?;

    // regression branch: sigmoid squashed into [d_min, d_max]
    let reg_logit = tape.slice_cols(out, 0, 1)?;
    let reg01 = tape.sigmoid(reg_logit);
    let reg = tape.affine(reg01, cfg.d_max - cfg.d_min, cfg.d_min);

    // probabilistic branch: expectation of a softmax over uniform bins
    let bin_logits = tape.slice_cols(out, 1, cfg.n_bins)?;
    let bin_p = tape.softmax(bin_logits, 1)?;
    let centers = tape.leaf(Tensor::from_vec(vec![cfg.n_bins, 1], cfg.bin_centers())?);
    let prob = tape.matmul(bin_p, centers)?;

    let sum = tape.add(reg, prob)?;
    Ok(tape.affine(sum, 0.5, 0.0))
}

/// Value-level pixel-wise depth over all views.
pub fn pde_forward(
    features: &[Tensor],
    cams: &[CameraParams],
    cfg: &DepthConfig,
    params: &PdeParams,
) -> Result<PixelDepthMap, DepthNetError> {
    let mut views = Vec::with_capacity(features.len());
    let mut hw = (0, 0);
    for (feat, cam) in features.iter().zip(cams) {
        let shape = feat.shape().to_vec();
        hw = (shape[1], shape[2]);
        let mut tape = Tape::new();
        let f = tape.leaf(feat.clone());
        let nodes = PdeNodes {
            kmod: LinNodes::stage(&mut tape, &params.kmod),
            l1: LinNodes::stage(&mut tape, &params.l1),
            l2: LinNodes::stage(&mut tape, &params.l2),
        };
        let d = pde_forward_node(&mut tape, f, cam, cfg, &nodes)?;
        views.push(tape.value(d).data().to_vec());
    }
    Ok(PixelDepthMap {
        views,
        height: hw.0,
        width: hw.1,
    })
}

/// Per-pixel constants for lifting pixel centers: the camera-frame point is
/// `depth * a + b` in homogeneous coordinates, with `a = K^-1 (u,v,1,0)` and
/// `b = K^-1 (0,0,0,1)`.
fn lift_constants(cam: &CameraParams, height: usize, width: usize) -> (Vec<[f64; 4]>, [f64; 4]) {
    let kinv = cam.intrinsic_inv();
    let b = kinv.mul_vec([0.0, 0.0, 0.0, 1.0]);
    let mut a = Vec::with_capacity(height * width);
    for m in 0..height {
        for n in 0..width {
            let u = n as f64 + 0.5;
            let v = m as f64 + 0.5;
            a.push(kinv.mul_vec([u, v, 1.0, 0.0]));
        }
    }
    (a, b)
}

/// Reference points on tape: `[H*W, 3]` camera-frame points from a `[H*W, 1]`
/// depth column.
pub fn reference_points_node(
    tape: &mut Tape,
    depth: NodeId,
    cam: &CameraParams,
    height: usize,
    width: usize,
) -> Result<NodeId, AutodiffError> {
    let (a, b) = lift_constants(cam, height, width);
    let hw = height * width;
    let mut homog: Vec<NodeId> = Vec::with_capacity(4);
    for cidx in 0..4 {
        let acol = tape.leaf(Tensor::from_vec(
            vec![hw, 1],
            a.iter().map(|r| r[cidx]).collect(),
        )?);
        let da = tape.mul(depth, acol)?;
        homog.push(tape.affine(da, 1.0, b[cidx]));
    }
    let wcol = homog[3];
    let mut xyz: Vec<NodeId> = Vec::with_capacity(3);
    for &col in &homog[..3] {
        xyz.push(tape.div(col, wcol)?);
    }
    let xy = tape.concat_cols(xyz[0], xyz[1])?;
    tape.concat_cols(xy, xyz[2])
}

/// Value-level reference points: pixel centers lifted through the depth map.
pub fn make_reference_points(
    depth: &[f64],
    height: usize,
    width: usize,
    cam: &CameraParams,
) -> Result<Vec<CamPoint>, DepthNetError> {
    let mut out = Vec::with_capacity(height * width);
    for m in 0..height {
        for n in 0..width {
            let pt = PixelPoint::with_depth(n as f64 + 0.5, m as f64 + 0.5, depth[m * width + n]);
            out.push(
                pixel_to_camera(pt, cam)
                    .map_err(|e| DepthNetError::Config(format!("lift failed: {e}")))?,
            );
        }
    }
    Ok(out)
}

/// Inputs for sampling one target frame from one view.
pub struct SampleFrame<'a> {
    /// `[C,H,W]` feature grid leaf, or None when the frame is absent.
    pub grid: Option<NodeId>,
    pub cam: &'a CameraParams,
}

/// Project `[M,3]` current-camera-frame points into a target frame and
/// bilinear-sample its features. Behind-camera projections are pinned to an
/// off-grid coordinate and so contribute exact zeros.
fn sample_projected(
    tape: &mut Tape,
    points_h: NodeId,
    current_cam: &CameraParams,
    frame: &SampleFrame,
    m_rows: usize,
    channels: usize,
) -> Result<NodeId, AutodiffError> {
    let Some(grid) = frame.grid else {
        return Ok(tape.leaf(Tensor::zeros(vec![m_rows, channels])));
    };
    // current camera frame -> lidar -> target camera frame
    let t = frame.cam.extrinsic().mul(current_cam.extrinsic_inv());
    let tnode = tape.leaf(Tensor::from_vec(vec![4, 4], t.row_major().to_vec())?);
    let q = tape.matmul_nt(points_h, tnode)?;
    let knode = tape.leaf(Tensor::from_vec(
        vec![4, 4],
        frame.cam.intrinsic().row_major().to_vec(),
    )?);
    let s = tape.matmul_nt(q, knode)?;
    let sx = tape.slice_cols(s, 0, 1)?;
    let sy = tape.slice_cols(s, 1, 1)?;
    let sz = tape.slice_cols(s, 2, 1)?;

    // visibility mask from forward depth values (piecewise-constant)
    let depth_vals = tape.value(sz).data().to_vec();
    let mask_vec: Vec<f64> = depth_vals
        .iter()
        .map(|&d| if d > MIN_SAMPLE_DEPTH { 1.0 } else { 0.0 })
        .collect();
    let off_vec: Vec<f64> = mask_vec.iter().map(|&m| OFF_GRID * (1.0 - m)).collect();
    let one_minus: Vec<f64> = mask_vec.iter().map(|&m| 1.0 - m).collect();
    let mask = tape.leaf(Tensor::from_vec(vec![m_rows, 1], mask_vec)?);
    let off = tape.leaf(Tensor::from_vec(vec![m_rows, 1], off_vec)?);
    let fill = tape.leaf(Tensor::from_vec(vec![m_rows, 1], one_minus)?);

    let z_masked = tape.mul(sz, mask)?;
    let z_safe = tape.add(z_masked, fill)?;
    let ux = tape.mul(sx, mask)?;
    let u = tape.div(ux, z_safe)?;
    let u = tape.add(u, off)?;
    let vy = tape.mul(sy, mask)?;
    let v = tape.div(vy, z_safe)?;
    let v = tape.add(v, off)?;

    // pixel coordinates -> grid index coordinates
    let col = tape.affine(u, 1.0, -0.5);
    let row = tape.affine(v, 1.0, -0.5);
    tape.bilinear_sample(grid, row, col)
}

/// Object-wise depth embedding for one view (tape form). `rows` is the
/// `[H*W, C]` pixel-feature matrix of this view, `ref_points` the `[H*W, 3]`
/// camera-frame reference points. Returns (embedding, attention weights).
#[allow(clippy::too_many_arguments)]
pub fn ode_embedding_node(
    tape: &mut Tape,
    rows: NodeId,
    ref_points: NodeId,
    current: &SampleFrame,
    previous: &SampleFrame,
    current_cam: &CameraParams,
    k: usize,
    nodes: &OdeNodes,
) -> Result<(NodeId, NodeId), AutodiffError> {
    let hw = tape.value(rows).lead();
    let channels = tape.value(rows).last_dim();

    // k 3D offsets per pixel, stacked j-major into [k*H*W, 3]
    let offs = tape.linear_n(rows, nodes.offsets)?;
    let mut blocks = Vec::with_capacity(k);
    for j in 0..k {
        let o = tape.slice_cols(offs, 3 * j, 3)?;
        blocks.push(tape.add(o, ref_points)?);
    }
    let samples3 = tape.concat_rows(&blocks)?;
    let ones = tape.leaf(Tensor::filled(vec![k * hw, 1], 1.0));
    let samples_h = tape.concat_cols(samples3, ones)?;

    let cur = sample_projected(tape, samples_h, current_cam, current, k * hw, channels)?;
    let prev = sample_projected(tape, samples_h, current_cam, previous, k * hw, channels)?;
    let both = tape.concat_cols(cur, prev)?;

    let logits = tape.linear_n(rows, nodes.attn)?;
    let attn = tape.softmax(logits, 1)?;
    let pooled = tape.weighted_sum_groups(both, attn)?;
    let embed = tape.linear_n(pooled, nodes.phi)?;
    Ok((embed, attn))
}

/// Object depth and center head for one view (tape form). Returns the
/// `[H*W, 1]` depth column and the `[H*W, 2]` absolute center positions
/// (pixel location plus predicted offset).
pub fn ode_predict_node(
    tape: &mut Tape,
    embed: NodeId,
    rows: NodeId,
    cfg: &DepthConfig,
    height: usize,
    width: usize,
    nodes: &OdeNodes,
) -> Result<(NodeId, NodeId), AutodiffError> {
    let x = tape.concat_cols(embed, rows)?;
    let h = tape.linear_n(x, nodes.ffn1)?;
    let h = tape.relu(h);
    let out = tape.linear_n(h, nodes.ffn2)?;

    let dlogit = tape.slice_cols(out, 0, 1)?;
    let d01 = tape.sigmoid(dlogit);
    let depth = tape.affine(d01, cfg.d_max - cfg.d_min, cfg.d_min);

    let delta = tape.slice_cols(out, 1, 2)?;
    let mut own = Vec::with_capacity(height * width * 2);
    for m in 0..height {
        for n in 0..width {
            own.push(n as f64 + 0.5);
            own.push(m as f64 + 0.5);
        }
    }
    let own = tape.leaf(Tensor::from_vec(vec![height * width, 2], own)?);
    let center = tape.add(delta, own)?;
    Ok((depth, center))
}

fn stage_ode(tape: &mut Tape, params: &OdeParams) -> OdeNodes {
    OdeNodes {
        offsets: LinNodes::stage(tape, &params.offsets),
        attn: LinNodes::stage(tape, &params.attn),
        phi: LinNodes::stage(tape, &params.phi),
        ffn1: LinNodes::stage(tape, &params.ffn1),
        ffn2: LinNodes::stage(tape, &params.ffn2),
    }
}

/// Value-level object-wise depth embedding for one view.
#[allow(clippy::too_many_arguments)]
pub fn ode_depth_embedding(
    ref_points: &[CamPoint],
    features_now: &Tensor,
    features_prev: Option<&Tensor>,
    cam_now: &CameraParams,
    cam_prev: &CameraParams,
    params: &OdeParams,
) -> Result<DepthEmbedding, DepthNetError> {
    let mut tape = Tape::new();
    let nodes = stage_ode(&mut tape, params);
    let grid_now = tape.leaf(features_now.clone());
    let grid_prev = features_prev.map(|f| tape.leaf(f.clone()));
    let rows = tape.chw_to_rows(grid_now)?;
    let refv: Vec<f64> = ref_points
        .iter()
        .flat_map(|p| [p.x, p.y, p.z])
        .collect();
    let refs = tape.leaf(Tensor::from_vec(vec![ref_points.len(), 3], refv)?);
    let (embed, attn) = ode_embedding_node(
        &mut tape,
        rows,
        refs,
        &SampleFrame {
            grid: Some(grid_now),
            cam: cam_now,
        },
        &SampleFrame {
            grid: grid_prev,
            cam: cam_prev,
        },
        cam_now,
        params.k(),
        &nodes,
    )?;
    Ok(DepthEmbedding {
        values: tape.value(embed).clone(),
        attention: tape.value(attn).clone(),
    })
}

/// Value-level object depth and center prediction for one view.
pub fn ode_predict(
    embedding: &DepthEmbedding,
    features: &Tensor,
    cfg: &DepthConfig,
    params: &OdeParams,
) -> Result<ObjectDepthPred, DepthNetError> {
    let shape = features.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut tape = Tape::new();
    let nodes = stage_ode(&mut tape, params);
    let grid = tape.leaf(features.clone());
    let rows = tape.chw_to_rows(grid)?;
    let embed = tape.leaf(embedding.values.clone());
    let (depth, center) = ode_predict_node(&mut tape, embed, rows, cfg, h, w, &nodes)?;
    let depth = tape.value(depth).data().to_vec();
    let center = tape
        .value(center)
        .data()
        .chunks_exact(2)
        .map(|c| [c[0], c[1]])
        .collect();
    Ok(ObjectDepthPred { depth, center })
}
