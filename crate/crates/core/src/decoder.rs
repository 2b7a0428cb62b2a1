//! Set-prediction transformer decoder with depth-aware classification.
//!
//! Learnable queries cross-attend over position-embedded multi-view features
//! (keys carry the embedding, values are the raw projected features), detection
//! heads decode boxes relative to per-query 3D anchors, Hungarian assignment
//! matches predictions to ground truth, and classification uses a focal loss
//! whose positive targets are softened by the depth score
//! s = exp(-||predicted center - true center||).

use crate::autodiff::{AutodiffError, LinNodes, NodeId, Tape, Tensor};
use crate::geom::PerceptionRange;
use crate::synthscene::GroundTruthBox;
use thiserror::Error;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DecoderError {
    #[error("cost matrix must be rectangular with rows >= columns ({rows} x {cols})")]
    BadCostShape { rows: usize, cols: usize },
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("invalid focal parameters: {0}")]
    BadFocalParams(String),
    #[error("loss component {name} is negative: {value}")]
    NegativeLoss { name: &'static str, value: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Balance weight and focusing exponent of the depth-aware focal loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DflParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl DflParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self, DecoderError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(DecoderError::BadFocalParams(format!(
                "alpha must be in (0,1), got {alpha}"
            )));
        }
        if !(gamma >= 0.0) {
            return Err(DecoderError::BadFocalParams(format!(
                "gamma must be >= 0, got {gamma}"
            )));
        }
        Ok(DflParams { alpha, gamma })
    }
}

impl Default for DflParams {
    fn default() -> Self {
        DflParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Loss balance factors (pixel depth, object depth, classification, box).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pde: f64,
    pub ode: f64,
    pub dfl: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pde: 1.0,
            ode: 5.0,
            dfl: 2.0,
            reg: 0.25,
        }
    }
}

/// One decoded prediction. Box parameters keep both the raw regression form
/// (normalized center, log sizes, unnormalized sin/cos) used by losses and
/// the decoded metric form used by evaluation.
#[derive(Debug, Clone)]
pub struct Detection {
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    pub score: f64,
    pub center_norm: [f64; 3],
    pub center: [f64; 3],
    pub log_size: [f64; 3],
    pub size: [f64; 3],
    pub sin_yaw: f64,
    pub cos_yaw: f64,
    pub yaw: f64,
}

impl Detection {
    /// The 8 regression parameters (normalized center, log size, sin/cos).
    pub fn box_params(&self) -> [f64; 8] {
        [
            self.center_norm[0],
            self.center_norm[1],
            self.center_norm[2],
            self.log_size[0],
            self.log_size[1],
            self.log_size[2],
            self.sin_yaw,
            self.cos_yaw,
        ]
    }
}

/// Regression targets of one ground-truth box in the same parameterization.
pub fn gt_box_params(b: &GroundTruthBox, range: &PerceptionRange) -> [f64; 8] {
    let n = crate::geom::normalize_center(
        crate::geom::LidarPoint::new(b.center[0], b.center[1], b.center[2]),
        range,
    );
    [
        n[0],
        n[1],
        n[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

// ---------------------------------------------------------------------------
// depth-aware focal loss
// ---------------------------------------------------------------------------

/// Depth score s = exp(-L2(pred, gt)); 1 at a perfect center.
pub fn depth_score(pred_center: [f64; 3], gt_center: [f64; 3]) -> f64 {
    let d2: f64 = pred_center
        .iter()
        .zip(&gt_center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (-d2.sqrt()).exp()
}

/// Depth-aware focal loss for one (probability, label, depth score) triple:
/// alpha' = alpha t s + (1 - alpha)(1 - t s),
/// loss = -alpha' |t s - p|^gamma ln(|1 - t - p|).
/// With s = 1 this is exactly the standard focal loss for both labels.
pub fn dfl_value(p_hat: f64, t: bool, s: f64, params: &DflParams) -> f64 {
    let p = p_hat.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let ts = if t { s } else { 0.0 };
    let alpha_p = params.alpha * ts + (1.0 - params.alpha) * (1.0 - ts);
    let focus = (ts - p).abs().powf(params.gamma);
    let log_arg = (1.0 - if t { 1.0 } else { 0.0 } - p).abs().max(PROB_FLOOR);
    -alpha_p * focus * log_arg.ln()
}

/// Tape form of the loss over a probability matrix. `targets` and `scores`
/// are constants of the same shape (label in {0,1}, depth score in (0,1]);
/// the result is the elementwise loss matrix.
pub fn dfl_node(
    tape: &mut Tape,
    probs: NodeId,
    targets: &Tensor,
    scores: &Tensor,
    params: &DflParams,
) -> Result<NodeId, DecoderError> {
    let shape = targets.shape().to_vec();
    let ts: Vec<f64> = targets
        .data()
        .iter()
        .zip(scores.data())
        .map(|(t, s)| t * s)
        .collect();
    let neg_alpha: Vec<f64> = ts
        .iter()
        .map(|&ts| -(params.alpha * ts + (1.0 - params.alpha) * (1.0 - ts)))
        .collect();
    let one_minus_t: Vec<f64> = targets.data().iter().map(|t| 1.0 - t).collect();

    let ts = tape.leaf(Tensor::from_vec(shape.clone(), ts)?);
    let neg_alpha = tape.leaf(Tensor::from_vec(shape.clone(), neg_alpha)?);
    let one_minus_t = tape.leaf(Tensor::from_vec(shape, one_minus_t)?);

    let diff = tape.sub(ts, probs)?;
    let diff = tape.abs(diff);
    let focus = tape.pow_const(diff, params.gamma);
    let log_arg = tape.sub(one_minus_t, probs)?;
    let log_arg = tape.abs(log_arg);
    let ln = tape.ln_clamped(log_arg);
    let weighted = tape.mul(focus, ln)?;
    Ok(tape.mul(neg_alpha, weighted)?)
}

/// Weighted total loss. Components must be finite and nonnegative.
pub fn total_loss(
    l_pde: f64,
    l_ode: f64,
    l_dfl: f64,
    l_reg: f64,
    weights: &LossWeights,
) -> Result<f64, DecoderError> {
    for (name, value) in [
        ("pixel-depth", l_pde),
        ("object-depth", l_ode),
        ("classification", l_dfl),
        ("regression", l_reg),
    ] {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(DecoderError::NegativeLoss { name, value });
        }
    }
    Ok(weights.pde * l_pde + weights.ode * l_ode + weights.dfl * l_dfl + weights.reg * l_reg)
}

// ---------------------------------------------------------------------------
// assignment
// ---------------------------------------------------------------------------

/// Matching cost between every detection (row) and ground truth (column):
/// the positive-label depth-aware focal cost plus the weighted L1 over box
/// parameters, with the same balance factors as the loss.
pub fn match_cost(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    weights: &LossWeights,
    dfl: &DflParams,
    range: &PerceptionRange,
) -> Vec<Vec<f64>> {
    let gt_params: Vec<[f64; 8]> = gts.iter().map(|g| gt_box_params(g, range)).collect();
    dets.iter()
        .map(|d| {
            gts.iter()
                .zip(&gt_params)
                .map(|(g, gp)| {
                    let s = pair_depth_score(d, gp);
                    let cls = dfl_value(d.class_probs[g.class_id as usize], true, s, dfl);
                    let l1: f64 = d
                        .box_params()
                        .iter()
                        .zip(gp)
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    weights.dfl * cls + weights.reg * l1
                })
                .collect()
        })
        .collect()
}

/// Total of an assignment, summed in column order so equal assignments
/// always compare bit-identically.
fn canonical_total(cost: &[Vec<f64>], assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(col, &row)| cost[row][col])
        .sum()
}

/// Shortest-augmenting-path assignment over the transposed matrix
/// (columns become workers), standard potentials formulation.
fn solve_lap(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = cols.len();
    let m = rows.len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j] = column (1-based) assigned to row slot j
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[rows[j - 1]][cols[i0 - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    // invert: assignment per column (in `cols` order) to row index
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = rows[j - 1];
        }
    }
    assign
}

/// Minimum-cost one-to-one assignment of every column to a distinct row
/// (`rows >= columns`). Returns `assign[col] = row`. Among equal-cost optima
/// the lexicographically smallest assignment vector is returned, which makes
/// training runs bit-reproducible.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>, DecoderError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if cols == 0 {
        return Ok(Vec::new());
    }
    if rows < cols {
        return Err(DecoderError::BadCostShape { rows, cols });
    }
    for (ri, r) in cost.iter().enumerate() {
        if r.len() != cols {
            return Err(DecoderError::BadCostShape { rows, cols });
        }
        for (ci, v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(DecoderError::NonFiniteCost { row: ri, col: ci });
            }
        }
    }

    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let base = solve_lap(cost, &all_rows, &all_cols);
    let best_total = canonical_total(cost, &base);

    // lexicographic refinement: fix columns left to right, trying candidate
    // rows in ascending order and keeping any choice that still reaches the
    // optimal total (compared bit-exactly via the canonical column-order sum)
    let mut result = base.clone();
    let mut fixed: Vec<usize> = Vec::with_capacity(cols);
    let mut remaining_rows: Vec<usize> = all_rows.clone();
    'cols: for col in 0..cols {
        let rest_cols: Vec<usize> = (col + 1..cols).collect();
        for (slot, &r) in remaining_rows.iter().enumerate() {
            if remaining_rows.len() == rest_cols.len() {
                break;
            }
            let mut rows_left: Vec<usize> = remaining_rows.clone();
            rows_left.remove(slot);
            let sub = if rest_cols.is_empty() {
                Vec::new()
            } else {
                solve_lap(cost, &rows_left, &rest_cols)
            };
            let mut candidate = fixed.clone();
            candidate.push(r);
            candidate.extend(&sub);
            if canonical_total(cost, &candidate) == best_total {
                result = candidate;
                fixed.push(r);
                remaining_rows.remove(slot);
                continue 'cols;
            }
        }
        // float asymmetry kept us from reproducing the total; fall back to
        // the base optimum for the remaining columns
        result = fixed
            .iter()
            .copied()
            .chain(base[col..].iter().copied())
            .collect();
        break;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// attention and decoder layers
// ---------------------------------------------------------------------------

/// Scaled dot-product attention: out = softmax(q k^T * scale) v.
/// Returns (output, attention weights).
pub fn attention_node(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    scale: f64,
) -> Result<(NodeId, NodeId), AutodiffError> {
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.affine(logits, scale, 0.0);
    let attn = tape.softmax(logits, 1)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

#[derive(Clone, Copy)]
pub struct LnNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
}

pub struct DecoderLayerNodes {
    pub self_q: LinNodes,
    pub self_k: LinNodes,
    pub self_v: LinNodes,
    pub self_o: LinNodes,
    pub cross_q: LinNodes,
    pub cross_o: LinNodes,
    pub ffn1: LinNodes,
    pub ffn2: LinNodes,
    pub ln1: LnNodes,
    pub ln2: LnNodes,
    pub ln3: LnNodes,
}

pub struct DecoderNodes {
    pub layers: Vec<DecoderLayerNodes>,
    pub cls: LinNodes,
    pub boxes: LinNodes,
}

/// Run the decoder stack: per layer query self-attention, cross-attention
/// with keys = features + position embedding and values = features, then a
/// feed-forward block, all with residual layer norm. Heads apply after the
/// last layer. Returns class logits `[Q, classes]`, raw box outputs `[Q, 8]`,
/// and the final layer's cross-attention weights `[Q, P]`.
pub fn decoder_forward_node(
    tape: &mut Tape,
    queries: NodeId,
    keys: NodeId,
    values: NodeId,
    nodes: &DecoderNodes,
) -> Result<(NodeId, NodeId, NodeId), AutodiffError> {
    let dim = tape.value(queries).last_dim();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut q = queries;
    let mut last_attn = None;
    for layer in &nodes.layers {
        let qq = tape.linear_n(q, layer.self_q)?;
        let kk = tape.linear_n(q, layer.self_k)?;
        let vv = tape.linear_n(q, layer.self_v)?;
        let (sa, _) = attention_node(tape, qq, kk, vv, scale)?;
        let sa = tape.linear_n(sa, layer.self_o)?;
        let sum = tape.add(q, sa)?;
        q = tape.layer_norm(sum, layer.ln1.gamma, layer.ln1.beta)?;

        let cq = tape.linear_n(q, layer.cross_q)?;
        let (ca, attn) = attention_node(tape, cq, keys, values, scale)?;
        let ca = tape.linear_n(ca, layer.cross_o)?;
        let sum = tape.add(q, ca)?;
        q = tape.layer_norm(sum, layer.ln2.gamma, layer.ln2.beta)?;
        last_attn = Some(attn);

        let h = tape.linear_n(q, layer.ffn1)?;
        let h = tape.relu(h);
        let f = tape.linear_n(h, layer.ffn2)?;
        let sum = tape.add(q, f)?;
        q = tape.layer_norm(sum, layer.ln3.gamma, layer.ln3.beta)?;
    }
    let cls = tape.linear_n(q, nodes.cls)?;
    let boxes = tape.linear_n(q, nodes.boxes)?;
    Ok((cls, boxes, last_attn.expect("at least one layer")))
}

/// Decode head outputs into detections. `anchors` are the raw (pre-sigmoid)
/// query anchors; the center is sigmoid(anchor + delta) denormalized by the
/// perception range, sizes are exponentiated, yaw comes from the normalized
/// sin/cos pair.
pub fn decode_detections(
    cls_logits: &Tensor,
    box_out: &Tensor,
    anchors: &Tensor,
    range: &PerceptionRange,
) -> Vec<Detection> {
    let n_q = cls_logits.lead();
    let n_cls = cls_logits.last_dim();
    let (lo, ext) = (range.min(), range.extent());
    (0..n_q)
        .map(|qi| {
            let probs: Vec<f64> = (0..n_cls)
                .map(|c| 1.0 / (1.0 + (-cls_logits.data()[qi * n_cls + c]).exp()))
                .collect();
            let (class_id, score) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(i, &p)| (i, p))
                .expect("at least one class");
            let b = &box_out.data()[qi * 8..(qi + 1) * 8];
            let a = &anchors.data()[qi * 3..(qi + 1) * 3];
            let mut center_norm = [0.0; 3];
            let mut center = [0.0; 3];
            for i in 0..3 {
                center_norm[i] = 1.0 / (1.0 + (-(a[i] + b[i])).exp());
                center[i] = lo[i] + ext[i] * center_norm[i];
            }
            let log_size = [b[3], b[4], b[5]];
            let size = [b[3].exp(), b[4].exp(), b[5].exp()];
            let (sin_yaw, cos_yaw) = (b[6], b[7]);
            let norm = (sin_yaw * sin_yaw + cos_yaw * cos_yaw).sqrt();
            let yaw = if norm < 1e-9 {
                0.0
            } else {
                (sin_yaw / norm).atan2(cos_yaw / norm)
            };
            Detection {
                class_probs: probs,
                class_id,
                score,
                center_norm,
                center,
                log_size,
                size,
                sin_yaw,
                cos_yaw,
                yaw,
            }
        })
        .collect()
}

/// Matched (query, ground truth) pairs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

/// Hungarian label assignment from the matching cost.
pub fn assign_targets(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    weights: &LossWeights,
    dfl: &DflParams,
    range: &PerceptionRange,
) -> Result<Assignment, DecoderError> {
    if gts.is_empty() {
        return Ok(Assignment { pairs: Vec::new() });
    }
    let cost = match_cost(dets, gts, weights, dfl, range);
    let assign = hungarian(&cost)?;
    Ok(Assignment {
        pairs: assign
            .iter()
            .enumerate()
            .map(|(gt, &query)| (query, gt))
            .collect(),
    })
}

/// Per-entry classification targets: label and depth-score matrices of shape
/// `[queries, classes]`. Unmatched entries keep t = 0 (s is irrelevant there).
pub fn classification_targets(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    assignment: &Assignment,
    n_classes: usize,
) -> (Tensor, Tensor) {
    let q = dets.len();
    let mut t = Tensor::zeros(vec![q, n_classes]);
    let mut s = Tensor::filled(vec![q, n_classes], 1.0);
    for &(query, gt) in &assignment.pairs {
        let score = depth_score(dets[query].center, gts[gt].center);
        t.data_mut()[query * n_classes + gts[gt].class_id as usize] = 1.0;
        s.data_mut()[query * n_classes + gts[gt].class_id as usize] = score;
    }
    (t, s)
}

/// Value-level classification loss: sum of the depth-aware focal loss over
/// all (query, class) entries, normalized by the number of ground truths.
pub fn classification_loss_value(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    assignment: &Assignment,
    dfl: &DflParams,
    n_classes: usize,
) -> f64 {
    let (t, s) = classification_targets(dets, gts, assignment, n_classes);
    let mut total = 0.0;
    for (qi, det) in dets.iter().enumerate() {
        for c in 0..n_classes {
            let idx = qi * n_classes + c;
            total += dfl_value(
                det.class_probs[c],
                t.data()[idx] > 0.5,
                s.data()[idx],
                dfl,
            );
        }
    }
    total / gts.len().max(1) as f64
}

/// Value-level box regression loss: L1 over the 8 box parameters of matched
/// pairs, normalized by the number of ground truths.
pub fn regression_loss_value(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    assignment: &Assignment,
    range: &PerceptionRange,
) -> f64 {
    let mut total = 0.0;
    for &(query, gt) in &assignment.pairs {
        let gp = gt_box_params(&gts[gt], range);
        total += dets[query]
            .box_params()
            .iter()
            .zip(&gp)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    total / gts.len().max(1) as f64
}
