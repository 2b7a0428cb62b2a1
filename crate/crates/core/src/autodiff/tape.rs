use super::{AutodiffError, Tensor};
use crate::threads;
use rayon::prelude::*;

/// Handle to a node on a [`Tape`]. Ids are assigned in recording order, so
/// every node's inputs have smaller ids than the node itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Step {
    Leaf,
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AffineScalar(NodeId, f64),
    AddRowVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    LnClamped(NodeId),
    Abs(NodeId),
    PowConst(NodeId, f64),
    Sin(NodeId),
    Cos(NodeId),
    Clamp01(NodeId),
    Softmax(NodeId, usize),
    BilinearSample {
        grid: NodeId,
        rows: NodeId,
        cols: NodeId,
    },
    WeightedSumGroups {
        samples: NodeId,
        weights: NodeId,
    },
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    InterleavePairs(NodeId, NodeId),
    ScaleChannels {
        grid: NodeId,
        scale: NodeId,
    },
    ChwToRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    SumAll(NodeId),
}

struct Node {
    value: Tensor,
    step: Step,
}

/// Reverse-mode computation tape. One tape per forward pass; nodes are
/// appended in topological order by construction.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, step: Step) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite forward value from {:?}",
            step
        );
        self.nodes.push(Node { value, step });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input tensor. Leaves accumulate gradients like any other
    /// node; whether they are parameters is the caller's bookkeeping.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Step::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(AutodiffError::Shape(format!(
                "reshape {:?} -> {:?}",
                v.shape(),
                shape
            )));
        }
        let t = Tensor::from_vec(shape, v.data().to_vec())?;
        Ok(self.push(t, Step::Reshape(x)))
    }

    fn zip_same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<(), AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(t, Step::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(t, Step::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(t, Step::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_same_shape(a, b, "div")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x / y)
            .collect();
        let t = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(t, Step::Div(a, b)))
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let t = self.value(x).map(|v| mul * v + add);
        self.push(t, Step::AffineScalar(x, mul))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    /// Broadcast-add a row vector `[n]` to every row of `[m,n]`.
    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, AutodiffError> {
        let (vx, vv) = (self.value(x), self.value(v));
        let n = vx.last_dim();
        if vv.numel() != n {
            return Err(AutodiffError::Shape(format!(
                "add_row_vec: {:?} + {:?}",
                vx.shape(),
                vv.shape()
            )));
        }
        let mut data = vx.data().to_vec();
        let vd = vv.data();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vd) {
                *o += b;
            }
        }
        let t = Tensor::from_vec(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Step::AddRowVec(x, v)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.lead(), va.last_dim());
        if vb.shape().len() != 2 || vb.shape()[0] != k {
            return Err(AutodiffError::Shape(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let n = vb.shape()[1];
        let data = mm_nn(va.data(), vb.data(), m, k, n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t, Step::MatMul(a, b)))
    }

    /// y = a b^T for a `[m,k]`, b `[n,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.lead(), va.last_dim());
        if vb.last_dim() != k {
            return Err(AutodiffError::Shape(format!(
                "matmul_nt: {:?} x {:?}^T",
                va.shape(),
                vb.shape()
            )));
        }
        let n = vb.lead();
        let data = mm_nt(va.data(), vb.data(), m, k, n);
        let t = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(t, Step::MatMulNT(a, b)))
    }

    /// x W + b over the trailing axis; leading axes are preserved.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let y = self.matmul(x, w)?;
        self.add_row_vec(y, b)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Step::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(t, Step::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::exp);
        self.push(t, Step::Exp(x))
    }

    /// ln(max(x, 1e-12)): the floor keeps losses finite at saturated
    /// probabilities; gradient is zero below the floor.
    pub fn ln_clamped(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        self.push(t, Step::LnClamped(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::abs);
        self.push(t, Step::Abs(x))
    }

    /// x^e for x >= 0. At x = 0 the gradient is taken as 0.
    pub fn pow_const(&mut self, x: NodeId, e: f64) -> NodeId {
        let t = self.value(x).map(|v| v.powf(e));
        self.push(t, Step::PowConst(x, e))
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::sin);
        self.push(t, Step::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(f64::cos);
        self.push(t, Step::Cos(x))
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| v.clamp(0.0, 1.0));
        self.push(t, Step::Clamp01(x))
    }

    /// Stabilized softmax along `axis`: max is subtracted before
    /// exponentiation so magnitudes up to 1e4 stay exact.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        let rank = v.shape().len();
        if axis >= rank {
            return Err(AutodiffError::BadAxis { axis, rank });
        }
        let dims = v.shape().to_vec();
        let lane = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (data[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    data[base + l * inner] /= sum;
                }
            }
        }
        let t = Tensor::from_vec(dims, data)?;
        Ok(self.push(t, Step::Softmax(x, axis)))
    }

    /// Bilinear sampling of a `[C,H,W]` grid at continuous (row, col) index
    /// coordinates. Neighbors falling outside the grid contribute zero, so a
    /// fully out-of-bounds coordinate yields a zero vector. Differentiable in
    /// the grid values and in the coordinates.
    pub fn bilinear_sample(
        &mut self,
        grid: NodeId,
        rows: NodeId,
        cols: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let g = self.value(grid);
        if g.shape().len() != 3 {
            return Err(AutodiffError::Shape(format!(
                "bilinear grid must be [C,H,W], got {:?}",
                g.shape()
            )));
        }
        let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let (vr, vc) = (self.value(rows), self.value(cols));
        if vr.numel() != vc.numel() {
            return Err(AutodiffError::Shape(
                "bilinear rows/cols length mismatch".into(),
            ));
        }
        let m = vr.numel();
        let mut out = vec![0.0; m * c];
        let gd = g.data();
        for (s, (&r, &cc)) in vr.data().iter().zip(vc.data()).enumerate() {
            for (ri, ci, wt) in corner_weights(r, cc) {
                if wt == 0.0 || ri < 0 || ci < 0 || ri >= h as i64 || ci >= w as i64 {
                    continue;
                }
                let off = ri as usize * w + ci as usize;
                for ch in 0..c {
                    out[s * c + ch] += wt * gd[ch * h * w + off];
                }
            }
        }
        let t = Tensor::from_vec(vec![m, c], out)?;
        Ok(self.push(t, Step::BilinearSample { grid, rows, cols }))
    }

    /// Attention-style reduction: `samples` is `[k*P, D]` laid out as k
    /// blocks of P rows, `weights` is `[P, k]`; output row p combines sample
    /// rows `j*P + p` with weights `w[p, j]`.
    pub fn weighted_sum_groups(
        &mut self,
        samples: NodeId,
        weights: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (vs, vw) = (self.value(samples), self.value(weights));
        let (p, k) = (vw.lead(), vw.last_dim());
        let d = vs.last_dim();
        if vs.lead() != p * k {
            return Err(AutodiffError::Shape(format!(
                "weighted_sum_groups: samples {:?} vs weights {:?}",
                vs.shape(),
                vw.shape()
            )));
        }
        let mut out = vec![0.0; p * d];
        let (sd, wd) = (vs.data(), vw.data());
        for pi in 0..p {
            for j in 0..k {
                let wt = wd[pi * k + j];
                let srow = &sd[(j * p + pi) * d..(j * p + pi + 1) * d];
                let orow = &mut out[pi * d..(pi + 1) * d];
                for (o, s) in orow.iter_mut().zip(srow) {
                    *o += wt * s;
                }
            }
        }
        let t = Tensor::from_vec(vec![p, d], out)?;
        Ok(self.push(t, Step::WeightedSumGroups { samples, weights }))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, p) = (va.lead(), va.last_dim());
        let q = vb.last_dim();
        if vb.lead() != m {
            return Err(AutodiffError::Shape(format!(
                "concat_cols: {:?} | {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![0.0; m * (p + q)];
        for i in 0..m {
            out[i * (p + q)..i * (p + q) + p].copy_from_slice(&va.data()[i * p..(i + 1) * p]);
            out[i * (p + q) + p..(i + 1) * (p + q)].copy_from_slice(&vb.data()[i * q..(i + 1) * q]);
        }
        let t = Tensor::from_vec(vec![m, p + q], out)?;
        Ok(self.push(t, Step::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Shape("concat_rows of nothing".into()));
        }
        let n = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != n {
                return Err(AutodiffError::Shape(format!(
                    "concat_rows: column mismatch {:?}",
                    v.shape()
                )));
            }
            rows += v.lead();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::from_vec(vec![rows, n], data)?;
        Ok(self.push(t, Step::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        let (m, n) = (v.lead(), v.last_dim());
        if start + len > n {
            return Err(AutodiffError::Shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&v.data()[i * n + start..i * n + start + len]);
        }
        let t = Tensor::from_vec(vec![m, len], out)?;
        Ok(self.push(t, Step::SliceCols { x, start, len }))
    }

    /// Columns of `a` and `b` interleaved pairwise: (a0, b0, a1, b1, ...).
    pub fn interleave_pairs(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_same_shape(a, b, "interleave_pairs")?;
        let (va, vb) = (self.value(a), self.value(b));
        let (m, n) = (va.lead(), va.last_dim());
        let mut out = vec![0.0; m * 2 * n];
        for i in 0..m {
            for j in 0..n {
                out[i * 2 * n + 2 * j] = va.data()[i * n + j];
                out[i * 2 * n + 2 * j + 1] = vb.data()[i * n + j];
            }
        }
        let t = Tensor::from_vec(vec![m, 2 * n], out)?;
        Ok(self.push(t, Step::InterleavePairs(a, b)))
    }

    /// Multiply each channel plane of a `[C,H,W]` grid by a per-channel
    /// scale from a `[C]` vector.
    pub fn scale_channels(&mut self, grid: NodeId, scale: NodeId) -> Result<NodeId, AutodiffError> {
        let (g, s) = (self.value(grid), self.value(scale));
        if g.shape().len() != 3 || s.numel() != g.shape()[0] {
            return Err(AutodiffError::Shape(format!(
                "scale_channels: {:?} by {:?}",
                g.shape(),
                s.shape()
            )));
        }
        let hw = g.shape()[1] * g.shape()[2];
        let mut out = g.data().to_vec();
        for (ch, &sv) in s.data().iter().enumerate() {
            for v in &mut out[ch * hw..(ch + 1) * hw] {
                *v *= sv;
            }
        }
        let t = Tensor::from_vec(g.shape().to_vec(), out)?;
        Ok(self.push(t, Step::ScaleChannels { grid, scale }))
    }

    /// View a `[C,H,W]` grid as `[H*W, C]` pixel rows.
    pub fn chw_to_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(x);
        if v.shape().len() != 3 {
            return Err(AutodiffError::Shape(format!(
                "chw_to_rows wants [C,H,W], got {:?}",
                v.shape()
            )));
        }
        let (c, hw) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = v.data()[ch * hw + p];
            }
        }
        let t = Tensor::from_vec(vec![hw, c], out)?;
        Ok(self.push(t, Step::ChwToRows(x)))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.last_dim();
        if vg.numel() != n || vb.numel() != n {
            return Err(AutodiffError::Shape(format!(
                "layer_norm: {:?} with gain {:?} bias {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let mut out = vx.data().to_vec();
        let (gd, bd) = (vg.data(), vb.data());
        for row in out.chunks_mut(n) {
            let (mean, inv_std) = row_moments(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let t = Tensor::from_vec(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Step::LayerNorm { x, gamma, beta }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Step::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Run reverse-mode accumulation from a scalar seed. Returns one gradient
    /// slot per node (dense; `None` where no gradient flowed).
    pub fn backward(&mut self, seed: NodeId) -> Result<Vec<Option<Tensor>>, AutodiffError> {
        if self.value(seed).numel() != 1 {
            return Err(AutodiffError::NonScalarSeed(
                self.value(seed).shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        let add_into = |grads: &mut [Option<Tensor>], id: NodeId, contrib: Vec<f64>| {
            let slot = &mut grads[id.0];
            match slot {
                Some(t) => {
                    for (o, c) in t.data_mut().iter_mut().zip(&contrib) {
                        *o += c;
                    }
                }
                None => {
                    let shape = self.nodes[id.0].value.shape().to_vec();
                    *slot = Some(Tensor::from_vec(shape, contrib).expect("grad shape"));
                }
            }
        };

        match &self.nodes[i].step {
            Step::Leaf => {}
            Step::Reshape(x) => add_into(grads, *x, g.data().to_vec()),
            Step::Add(a, b) => {
                add_into(grads, *a, g.data().to_vec());
                add_into(grads, *b, g.data().to_vec());
            }
            Step::Sub(a, b) => {
                add_into(grads, *a, g.data().to_vec());
                add_into(grads, *b, g.data().iter().map(|v| -v).collect());
            }
            Step::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                add_into(
                    grads,
                    *a,
                    g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect(),
                );
                add_into(
                    grads,
                    *b,
                    g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect(),
                );
            }
            Step::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                add_into(
                    grads,
                    *a,
                    g.data().iter().zip(vb.data()).map(|(g, y)| g / y).collect(),
                );
                add_into(
                    grads,
                    *b,
                    g.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Step::AffineScalar(x, mul) => {
                add_into(grads, *x, g.data().iter().map(|v| mul * v).collect());
            }
            Step::AddRowVec(x, v) => {
                add_into(grads, *x, g.data().to_vec());
                let n = self.value(*v).numel();
                let mut acc = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (a, r) in acc.iter_mut().zip(row) {
                        *a += r;
                    }
                }
                add_into(grads, *v, acc);
            }
            Step::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.lead(), va.last_dim());
                let n = vb.shape()[1];
                add_into(grads, *a, mm_nt(g.data(), vb.data(), m, n, k));
                add_into(grads, *b, mm_tn(va.data(), g.data(), m, k, n));
            }
            Step::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.lead(), va.last_dim());
                let n = vb.lead();
                add_into(grads, *a, mm_nn(g.data(), vb.data(), m, n, k));
                add_into(grads, *b, mm_tn(g.data(), va.data(), m, n, k));
            }
            Step::Relu(x) => {
                let vx = self.value(*x);
                add_into(
                    grads,
                    *x,
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Step::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                add_into(
                    grads,
                    *x,
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                );
            }
            Step::Exp(x) => {
                let y = &self.nodes[i].value;
                add_into(
                    grads,
                    *x,
                    g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect(),
                );
            }
            Step::LnClamped(x) => {
                let vx = self.value(*x);
                add_into(
                    grads,
                    *x,
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, x)| if *x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect(),
                );
            }
            Step::Abs(x) => {
                let vx = self.value(*x);
                add_into(
                    grads,
                    *x,
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, x)| g * sign(*x))
                        .collect(),
                );
            }
            Step::PowConst(x, e) => {
                let vx = self.value(*x);
                add_into(
                    grads,
                    *x,
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, x)| {
                            if *x == 0.0 {
                                0.0
                            } else {
                                g * e * x.powf(e - 1.0)
                            }
                        })
                        .collect(),
                );
            }
            Step::Sin(x) => {
                let vx = self.value(*x);
                add_into(
                    grads,
                    *x,
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, x)| g * x.cos())
                        .collect(),
                );
            }
            Step::Cos(x) => {
                let vx = self.value(*x);
                add_into(
                    grads,
                    *x,
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, x)| -g * x.sin())
                        .collect(),
                );
            }
            Step::Clamp01(x) => {
                let vx = self.value(*x);
                add_into(
                    grads,
                    *x,
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, x)| if *x > 0.0 && *x < 1.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Step::Softmax(x, axis) => {
                let y = &self.nodes[i].value;
                let dims = y.shape();
                let lane = dims[*axis];
                let inner: usize = dims[*axis + 1..].iter().product();
                let outer: usize = dims[..*axis].iter().product();
                let mut dx = vec![0.0; y.numel()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * lane * inner + ii;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dot += gd[idx] * yd[idx];
                        }
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dx[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                add_into(grads, *x, dx);
            }
            Step::BilinearSample { grid, rows, cols } => {
                let gv = self.value(*grid);
                let (c, h, w) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
                let (vr, vc) = (self.value(*rows), self.value(*cols));
                let mut dgrid = vec![0.0; gv.numel()];
                let mut drows = vec![0.0; vr.numel()];
                let mut dcols = vec![0.0; vc.numel()];
                let gd = gv.data();
                for (s, (&r, &cc)) in vr.data().iter().zip(vc.data()).enumerate() {
                    let gout = &g.data()[s * c..(s + 1) * c];
                    let r0 = r.floor();
                    let c0 = cc.floor();
                    let (fr, fc) = (r - r0, cc - c0);
                    // corners: (r0,c0) (r0,c1) (r1,c0) (r1,c1)
                    let weights = [
                        (1.0 - fr) * (1.0 - fc),
                        (1.0 - fr) * fc,
                        fr * (1.0 - fc),
                        fr * fc,
                    ];
                    let dw_dr = [-(1.0 - fc), -fc, 1.0 - fc, fc];
                    let dw_dc = [-(1.0 - fr), 1.0 - fr, -fr, fr];
                    for (corner, ((wt, dr), dc)) in
                        weights.iter().zip(dw_dr).zip(dw_dc).enumerate()
                    {
                        let ri = r0 as i64 + (corner as i64 >> 1);
                        let ci = c0 as i64 + (corner as i64 & 1);
                        if ri < 0 || ci < 0 || ri >= h as i64 || ci >= w as i64 {
                            continue;
                        }
                        let off = ri as usize * w + ci as usize;
                        for (ch, go) in gout.iter().enumerate() {
                            let gval = gd[ch * h * w + off];
                            dgrid[ch * h * w + off] += wt * go;
                            drows[s] += dr * gval * go;
                            dcols[s] += dc * gval * go;
                        }
                    }
                }
                add_into(grads, *grid, dgrid);
                add_into(grads, *rows, drows);
                add_into(grads, *cols, dcols);
            }
            Step::WeightedSumGroups { samples, weights } => {
                let (vs, vw) = (self.value(*samples), self.value(*weights));
                let (p, k) = (vw.lead(), vw.last_dim());
                let d = vs.last_dim();
                let mut ds = vec![0.0; vs.numel()];
                let mut dw = vec![0.0; vw.numel()];
                let (sd, wd, gd) = (vs.data(), vw.data(), g.data());
                for pi in 0..p {
                    let grow = &gd[pi * d..(pi + 1) * d];
                    for j in 0..k {
                        let wt = wd[pi * k + j];
                        let base = (j * p + pi) * d;
                        let mut dot = 0.0;
                        for t in 0..d {
                            ds[base + t] += wt * grow[t];
                            dot += sd[base + t] * grow[t];
                        }
                        dw[pi * k + j] += dot;
                    }
                }
                add_into(grads, *samples, ds);
                add_into(grads, *weights, dw);
            }
            Step::ConcatCols(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, p, q) = (va.lead(), va.last_dim(), vb.last_dim());
                let mut da = vec![0.0; va.numel()];
                let mut db = vec![0.0; vb.numel()];
                for i2 in 0..m {
                    da[i2 * p..(i2 + 1) * p]
                        .copy_from_slice(&g.data()[i2 * (p + q)..i2 * (p + q) + p]);
                    db[i2 * q..(i2 + 1) * q]
                        .copy_from_slice(&g.data()[i2 * (p + q) + p..(i2 + 1) * (p + q)]);
                }
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Step::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    add_into(grads, p, g.data()[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Step::SliceCols { x, start, len } => {
                let vx = self.value(*x);
                let (m, n) = (vx.lead(), vx.last_dim());
                let mut dx = vec![0.0; vx.numel()];
                for i2 in 0..m {
                    dx[i2 * n + start..i2 * n + start + len]
                        .copy_from_slice(&g.data()[i2 * len..(i2 + 1) * len]);
                }
                add_into(grads, *x, dx);
            }
            Step::InterleavePairs(a, b) => {
                let va = self.value(*a);
                let (m, n) = (va.lead(), va.last_dim());
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; m * n];
                for i2 in 0..m {
                    for j in 0..n {
                        da[i2 * n + j] = g.data()[i2 * 2 * n + 2 * j];
                        db[i2 * n + j] = g.data()[i2 * 2 * n + 2 * j + 1];
                    }
                }
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Step::ScaleChannels { grid, scale } => {
                let (gv, sv) = (self.value(*grid), self.value(*scale));
                let hw = gv.shape()[1] * gv.shape()[2];
                let mut dgrid = vec![0.0; gv.numel()];
                let mut dscale = vec![0.0; sv.numel()];
                for (ch, &s) in sv.data().iter().enumerate() {
                    let gr = &g.data()[ch * hw..(ch + 1) * hw];
                    let xr = &gv.data()[ch * hw..(ch + 1) * hw];
                    let dr = &mut dgrid[ch * hw..(ch + 1) * hw];
                    let mut dot = 0.0;
                    for ((d, g2), x) in dr.iter_mut().zip(gr).zip(xr) {
                        *d += g2 * s;
                        dot += g2 * x;
                    }
                    dscale[ch] += dot;
                }
                add_into(grads, *grid, dgrid);
                add_into(grads, *scale, dscale);
            }
            Step::ChwToRows(x) => {
                let vx = self.value(*x);
                let (c, hw) = (vx.shape()[0], vx.shape()[1] * vx.shape()[2]);
                let mut dx = vec![0.0; vx.numel()];
                for ch in 0..c {
                    for p in 0..hw {
                        dx[ch * hw + p] = g.data()[p * c + ch];
                    }
                }
                add_into(grads, *x, dx);
            }
            Step::LayerNorm { x, gamma, beta } => {
                let (vx, vg) = (self.value(*x), self.value(*gamma));
                let n = vx.last_dim();
                let m = vx.lead();
                let mut dx = vec![0.0; vx.numel()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let (xd, gd2, gd) = (vx.data(), vg.data(), g.data());
                for r in 0..m {
                    let xrow = &xd[r * n..(r + 1) * n];
                    let grow = &gd[r * n..(r + 1) * n];
                    let (mean, inv_std) = row_moments(xrow);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let dxhat = grow[j] * gd2[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let dxhat = grow[j] * gd2[j];
                        dx[r * n + j] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                add_into(grads, *x, dx);
                add_into(grads, *gamma, dgamma);
                add_into(grads, *beta, dbeta);
            }
            Step::SumAll(x) => {
                let n = self.value(*x).numel();
                add_into(grads, *x, vec![g.data()[0]; n]);
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + 1e-5).sqrt())
}

fn corner_weights(r: f64, c: f64) -> [(i64, i64, f64); 4] {
    let r0 = r.floor();
    let c0 = c.floor();
    let (fr, fc) = (r - r0, c - c0);
    let (r0, c0) = (r0 as i64, c0 as i64);
    [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1, (1.0 - fr) * fc),
        (r0 + 1, c0, fr * (1.0 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ]
}

/// Work size (in multiply-adds) above which matmuls split rows across the
/// worker pool. Each output element is still produced by one sequential dot
/// product, so results are bit-identical at any worker count.
const PAR_FLOPS: usize = 1 << 20;

pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && threads::workers() > 1 {
        threads::pool().install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
                row(i, orow);
            });
        });
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
    out
}

pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_FLOPS && threads::workers() > 1 {
        threads::pool().install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
                row(i, orow);
            });
        });
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
    out
}

/// a^T b for a `[m,k]`, b `[m,n]` -> `[k,n]`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let row = |i: usize, orow: &mut [f64]| {
        for r in 0..m {
            let av = a[r * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[r * n..(r + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && threads::workers() > 1 {
        threads::pool().install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
                row(i, orow);
            });
        });
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
    out
}
