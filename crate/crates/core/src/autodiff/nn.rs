use super::{AutodiffError, NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

/// Weight and bias of one affine layer, `w` is `[in, out]`, `b` is `[out]`.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn zeros(inp: usize, out: usize) -> Self {
        LinearParams {
            w: Tensor::zeros(vec![inp, out]),
            b: Tensor::zeros(vec![out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Stack of affine layers with an activation between them (never after the
/// last layer).
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<LinearParams>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<LinearParams>, activation: Activation) -> Result<Self, AutodiffError> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(AutodiffError::Shape(format!(
                    "mlp layer chain breaks: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(MlpParams { layers, activation })
    }
}

/// Node ids of one staged linear layer.
#[derive(Debug, Clone, Copy)]
pub struct LinNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl LinNodes {
    /// Put a value-level layer onto a tape (used by the value-level wrappers;
    /// the model stages layers through its parameter store instead).
    pub fn stage(tape: &mut Tape, params: &LinearParams) -> LinNodes {
        LinNodes {
            w: tape.leaf(params.w.clone()),
            b: tape.leaf(params.b.clone()),
        }
    }
}

impl Tape {
    pub fn linear_n(&mut self, x: NodeId, l: LinNodes) -> Result<NodeId, AutodiffError> {
        self.linear(x, l.w, l.b)
    }
}

/// Xavier/Glorot uniform initialization for a `[in, out]` weight matrix.
pub fn xavier_uniform(rng: &mut ChaCha12Rng, inp: usize, out: usize) -> Tensor {
    let limit = (6.0 / (inp + out) as f64).sqrt();
    let data = (0..inp * out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(vec![inp, out], data).expect("xavier shape")
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order; indexes the vectors returned by
    /// [`ParamStore::stage`] and [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

struct ParamEntry {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named registry of trainable tensors plus Adam state. Parameters keep
/// their registration order, which fixes update order, checkpoint layout,
/// and therefore bit-level reproducibility.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let shape = value.shape().to_vec();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            value,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Put every parameter on a tape, in registration order. Element i of
    /// the result is the node id of parameter i.
    pub fn stage(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect()
    }

    /// One Adam step from the gradients of a completed backward pass.
    /// `staged` must be the node ids returned by [`ParamStore::stage`] for
    /// this tape. Missing gradients are treated as zero.
    pub fn adam_step(
        &mut self,
        cfg: &AdamConfig,
        staged: &[NodeId],
        grads: &[Option<Tensor>],
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (entry, node) in self.entries.iter_mut().zip(staged) {
            let Some(g) = grads[node.index()].as_ref() else {
                continue;
            };
            let gd = g.data();
            let md = entry.m.data_mut();
            let vd = entry.v.data_mut();
            let pd = entry.value.data_mut();
            for i in 0..gd.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * pd[i]);
            }
        }
    }

    /// Export (name, tensor) pairs in registration order.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrite parameter values from (name, tensor) pairs. Every entry must
    /// exist with a matching shape; unknown or missing names are errors.
    pub fn load(&mut self, values: &[(String, Tensor)]) -> Result<(), AutodiffError> {
        if values.len() != self.entries.len() {
            return Err(AutodiffError::Shape(format!(
                "checkpoint has {} parameters, model has {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (name, tensor) in values {
            let Some(&i) = self.index.get(name) else {
                return Err(AutodiffError::Shape(format!("unknown parameter {name}")));
            };
            if self.entries[i].value.shape() != tensor.shape() {
                return Err(AutodiffError::Shape(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    tensor.shape(),
                    self.entries[i].value.shape()
                )));
            }
            self.entries[i].value = tensor.clone();
        }
        Ok(())
    }
}

/// Seeded generator for parameter initialization. Folding the name into the
/// seed makes each tensor's draw independent of registration order.
pub(crate) fn init_rng(seed: u64, name: &str) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha12Rng::seed_from_u64(h)
}
