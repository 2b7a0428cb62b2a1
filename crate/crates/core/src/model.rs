//! The full detector: every module wired into one differentiable graph.
//!
//! Per scene and view, the pixel-wise head predicts surface depth, the
//! object-wise head refines it into center predictions through temporal
//! offset sampling, the configured position-embedding variant turns those
//! predictions (or the raw frustum) into key-side embeddings, and the decoder
//! attends over all views' features to emit detections. Losses: masked L1 on
//! both depth kinds, depth-aware focal classification and L1 box regression
//! under Hungarian assignment, combined with the configured balance weights.

use crate::autodiff::{
    AdamConfig, AutodiffError, LinNodes, NodeId, ParamId, ParamStore, Tape, Tensor,
    xavier_uniform,
};
use crate::decoder::{
    assign_targets, classification_targets, decode_detections, decoder_forward_node, dfl_node,
    Assignment, DecoderError, DecoderLayerNodes, DecoderNodes, Detection, DflParams, LnNodes,
    LossWeights, gt_box_params,
};
use crate::depthnet::{
    ode_embedding_node, ode_predict_node, pde_forward_node, reference_points_node, DepthConfig,
    OdeNodes, PdeNodes, SampleFrame,
};
use crate::geom::PerceptionRange;
use crate::posembed::{ope_node, pe3d_node, point_pe_node, ray_pe_node, PeMlpNodes, PosEmbedError};
use crate::synthscene::SceneRecord;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    PosEmbed(#[from] PosEmbedError),
    #[error("scene does not match model config: {0}")]
    SceneMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeVariant {
    Ray,
    Point,
    Object,
}

impl PeVariant {
    pub fn name(&self) -> &'static str {
        match self {
            PeVariant::Ray => "ray",
            PeVariant::Point => "point",
            PeVariant::Object => "object",
        }
    }

    pub fn parse(s: &str) -> Option<PeVariant> {
        match s {
            "ray" => Some(PeVariant::Ray),
            "point" => Some(PeVariant::Point),
            "object" => Some(PeVariant::Object),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_views: usize,
    pub classes: usize,
    pub dim: usize,
    pub layers: usize,
    pub queries: usize,
    pub k_offsets: usize,
    pub head_hidden: usize,
    pub pe_variant: PeVariant,
    pub pe_axis_dim: usize,
    pub ray_candidates: usize,
    pub depth: DepthConfig,
    pub range: PerceptionRange,
    pub dfl: DflParams,
    pub weights: LossWeights,
}

#[derive(Clone, Copy)]
struct LinIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

struct LayerIds {
    self_q: LinIds,
    self_k: LinIds,
    self_v: LinIds,
    self_o: LinIds,
    cross_q: LinIds,
    cross_o: LinIds,
    ffn1: LinIds,
    ffn2: LinIds,
    ln1: LnIds,
    ln2: LnIds,
    ln3: LnIds,
}

struct ModelIds {
    pde_kmod: LinIds,
    pde_l1: LinIds,
    pde_l2: LinIds,
    ode_offsets: LinIds,
    ode_attn: LinIds,
    ode_phi: LinIds,
    ode_ffn1: LinIds,
    ode_ffn2: LinIds,
    pe_l1: LinIds,
    pe_l2: LinIds,
    qpe_l1: LinIds,
    qpe_l2: LinIds,
    inproj: LinIds,
    layers: Vec<LayerIds>,
    cls: LinIds,
    boxes: LinIds,
    query_feat: ParamId,
    query_anchor: ParamId,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    ids: ModelIds,
}

fn register_linear(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    inp: usize,
    out: usize,
    bias_fill: f64,
) -> LinIds {
    let mut rng = crate::autodiff::nn_init_rng(seed, name);
    let w = store.register(&format!("{name}.w"), xavier_uniform(&mut rng, inp, out));
    let b = store.register(&format!("{name}.b"), Tensor::filled(vec![out], bias_fill));
    LinIds { w, b }
}

fn register_ln(store: &mut ParamStore, name: &str, dim: usize) -> LnIds {
    let g = store.register(&format!("{name}.g"), Tensor::filled(vec![dim], 1.0));
    let b = store.register(&format!("{name}.b"), Tensor::zeros(vec![dim]));
    LnIds { g, b }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let s = seed;
        let c = cfg.channels;
        let dim = cfg.dim;
        let raw_pe = match cfg.pe_variant {
            PeVariant::Ray => cfg.ray_candidates * 3 * cfg.pe_axis_dim,
            _ => 3 * cfg.pe_axis_dim,
        };
        let ids = ModelIds {
            pde_kmod: register_linear(&mut store, s, "pde.kmod", 4, c, 0.0),
            pde_l1: register_linear(&mut store, s, "pde.l1", c, cfg.head_hidden, 0.0),
            pde_l2: register_linear(
                &mut store,
                s,
                "pde.l2",
                cfg.head_hidden,
                1 + cfg.depth.n_bins,
                0.0,
            ),
            ode_offsets: register_linear(&mut store, s, "ode.offsets", c, 3 * cfg.k_offsets, 0.0),
            ode_attn: register_linear(&mut store, s, "ode.attn", c, cfg.k_offsets, 0.0),
            ode_phi: register_linear(&mut store, s, "ode.phi", 2 * c, dim, 0.0),
            ode_ffn1: register_linear(&mut store, s, "ode.ffn1", dim + c, cfg.head_hidden, 0.0),
            ode_ffn2: register_linear(&mut store, s, "ode.ffn2", cfg.head_hidden, 3, 0.0),
            pe_l1: register_linear(&mut store, s, "pe.l1", raw_pe, 4 * dim, 0.0),
            pe_l2: register_linear(&mut store, s, "pe.l2", 4 * dim, dim, 0.0),
            qpe_l1: register_linear(&mut store, s, "qpe.l1", 3 * cfg.pe_axis_dim, 4 * dim, 0.0),
            qpe_l2: register_linear(&mut store, s, "qpe.l2", 4 * dim, dim, 0.0),
            inproj: register_linear(&mut store, s, "inproj", c, dim, 0.0),
            layers: (0..cfg.layers)
                .map(|i| LayerIds {
                    self_q: register_linear(&mut store, s, &format!("dec{i}.self_q"), dim, dim, 0.0),
                    self_k: register_linear(&mut store, s, &format!("dec{i}.self_k"), dim, dim, 0.0),
                    self_v: register_linear(&mut store, s, &format!("dec{i}.self_v"), dim, dim, 0.0),
                    self_o: register_linear(&mut store, s, &format!("dec{i}.self_o"), dim, dim, 0.0),
                    cross_q: register_linear(
                        &mut store,
                        s,
                        &format!("dec{i}.cross_q"),
                        dim,
                        dim,
                        0.0,
                    ),
                    cross_o: register_linear(
                        &mut store,
                        s,
                        &format!("dec{i}.cross_o"),
                        dim,
                        dim,
                        0.0,
                    ),
                    ffn1: register_linear(&mut store, s, &format!("dec{i}.ffn1"), dim, 4 * dim, 0.0),
                    ffn2: register_linear(&mut store, s, &format!("dec{i}.ffn2"), 4 * dim, dim, 0.0),
                    ln1: register_ln(&mut store, &format!("dec{i}.ln1"), dim),
                    ln2: register_ln(&mut store, &format!("dec{i}.ln2"), dim),
                    ln3: register_ln(&mut store, &format!("dec{i}.ln3"), dim),
                })
                .collect(),
            // classification bias starts low so early confidences are small
            cls: register_linear(&mut store, s, "head.cls", dim, cfg.classes, -2.0),
            boxes: register_linear(&mut store, s, "head.box", dim, 8, 0.0),
            query_feat: {
                let mut rng = crate::autodiff::nn_init_rng(s, "query.feat");
                store.register("query.feat", xavier_uniform(&mut rng, cfg.queries, dim))
            },
            query_anchor: {
                let mut rng = crate::autodiff::nn_init_rng(s, "query.anchor");
                let t = xavier_uniform(&mut rng, cfg.queries, 3).map(|v| v * 8.0);
                store.register("query.anchor", t)
            },
        };
        Model { cfg, store, ids }
    }
}

/// Losses of one training step, as plain values for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub total: f64,
    pub pde: f64,
    pub ode: f64,
    pub dfl: f64,
    pub reg: f64,
}

/// Everything one forward pass over a scene produces.
pub struct SceneForward {
    pub tape: Tape,
    pub total_loss: Option<NodeId>,
    pub losses: StepLosses,
    pub detections: Vec<Detection>,
    pub assignment: Option<Assignment>,
    /// Final-layer cross-attention weights `[queries, n_views * H * W]`.
    pub attention: Tensor,
    /// Per-view pixel-wise depth predictions.
    pub pde_depth: Vec<Vec<f64>>,
    /// Per-view object-wise depth predictions.
    pub ode_depth: Vec<Vec<f64>>,
    pub ode_center: Vec<Vec<[f64; 2]>>,
}

struct Staged<'a> {
    nodes: &'a [NodeId],
}

impl Staged<'_> {
    fn lin(&self, ids: LinIds) -> LinNodes {
        LinNodes {
            w: self.nodes[ids.w.index()],
            b: self.nodes[ids.b.index()],
        }
    }

    fn ln(&self, ids: LnIds) -> LnNodes {
        LnNodes {
            gamma: self.nodes[ids.g.index()],
            beta: self.nodes[ids.b.index()],
        }
    }

    fn id(&self, id: ParamId) -> NodeId {
        self.nodes[id.index()]
    }
}

impl Model {
    fn check_scene(&self, rec: &SceneRecord) -> Result<(), ModelError> {
        let v = &rec.rendered[1];
        if v.len() != self.cfg.n_views {
            return Err(ModelError::SceneMismatch(format!(
                "scene has {} views, model wants {}",
                v.len(),
                self.cfg.n_views
            )));
        }
        let shape = v[0].features.shape();
        if shape != [self.cfg.channels, self.cfg.height, self.cfg.width] {
            return Err(ModelError::SceneMismatch(format!(
                "feature shape {shape:?} vs config [{}, {}, {}]",
                self.cfg.channels, self.cfg.height, self.cfg.width
            )));
        }
        Ok(())
    }

    /// Build the full graph for one scene. With `with_loss` the tape ends in
    /// a scalar total-loss node ready for backward.
    pub fn forward_scene(
        &self,
        rec: &SceneRecord,
        staged_nodes: &[NodeId],
        tape: &mut Tape,
        with_loss: bool,
    ) -> Result<SceneForward, ModelError> {
        self.check_scene(rec)?;
        let cfg = &self.cfg;
        let st = Staged {
            nodes: staged_nodes,
        };
        let hw = cfg.height * cfg.width;
        let cams_now = &rec.scene.cameras[1];
        let cams_prev = &rec.scene.cameras[0];

        let pde_nodes = PdeNodes {
            kmod: st.lin(self.ids.pde_kmod),
            l1: st.lin(self.ids.pde_l1),
            l2: st.lin(self.ids.pde_l2),
        };
        let ode_nodes = OdeNodes {
            offsets: st.lin(self.ids.ode_offsets),
            attn: st.lin(self.ids.ode_attn),
            phi: st.lin(self.ids.ode_phi),
            ffn1: st.lin(self.ids.ode_ffn1),
            ffn2: st.lin(self.ids.ode_ffn2),
        };
        let pe_mlp = PeMlpNodes {
            l1: st.lin(self.ids.pe_l1),
            l2: st.lin(self.ids.pe_l2),
        };

        let mut keys_per_view = Vec::with_capacity(cfg.n_views);
        let mut values_per_view = Vec::with_capacity(cfg.n_views);
        let mut pde_depth_vals = Vec::with_capacity(cfg.n_views);
        let mut ode_depth_vals = Vec::with_capacity(cfg.n_views);
        let mut ode_center_vals = Vec::with_capacity(cfg.n_views);
        // per-view loss accumulators: (sum node, element count)
        let mut pde_terms: Vec<(NodeId, usize)> = Vec::new();
        let mut ode_depth_terms: Vec<(NodeId, usize)> = Vec::new();
        let mut ode_center_terms: Vec<(NodeId, usize)> = Vec::new();

        for v in 0..cfg.n_views {
            let view_now = &rec.rendered[1][v];
            let view_prev = &rec.rendered[0][v];
            let grid_now = tape.leaf(view_now.features.clone());
            let grid_prev = tape.leaf(view_prev.features.clone());
            let rows = tape.chw_to_rows(grid_now)?;

            let depth = pde_forward_node(tape, grid_now, &cams_now[v], &cfg.depth, &pde_nodes)?;
            pde_depth_vals.push(tape.value(depth).data().to_vec());

            let refs = reference_points_node(tape, depth, &cams_now[v], cfg.height, cfg.width)?;
            let (embed, _attn) = ode_embedding_node(
                tape,
                rows,
                refs,
                &SampleFrame {
                    grid: Some(grid_now),
                    cam: &cams_now[v],
                },
                &SampleFrame {
                    grid: Some(grid_prev),
                    cam: &cams_prev[v],
                },
                &cams_now[v],
                cfg.k_offsets,
                &ode_nodes,
            )?;
            let (obj_depth, obj_center) = ode_predict_node(
                tape,
                embed,
                rows,
                &cfg.depth,
                cfg.height,
                cfg.width,
                &ode_nodes,
            )?;
            ode_depth_vals.push(tape.value(obj_depth).data().to_vec());
            ode_center_vals.push(
                tape.value(obj_center)
                    .data()
                    .chunks_exact(2)
                    .map(|c| [c[0], c[1]])
                    .collect(),
            );

            let pe = match cfg.pe_variant {
                PeVariant::Object => ope_node(
                    tape,
                    obj_center,
                    obj_depth,
                    &cams_now[v],
                    &cfg.range,
                    cfg.pe_axis_dim,
                    &pe_mlp,
                )?,
                PeVariant::Point => point_pe_node(
                    tape,
                    depth,
                    &cams_now[v],
                    &cfg.range,
                    cfg.height,
                    cfg.width,
                    cfg.pe_axis_dim,
                    &pe_mlp,
                )?,
                PeVariant::Ray => ray_pe_node(
                    tape,
                    &cams_now[v],
                    &cfg.range,
                    &cfg.depth,
                    cfg.ray_candidates,
                    cfg.height,
                    cfg.width,
                    cfg.pe_axis_dim,
                    &pe_mlp,
                )?,
            };
            let proj = tape.linear_n(rows, st.lin(self.ids.inproj))?;
            let key = tape.add(proj, pe)?;
            keys_per_view.push(key);
            values_per_view.push(proj);

            if with_loss {
                // pixel-wise depth: L1 on masked-valid surface targets
                let valid_count = view_now.surf_valid.iter().filter(|&&b| b).count();
                if valid_count > 0 {
                    let mask: Vec<f64> =
                        view_now.surf_valid.iter().map(|&b| b as u8 as f64).collect();
                    let tgt = tape.leaf(Tensor::from_vec(
                        vec![hw, 1],
                        view_now.surf_depth.clone(),
                    )?);
                    let mask = tape.leaf(Tensor::from_vec(vec![hw, 1], mask)?);
                    let diff = tape.sub(depth, tgt)?;
                    let diff = tape.abs(diff);
                    let masked = tape.mul(diff, mask)?;
                    pde_terms.push((tape.sum_all(masked), valid_count));
                }
                // object-wise: L1 on center depth and center offset at
                // object-assigned pixels
                let assigned: Vec<f64> = view_now
                    .assign
                    .iter()
                    .map(|&a| if a > 0 { 1.0 } else { 0.0 })
                    .collect();
                let a_count = assigned.iter().filter(|&&a| a > 0.0).count();
                if a_count > 0 {
                    let tgt_d = tape.leaf(Tensor::from_vec(
                        vec![hw, 1],
                        view_now.center_depth.clone(),
                    )?);
                    let mask_d = tape.leaf(Tensor::from_vec(vec![hw, 1], assigned.clone())?);
                    let diff = tape.sub(obj_depth, tgt_d)?;
                    let diff = tape.abs(diff);
                    let masked = tape.mul(diff, mask_d)?;
                    ode_depth_terms.push((tape.sum_all(masked), a_count));

                    let tgt_c: Vec<f64> = view_now
                        .center_px
                        .iter()
                        .flat_map(|c| [c[0], c[1]])
                        .collect();
                    let mask_c: Vec<f64> =
                        assigned.iter().flat_map(|&a| [a, a]).collect();
                    let tgt_c = tape.leaf(Tensor::from_vec(vec![hw, 2], tgt_c)?);
                    let mask_c = tape.leaf(Tensor::from_vec(vec![hw, 2], mask_c)?);
                    let diff = tape.sub(obj_center, tgt_c)?;
                    let diff = tape.abs(diff);
                    let masked = tape.mul(diff, mask_c)?;
                    ode_center_terms.push((tape.sum_all(masked), 2 * a_count));
                }
            }
        }

        let keys = tape.concat_rows(&keys_per_view)?;
        let values = tape.concat_rows(&values_per_view)?;

        // queries: learned features plus an embedding of the learned anchors
        let anchor_node = st.id(self.ids.query_anchor);
        let anchor01 = tape.sigmoid(anchor_node);
        let qraw = pe3d_node(tape, anchor01, cfg.pe_axis_dim)?;
        let qh = tape.linear_n(qraw, st.lin(self.ids.qpe_l1))?;
        let qh = tape.relu(qh);
        let qpos = tape.linear_n(qh, st.lin(self.ids.qpe_l2))?;
        let queries = tape.add(st.id(self.ids.query_feat), qpos)?;

        let dec_nodes = DecoderNodes {
            layers: self
                .ids
                .layers
                .iter()
                .map(|l| DecoderLayerNodes {
                    self_q: st.lin(l.self_q),
                    self_k: st.lin(l.self_k),
                    self_v: st.lin(l.self_v),
                    self_o: st.lin(l.self_o),
                    cross_q: st.lin(l.cross_q),
                    cross_o: st.lin(l.cross_o),
                    ffn1: st.lin(l.ffn1),
                    ffn2: st.lin(l.ffn2),
                    ln1: st.ln(l.ln1),
                    ln2: st.ln(l.ln2),
                    ln3: st.ln(l.ln3),
                })
                .collect(),
            cls: st.lin(self.ids.cls),
            boxes: st.lin(self.ids.boxes),
        };
        let (cls_logits, box_out, attn) =
            decoder_forward_node(tape, queries, keys, values, &dec_nodes)?;

        let detections = decode_detections(
            tape.value(cls_logits),
            tape.value(box_out),
            self.store.get(self.ids.query_anchor),
            &cfg.range,
        );
        let attention = tape.value(attn).clone();

        if !with_loss {
            return Ok(SceneForward {
                tape: std::mem::take(tape),
                total_loss: None,
                losses: StepLosses::default(),
                detections,
                assignment: None,
                attention,
                pde_depth: pde_depth_vals,
                ode_depth: ode_depth_vals,
                ode_center: ode_center_vals,
            });
        }

        let gts = &rec.scene.boxes[1];
        let assignment = assign_targets(&detections, gts, &cfg.weights, &cfg.dfl, &cfg.range)?;
        let norm = gts.len().max(1) as f64;

        // classification: depth-aware focal loss over every (query, class)
        let probs = tape.sigmoid(cls_logits);
        let (t, s) = classification_targets(&detections, gts, &assignment, cfg.classes);
        let dfl_elems = dfl_node(tape, probs, &t, &s, &cfg.dfl)?;
        let dfl_sum = tape.sum_all(dfl_elems);
        let l_dfl = tape.affine(dfl_sum, 1.0 / norm, 0.0);

        // regression: L1 over the 8 box parameters of matched pairs
        let delta = tape.slice_cols(box_out, 0, 3)?;
        let center_pre = tape.add(anchor_node, delta)?;
        let center01 = tape.sigmoid(center_pre);
        let rest = tape.slice_cols(box_out, 3, 5)?;
        let pred8 = tape.concat_cols(center01, rest)?;
        let mut tgt8 = vec![0.0; cfg.queries * 8];
        let mut mask8 = vec![0.0; cfg.queries * 8];
        for &(q, g) in &assignment.pairs {
            let params = gt_box_params(&gts[g], &cfg.range);
            tgt8[q * 8..(q + 1) * 8].copy_from_slice(&params);
            mask8[q * 8..(q + 1) * 8].fill(1.0);
        }
        let tgt8 = tape.leaf(Tensor::from_vec(vec![cfg.queries, 8], tgt8)?);
        let mask8 = tape.leaf(Tensor::from_vec(vec![cfg.queries, 8], mask8)?);
        let diff = tape.sub(pred8, tgt8)?;
        let diff = tape.abs(diff);
        let masked = tape.mul(diff, mask8)?;
        let reg_sum = tape.sum_all(masked);
        let l_reg = tape.affine(reg_sum, 1.0 / norm, 0.0);

        let mean_of = |tape: &mut Tape, terms: &[(NodeId, usize)]| -> Result<NodeId, ModelError> {
            let count: usize = terms.iter().map(|t| t.1).sum();
            if count == 0 {
                return Ok(tape.leaf(Tensor::scalar(0.0)));
            }
            let mut acc = terms[0].0;
            for &(t, _) in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Ok(tape.affine(acc, 1.0 / count as f64, 0.0))
        };
        let l_pde = mean_of(tape, &pde_terms)?;
        let ode_d = mean_of(tape, &ode_depth_terms)?;
        let ode_c = mean_of(tape, &ode_center_terms)?;
        let l_ode = tape.add(ode_d, ode_c)?;

        let w = &cfg.weights;
        let wp = tape.affine(l_pde, w.pde, 0.0);
        let wo = tape.affine(l_ode, w.ode, 0.0);
        let wd = tape.affine(l_dfl, w.dfl, 0.0);
        let wr = tape.affine(l_reg, w.reg, 0.0);
        let sum1 = tape.add(wp, wo)?;
        let sum2 = tape.add(wd, wr)?;
        let total = tape.add(sum1, sum2)?;

        let losses = StepLosses {
            total: tape.value(total).item(),
            pde: tape.value(l_pde).item(),
            ode: tape.value(l_ode).item(),
            dfl: tape.value(l_dfl).item(),
            reg: tape.value(l_reg).item(),
        };

        Ok(SceneForward {
            tape: std::mem::take(tape),
            total_loss: Some(total),
            losses,
            detections,
            assignment: Some(assignment),
            attention,
            pde_depth: pde_depth_vals,
            ode_depth: ode_depth_vals,
            ode_center: ode_center_vals,
        })
    }

    /// Convenience forward without gradients or losses.
    pub fn infer_scene(&self, rec: &SceneRecord) -> Result<SceneForward, ModelError> {
        let mut tape = Tape::new();
        let staged = self.store.stage(&mut tape);
        self.forward_scene(rec, &staged, &mut tape, false)
    }

    /// One optimization step on one scene.
    pub fn train_step(
        &mut self,
        rec: &SceneRecord,
        adam: &AdamConfig,
    ) -> Result<StepLosses, ModelError> {
        let mut tape = Tape::new();
        let staged = self.store.stage(&mut tape);
        let mut fwd = self.forward_scene(rec, &staged, &mut tape, true)?;
        let total = fwd.total_loss.expect("training forward builds the loss");
        let grads = fwd.tape.backward(total)?;
        self.store.adam_step(adam, &staged, &grads);
        Ok(fwd.losses)
    }
}
