//! Mixture of GNN experts that predicts the spread of a seed vector.
//!
//! Expert `i` (zero-based) runs `i + 1` rounds of message passing over the
//! union of all layers, starting from per-node features `(x_v, deg_v)`, and
//! ends in a per-node sigmoid. A noisy top-m gate driven by the raw seed
//! vector mixes the selected experts; the predicted spread is the sum of the
//! mixed node probabilities (soft) or the count above a threshold (hard).
//!
//! Each expert only sees the samples routed to it, so a batch costs roughly
//! `m / C` of a dense mixture.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, top_m_mask, write_checkpoint, Adam, ParamStore, Tape, Tensor, Var};
use crate::error::{RemError, Result};
use crate::graph::MultiplexGraph;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Gcn,
    Gat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmoeConfig {
    pub num_experts: usize,
    pub top_m: usize,
    pub hidden: usize,
    pub aggregator: Aggregator,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Threshold of the hard spread count.
    pub zeta: f64,
    /// Clamp expert weights to be non-negative after every update.
    pub monotone: bool,
    /// Samples per tape when a batch is split across workers.
    pub chunk: usize,
}

impl Default for PmoeConfig {
    fn default() -> Self {
        PmoeConfig {
            num_experts: 8,
            top_m: 2,
            hidden: 32,
            aggregator: Aggregator::Gcn,
            dropout: 0.2,
            lr: 1e-3,
            batch_size: 32,
            epochs: 200,
            zeta: 0.5,
            monotone: false,
            chunk: 8,
        }
    }
}

/// Message-passing topology of the union graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub num_nodes: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    inv_in_degree: Vec<f64>,
    degree_feature: Vec<f64>,
}

impl Topology {
    pub fn new(g: &MultiplexGraph) -> Self {
        let union = g.flatten_union();
        let n = g.num_nodes();
        let src = union.edges().iter().map(|e| e.src as usize).collect();
        let dst = union.edges().iter().map(|e| e.dst as usize).collect();
        let inv_in_degree = union
            .in_degree()
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
            .collect();
        let out: Vec<usize> = (0..n).map(|v| union.out_degree(v)).collect();
        let max = out.iter().copied().max().unwrap_or(0).max(1) as f64;
        Topology {
            num_nodes: n,
            src,
            dst,
            inv_in_degree,
            degree_feature: out.iter().map(|&d| d as f64 / max).collect(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Edge and normalisation tensors for `s` stacked copies of the graph.
    fn batched(&self, s: usize) -> BatchGraph {
        let n = self.num_nodes;
        let e = self.src.len();
        let mut src = Vec::with_capacity(s * e);
        let mut dst = Vec::with_capacity(s * e);
        for k in 0..s {
            src.extend(self.src.iter().map(|&u| k * n + u));
            dst.extend(self.dst.iter().map(|&v| k * n + v));
        }
        let inv: Vec<f64> = (0..s).flat_map(|_| self.inv_in_degree.iter().copied()).collect();
        let mut feat = vec![0.0; s * n * 2];
        for k in 0..s {
            for v in 0..n {
                feat[(k * n + v) * 2 + 1] = self.degree_feature[v];
            }
        }
        BatchGraph {
            rows: s * n,
            src: Rc::new(src),
            dst: Rc::new(dst),
            inv_in_degree: Tensor::matrix(s * n, 1, inv).unwrap(),
            degree_feature: Tensor::matrix(s * n, 2, feat).unwrap(),
        }
    }
}

struct BatchGraph {
    rows: usize,
    src: Rc<Vec<usize>>,
    dst: Rc<Vec<usize>>,
    inv_in_degree: Tensor,
    degree_feature: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIdx {
    w_self: usize,
    w_nb: usize,
    bias: usize,
    attn: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
struct ExpertIdx {
    layers: Vec<LayerIdx>,
    w_out: usize,
    w_skip: usize,
    b_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    gate_g: usize,
    gate_n: usize,
    experts: Vec<ExpertIdx>,
}

/// How the gate weights are obtained in a forward pass.
#[derive(Debug, Clone, Default)]
pub enum GateOverride {
    #[default]
    Learned,
    /// Fixed top-m support, row-major `S x C`; softmax still runs over the
    /// gate logits inside the support.
    Mask(Vec<bool>),
    /// Fixed mixture weights, `S x C` or a single `1 x C` row shared by all
    /// samples.
    Weights(Tensor),
}

/// Options of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOpts {
    /// Apply dropout (needs `rng`).
    pub dropout: bool,
    /// Gate noise `S x C`; `None` means no noise.
    pub noise: Option<Tensor>,
    pub gate: GateOverride,
}

impl ForwardOpts {
    pub fn inference() -> Self {
        ForwardOpts::default()
    }
}

pub struct PmoeVars<'t> {
    /// Mixed node probabilities, `S x |V|`.
    pub node_probs: Var<'t>,
    /// Predicted soft spread, `S x 1`.
    pub y_soft: Var<'t>,
    /// Gate weights, `S x C`.
    pub gate: Var<'t>,
}

/// Inference result for one seed vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_soft: f64,
    pub y_hard: usize,
    pub gate_weights: Vec<f64>,
    pub node_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pmoe {
    pub cfg: PmoeConfig,
    topo: Topology,
    params: ParamStore,
    layout: Layout,
}

impl Pmoe {
    pub fn new(cfg: PmoeConfig, g: &MultiplexGraph, seed: u64) -> Result<Self> {
        if cfg.num_experts == 0 || cfg.hidden == 0 {
            return Err(RemError::Config("PMoE needs at least one expert and a hidden size".into()));
        }
        if cfg.top_m == 0 || cfg.top_m > cfg.num_experts {
            return Err(RemError::Config(format!(
                "top_m = {} must lie in 1..={}",
                cfg.top_m, cfg.num_experts
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(RemError::Config("dropout must lie in [0, 1)".into()));
        }
        let topo = Topology::new(g);
        let n = topo.num_nodes;
        let (c, h) = (cfg.num_experts, cfg.hidden);
        let mut r = rng::stream(seed, "pmoe-init");
        let mut p = ParamStore::new();
        let gate_g = p.add("gate.w_g", Tensor::randn(&[n, c], 0.1, &mut r)).0;
        let gate_n = p.add("gate.w_n", Tensor::zeros(&[n, c])).0;
        let mut experts = Vec::with_capacity(c);
        for i in 0..c {
            let mut layers = Vec::new();
            for l in 0..=i {
                let fan_in = if l == 0 { 2 } else { h };
                let w_self = p.add(format!("e{i}.l{l}.w_self"), Tensor::glorot(fan_in, h, &mut r)).0;
                let w_nb = p.add(format!("e{i}.l{l}.w_nb"), Tensor::glorot(fan_in, h, &mut r)).0;
                let bias = p.add(format!("e{i}.l{l}.b"), Tensor::zeros(&[1, h])).0;
                let attn = match cfg.aggregator {
                    Aggregator::Gcn => None,
                    Aggregator::Gat => Some((
                        p.add(format!("e{i}.l{l}.a_src"), Tensor::glorot(h, 1, &mut r)).0,
                        p.add(format!("e{i}.l{l}.a_dst"), Tensor::glorot(h, 1, &mut r)).0,
                    )),
                };
                layers.push(LayerIdx {
                    w_self,
                    w_nb,
                    bias,
                    attn,
                });
            }
            let w_out = p.add(format!("e{i}.w_out"), Tensor::glorot(h, 1, &mut r)).0;
            let w_skip = p.add(format!("e{i}.w_skip"), Tensor::glorot(2, 1, &mut r)).0;
            let b_out = p.add(format!("e{i}.b_out"), Tensor::zeros(&[1, 1])).0;
            experts.push(ExpertIdx {
                layers,
                w_out,
                w_skip,
                b_out,
            });
        }
        let mut model = Pmoe {
            cfg,
            topo,
            params: p,
            layout: Layout {
                gate_g,
                gate_n,
                experts,
            },
        };
        if model.cfg.monotone {
            model.clamp_nonnegative();
        }
        Ok(model)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn num_nodes(&self) -> usize {
        self.topo.num_nodes
    }

    /// Indices of every parameter belonging to expert `i`.
    pub fn expert_param_ids(&self, i: usize) -> Vec<usize> {
        let e = &self.layout.experts[i];
        let mut ids = vec![e.w_out, e.w_skip, e.b_out];
        for l in &e.layers {
            ids.extend([l.w_self, l.w_nb, l.bias]);
            if let Some((a, b)) = l.attn {
                ids.extend([a, b]);
            }
        }
        ids
    }

    /// Project every expert parameter onto `[0, inf)`.
    pub fn clamp_nonnegative(&mut self) {
        for i in 0..self.cfg.num_experts {
            for id in self.expert_param_ids(i) {
                for v in self.params.tensors_mut()[id].data_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }

    /// Gate logits without noise for a batch.
    fn gate_logits<'t>(&self, p: &[Var<'t>], x: Var<'t>, noise: Option<&Tensor>) -> Result<Var<'t>> {
        let q = x.matmul(p[self.layout.gate_g])?;
        match noise {
            None => Ok(q),
            Some(eps) => {
                let spread = x.matmul(p[self.layout.gate_n])?.softplus();
                q.add(spread.mul(x.tape().constant(eps.clone()))?)
            }
        }
    }

    /// Gate weights `R(x)` for a `S x |V|` batch.
    pub fn gate_var<'t>(&self, p: &[Var<'t>], x: Var<'t>, opts: &ForwardOpts) -> Result<Var<'t>> {
        let s = x.value().rows();
        let c = self.cfg.num_experts;
        match &opts.gate {
            GateOverride::Weights(w) => {
                let t = x.tape();
                if w.rows() == 1 && s != 1 {
                    let rows: Vec<&[f64]> = (0..s).map(|_| w.row_slice(0)).collect();
                    Ok(t.constant(Tensor::stack_rows(&rows)?))
                } else if w.dims2() == (s, c) {
                    Ok(t.constant(w.clone().reshaped(&[s, c])?))
                } else {
                    Err(RemError::Shape {
                        op: "gate override",
                        lhs: w.shape().to_vec(),
                        rhs: vec![s, c],
                    })
                }
            }
            GateOverride::Mask(keep) => {
                let q = self.gate_logits(p, x, opts.noise.as_ref())?;
                q.mask_fill(Rc::new(keep.clone()), f64::NEG_INFINITY)?.softmax(1)
            }
            GateOverride::Learned => {
                let q = self.gate_logits(p, x, opts.noise.as_ref())?;
                let keep = top_m_mask(&q.value(), self.cfg.top_m);
                q.mask_fill(Rc::new(keep), f64::NEG_INFINITY)?.softmax(1)
            }
        }
    }

    /// Node probabilities of expert `i` for a `S x |V|` batch, as `S x |V|`.
    pub fn expert_var<'t, R: Rng + ?Sized>(
        &self,
        p: &[Var<'t>],
        i: usize,
        x: Var<'t>,
        dropout: bool,
        rng: Option<&mut R>,
    ) -> Result<Var<'t>> {
        let t = x.tape();
        let s = x.value().rows();
        let n = self.topo.num_nodes;
        let bg = self.topo.batched(s);
        let e = &self.layout.experts[i];
        // features: column 0 the seed indicator, column 1 the degree
        let pick = t.constant(Tensor::row(vec![1.0, 0.0]));
        let feat = x
            .reshape(&[s * n, 1])?
            .matmul(pick)?
            .add(t.constant(bg.degree_feature.clone()))?;
        let inv = t.constant(bg.inv_in_degree.clone());
        let keep = 1.0 - self.cfg.dropout;
        let mut rng = rng;
        let mut h = feat;
        for l in &e.layers {
            let own = h.matmul(p[l.w_self])?;
            let nb = match l.attn {
                None => h
                    .gather_rows(bg.src.clone())?
                    .scatter_add_rows(bg.dst.clone(), bg.rows)?
                    .mul(inv)?
                    .matmul(p[l.w_nb])?,
                Some((a_src, a_dst)) => {
                    let wh = h.matmul(p[l.w_nb])?;
                    let ss = wh.matmul(p[a_src])?.gather_rows(bg.src.clone())?;
                    let sd = wh.matmul(p[a_dst])?.gather_rows(bg.dst.clone())?;
                    let ex = ss.add(sd)?.leaky_relu(0.2).clamp(-30.0, 30.0).exp();
                    let denom = ex
                        .scatter_add_rows(bg.dst.clone(), bg.rows)?
                        .gather_rows(bg.dst.clone())?;
                    let alpha = ex.div(denom)?;
                    wh.gather_rows(bg.src.clone())?
                        .mul(alpha)?
                        .scatter_add_rows(bg.dst.clone(), bg.rows)?
                }
            };
            h = own.add(nb)?.add(p[l.bias])?.relu();
            if dropout && self.cfg.dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    let (rows, cols) = h.value().dims2();
                    let mask: Vec<f64> = (0..rows * cols)
                        .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    h = h.mul(t.constant(Tensor::matrix(rows, cols, mask)?))?;
                }
            }
        }
        let logit = h
            .matmul(p[e.w_out])?
            .add(feat.matmul(p[e.w_skip])?)?
            .add(p[e.b_out])?;
        logit.sigmoid().reshape(&[s, n])
    }

    /// Full forward pass on a `S x |V|` batch.
    pub fn forward_var<'t, R: Rng + ?Sized>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        opts: &ForwardOpts,
        mut rng: Option<&mut R>,
    ) -> Result<PmoeVars<'t>> {
        let (s, n) = x.value().dims2();
        if n != self.topo.num_nodes {
            return Err(RemError::Shape {
                op: "pmoe input",
                lhs: vec![s, n],
                rhs: vec![s, self.topo.num_nodes],
            });
        }
        let c = self.cfg.num_experts;
        let gate = self.gate_var(p, x, opts)?;
        let weights = gate.to_tensor();
        let mut mixed: Option<Var<'t>> = None;
        for i in 0..c {
            let rows: Vec<usize> = (0..s).filter(|&k| weights.get(k, i) != 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            let rows = Rc::new(rows);
            let xi = if rows.len() == s { x } else { x.gather_rows(rows.clone())? };
            let ei = self.expert_var(p, i, xi, opts.dropout, rng.as_deref_mut())?;
            let ri = gate.gather_cols(Rc::new(vec![i]))?;
            let ri = if rows.len() == s { ri } else { ri.gather_rows(rows.clone())? };
            let mut contrib = ei.mul(ri)?;
            if rows.len() != s {
                contrib = contrib.scatter_add_rows(rows, s)?;
            }
            mixed = Some(match mixed {
                None => contrib,
                Some(m) => m.add(contrib)?,
            });
        }
        let node_probs = match mixed {
            Some(m) => m,
            None => x.tape().constant(Tensor::zeros(&[s, n])),
        };
        let y_soft = node_probs.sum_axis(1)?;
        Ok(PmoeVars {
            node_probs,
            y_soft,
            gate,
        })
    }

    /// Noise-free prediction for one (possibly relaxed) seed vector.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.predict_with(x, &ForwardOpts::inference())
    }

    pub fn predict_with(&self, x: &[f64], opts: &ForwardOpts) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let out = self.forward_var::<ChaCha8Rng>(&p, xv, opts, None)?;
        let node_probs = out.node_probs.to_tensor().into_data();
        Ok(Prediction {
            y_soft: out.y_soft.item(),
            y_hard: node_probs.iter().filter(|&&v| v >= self.cfg.zeta).count(),
            gate_weights: out.gate.to_tensor().into_data(),
            node_probs,
        })
    }

    /// Noise-free soft spread of many seed vectors, evaluated in parallel.
    pub fn predict_soft_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let chunk = self.cfg.chunk.max(1);
        let parts: Vec<Result<Vec<f64>>> = xs
            .par_chunks(chunk)
            .map(|rows| {
                let tape = Tape::new();
                let p = self.params.bind_frozen(&tape);
                let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                let xv = tape.constant(Tensor::stack_rows(&refs)?);
                let out = self.forward_var::<ChaCha8Rng>(&p, xv, &ForwardOpts::inference(), None)?;
                Ok(out.y_soft.to_tensor().into_data())
            })
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    /// Squared error `sum (y_soft - y)^2 / total` of a batch.
    pub fn mse_var<'t, R: Rng + ?Sized>(
        &self,
        p: &[Var<'t>],
        x: Var<'t>,
        ys: &[f64],
        total: usize,
        opts: &ForwardOpts,
        rng: Option<&mut R>,
    ) -> Result<Var<'t>> {
        let out = self.forward_var(p, x, opts, rng)?;
        let y = x.tape().constant(Tensor::matrix(ys.len(), 1, ys.to_vec())?);
        Ok(out.y_soft.sub(y)?.square().sum().scale(1.0 / total.max(1) as f64))
    }

    /// Gradient of the batch loss `mean (y_soft - y)^2` over one chunk,
    /// scaled by `1 / total`.
    fn chunk_grads(
        &self,
        xs: &[&[f64]],
        ys: &[f64],
        total: usize,
        seed: u64,
    ) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut r = rng::stream(seed, "pmoe-chunk");
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let xv = tape.constant(Tensor::stack_rows(xs)?);
        let noise = Tensor::randn(&[xs.len(), self.cfg.num_experts], 1.0, &mut r);
        let opts = ForwardOpts {
            dropout: true,
            noise: Some(noise),
            gate: GateOverride::Learned,
        };
        let loss = self.mse_var(&p, xv, ys, total, &opts, Some(&mut r))?;
        let value = loss.item();
        let g = tape.backward(loss)?;
        Ok((value, p.iter().map(|&v| g.wrt(v).cloned()).collect()))
    }

    /// Minibatch Adam on `(x, y)` pairs; returns the training loss per epoch.
    pub fn train(&mut self, data: &[(Vec<f64>, f64)], epochs: usize, seed: u64) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(RemError::Contract("PMoE training set is empty".into()));
        }
        if let Some((x, _)) = data.iter().find(|(x, _)| x.len() != self.topo.num_nodes) {
            return Err(RemError::Contract(format!(
                "training vector of length {} for a {}-node graph",
                x.len(),
                self.topo.num_nodes
            )));
        }
        let mut opt = Adam::new(self.cfg.lr);
        let mut order_rng: ChaCha8Rng = rng::stream(seed, "pmoe-order");
        let mut order: Vec<usize> = (0..data.len()).collect();
        let bs = self.cfg.batch_size.max(1);
        let chunk = self.cfg.chunk.max(1);
        let mut step = 0u64;
        let mut curve = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut order_rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(bs) {
                let step_seed = rng::derive_seed(seed, step);
                let parts: Vec<Result<(f64, Vec<Option<Tensor>>)>> = batch
                    .par_chunks(chunk)
                    .enumerate()
                    .map(|(ci, idx)| {
                        let xs: Vec<&[f64]> = idx.iter().map(|&i| data[i].0.as_slice()).collect();
                        let ys: Vec<f64> = idx.iter().map(|&i| data[i].1).collect();
                        self.chunk_grads(&xs, &ys, batch.len(), rng::derive_seed(step_seed, ci as u64))
                    })
                    .collect();
                let mut loss = 0.0;
                let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
                for part in parts {
                    let (l, g) = part?;
                    loss += l;
                    for (acc, gi) in grads.iter_mut().zip(g) {
                        match (acc.as_mut(), gi) {
                            (Some(a), Some(gi)) => a.add_assign(&gi),
                            (None, Some(gi)) => *acc = Some(gi),
                            _ => {}
                        }
                    }
                }
                if !loss.is_finite() {
                    return Err(RemError::NonFinite(format!(
                        "PMoE loss at epoch {epoch}, step {step}"
                    )));
                }
                opt.step(&mut self.params, &grads);
                if self.cfg.monotone {
                    self.clamp_nonnegative();
                }
                epoch_loss += loss * batch.len() as f64;
                step += 1;
            }
            curve.push(epoch_loss / data.len() as f64);
            log::debug!("pmoe epoch {epoch}: loss {}", curve[epoch]);
        }
        Ok(curve)
    }

    /// Mean squared error of noise-free soft predictions.
    pub fn mse(&self, data: &[(Vec<f64>, f64)]) -> Result<f64> {
        let xs: Vec<Vec<f64>> = data.iter().map(|(x, _)| x.clone()).collect();
        let pred = self.predict_soft_batch(&xs)?;
        Ok(pred
            .iter()
            .zip(data)
            .map(|(p, (_, y))| (p - y) * (p - y))
            .sum::<f64>()
            / data.len().max(1) as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "model": "pmoe",
            "config": self.cfg,
            "num_nodes": self.topo.num_nodes,
            "num_edges": self.topo.num_edges(),
        });
        write_checkpoint(path, &meta, &self.params)
    }

    /// Load weights for the graph they were trained on.
    pub fn load(path: impl AsRef<Path>, g: &MultiplexGraph) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("pmoe") {
            return Err(RemError::Checkpoint("not a PMoE checkpoint".into()));
        }
        let cfg: PmoeConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut m = Pmoe::new(cfg, g, 0)?;
        let nodes = ck.meta.get("num_nodes").and_then(|v| v.as_u64());
        if nodes != Some(g.num_nodes() as u64) {
            return Err(RemError::Checkpoint(format!(
                "checkpoint was trained on {nodes:?} nodes, graph has {}",
                g.num_nodes()
            )));
        }
        m.params.load_from(&ck.params)?;
        Ok(m)
    }
}

/// Soft and hard spread of a vector of node probabilities.
pub fn spread_heads(node_probs: &[f64], zeta: f64) -> (f64, usize) {
    (
        node_probs.iter().sum(),
        node_probs.iter().filter(|&&v| v >= zeta).count(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::graph::{parse_multiplex, DiffusionModelKind};

    fn toy_graph() -> MultiplexGraph {
        parse_multiplex("0 0 1\n0 1 2\n0 2 3\n1 3 4\n1 4 0\n1 1 4\n0 5 2\n").unwrap()
    }

    fn cfg(c: usize, m: usize) -> PmoeConfig {
        PmoeConfig {
            num_experts: c,
            top_m: m,
            hidden: 4,
            ..PmoeConfig::default()
        }
    }

    #[test]
    fn gate_closed_form() {
        // Q = [3, 1, 2] with m = 2 keeps experts 0 and 2
        let g = toy_graph();
        let mut model = Pmoe::new(cfg(3, 2), &g, 1).unwrap();
        let mut wg = Tensor::zeros(&[6, 3]);
        wg.data_mut()[..3].copy_from_slice(&[3.0, 1.0, 2.0]);
        *model.params_mut().get_mut(crate::autodiff::ParamId(0)) = wg;
        let pred = model.predict(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let w = &pred.gate_weights;
        assert!((w[0] - 0.7310585786300049).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn gate_special_cases() {
        let g = toy_graph();
        let x = [0.3, 0.9, 0.0, 1.0, 0.2, 0.5];
        let full = Pmoe::new(cfg(4, 4), &g, 2).unwrap();
        let w = full.predict(&x).unwrap().gate_weights;
        assert!(w.iter().all(|&v| v > 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let one = Pmoe::new(cfg(4, 1), &g, 2).unwrap();
        let w1 = one.predict(&x).unwrap().gate_weights;
        assert_eq!(w1.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(w1.iter().filter(|&&v| v == 0.0).count(), 3);
        assert!(Pmoe::new(cfg(3, 4), &g, 0).is_err());
    }

    #[test]
    fn single_expert_is_the_mixture() {
        let g = toy_graph();
        let model = Pmoe::new(cfg(1, 1), &g, 3).unwrap();
        let x = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let pred = model.predict(&x).unwrap();
        let tape = Tape::new();
        let p = model.params().bind_frozen(&tape);
        let e = model
            .expert_var::<ChaCha8Rng>(&p, 0, tape.constant(Tensor::row(x.to_vec())), false, None)
            .unwrap();
        assert_eq!(pred.node_probs, e.to_tensor().into_data());
    }

    #[test]
    fn identical_experts_ignore_gate() {
        let g = toy_graph();
        let mut model = Pmoe::new(cfg(2, 2), &g, 4).unwrap();
        // expert 1 is deeper; give both depth-one heads only by zeroing the
        // message weights so each reduces to the same skip-connected head
        for i in 0..2 {
            for id in model.expert_param_ids(i) {
                model.params_mut().tensors_mut()[id].data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let skip = model.layout.experts[i].w_skip;
            model.params_mut().tensors_mut()[skip] = Tensor::matrix(2, 1, vec![1.5, -0.5]).unwrap();
        }
        let x = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let a = model
            .predict_with(&x, &ForwardOpts { gate: GateOverride::Weights(Tensor::row(vec![0.9, 0.1])), ..Default::default() })
            .unwrap();
        let b = model
            .predict_with(&x, &ForwardOpts { gate: GateOverride::Weights(Tensor::row(vec![0.2, 0.8])), ..Default::default() })
            .unwrap();
        for (u, v) in a.node_probs.iter().zip(&b.node_probs) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_expert_outputs_bias() {
        let g = toy_graph();
        let mut model = Pmoe::new(cfg(1, 1), &g, 5).unwrap();
        for id in model.expert_param_ids(0) {
            model.params_mut().tensors_mut()[id].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let b = model.layout.experts[0].b_out;
        model.params_mut().tensors_mut()[b] = Tensor::matrix(1, 1, vec![0.4]).unwrap();
        let pred = model.predict(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = 1.0 / (1.0 + (-0.4f64).exp());
        assert!(pred.node_probs.iter().all(|&v| (v - s).abs() < 1e-15));
    }

    #[test]
    fn heads_by_definition() {
        let (soft, hard) = spread_heads(&[0.6; 10], 0.5);
        assert!((soft - 6.0).abs() < 1e-12);
        assert_eq!(hard, 10);
        let (soft, hard) = spread_heads(&[0.49, 0.5, 0.1], 0.5);
        assert!((soft - 1.09).abs() < 1e-12);
        assert_eq!(hard, 1);
    }

    #[test]
    fn forward_gradient_with_frozen_mask() {
        for agg in [Aggregator::Gcn, Aggregator::Gat] {
            let g = toy_graph();
            let model = Pmoe::new(PmoeConfig { aggregator: agg, ..cfg(3, 2) }, &g, 6).unwrap();
            let x = Tensor::matrix(2, 6, vec![1.0, 0.0, 0.3, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.7, 0.0, 1.0]).unwrap();
            let noise = Tensor::matrix(2, 3, vec![0.3, -1.0, 0.5, 1.2, 0.1, -0.4]).unwrap();
            let mask = vec![true, false, true, false, true, true];
            let ys = Tensor::matrix(2, 1, vec![2.0, 3.5]).unwrap();
            let opts = ForwardOpts {
                dropout: false,
                noise: Some(noise),
                gate: GateOverride::Mask(mask),
            };
            for which in 0..model.params().len() {
                let base = model.params().tensors()[which].clone();
                let err = grad_check(
                    |t, w| {
                        let mut p = model.params().bind_frozen(t);
                        p[which] = w;
                        let out = model.forward_var::<ChaCha8Rng>(&p, t.constant(x.clone()), &opts, None)?;
                        Ok(out.y_soft.sub(t.constant(ys.clone()))?.square().mean())
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{agg:?} param {}: {err}", model.params().name(crate::autodiff::ParamId(which)));
            }
        }
    }

    #[test]
    fn overfits_one_pair_and_round_trips() {
        let g = toy_graph();
        let mut model = Pmoe::new(
            PmoeConfig {
                lr: 1e-2,
                dropout: 0.0,
                ..cfg(3, 2)
            },
            &g,
            7,
        )
        .unwrap();
        let y = 4.0;
        let data = vec![(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], y)];
        model.train(&data, 300, 1).unwrap();
        assert!(model.mse(&data).unwrap() < 1e-2 * y * y);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pmoe.ckpt");
        model.save(&path).unwrap();
        assert_eq!(Pmoe::load(&path, &g).unwrap(), model);
        let other = parse_multiplex("0 0 1\n").unwrap();
        assert!(Pmoe::load(&path, &other).is_err());
    }

    #[test]
    fn monotone_mode_keeps_weights_non_negative() {
        let g = toy_graph();
        let mut model = Pmoe::new(PmoeConfig { monotone: true, ..cfg(2, 1) }, &g, 8).unwrap();
        let data = vec![
            (vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1.0),
            (vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0], 5.0),
        ];
        model.train(&data, 5, 2).unwrap();
        for i in 0..2 {
            for id in model.expert_param_ids(i) {
                assert!(model.params().tensors()[id].data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let g = parse_multiplex("# layer=1 model=LT\n0 0 1\n1 1 2\n0 2 3\n").unwrap();
        assert_eq!(g.layer(1).model, DiffusionModelKind::lt());
        let data: Vec<(Vec<f64>, f64)> = (0..10)
            .map(|i| ((0..4).map(|v| ((i + v) % 3 == 0) as u8 as f64).collect(), i as f64 / 3.0))
            .collect();
        let c = PmoeConfig { batch_size: 4, chunk: 2, ..cfg(3, 2) };
        let mut a = Pmoe::new(c.clone(), &g, 1).unwrap();
        let mut b = Pmoe::new(c, &g, 1).unwrap();
        a.train(&data, 3, 5).unwrap();
        b.train(&data, 3, 5).unwrap();
        assert_eq!(a, b);
    }
}
