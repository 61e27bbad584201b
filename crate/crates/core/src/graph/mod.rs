//! Multiplex graphs over a shared node universe.
//!
//! Every layer is padded to the full node set, so a node index names the same
//! user in every layer. Interlayer copies are not materialised: activation of
//! a node in one layer is mirrored by the simulator onto the same index in all
//! other layers.

mod io;
mod seeds;

pub use io::{load_multiplex, parse_multiplex, save_multiplex, write_multiplex};
pub use seeds::{binarize_topb, SeedVector};

use serde::{Deserialize, Serialize};

use crate::error::{RemError, Result};

/// Dense zero-based node index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Default linear-threshold activation threshold.
pub const DEFAULT_LT_THRESHOLD: f64 = 0.5;

/// Diffusion model of one layer.
///
/// IC edges fire with the weighted-cascade probability `1 / in_degree(dst)`
/// unless the edge carries an explicit override. LT nodes activate once the
/// fraction of active in-neighbours reaches `threshold`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DiffusionModelKind {
    #[default]
    IC,
    LT { threshold: f64 },
}

impl DiffusionModelKind {
    pub fn lt() -> Self {
        DiffusionModelKind::LT {
            threshold: DEFAULT_LT_THRESHOLD,
        }
    }

    pub fn is_ic(&self) -> bool {
        matches!(self, DiffusionModelKind::IC)
    }
}

/// A directed edge as stored in a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    /// Explicit activation probability; `None` means weighted cascade.
    pub prob_override: Option<f64>,
}

/// One directed layer padded to the full node universe.
///
/// Edges are kept sorted by `(src, dst)`; the position of an edge in that
/// order is its stable edge index (used to key Monte Carlo coins).
#[derive(Debug, Clone)]
pub struct Layer {
    pub layer_id: usize,
    pub model: DiffusionModelKind,
    num_nodes: usize,
    edges: Vec<Edge>,
    in_degree: Vec<u32>,
    out_offsets: Vec<u32>,
    probs: Vec<f64>,
    lt_needed: Vec<u32>,
}

impl Layer {
    pub fn new(
        layer_id: usize,
        model: DiffusionModelKind,
        num_nodes: usize,
        mut edges: Vec<Edge>,
    ) -> Result<Self> {
        if let DiffusionModelKind::LT { threshold } = model {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(RemError::Graph(format!(
                    "layer {layer_id}: LT threshold {threshold} outside (0, 1]"
                )));
            }
        }
        edges.sort_by_key(|e| (e.src, e.dst));
        let mut in_degree = vec![0u32; num_nodes];
        for (i, e) in edges.iter().enumerate() {
            if e.src as usize >= num_nodes || e.dst as usize >= num_nodes {
                return Err(RemError::Graph(format!(
                    "layer {layer_id}: edge {} -> {} outside node universe of size {num_nodes}",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(RemError::SelfLoop {
                    layer: layer_id,
                    node: e.src,
                });
            }
            if i > 0 && edges[i - 1].src == e.src && edges[i - 1].dst == e.dst {
                return Err(RemError::DuplicateEdge {
                    layer: layer_id,
                    src: e.src,
                    dst: e.dst,
                });
            }
            if let Some(p) = e.prob_override {
                if !(0.0..=1.0).contains(&p) {
                    return Err(RemError::Graph(format!(
                        "layer {layer_id}: edge probability {p} outside [0, 1]"
                    )));
                }
            }
            in_degree[e.dst as usize] += 1;
        }
        let mut out_offsets = vec![0u32; num_nodes + 1];
        for e in &edges {
            out_offsets[e.src as usize + 1] += 1;
        }
        for v in 0..num_nodes {
            out_offsets[v + 1] += out_offsets[v];
        }
        let probs = edges
            .iter()
            .map(|e| {
                e.prob_override
                    .unwrap_or(1.0 / in_degree[e.dst as usize] as f64)
            })
            .collect();
        let lt_needed = match model {
            DiffusionModelKind::LT { threshold } => in_degree
                .iter()
                .map(|&d| {
                    if d == 0 {
                        u32::MAX
                    } else {
                        // smallest count c with c / d >= threshold
                        ((threshold * d as f64) - 1e-9).ceil().max(1.0) as u32
                    }
                })
                .collect(),
            DiffusionModelKind::IC => Vec::new(),
        };
        Ok(Layer {
            layer_id,
            model,
            num_nodes,
            edges,
            in_degree,
            out_offsets,
            probs,
            lt_needed,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn in_degree(&self) -> &[u32] {
        &self.in_degree
    }

    pub fn out_degree(&self, v: usize) -> usize {
        (self.out_offsets[v + 1] - self.out_offsets[v]) as usize
    }

    /// Range of edge indices leaving `v`.
    #[inline]
    pub fn out_range(&self, v: usize) -> std::ops::Range<usize> {
        self.out_offsets[v] as usize..self.out_offsets[v + 1] as usize
    }

    /// Activation probability of edge `idx` (IC semantics).
    #[inline]
    pub fn edge_prob(&self, idx: usize) -> f64 {
        self.probs[idx]
    }

    /// Number of active in-neighbours an LT node needs; `u32::MAX` for
    /// nodes without in-edges. Empty for IC layers.
    #[inline]
    pub(crate) fn lt_needed(&self, v: usize) -> u32 {
        self.lt_needed[v]
    }

    /// Edges whose activation is genuinely random (probability strictly
    /// between 0 and 1). Always empty for LT layers.
    pub fn probabilistic_edges(&self) -> impl Iterator<Item = usize> + '_ {
        let ic = self.model.is_ic();
        self.probs
            .iter()
            .enumerate()
            .filter(move |(_, &p)| ic && p > 0.0 && p < 1.0)
            .map(|(i, _)| i)
    }
}

/// `l >= 1` layers over one node universe.
#[derive(Debug, Clone)]
pub struct MultiplexGraph {
    num_nodes: usize,
    layers: Vec<Layer>,
    presence: Vec<u64>,
}

/// Upper bound on the number of layers (presence is a 64-bit mask per node).
pub const MAX_LAYERS: usize = 64;

impl MultiplexGraph {
    pub fn new(num_nodes: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(RemError::Graph("a multiplex needs at least one layer".into()));
        }
        if layers.len() > MAX_LAYERS {
            return Err(RemError::Graph(format!(
                "{} layers exceed the supported maximum of {MAX_LAYERS}",
                layers.len()
            )));
        }
        let mut presence = vec![0u64; num_nodes];
        for (i, layer) in layers.iter().enumerate() {
            if layer.num_nodes != num_nodes {
                return Err(RemError::Graph(format!(
                    "layer {i} has {} nodes, multiplex has {num_nodes}",
                    layer.num_nodes
                )));
            }
            if layer.layer_id != i {
                return Err(RemError::Graph(format!(
                    "layer at position {i} carries id {}",
                    layer.layer_id
                )));
            }
            for e in &layer.edges {
                presence[e.src as usize] |= 1 << i;
                presence[e.dst as usize] |= 1 << i;
            }
        }
        Ok(MultiplexGraph {
            num_nodes,
            layers,
            presence,
        })
    }

    /// Convenience constructor from plain `(src, dst)` lists, one per layer.
    pub fn from_edge_lists(
        num_nodes: usize,
        layers: &[(DiffusionModelKind, Vec<(u32, u32)>)],
    ) -> Result<Self> {
        let built = layers
            .iter()
            .enumerate()
            .map(|(i, (model, edges))| {
                let edges = edges
                    .iter()
                    .map(|&(src, dst)| Edge {
                        src,
                        dst,
                        prob_override: None,
                    })
                    .collect();
                Layer::new(i, *model, num_nodes, edges)
            })
            .collect::<Result<Vec<_>>>()?;
        MultiplexGraph::new(num_nodes, built)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn total_edges(&self) -> usize {
        self.layers.iter().map(Layer::num_edges).sum()
    }

    /// Bitmask of layers in which `v` has at least one incident edge.
    pub fn presence(&self, v: NodeId) -> u64 {
        self.presence[v.index()]
    }

    /// A node overlaps when it is non-isolated in two or more layers.
    pub fn is_overlapping(&self, v: NodeId) -> bool {
        self.presence[v.index()].count_ones() >= 2
    }

    pub fn overlapping_nodes(&self) -> Vec<NodeId> {
        (0..self.num_nodes as u32)
            .map(NodeId)
            .filter(|&v| self.is_overlapping(v))
            .collect()
    }

    /// Number of IC edges with probability strictly inside (0, 1).
    pub fn probabilistic_edge_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.probabilistic_edges().count())
            .sum()
    }

    pub fn all_lt(&self) -> bool {
        self.layers.iter().all(|l| !l.model.is_ic())
    }

    /// Union of all layers' edges with duplicates removed. Probability
    /// overrides are dropped; the result only carries topology.
    pub fn flatten_union(&self) -> Layer {
        let mut pairs: Vec<(u32, u32)> = self
            .layers
            .iter()
            .flat_map(|l| l.edges.iter().map(|e| (e.src, e.dst)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        let edges = pairs
            .into_iter()
            .map(|(src, dst)| Edge {
                src,
                dst,
                prob_override: None,
            })
            .collect();
        Layer::new(0, DiffusionModelKind::IC, self.num_nodes, edges)
            .expect("union of valid layers is a valid layer")
    }

    /// Out-degree of each node in the union graph.
    pub fn union_out_degree(&self) -> Vec<usize> {
        let u = self.flatten_union();
        (0..self.num_nodes).map(|v| u.out_degree(v)).collect()
    }

    /// Same graph with every layer switched to `model`.
    pub fn with_models(&self, models: &[DiffusionModelKind]) -> Result<Self> {
        if models.len() != self.layers.len() {
            return Err(RemError::Config(format!(
                "{} models given for {} layers",
                models.len(),
                self.layers.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(models)
            .map(|(l, m)| Layer::new(l.layer_id, *m, self.num_nodes, l.edges.clone()))
            .collect::<Result<Vec<_>>>()?;
        MultiplexGraph::new(self.num_nodes, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> MultiplexGraph {
        MultiplexGraph::from_edge_lists(
            4,
            &[
                (DiffusionModelKind::IC, vec![(0, 1), (1, 2)]),
                (DiffusionModelKind::lt(), vec![(1, 2), (2, 3)]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn in_degrees_and_probabilities() {
        let g = MultiplexGraph::from_edge_lists(
            3,
            &[(DiffusionModelKind::IC, vec![(0, 2), (1, 2), (0, 1)])],
        )
        .unwrap();
        let l = g.layer(0);
        assert_eq!(l.in_degree(), &[0, 1, 2]);
        // sorted (0,1), (0,2), (1,2)
        assert_eq!(l.edge_prob(0), 1.0);
        assert_eq!(l.edge_prob(1), 0.5);
        assert_eq!(l.edge_prob(2), 0.5);
        assert_eq!(l.out_range(0), 0..2);
        assert_eq!(g.probabilistic_edge_count(), 2);
    }

    #[test]
    fn overlap_requires_two_non_isolated_layers() {
        let g = two_layer();
        assert!(!g.is_overlapping(NodeId(0)));
        assert!(g.is_overlapping(NodeId(1)));
        assert!(g.is_overlapping(NodeId(2)));
        assert!(!g.is_overlapping(NodeId(3)));
    }

    #[test]
    fn union_dedups_shared_edges() {
        let g = two_layer();
        let u = g.flatten_union();
        assert_eq!(u.num_edges(), 3);
        assert!(u.num_edges() <= g.total_edges());
    }

    #[test]
    fn union_of_disjoint_layers_concatenates() {
        let g = MultiplexGraph::from_edge_lists(
            4,
            &[
                (DiffusionModelKind::IC, vec![(0, 1)]),
                (DiffusionModelKind::IC, vec![(2, 3), (3, 0)]),
            ],
        )
        .unwrap();
        assert_eq!(g.flatten_union().num_edges(), 3);
    }

    #[test]
    fn single_layer_union_is_identity() {
        let g = MultiplexGraph::from_edge_lists(
            4,
            &[(DiffusionModelKind::IC, vec![(3, 1), (0, 1), (1, 2)])],
        )
        .unwrap();
        let u = g.flatten_union();
        let a: Vec<_> = u.edges().iter().map(|e| (e.src, e.dst)).collect();
        let b: Vec<_> = g.layer(0).edges().iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_self_loops_and_duplicates() {
        let err = MultiplexGraph::from_edge_lists(2, &[(DiffusionModelKind::IC, vec![(1, 1)])]);
        assert!(matches!(err, Err(RemError::SelfLoop { .. })));
        let err =
            MultiplexGraph::from_edge_lists(2, &[(DiffusionModelKind::IC, vec![(0, 1), (0, 1)])]);
        assert!(matches!(err, Err(RemError::DuplicateEdge { .. })));
    }

    #[test]
    fn lt_needed_counts() {
        let g = MultiplexGraph::from_edge_lists(
            5,
            &[(
                DiffusionModelKind::LT { threshold: 0.5 },
                vec![(0, 4), (1, 4), (2, 4), (0, 3), (1, 3)],
            )],
        )
        .unwrap();
        let l = g.layer(0);
        assert_eq!(l.lt_needed(4), 2); // 1.5 -> 2
        assert_eq!(l.lt_needed(3), 1); // 1.0 -> 1
        assert_eq!(l.lt_needed(0), u32::MAX);
    }
}
