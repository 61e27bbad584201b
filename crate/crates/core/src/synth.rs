//! Synthetic multiplexes and seed corpora for tests, benches and demos.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{DiffusionModelKind, Edge, Layer, MultiplexGraph, SeedVector};
use crate::rng;

/// Directed stochastic block model: nodes are split into `blocks` contiguous
/// groups, an ordered pair inside a group is an edge with probability `p_in`,
/// across groups with probability `p_out`.
pub fn sbm_edges<R: Rng + ?Sized>(
    n: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    rng: &mut R,
) -> Vec<(u32, u32)> {
    let block_of = |v: usize| v * blocks.max(1) / n.max(1);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let p = if block_of(u) == block_of(v) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u as u32, v as u32));
            }
        }
    }
    edges
}

/// Degree-corrected variant of [`sbm_edges`]: the probability of `u -> v`
/// is scaled by `weight[u]`, so heavy-tailed weights give a few hubs.
pub fn dc_sbm_edges<R: Rng + ?Sized>(
    n: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    weight: &[f64],
    rng: &mut R,
) -> Vec<(u32, u32)> {
    let block_of = |v: usize| v * blocks.max(1) / n.max(1);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let p = if block_of(u) == block_of(v) { p_in } else { p_out };
            if rng.random::<f64>() < (p * weight[u]).min(1.0) {
                edges.push((u as u32, v as u32));
            }
        }
    }
    edges
}

/// Pareto(`shape`) weights rescaled to mean one.
pub fn pareto_weights<R: Rng + ?Sized>(n: usize, shape: f64, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / shape))
        .collect();
    let mean = raw.iter().sum::<f64>() / n.max(1) as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// One SBM layer per model. Layers draw from independent streams, so they
/// share the node universe but not their edges.
pub fn sbm_multiplex(
    n: usize,
    models: &[DiffusionModelKind],
    blocks: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<MultiplexGraph> {
    let layers: Vec<(DiffusionModelKind, Vec<(u32, u32)>)> = models
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let mut r = rng::stream(rng::derive_seed(seed, i as u64), "sbm-layer");
            (m, sbm_edges(n, blocks, p_in, p_out, &mut r))
        })
        .collect();
    MultiplexGraph::from_edge_lists(n, &layers)
}

/// Degree-corrected SBM multiplex. All layers share one Pareto(`shape`)
/// out-weight per node, so the same nodes act as hubs in every layer.
/// `layers` pairs each model with its within-block edge probability.
pub fn dc_sbm_multiplex(
    n: usize,
    layers: &[(DiffusionModelKind, f64)],
    blocks: usize,
    p_out: f64,
    shape: f64,
    seed: u64,
) -> Result<MultiplexGraph> {
    let weight = pareto_weights(n, shape, &mut rng::stream(seed, "dc-weights"));
    let lists: Vec<_> = layers
        .iter()
        .enumerate()
        .map(|(i, &(m, p_in))| {
            let mut r = rng::stream(rng::derive_seed(seed, i as u64), "dc-layer");
            (m, dc_sbm_edges(n, blocks, p_in, p_out, &weight, &mut r))
        })
        .collect();
    MultiplexGraph::from_edge_lists(n, &lists)
}

/// `m` distinct directed edges chosen uniformly (no self-loops).
pub fn random_edges<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<(u32, u32)> {
    assert!(n >= 2, "need two nodes for an edge");
    let cap = n * (n - 1);
    let m = m.min(cap);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let u = rng.random_range(0..n as u32);
        let v = rng.random_range(0..n as u32);
        if u != v && seen.insert((u, v)) {
            out.push((u, v));
        }
    }
    out
}

/// Random multiplex with `edges_per_layer[i]` uniform edges in layer `i`.
pub fn random_multiplex(
    n: usize,
    models: &[DiffusionModelKind],
    edges_per_layer: &[usize],
    seed: u64,
) -> Result<MultiplexGraph> {
    let layers: Vec<_> = models
        .iter()
        .zip(edges_per_layer)
        .enumerate()
        .map(|(i, (&m, &k))| {
            let mut r = rng::stream(rng::derive_seed(seed, i as u64), "random-layer");
            (m, random_edges(n, k, &mut r))
        })
        .collect();
    MultiplexGraph::from_edge_lists(n, &layers)
}

/// Eight-node two-layer instance where cross-layer activation matters.
///
/// Layer 0 is LT with threshold 0.7, so node 5 needs all three of its
/// in-neighbours 1, 3, 4. Layer 1 is IC with certain edges that activate
/// node 4 from seed 3. With seeds {1, 3}, node 5 fires only once node 4's
/// layer-1 activation carries over to layer 0.
pub fn overlap_demo() -> MultiplexGraph {
    let sure = |src, dst| Edge {
        src,
        dst,
        prob_override: Some(1.0),
    };
    let plain = |src, dst| Edge {
        src,
        dst,
        prob_override: None,
    };
    let l0 = Layer::new(
        0,
        DiffusionModelKind::LT { threshold: 0.7 },
        8,
        vec![plain(1, 5), plain(4, 5), plain(3, 5), plain(0, 2)],
    )
    .expect("valid layer");
    let l1 = Layer::new(
        1,
        DiffusionModelKind::IC,
        8,
        vec![sure(3, 4), sure(1, 7), sure(6, 0)],
    )
    .expect("valid layer");
    MultiplexGraph::new(8, vec![l0, l1]).expect("valid multiplex")
}

/// Seeds of [`overlap_demo`].
pub const OVERLAP_DEMO_SEEDS: [u32; 2] = [1, 3];

/// Seed vectors built as unions of `per_sample` distinct contiguous blocks
/// of length `block_len` out of `n / block_len` blocks.
pub fn block_corpus<R: Rng + ?Sized>(
    n: usize,
    block_len: usize,
    per_sample: usize,
    count: usize,
    rng: &mut R,
) -> Vec<SeedVector> {
    let blocks = n / block_len;
    (0..count)
        .map(|_| {
            let mut nodes = Vec::new();
            for b in sample(rng, blocks, per_sample.min(blocks)) {
                nodes.extend((b * block_len..(b + 1) * block_len).map(|v| v as u32));
            }
            SeedVector::from_nodes(n, &nodes).expect("nodes in range")
        })
        .collect()
}

/// Uniformly random budget-`b` seed set.
pub fn random_seed_set<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Vec<u32> {
    let mut v: Vec<u32> = sample(rng, n, b.min(n)).into_iter().map(|i| i as u32).collect();
    v.sort_unstable();
    v
}

/// Budget-`b` set drawn without replacement with probability proportional
/// to `1 + weight[v]`.
pub fn weighted_seed_set<R: Rng + ?Sized>(weights: &[f64], b: usize, rng: &mut R) -> Vec<u32> {
    let mut w: Vec<f64> = weights.iter().map(|x| 1.0 + x.max(0.0)).collect();
    let mut out = Vec::with_capacity(b);
    for _ in 0..b.min(w.len()) {
        let total: f64 = w.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = w.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            if r < wi {
                pick = i;
                break;
            }
            r -= wi;
        }
        // guard the float tail
        if w[pick] == 0.0 {
            pick = w.iter().rposition(|&x| x > 0.0).expect("mass remains");
        }
        out.push(pick as u32);
        w[pick] = 0.0;
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{simulate_in_world, CoinWorld};

    #[test]
    fn overlap_demo_behaves() {
        let g = overlap_demo();
        let w = CoinWorld { key: 0 };
        let on = simulate_in_world(&g, &OVERLAP_DEMO_SEEDS, &w, true);
        let off = simulate_in_world(&g, &OVERLAP_DEMO_SEEDS, &w, false);
        assert_eq!(on.union_count, 5);
        assert_eq!(off.union_count, 4);
        assert!(on.per_layer_activated[0].iter().any(|v| v.0 == 5));
        assert_eq!(off.per_layer_activated[0].len(), 2);
    }

    #[test]
    fn sbm_is_reproducible_and_denser_inside() {
        let ic = DiffusionModelKind::IC;
        let a = sbm_multiplex(60, &[ic, ic], 3, 0.2, 0.01, 9).unwrap();
        let b = sbm_multiplex(60, &[ic, ic], 3, 0.2, 0.01, 9).unwrap();
        assert_eq!(a.layer(0).edges(), b.layer(0).edges());
        assert_ne!(a.layer(0).edges(), a.layer(1).edges());
        let inside = a
            .layer(0)
            .edges()
            .iter()
            .filter(|e| e.src / 20 == e.dst / 20)
            .count();
        assert!(inside * 2 > a.layer(0).num_edges());
    }

    #[test]
    fn corpus_and_samplers() {
        let mut r = rng::stream(1, "t");
        for s in block_corpus(40, 5, 2, 30, &mut r) {
            assert_eq!(s.nodes().len(), 10);
        }
        let set = random_seed_set(50, 7, &mut r);
        assert_eq!(set.len(), 7);
        let wset = weighted_seed_set(&[0.0, 100.0, 0.0, 0.0], 2, &mut r);
        assert_eq!(wset.len(), 2);
        assert_eq!(random_edges(10, 30, &mut r).len(), 30);
    }
}
