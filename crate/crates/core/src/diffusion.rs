//! IC/LT diffusion over a multiplex with overlapping activation.
//!
//! All layers advance in lockstep rounds. Within a round each layer takes one
//! step of its own model from the nodes that became active in the previous
//! round; at the end of the round every newly activated node is switched on in
//! every layer. IC edges are resolved through an [`EdgeWorld`], so the Monte
//! Carlo simulator and the exact oracle share this one propagation routine.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RemError, Result};
use crate::graph::{DiffusionModelKind, MultiplexGraph, NodeId, SeedVector};
use crate::rng::{edge_coin, replication_key};

/// Decides whether an IC edge is live in the current realisation.
pub trait EdgeWorld {
    fn is_live(&self, layer: usize, edge: usize, prob: f64) -> bool;
}

/// Hash-keyed coins: edge `(layer, edge)` is live iff its coin is below the
/// edge probability. Supersets of seeds see the same world.
#[derive(Debug, Clone, Copy)]
pub struct CoinWorld {
    pub key: u64,
}

impl EdgeWorld for CoinWorld {
    #[inline]
    fn is_live(&self, layer: usize, edge: usize, prob: f64) -> bool {
        prob >= 1.0 || (prob > 0.0 && edge_coin(self.key, layer as u32, edge as u32) < prob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub union_count: u32,
    /// Rounds that activated at least one node.
    pub rounds: u32,
}

/// Reusable propagation state for one graph.
pub struct Propagator<'g> {
    g: &'g MultiplexGraph,
    overlap: bool,
    max_rounds: usize,
    active: Vec<Vec<bool>>,
    lt_count: Vec<Vec<u32>>,
    frontier: Vec<Vec<u32>>,
    fresh: Vec<Vec<u32>>,
    union_active: Vec<bool>,
    union_list: Vec<u32>,
    lt_touched: Vec<Vec<u32>>,
    layer_touched: Vec<Vec<u32>>,
    round_new: Vec<u32>,
}

impl<'g> Propagator<'g> {
    pub fn new(g: &'g MultiplexGraph, overlap: bool, max_rounds: usize) -> Self {
        let n = g.num_nodes();
        let l = g.num_layers();
        Propagator {
            g,
            overlap,
            max_rounds,
            active: vec![vec![false; n]; l],
            lt_count: g
                .layers()
                .iter()
                .map(|layer| if layer.model.is_ic() { Vec::new() } else { vec![0; n] })
                .collect(),
            frontier: vec![Vec::new(); l],
            fresh: vec![Vec::new(); l],
            union_active: vec![false; n],
            union_list: Vec::new(),
            lt_touched: vec![Vec::new(); l],
            layer_touched: vec![Vec::new(); l],
            round_new: Vec::new(),
        }
    }

    fn reset(&mut self) {
        for v in self.union_list.drain(..) {
            self.union_active[v as usize] = false;
        }
        for (li, touched) in self.layer_touched.iter_mut().enumerate() {
            for v in touched.drain(..) {
                self.active[li][v as usize] = false;
            }
        }
        for (li, touched) in self.lt_touched.iter_mut().enumerate() {
            for v in touched.drain(..) {
                self.lt_count[li][v as usize] = 0;
            }
        }
        for f in self.frontier.iter_mut().chain(self.fresh.iter_mut()) {
            f.clear();
        }
    }

    #[inline]
    fn activate(&mut self, layer: usize, v: u32) -> bool {
        let slot = &mut self.active[layer][v as usize];
        if *slot {
            return false;
        }
        *slot = true;
        self.layer_touched[layer].push(v);
        true
    }

    #[inline]
    fn mark_union(&mut self, v: u32) -> bool {
        if self.union_active[v as usize] {
            return false;
        }
        self.union_active[v as usize] = true;
        self.union_list.push(v);
        true
    }

    /// Run one diffusion from `seeds` in `world`. Seeds must be distinct and
    /// inside the node universe.
    pub fn run<W: EdgeWorld>(&mut self, seeds: &[u32], world: &W) -> RunStats {
        self.reset();
        let num_layers = self.g.num_layers();
        for &s in seeds {
            if self.mark_union(s) {
                for li in 0..num_layers {
                    self.activate(li, s);
                    self.frontier[li].push(s);
                }
            }
        }
        let mut rounds = 0u32;
        let mut executed = 0usize;
        while executed < self.max_rounds && self.frontier.iter().any(|f| !f.is_empty()) {
            executed += 1;
            let mut any_new = false;
            for li in 0..num_layers {
                let layer = self.g.layer(li);
                let frontier = std::mem::take(&mut self.frontier[li]);
                let mut fresh = std::mem::take(&mut self.fresh[li]);
                match layer.model {
                    DiffusionModelKind::IC => {
                        for &u in &frontier {
                            for e in layer.out_range(u as usize) {
                                let v = layer.edges()[e].dst;
                                if !self.active[li][v as usize]
                                    && world.is_live(li, e, layer.edge_prob(e))
                                    && self.activate(li, v)
                                {
                                    fresh.push(v);
                                }
                            }
                        }
                    }
                    DiffusionModelKind::LT { .. } => {
                        for &u in &frontier {
                            for e in layer.out_range(u as usize) {
                                let v = layer.edges()[e].dst as usize;
                                let c = &mut self.lt_count[li][v];
                                if *c == 0 {
                                    self.lt_touched[li].push(v as u32);
                                }
                                *c += 1;
                                if *c >= layer.lt_needed(v) && self.activate(li, v as u32) {
                                    fresh.push(v as u32);
                                }
                            }
                        }
                    }
                }
                any_new |= !fresh.is_empty();
                self.frontier[li] = frontier;
                self.fresh[li] = fresh;
            }
            if any_new {
                rounds += 1;
            }
            // Round boundary: newly active nodes seed the next round.
            self.round_new.clear();
            for li in 0..num_layers {
                for i in 0..self.fresh[li].len() {
                    let v = self.fresh[li][i];
                    if self.mark_union(v) {
                        self.round_new.push(v);
                    }
                }
            }
            for li in 0..num_layers {
                self.frontier[li].clear();
                let fresh = std::mem::take(&mut self.fresh[li]);
                self.frontier[li].extend_from_slice(&fresh);
                self.fresh[li] = fresh;
                self.fresh[li].clear();
                if self.overlap {
                    for i in 0..self.round_new.len() {
                        let v = self.round_new[i];
                        if self.activate(li, v) {
                            self.frontier[li].push(v);
                        }
                    }
                }
            }
        }
        RunStats {
            union_count: self.union_list.len() as u32,
            rounds,
        }
    }

    /// Sorted active nodes per layer after the last [`run`](Self::run).
    pub fn per_layer_activated(&self) -> Vec<Vec<NodeId>> {
        self.layer_touched
            .iter()
            .map(|t| {
                let mut v: Vec<NodeId> = t.iter().map(|&x| NodeId(x)).collect();
                v.sort_unstable();
                v
            })
            .collect()
    }
}

/// Monte Carlo settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Number of independent replications (`m_mc`).
    pub replications: usize,
    pub rng_seed: u64,
    /// Safeguard on rounds; `None` means `|V| + 1`.
    pub max_rounds: Option<usize>,
    /// Mirror activations across layers. Turning this off is an ablation.
    #[serde(default = "default_true")]
    pub overlap: bool,
}

fn default_true() -> bool {
    true
}

/// Default replication count for evaluation runs.
pub const DEFAULT_EVAL_REPLICATIONS: usize = 10_000;

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            replications: DEFAULT_EVAL_REPLICATIONS,
            rng_seed: 0,
            max_rounds: None,
            overlap: true,
        }
    }
}

impl SimulationConfig {
    pub fn new(replications: usize, rng_seed: u64) -> Self {
        SimulationConfig {
            replications,
            rng_seed,
            ..Default::default()
        }
    }

    pub fn max_rounds_for(&self, g: &MultiplexGraph) -> usize {
        self.max_rounds.unwrap_or(g.num_nodes() + 1)
    }
}

/// Result of a single replication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffusionOutcome {
    pub per_layer_activated: Vec<Vec<NodeId>>,
    pub union_count: usize,
    pub rounds: usize,
}

fn seed_nodes(g: &MultiplexGraph, s: &SeedVector) -> Result<Vec<u32>> {
    if s.len() != g.num_nodes() {
        return Err(RemError::Contract(format!(
            "seed vector has length {}, graph has {} nodes",
            s.len(),
            g.num_nodes()
        )));
    }
    if !s.is_binary() {
        return Err(RemError::Contract(
            "simulation requires a binary seed vector".into(),
        ));
    }
    Ok(s.nodes())
}

/// One replication with a world key drawn from `rng`.
pub fn simulate_once<R: Rng + ?Sized>(
    g: &MultiplexGraph,
    s: &SeedVector,
    rng: &mut R,
) -> Result<DiffusionOutcome> {
    let seeds = seed_nodes(g, s)?;
    let world = CoinWorld { key: rng.random() };
    Ok(simulate_in_world(g, &seeds, &world, true))
}

/// One deterministic replication in a given world.
pub fn simulate_in_world<W: EdgeWorld>(
    g: &MultiplexGraph,
    seeds: &[u32],
    world: &W,
    overlap: bool,
) -> DiffusionOutcome {
    let mut p = Propagator::new(g, overlap, g.num_nodes() + 1);
    let stats = p.run(seeds, world);
    DiffusionOutcome {
        per_layer_activated: p.per_layer_activated(),
        union_count: stats.union_count as usize,
        rounds: stats.rounds as usize,
    }
}

/// Monte Carlo estimate of the expected union spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadEstimate {
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation / sqrt(m)).
    pub stderr: f64,
    pub rounds_mean: f64,
    pub replications: usize,
}

pub fn estimate_spread(
    g: &MultiplexGraph,
    s: &SeedVector,
    cfg: &SimulationConfig,
) -> Result<SpreadEstimate> {
    let seeds = seed_nodes(g, s)?;
    estimate_spread_nodes(g, &seeds, cfg)
}

/// [`estimate_spread`] on an explicit node list.
pub fn estimate_spread_nodes(
    g: &MultiplexGraph,
    seeds: &[u32],
    cfg: &SimulationConfig,
) -> Result<SpreadEstimate> {
    if cfg.replications == 0 {
        return Err(RemError::Config("at least one replication is required".into()));
    }
    if let Some(&bad) = seeds.iter().find(|&&v| v as usize >= g.num_nodes()) {
        return Err(RemError::Contract(format!("seed node {bad} outside the graph")));
    }
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let max_rounds = cfg.max_rounds_for(g);
    let m = cfg.replications;
    let runs: Vec<RunStats> = (0..m)
        .into_par_iter()
        .with_min_len(64)
        .map_init(
            || Propagator::new(g, cfg.overlap, max_rounds),
            |p, j| {
                let world = CoinWorld {
                    key: replication_key(cfg.rng_seed, j as u64),
                };
                p.run(&seeds, &world)
            },
        )
        .collect();
    Ok(summarize(&runs))
}

fn summarize(runs: &[RunStats]) -> SpreadEstimate {
    let m = runs.len();
    // integer sums keep the reduction order-independent
    let sum: u64 = runs.iter().map(|r| r.union_count as u64).sum();
    let rounds: u64 = runs.iter().map(|r| r.rounds as u64).sum();
    let mean = sum as f64 / m as f64;
    let stderr = if m > 1 {
        let ss: f64 = runs
            .iter()
            .map(|r| {
                let d = r.union_count as f64 - mean;
                d * d
            })
            .sum();
        (ss / (m - 1) as f64 / m as f64).sqrt()
    } else {
        0.0
    };
    SpreadEstimate {
        mean,
        stderr,
        rounds_mean: rounds as f64 / m as f64,
        replications: m,
    }
}

/// Sequential variant used for timing measurements.
pub fn estimate_spread_serial(
    g: &MultiplexGraph,
    seeds: &[u32],
    cfg: &SimulationConfig,
) -> SpreadEstimate {
    let mut p = Propagator::new(g, cfg.overlap, cfg.max_rounds_for(g));
    let runs: Vec<RunStats> = (0..cfg.replications as u64)
        .map(|j| {
            p.run(
                seeds,
                &CoinWorld {
                    key: replication_key(cfg.rng_seed, j),
                },
            )
        })
        .collect();
    summarize(&runs)
}

/// Fraction of the node universe reached.
pub fn infected_percentage(spread: f64, g: &MultiplexGraph) -> f64 {
    spread / g.num_nodes() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_multiplex, DiffusionModelKind};
    use crate::rng::stream;
    use proptest::prelude::*;

    struct AllLive;
    impl EdgeWorld for AllLive {
        fn is_live(&self, _: usize, _: usize, _: f64) -> bool {
            true
        }
    }

    fn chain_half() -> MultiplexGraph {
        parse_multiplex("0 0 1 0.5\n0 1 2 0.5\n").unwrap()
    }

    #[test]
    fn empty_and_full_seed_sets() {
        let g = chain_half();
        let mut rng = stream(1, "t");
        let o = simulate_once(&g, &SeedVector::zeros(3), &mut rng).unwrap();
        assert_eq!(o.union_count, 0);
        let all = SeedVector::from_nodes(3, &[0, 1, 2]).unwrap();
        assert_eq!(simulate_once(&g, &all, &mut rng).unwrap().union_count, 3);
    }

    #[test]
    fn non_binary_seed_is_rejected() {
        let g = chain_half();
        let s = SeedVector::relaxed(vec![0.5, 0.0, 0.0]).unwrap();
        let mut rng = stream(1, "t");
        assert!(matches!(
            simulate_once(&g, &s, &mut rng),
            Err(RemError::Contract(_))
        ));
    }

    #[test]
    fn chain_estimate_near_exact() {
        let g = chain_half();
        let s = SeedVector::from_nodes(3, &[0]).unwrap();
        let est = estimate_spread(&g, &s, &SimulationConfig::new(200_000, 11)).unwrap();
        assert!((est.mean - 1.75).abs() <= 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn isolated_seeds_spread_exactly_their_count() {
        let g = parse_multiplex("# nodes=6 layers=1\n0 0 1\n").unwrap();
        let s = SeedVector::from_nodes(6, &[3, 4, 5]).unwrap();
        let est = estimate_spread(&g, &s, &SimulationConfig::new(50, 2)).unwrap();
        assert_eq!(est.mean, 3.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn lt_is_deterministic() {
        let g = parse_multiplex(
            "# layer=0 model=LT\n# layer=1 model=LT theta=0.3\n0 0 2\n0 1 2\n0 2 3\n1 3 4\n1 0 4\n1 1 4\n",
        )
        .unwrap();
        let s = SeedVector::from_nodes(5, &[0]).unwrap();
        let est = estimate_spread(&g, &s, &SimulationConfig::new(37, 9)).unwrap();
        assert_eq!(est.stderr, 0.0);
        // layer 0: 0 -> 2 (1/2 >= .5) then 2 -> 3; layer 1: 4 needs 1 of 3 (>= .3)
        assert_eq!(est.mean, 4.0);
    }

    #[test]
    fn overlap_switch_matters() {
        // layer 0 carries 0 -> 1, layer 1 carries 1 -> 2.
        let g = parse_multiplex("0 0 1\n1 1 2\n").unwrap();
        let on = simulate_in_world(&g, &[0], &AllLive, true);
        let off = simulate_in_world(&g, &[0], &AllLive, false);
        assert_eq!(on.union_count, 3);
        assert_eq!(off.union_count, 2);
        // seeds are active in every layer
        for layer in &off.per_layer_activated {
            assert!(layer.contains(&NodeId(0)));
        }
    }

    #[test]
    fn rounds_count_activation_steps() {
        let g = parse_multiplex("0 0 1\n0 1 2\n0 2 3\n").unwrap();
        let o = simulate_in_world(&g, &[0], &AllLive, true);
        assert_eq!(o.union_count, 4);
        assert_eq!(o.rounds, 3);
    }

    #[test]
    fn max_rounds_caps_propagation() {
        let g = parse_multiplex("0 0 1\n0 1 2\n0 2 3\n").unwrap();
        let mut p = Propagator::new(&g, true, 1);
        assert_eq!(p.run(&[0], &AllLive).union_count, 2);
    }

    #[test]
    fn percentage() {
        let g = parse_multiplex("# nodes=2708 layers=1\n0 0 1\n").unwrap();
        assert_eq!(infected_percentage(2708.0, &g), 1.0);
        assert_eq!(infected_percentage(0.0, &g), 0.0);
        assert!((infected_percentage(965.04, &g) - 0.35637).abs() < 1e-5);
    }

    fn random_multiplex(n: u32, edges: Vec<(u8, u32, u32)>, lt_mask: u8) -> MultiplexGraph {
        let mut text = String::new();
        for l in 0..3u8 {
            if lt_mask & (1 << l) != 0 {
                text.push_str(&format!("# layer={l} model=LT\n"));
            } else {
                text.push_str(&format!("# layer={l} model=IC\n"));
            }
        }
        text.push_str(&format!("# nodes={n} layers=3\n"));
        let mut seen = std::collections::BTreeSet::new();
        for (l, a, b) in edges {
            let (a, b) = (a % n, b % n);
            if a != b && seen.insert((l % 3, a, b)) {
                text.push_str(&format!("{} {a} {b}\n", l % 3));
            }
        }
        parse_multiplex(&text).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn coupled_monotonicity_and_union_bounds(
            edges in prop::collection::vec((0u8..3, 0u32..12, 0u32..12), 0..40),
            lt_mask in 0u8..8,
            base in prop::collection::btree_set(0u32..12, 0..4),
            extra in prop::collection::btree_set(0u32..12, 0..4),
            seed in any::<u64>(),
        ) {
            let g = random_multiplex(12, edges, lt_mask);
            let small: Vec<u32> = base.iter().copied().collect();
            let big: Vec<u32> = base.union(&extra).copied().collect();
            for j in 0..8u64 {
                let w = CoinWorld { key: replication_key(seed, j) };
                let a = simulate_in_world(&g, &small, &w, true);
                let b = simulate_in_world(&g, &big, &w, true);
                prop_assert!(b.union_count >= a.union_count);
                prop_assert!(a.union_count >= small.len());
                let off = simulate_in_world(&g, &small, &w, false);
                prop_assert!(off.union_count <= a.union_count);
                let max_layer = a.per_layer_activated.iter().map(Vec::len).max().unwrap();
                prop_assert!(a.union_count >= max_layer);
                let max_layer_off = off.per_layer_activated.iter().map(Vec::len).max().unwrap();
                prop_assert!(off.union_count >= max_layer_off);
            }
            let cfg = SimulationConfig::new(64, seed);
            let ea = estimate_spread_nodes(&g, &small, &cfg).unwrap();
            let eb = estimate_spread_nodes(&g, &big, &cfg).unwrap();
            prop_assert!(eb.mean >= ea.mean);
            prop_assert_eq!(ea, estimate_spread_nodes(&g, &small, &cfg).unwrap());
        }
    }

    #[test]
    fn models_switch_keeps_topology() {
        let g = chain_half();
        let lt = g.with_models(&[DiffusionModelKind::lt()]).unwrap();
        assert!(lt.all_lt());
        assert_eq!(lt.total_edges(), g.total_edges());
    }
}
