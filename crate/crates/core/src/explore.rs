//! Latent exploration, the priority replay memory and the outer REM loop.
//!
//! An episode samples a latent vector from the prior and descends
//! `c * H(D(z)) + exp(-y(D(z)) / |V|)` with both models frozen, storing every
//! decoded vector with its predicted spread. The best stored vectors are then
//! binarised, relabelled by simulation and added to the training data before
//! both models are refit.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ordered_float::OrderedFloat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::{estimate_spread_nodes, SimulationConfig};
use crate::error::{RemError, Result};
use crate::graph::{binarize_topb, MultiplexGraph, SeedVector};
use crate::pmoe::{ForwardOpts, Pmoe};
use crate::rng;
use crate::seed2vec::{entropy_var, Seed2Vec};

pub const DEFAULT_PRM_CAPACITY: usize = 12_000;

/// A decoded vector and the spread the surrogate predicts for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub x: Vec<f64>,
    pub predicted: f64,
}

/// Bounded max-priority store keyed by predicted spread. Equal predictions
/// pop in insertion order; at capacity the lowest prediction is evicted.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityReplayMemory {
    capacity: usize,
    next_seq: u64,
    entries: BTreeMap<(OrderedFloat<f64>, Reverse<u64>), Vec<f64>>,
}

impl PriorityReplayMemory {
    pub fn new(capacity: usize) -> Self {
        PriorityReplayMemory {
            capacity: capacity.max(1),
            next_seq: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Insert an entry; returns false when it was rejected because the
    /// memory is full of better entries.
    pub fn push(&mut self, entry: ReplayEntry) -> Result<bool> {
        if !entry.predicted.is_finite() {
            return Err(RemError::NonFinite("replay prediction".into()));
        }
        if entry.x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RemError::Contract("replay vector outside [0, 1]".into()));
        }
        let key = (OrderedFloat(entry.predicted), Reverse(self.next_seq));
        self.next_seq += 1;
        if self.entries.len() >= self.capacity {
            let min = *self.entries.keys().next().expect("non-empty at capacity");
            if key <= min {
                return Ok(false);
            }
            self.entries.remove(&min);
        }
        self.entries.insert(key, entry.x);
        Ok(true)
    }

    pub fn peek_max(&self) -> Option<f64> {
        self.entries.keys().next_back().map(|k| k.0 .0)
    }

    pub fn pop_max(&mut self) -> Option<ReplayEntry> {
        self.entries.pop_last().map(|((p, _), x)| ReplayEntry {
            x,
            predicted: p.0,
        })
    }

    /// Entries from best to worst without removing them.
    pub fn iter_desc(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.entries.iter().rev().map(|(k, x)| (k.0 .0, x.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Entropy coefficient; negative values reward spread-out decodes.
    pub c: f64,
    /// Latent step size.
    pub alpha: f64,
    /// Gradient steps per episode.
    pub steps: usize,
    pub episodes: usize,
    /// Sets harvested per episode.
    pub harvest_k: usize,
    pub prm_capacity: usize,
    /// Keep every earlier harvest in the training set, not only the latest.
    pub accumulate: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            c: -0.1,
            alpha: 1.0,
            steps: 400,
            episodes: 30,
            harvest_k: 50,
            prm_capacity: DEFAULT_PRM_CAPACITY,
            accumulate: true,
        }
    }
}

/// Loss terms and the decode of one latent batch.
pub struct ExploreVars<'t> {
    pub loss: Var<'t>,
    pub decoded: Var<'t>,
    pub y_soft: Var<'t>,
}

/// Exploration loss for a `1 x s` latent, with both models bound as constants.
pub fn explore_loss_var<'t>(
    vae: &Seed2Vec,
    vae_p: &[Var<'t>],
    pmoe: &Pmoe,
    pmoe_p: &[Var<'t>],
    z: Var<'t>,
    c: f64,
) -> Result<ExploreVars<'t>> {
    let decoded = vae.decode_var(vae_p, z)?;
    let out = pmoe.forward_var::<ChaCha8Rng>(pmoe_p, decoded, &ForwardOpts::inference(), None)?;
    let scale = pmoe.num_nodes() as f64;
    let spread_term = out.y_soft.scale(-1.0 / scale).exp().sum();
    let loss = if c == 0.0 {
        spread_term
    } else {
        entropy_var(decoded)?.sum().scale(c).add(spread_term)?
    };
    Ok(ExploreVars {
        loss,
        decoded,
        y_soft: out.y_soft,
    })
}

/// Value of the exploration loss at `z`.
pub fn explore_loss(vae: &Seed2Vec, pmoe: &Pmoe, z: &[f64], c: f64) -> Result<f64> {
    let tape = Tape::new();
    let vp = vae.params().bind_frozen(&tape);
    let pp = pmoe.params().bind_frozen(&tape);
    let zv = tape.constant(Tensor::row(z.to_vec()));
    Ok(explore_loss_var(vae, &vp, pmoe, &pp, zv, c)?.loss.item())
}

/// One latent point: loss gradient, decode and prediction.
struct Probe {
    grad: Vec<f64>,
    decoded: Vec<f64>,
    predicted: f64,
}

fn probe(vae: &Seed2Vec, pmoe: &Pmoe, z: &[f64], c: f64) -> Result<Probe> {
    let tape = Tape::new();
    let vp = vae.params().bind_frozen(&tape);
    let pp = pmoe.params().bind_frozen(&tape);
    let zv = tape.param(Tensor::row(z.to_vec()));
    let e = explore_loss_var(vae, &vp, pmoe, &pp, zv, c)?;
    let predicted = e.y_soft.item();
    let decoded = e.decoded.to_tensor().into_data();
    let grad = tape.backward(e.loss)?.wrt_or_zeros(zv).into_data();
    Ok(Probe {
        grad,
        decoded,
        predicted,
    })
}

/// Trajectory of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// Prediction after each step.
    pub predicted: Vec<f64>,
    pub aborted: bool,
}

/// Sample `z` from the prior, take `cfg.steps` descent steps on the
/// exploration loss and store every decode in `prm`.
pub fn explore_episode<R: Rng + ?Sized>(
    vae: &Seed2Vec,
    pmoe: &Pmoe,
    cfg: &ExploreConfig,
    prm: &mut PriorityReplayMemory,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    let mut z = vae.sample_prior(rng);
    let mut trace = EpisodeTrace {
        predicted: Vec::with_capacity(cfg.steps),
        aborted: false,
    };
    if cfg.steps == 0 {
        return Ok(trace);
    }
    let mut current = probe(vae, pmoe, &z, cfg.c)?;
    for step in 0..cfg.steps {
        for (zi, gi) in z.iter_mut().zip(&current.grad) {
            *zi -= cfg.alpha * gi;
        }
        if z.iter().any(|v| !v.is_finite()) {
            log::warn!("exploration aborted at step {step}: non-finite latent");
            trace.aborted = true;
            break;
        }
        current = probe(vae, pmoe, &z, cfg.c)?;
        if !current.predicted.is_finite() || current.decoded.iter().any(|v| !v.is_finite()) {
            log::warn!("exploration aborted at step {step}: non-finite decode");
            trace.aborted = true;
            break;
        }
        prm.push(ReplayEntry {
            x: current.decoded.clone(),
            predicted: current.predicted,
        })?;
        trace.predicted.push(current.predicted);
    }
    Ok(trace)
}

/// Pop the `k` best entries, binarise each to budget `b`, drop repeats and
/// label the survivors by simulation.
pub fn harvest_topk(
    prm: &mut PriorityReplayMemory,
    k: usize,
    b: usize,
    g: &MultiplexGraph,
    sim: &SimulationConfig,
) -> Result<Vec<(SeedVector, f64)>> {
    if k > prm.len() {
        log::warn!("harvest of {k} requested from a memory holding {}", prm.len());
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < k {
        let Some(entry) = prm.pop_max() else { break };
        let s = binarize_topb(&entry.x, b);
        let nodes = s.nodes();
        if !seen.insert(nodes.clone()) {
            continue;
        }
        let y = estimate_spread_nodes(g, &nodes, sim)?.mean;
        out.push((s, y));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemTrainConfig {
    pub explore: ExploreConfig,
    /// Simulation used to label harvested sets.
    pub label_sim: SimulationConfig,
    pub vae_epochs: usize,
    pub pmoe_epochs: usize,
    pub vae_retrain_epochs: usize,
    pub pmoe_retrain_epochs: usize,
    pub seed: u64,
}

impl Default for RemTrainConfig {
    fn default() -> Self {
        RemTrainConfig {
            explore: ExploreConfig::default(),
            label_sim: SimulationConfig::new(1000, 0),
            vae_epochs: 300,
            pmoe_epochs: 100,
            vae_retrain_epochs: 30,
            pmoe_retrain_epochs: 10,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub prm_size: usize,
    pub best_predicted: Option<f64>,
    pub best_mc_label: Option<f64>,
    pub harvested: usize,
    pub dataset_size: usize,
    pub vae_loss: f64,
    pub pmoe_loss: f64,
}

/// Owner of both models, the replay memory and the growing dataset.
pub struct RemTrainer<'g> {
    g: &'g MultiplexGraph,
    budget: usize,
    cfg: RemTrainConfig,
    pub vae: Seed2Vec,
    pub pmoe: Pmoe,
    x0: Vec<(SeedVector, f64)>,
    harvested: Vec<(SeedVector, f64)>,
    prm: PriorityReplayMemory,
    logs: Vec<EpisodeLog>,
}

impl<'g> RemTrainer<'g> {
    pub fn new(
        g: &'g MultiplexGraph,
        budget: usize,
        cfg: RemTrainConfig,
        vae: Seed2Vec,
        pmoe: Pmoe,
        x0: Vec<(SeedVector, f64)>,
    ) -> Result<Self> {
        if x0.is_empty() {
            return Err(RemError::Contract("initial dataset is empty".into()));
        }
        if vae.num_nodes() != g.num_nodes() || pmoe.num_nodes() != g.num_nodes() {
            return Err(RemError::Contract("model sizes do not match the graph".into()));
        }
        let prm = PriorityReplayMemory::new(cfg.explore.prm_capacity);
        Ok(RemTrainer {
            g,
            budget,
            cfg,
            vae,
            pmoe,
            x0,
            harvested: Vec::new(),
            prm,
            logs: Vec::new(),
        })
    }

    /// Training data: the initial sets plus harvests, without repeated sets.
    pub fn dataset(&self) -> Vec<(SeedVector, f64)> {
        let mut seen = BTreeSet::new();
        self.x0
            .iter()
            .chain(&self.harvested)
            .filter(|(s, _)| seen.insert(s.nodes()))
            .cloned()
            .collect()
    }

    pub fn logs(&self) -> &[EpisodeLog] {
        &self.logs
    }

    pub fn prm(&self) -> &PriorityReplayMemory {
        &self.prm
    }

    fn fit(&mut self, vae_epochs: usize, pmoe_epochs: usize, round: u64) -> Result<(f64, f64)> {
        let data = self.dataset();
        let seeds: Vec<SeedVector> = data.iter().map(|(s, _)| s.clone()).collect();
        let pairs: Vec<(Vec<f64>, f64)> = data.iter().map(|(s, y)| (s.values().to_vec(), *y)).collect();
        let base = rng::derive_seed(self.cfg.seed, round);
        let vae_curve = self.vae.train(&seeds, vae_epochs, rng::derive_seed(base, 1))?;
        let pmoe_curve = self.pmoe.train(&pairs, pmoe_epochs, rng::derive_seed(base, 2))?;
        Ok((
            vae_curve.last().copied().unwrap_or(f64::NAN),
            pmoe_curve.last().copied().unwrap_or(f64::NAN),
        ))
    }

    /// Fit both models on the initial data only.
    pub fn initial_fit(&mut self) -> Result<(f64, f64)> {
        self.fit(self.cfg.vae_epochs, self.cfg.pmoe_epochs, 0)
    }

    /// Explore, harvest, extend the dataset and refit.
    pub fn run_episode(&mut self, episode: usize) -> Result<EpisodeLog> {
        let mut r = rng::stream(rng::derive_seed(self.cfg.seed, 1000 + episode as u64), "explore");
        explore_episode(&self.vae, &self.pmoe, &self.cfg.explore, &mut self.prm, &mut r)?;
        let best_predicted = self.prm.peek_max();
        let batch = harvest_topk(
            &mut self.prm,
            self.cfg.explore.harvest_k,
            self.budget,
            self.g,
            &self.cfg.label_sim,
        )?;
        let best_mc_label = batch.iter().map(|(_, y)| *y).fold(None, |m: Option<f64>, y| {
            Some(m.map_or(y, |m| m.max(y)))
        });
        let harvested = batch.len();
        if self.cfg.explore.accumulate {
            self.harvested.extend(batch);
        } else {
            self.harvested = batch;
        }
        let (vae_loss, pmoe_loss) = self.fit(
            self.cfg.vae_retrain_epochs,
            self.cfg.pmoe_retrain_epochs,
            1 + episode as u64,
        )?;
        let log = EpisodeLog {
            episode,
            prm_size: self.prm.len(),
            best_predicted,
            best_mc_label,
            harvested,
            dataset_size: self.dataset().len(),
            vae_loss,
            pmoe_loss,
        };
        log::info!(
            "episode {episode}: harvested {harvested}, best label {:?}, dataset {}",
            log.best_mc_label,
            log.dataset_size
        );
        self.logs.push(log.clone());
        Ok(log)
    }

    pub fn run(&mut self) -> Result<()> {
        for t in 0..self.cfg.explore.episodes {
            self.run_episode(t)?;
        }
        Ok(())
    }
}

/// Initial fit followed by every configured episode.
pub fn rem_train<'g>(
    g: &'g MultiplexGraph,
    budget: usize,
    cfg: RemTrainConfig,
    vae: Seed2Vec,
    pmoe: Pmoe,
    x0: Vec<(SeedVector, f64)>,
) -> Result<RemTrainer<'g>> {
    let mut trainer = RemTrainer::new(g, budget, cfg, vae, pmoe, x0)?;
    trainer.initial_fit()?;
    trainer.run()?;
    Ok(trainer)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
