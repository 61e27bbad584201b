//! Inference, baselines, evaluation and end-to-end orchestration.

use std::collections::{BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::path::PathBuf;
use std::time::Instant;

use ordered_float::OrderedFloat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::diffusion::{estimate_spread, estimate_spread_nodes, infected_percentage, SimulationConfig};
use crate::error::{RemError, Result};
use crate::explore::{rem_train, EpisodeLog, RemTrainConfig};
use crate::graph::{binarize_topb, MultiplexGraph, SeedVector};
use crate::pmoe::{ForwardOpts, Pmoe, PmoeConfig};
use crate::rng::{self, RNG_ALGORITHM};
use crate::seed2vec::{Seed2Vec, VaeConfig};
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// Share of the node count, rounded up.
    Fraction(f64),
    Absolute(usize),
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Fraction(0.1)
    }
}

impl Budget {
    pub fn resolve(&self, num_nodes: usize) -> Result<usize> {
        let b = match *self {
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(RemError::Config(format!("budget fraction {f} outside (0, 1]")));
                }
                (f * num_nodes as f64).ceil() as usize
            }
            Budget::Absolute(b) => b,
        };
        if b == 0 || b > num_nodes {
            return Err(RemError::Config(format!(
                "budget {b} must lie in 1..={num_nodes}"
            )));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub size: usize,
    /// Share of uniformly random sets; the rest favour high-degree nodes.
    pub random_fraction: f64,
    pub label_replications: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            size: 500,
            random_fraction: 0.5,
            label_replications: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub steps: usize,
    pub beta: f64,
    pub restarts: usize,
    /// Single prior sample, no restarts.
    pub faithful: bool,
    /// Fresh prior samples allowed after a non-finite ascent.
    pub max_nan_retries: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            steps: 400,
            beta: 1e-2,
            restarts: 8,
            faithful: false,
            max_nan_retries: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub replications: usize,
    pub rng_seed: u64,
    /// Replications per candidate inside the greedy baseline.
    pub greedy_replications: usize,
    pub methods: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            replications: crate::diffusion::DEFAULT_EVAL_REPLICATIONS,
            rng_seed: 7,
            greedy_replications: 1000,
            methods: vec!["rem".into(), "random".into(), "degree".into(), "mc_greedy".into()],
        }
    }
}

/// Everything one end-to-end run needs. `vae.num_nodes` is filled in from
/// the graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub graph: Option<PathBuf>,
    pub budget: Budget,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub vae: VaeConfig,
    pub pmoe: PmoeConfig,
    pub train: RemTrainConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Initial training sets: a mix of uniform and degree-biased budget-`b`
/// sets, all distinct.
pub fn generate_x0(g: &MultiplexGraph, b: usize, cfg: &DatasetConfig, seed: u64) -> Vec<Vec<u32>> {
    let n = g.num_nodes();
    let degree: Vec<f64> = g.union_out_degree().into_iter().map(|d| d as f64).collect();
    let mut r = rng::stream(seed, "x0");
    let n_random = (cfg.size as f64 * cfg.random_fraction).round() as usize;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.size);
    let mut attempts = 0;
    while out.len() < cfg.size && attempts < cfg.size * 20 {
        attempts += 1;
        let set = if out.len() < n_random {
            synth::random_seed_set(n, b, &mut r)
        } else {
            synth::weighted_seed_set(&degree, b, &mut r)
        };
        if seen.insert(set.clone()) {
            out.push(set);
        }
    }
    out
}

/// Monte Carlo labels with one shared simulation seed.
pub fn label_sets(g: &MultiplexGraph, sets: &[Vec<u32>], sim: &SimulationConfig) -> Result<Vec<(SeedVector, f64)>> {
    sets.iter()
        .map(|s| {
            let y = estimate_spread_nodes(g, s, sim)?.mean;
            Ok((SeedVector::from_nodes(g.num_nodes(), s)?, y))
        })
        .collect()
}

/// Predicted soft spread of the decode of a `1 x s` latent.
pub fn inference_objective_var<'t>(
    vae: &Seed2Vec,
    vae_p: &[Var<'t>],
    pmoe: &Pmoe,
    pmoe_p: &[Var<'t>],
    z: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let decoded = vae.decode_var(vae_p, z)?;
    let out = pmoe.forward_var::<ChaCha8Rng>(pmoe_p, decoded, &ForwardOpts::inference(), None)?;
    Ok((out.y_soft.sum(), decoded))
}

/// Result of gradient ascent from one starting latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ascent {
    pub z: Vec<f64>,
    pub decoded: Vec<f64>,
    /// Prediction at the start and after every step.
    pub predictions: Vec<f64>,
}

pub fn ascend_latent(vae: &Seed2Vec, pmoe: &Pmoe, z0: Vec<f64>, steps: usize, beta: f64) -> Result<Ascent> {
    let mut z = z0;
    let mut predictions = Vec::with_capacity(steps + 1);
    loop {
        let tape = Tape::new();
        let vp = vae.params().bind_frozen(&tape);
        let pp = pmoe.params().bind_frozen(&tape);
        let zv = tape.param(Tensor::row(z.clone()));
        let (y, decoded) = inference_objective_var(vae, &vp, pmoe, &pp, zv)?;
        let value = y.item();
        if !value.is_finite() {
            return Err(RemError::NonFinite("latent ascent prediction".into()));
        }
        predictions.push(value);
        if predictions.len() > steps {
            return Ok(Ascent {
                z,
                decoded: decoded.to_tensor().into_data(),
                predictions,
            });
        }
        let grad = tape.backward(y)?.wrt_or_zeros(zv);
        for (zi, gi) in z.iter_mut().zip(grad.data()) {
            *zi += beta * gi;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(RemError::NonFinite("latent ascent step".into()));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub seeds: SeedVector,
    /// Surrogate prediction for the binarised set.
    pub predicted: f64,
    /// Surrogate prediction for the relaxed decode at the final latent.
    pub latent_prediction: f64,
    pub restarts_used: usize,
}

/// Latent gradient ascent from prior samples, keeping the restart whose
/// binarised set the surrogate rates highest.
pub fn rem_predict(vae: &Seed2Vec, pmoe: &Pmoe, b: usize, cfg: &InferenceConfig, seed: u64) -> Result<InferenceOutcome> {
    let mut r = rng::stream(seed, "infer");
    let restarts = if cfg.faithful { 1 } else { cfg.restarts.max(1) };
    let mut best: Option<InferenceOutcome> = None;
    let mut retries = 0;
    let mut done = 0;
    while done < restarts {
        let z0 = vae.sample_prior(&mut r);
        let ascent = match ascend_latent(vae, pmoe, z0, cfg.steps, cfg.beta) {
            Ok(a) => a,
            Err(RemError::NonFinite(what)) => {
                retries += 1;
                log::warn!("restarting inference after non-finite {what}");
                if retries > cfg.max_nan_retries {
                    return Err(RemError::NonFinite(format!("{what} after {retries} restarts")));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let seeds = binarize_topb(&ascent.decoded, b);
        let predicted = pmoe.predict(seeds.values())?.y_soft;
        let cand = InferenceOutcome {
            seeds,
            predicted,
            latent_prediction: *ascent.predictions.last().expect("at least one prediction"),
            restarts_used: done + 1,
        };
        if best.as_ref().is_none_or(|b| cand.predicted > b.predicted) {
            best = Some(cand);
        }
        done += 1;
    }
    let mut out = best.expect("at least one restart");
    out.restarts_used = done;
    Ok(out)
}

pub fn baseline_random<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> SeedVector {
    SeedVector::from_nodes(n, &synth::random_seed_set(n, b, rng)).expect("in range")
}

/// Top-`b` nodes by out-degree in the union graph, lower index on ties.
pub fn baseline_degree(g: &MultiplexGraph, b: usize) -> SeedVector {
    let deg: Vec<f64> = g.union_out_degree().into_iter().map(|d| d as f64).collect();
    binarize_topb(&deg, b)
}

/// Lazy greedy on Monte Carlo spread. Every estimate reuses the same
/// replication seeds, so all candidates are scored on identical worlds.
pub fn baseline_mc_greedy(g: &MultiplexGraph, b: usize, sim: &SimulationConfig) -> Result<SeedVector> {
    let n = g.num_nodes();
    let b = b.min(n);
    let mut chosen: Vec<u32> = Vec::with_capacity(b);
    let mut current = 0.0;
    // (upper bound on gain, lower index first, round of last evaluation)
    let mut heap: BinaryHeap<(OrderedFloat<f64>, Reverse<u32>, usize)> = BinaryHeap::with_capacity(n);
    for v in 0..n as u32 {
        let s = estimate_spread_nodes(g, &[v], sim)?.mean;
        heap.push((OrderedFloat(s), Reverse(v), 0));
    }
    while chosen.len() < b {
        let (gain, Reverse(v), round) = heap.pop().expect("candidates remain");
        if round == chosen.len() {
            chosen.push(v);
            current += gain.0;
            continue;
        }
        let mut s = chosen.clone();
        s.push(v);
        let fresh = estimate_spread_nodes(g, &s, sim)?.mean - current;
        heap.push((OrderedFloat(fresh), Reverse(v), chosen.len()));
    }
    SeedVector::from_nodes(n, &chosen)
}

/// One method's seed set for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSeeds {
    pub method: String,
    pub seeds: SeedVector,
    /// Time spent producing the set, when measured.
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub budget: usize,
    pub spread: f64,
    pub stderr: f64,
    pub percentage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    pub seeds: Vec<u32>,
}

/// Paired Monte Carlo evaluation: every method is simulated on the same
/// replication seeds.
pub fn evaluate(g: &MultiplexGraph, b: usize, methods: &[MethodSeeds], sim: &SimulationConfig) -> Result<Vec<EvaluationReport>> {
    methods
        .iter()
        .map(|m| {
            if m.seeds.len() != g.num_nodes() {
                return Err(RemError::Contract(format!("method {}: seed vector length mismatch", m.method)));
            }
            m.seeds
                .check_feasible(b)
                .map_err(|e| RemError::Contract(format!("method {}: {e}", m.method)))?;
            let est = estimate_spread(g, &m.seeds, sim)?;
            Ok(EvaluationReport {
                method: m.method.clone(),
                budget: b,
                spread: est.mean,
                stderr: est.stderr,
                percentage: infected_percentage(est.mean, g),
                seconds: m.seconds,
                seeds: m.seeds.nodes(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub num_nodes: usize,
    pub num_layers: usize,
    pub num_edges: usize,
    pub budget: usize,
    pub rng_algorithm: String,
    pub dataset_size: usize,
    pub best_x0_label: f64,
    pub reports: Vec<EvaluationReport>,
    pub episodes: Vec<EpisodeLog>,
}

impl PipelineReport {
    /// JSON with timing fields removed, for comparing runs.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        for r in &mut c.reports {
            r.seconds = None;
        }
        Ok(serde_json::to_string_pretty(&c)?)
    }
}

/// Models trained by [`run_pipeline`].
pub struct TrainedModels {
    pub vae: Seed2Vec,
    pub pmoe: Pmoe,
}

/// Generate and label the initial data, train, infer, run the baselines
/// and evaluate everything on shared replication seeds.
pub fn run_pipeline(g: &MultiplexGraph, cfg: &RunConfig) -> Result<(PipelineReport, TrainedModels)> {
    let n = g.num_nodes();
    let b = cfg.budget.resolve(n)?;
    let label_sim = SimulationConfig::new(cfg.dataset.label_replications, rng::derive_seed(cfg.seed, 11));
    let sets = generate_x0(g, b, &cfg.dataset, rng::derive_seed(cfg.seed, 12));
    let x0 = label_sets(g, &sets, &label_sim)?;
    let best_x0_label = x0.iter().map(|(_, y)| *y).fold(f64::NEG_INFINITY, f64::max);

    let vae = Seed2Vec::new(VaeConfig { num_nodes: n, ..cfg.vae.clone() }, rng::derive_seed(cfg.seed, 13))?;
    let pmoe = Pmoe::new(cfg.pmoe.clone(), g, rng::derive_seed(cfg.seed, 14))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.label_sim = label_sim.clone();
    train_cfg.seed = rng::derive_seed(cfg.seed, 15);
    let trainer = rem_train(g, b, train_cfg, vae, pmoe, x0)?;
    let dataset_size = trainer.dataset().len();
    let episodes = trainer.logs().to_vec();
    let models = TrainedModels {
        vae: trainer.vae,
        pmoe: trainer.pmoe,
    };

    let mut methods = Vec::new();
    for name in &cfg.evaluation.methods {
        let start = Instant::now();
        let seeds = match name.as_str() {
            "rem" => rem_predict(&models.vae, &models.pmoe, b, &cfg.inference, rng::derive_seed(cfg.seed, 16))?.seeds,
            "random" => baseline_random(n, b, &mut rng::stream(rng::derive_seed(cfg.seed, 17), "random-baseline")),
            "degree" => baseline_degree(g, b),
            "mc_greedy" => baseline_mc_greedy(
                g,
                b,
                &SimulationConfig::new(cfg.evaluation.greedy_replications, rng::derive_seed(cfg.seed, 18)),
            )?,
            other => return Err(RemError::Config(format!("unknown method {other}"))),
        };
        methods.push(MethodSeeds {
            method: name.clone(),
            seeds,
            seconds: Some(start.elapsed().as_secs_f64()),
        });
    }
    let eval_sim = SimulationConfig::new(cfg.evaluation.replications, cfg.evaluation.rng_seed);
    let reports = evaluate(g, b, &methods, &eval_sim)?;
    Ok((
        PipelineReport {
            num_nodes: n,
            num_layers: g.num_layers(),
            num_edges: g.total_edges(),
            budget: b,
            rng_algorithm: RNG_ALGORITHM.into(),
            dataset_size,
            best_x0_label,
            reports,
            episodes,
        },
        models,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::graph::{parse_multiplex, DiffusionModelKind};
    use crate::oracle::exact_greedy;

    #[test]
    fn budget_rounding() {
        assert_eq!(Budget::Fraction(0.1).resolve(2708).unwrap(), 271);
        assert_eq!(Budget::Fraction(0.01).resolve(50).unwrap(), 1);
        assert_eq!(Budget::Absolute(5).resolve(10).unwrap(), 5);
        assert!(Budget::Absolute(0).resolve(10).is_err());
        assert!(Budget::Fraction(1.5).resolve(10).is_err());
    }

    #[test]
    fn config_json_defaults_and_overrides() {
        let cfg = RunConfig::from_json(r#"{"budget": {"absolute": 3}, "pmoe": {"num_experts": 20}}"#).unwrap();
        assert_eq!(cfg.budget, Budget::Absolute(3));
        assert_eq!(cfg.pmoe.num_experts, 20);
        assert_eq!(cfg.pmoe.top_m, 2);
        assert_eq!(cfg.vae.kl_weight, 0.55);
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn degree_baseline_picks_star_center() {
        let g = parse_multiplex("0 3 0\n0 3 1\n0 3 2\n1 0 1\n").unwrap();
        assert_eq!(baseline_degree(&g, 1).nodes(), vec![3]);
    }

    #[test]
    fn greedy_matches_exact_on_a_path() {
        let g = parse_multiplex("0 0 1 0.9\n0 1 2 0.9\n0 2 3 0.9\n0 4 5 0.2\n# nodes=6 layers=1\n").unwrap();
        let sim = SimulationConfig::new(20_000, 3);
        let mc = baseline_mc_greedy(&g, 2, &sim).unwrap();
        assert_eq!(mc, exact_greedy(&g, 2).unwrap());
    }

    #[test]
    fn evaluate_pairs_and_checks() {
        let g = parse_multiplex("0 0 1\n0 1 2\n1 2 3\n1 0 3\n").unwrap();
        let s = SeedVector::from_nodes(4, &[0]).unwrap();
        let methods = vec![
            MethodSeeds { method: "a".into(), seeds: s.clone(), seconds: None },
            MethodSeeds { method: "b".into(), seeds: s, seconds: Some(0.5) },
            MethodSeeds { method: "all".into(), seeds: SeedVector::from_nodes(4, &[0, 1, 2, 3]).unwrap(), seconds: None },
        ];
        let sim = SimulationConfig::new(500, 9);
        let err = evaluate(&g, 1, &methods, &sim).unwrap_err();
        assert!(err.to_string().contains("method all"));
        let r = evaluate(&g, 4, &methods, &sim).unwrap();
        assert_eq!(r[0].spread, r[1].spread);
        assert_eq!(r[2].percentage, 1.0);
        let json = serde_json::to_string(&r).unwrap();
        let back: Vec<EvaluationReport> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    fn tiny_models(g: &MultiplexGraph) -> (Seed2Vec, Pmoe) {
        let vae = Seed2Vec::new(VaeConfig { num_nodes: g.num_nodes(), hidden: 6, latent: 3, ..VaeConfig::default() }, 3).unwrap();
        let pmoe = Pmoe::new(PmoeConfig { num_experts: 3, hidden: 4, ..PmoeConfig::default() }, g, 4).unwrap();
        (vae, pmoe)
    }

    #[test]
    fn inference_objective_gradient() {
        let g = parse_multiplex("0 0 1\n0 1 2\n1 2 3\n1 3 0\n0 2 4\n").unwrap();
        let (vae, pmoe) = tiny_models(&g);
        let err = grad_check(
            |t, z| {
                let vp = vae.params().bind_frozen(t);
                let pp = pmoe.params().bind_frozen(t);
                Ok(inference_objective_var(&vae, &vp, &pmoe, &pp, z)?.0)
            },
            &Tensor::row(vec![0.2, -0.4, 1.3]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn zero_steps_decode_the_prior_sample() {
        let g = parse_multiplex("0 0 1\n0 1 2\n1 2 3\n1 3 0\n0 2 4\n").unwrap();
        let (vae, pmoe) = tiny_models(&g);
        let cfg = InferenceConfig { steps: 0, faithful: true, ..InferenceConfig::default() };
        let out = rem_predict(&vae, &pmoe, 2, &cfg, 5).unwrap();
        let z0 = vae.sample_prior(&mut rng::stream(5, "infer"));
        assert_eq!(out.seeds, binarize_topb(&vae.decode(&z0).unwrap(), 2));
        let again = rem_predict(&vae, &pmoe, 2, &InferenceConfig { steps: 10, ..cfg.clone() }, 5).unwrap();
        let twice = rem_predict(&vae, &pmoe, 2, &InferenceConfig { steps: 10, ..cfg }, 5).unwrap();
        assert_eq!(again, twice);
        assert_eq!(again.seeds.nodes().len(), 2);
    }

    #[test]
    fn x0_sets_are_distinct_and_sized() {
        let g = crate::synth::sbm_multiplex(30, &[DiffusionModelKind::IC, DiffusionModelKind::lt()], 3, 0.2, 0.02, 1).unwrap();
        let sets = generate_x0(&g, 3, &DatasetConfig { size: 40, ..DatasetConfig::default() }, 2);
        assert_eq!(sets.len(), 40);
        assert!(sets.iter().all(|s| s.len() == 3));
        let uniq: BTreeSet<_> = sets.iter().collect();
        assert_eq!(uniq.len(), 40);
    }
}
