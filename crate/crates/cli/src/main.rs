use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use rem_core::diffusion::estimate_spread_nodes;
use rem_core::explore::{rem_train, write_jsonl, RemTrainer};
use rem_core::oracle::{marginal_gains, ExactOracle};
use rem_core::pipeline::{
    baseline_degree, baseline_mc_greedy, baseline_random, evaluate, generate_x0, label_sets,
    rem_predict, run_pipeline, Budget, MethodSeeds, RunConfig,
};
use rem_core::pmoe::Pmoe;
use rem_core::seed2vec::{Seed2Vec, VaeConfig};
use rem_core::{
    infected_percentage, load_multiplex, rng, save_multiplex, synth, DiffusionModelKind,
    MultiplexGraph, OracleBudget, SeedVector, SimulationConfig,
};

mod io;

use io::{emit, read_seeds, write_seeds, Dataset, Sample};

#[derive(Parser)]
#[command(name = "rem", version, about = "Influence maximization on multiplex networks")]
struct Cli {
    /// Write JSON here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load or generate a multiplex and summarise it.
    Ingest(IngestArgs),
    /// Monte Carlo spread of a seed set.
    Simulate(SimulateArgs),
    /// Exact spread or exact greedy selection on a small multiplex.
    Oracle(OracleArgs),
    /// Generate and label initial training sets.
    Dataset(DatasetArgs),
    /// Train the VAE, the spread predictor or the full exploration loop.
    Train(TrainArgs),
    /// Infer a seed set from trained models.
    Infer(InferArgs),
    /// Predicted spread of a seed set.
    PredictSpread(PredictArgs),
    /// Paired Monte Carlo comparison of seed sets and baselines.
    Evaluate(EvaluateArgs),
    /// End-to-end runs over several budgets, as JSON and CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Edge-list file to load.
    #[arg(long, conflicts_with = "synthetic")]
    graph: Option<PathBuf>,
    /// Generate a block-model multiplex instead.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 200)]
    nodes: usize,
    /// Layers as `model:p_in`, comma separated, e.g. `ic:0.02,lt:0.2`.
    #[arg(long, default_value = "ic:0.02,lt:0.2")]
    layers: String,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 0.001)]
    p_out: f64,
    /// Pareto shape of the per-node out-weights; 0 gives a plain block model.
    #[arg(long, default_value_t = 1.5)]
    hub_shape: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save the multiplex in canonical edge-list form.
    #[arg(long)]
    write: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    graph: PathBuf,
    /// One node id per line.
    #[arg(long)]
    seeds: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 10_000)]
    mc: usize,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// Turn off cross-layer activation.
    #[arg(long)]
    no_overlap: bool,
    /// Print JSON instead of a one-line summary.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, required_unless_present = "greedy")]
    seeds: Option<PathBuf>,
    /// Exact greedy selection of this many seeds.
    #[arg(long)]
    greedy: Option<usize>,
    /// Largest number of probabilistic edges to enumerate.
    #[arg(long, default_value_t = OracleBudget::default().max_probabilistic_edges)]
    max_edges: usize,
    #[arg(long)]
    no_overlap: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Budget: a fraction of the nodes (`0.1`) or a count (`20`).
    #[arg(long, value_parser = parse_budget)]
    budget: Option<Budget>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    size: Option<usize>,
    /// Monte Carlo replications per label.
    #[arg(long)]
    mc: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Vae,
    Pmoe,
    Rem,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    /// Labelled sets from `rem dataset`.
    #[arg(long)]
    data: PathBuf,
    /// Needed by the pmoe and rem stages.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Starting VAE checkpoint (rem stage).
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Starting predictor checkpoint (rem stage).
    #[arg(long)]
    pmoe: Option<PathBuf>,
    /// Checkpoint to write (vae and pmoe stages).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory for both checkpoints (rem stage).
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Per-episode JSONL log (rem stage).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    pmoe: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// One prior sample, no restarts.
    #[arg(long)]
    faithful: bool,
    /// Also write the seed set as a node list.
    #[arg(long)]
    seeds_out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    pmoe: PathBuf,
    #[arg(long)]
    seeds: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Named seed file, `name=path`; repeatable.
    #[arg(long = "set", value_parser = parse_named)]
    sets: Vec<(String, PathBuf)>,
    /// Built-in baselines, comma separated: random, degree, mc_greedy.
    #[arg(long, value_delimiter = ',')]
    baselines: Vec<String>,
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    greedy_mc: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Budgets to sweep; defaults to the configured one.
    #[arg(long, value_delimiter = ',', value_parser = parse_budget)]
    budgets: Vec<Budget>,
    /// CSV with one row per method and budget.
    #[arg(long)]
    csv: PathBuf,
}

fn parse_budget(s: &str) -> Result<Budget, String> {
    if s.contains('.') {
        s.parse::<f64>().map(Budget::Fraction).map_err(|e| e.to_string())
    } else {
        s.parse::<usize>().map(Budget::Absolute).map_err(|e| e.to_string())
    }
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn parse_layers(list: &str) -> Result<Vec<(DiffusionModelKind, f64)>> {
    list.split(',')
        .map(|part| {
            let (m, p) = part
                .split_once(':')
                .ok_or_else(|| anyhow!("layer `{part}` is not model:p_in"))?;
            let model = match m.to_ascii_lowercase().as_str() {
                "ic" => DiffusionModelKind::IC,
                "lt" => DiffusionModelKind::lt(),
                other => bail!("unknown model `{other}`"),
            };
            Ok((model, p.parse::<f64>().with_context(|| format!("bad p_in in `{part}`"))?))
        })
        .collect()
}

fn graph_summary(g: &MultiplexGraph) -> serde_json::Value {
    json!({
        "num_nodes": g.num_nodes(),
        "num_layers": g.num_layers(),
        "models": g.layers().iter().map(|l| l.model).collect::<Vec<_>>(),
        "edges_per_layer": g.layers().iter().map(|l| l.num_edges()).collect::<Vec<_>>(),
        "overlapping_nodes": g.overlapping_nodes().len(),
    })
}

fn ingest(a: &IngestArgs) -> Result<serde_json::Value> {
    let g = match (&a.graph, a.synthetic) {
        (Some(p), _) => load_multiplex(p).with_context(|| format!("loading {}", p.display()))?,
        (None, true) => {
            let layers = parse_layers(&a.layers)?;
            if a.hub_shape > 0.0 {
                synth::dc_sbm_multiplex(a.nodes, &layers, a.blocks, a.p_out, a.hub_shape, a.seed)?
            } else {
                let lists: Vec<_> = layers
                    .iter()
                    .enumerate()
                    .map(|(i, &(m, p))| {
                        let mut r = rng::stream(rng::derive_seed(a.seed, i as u64), "sbm-layer");
                        (m, synth::sbm_edges(a.nodes, a.blocks, p, a.p_out, &mut r))
                    })
                    .collect();
                MultiplexGraph::from_edge_lists(a.nodes, &lists)?
            }
        }
        (None, false) => bail!("pass --graph FILE or --synthetic"),
    };
    if let Some(p) = &a.write {
        save_multiplex(&g, p)?;
    }
    Ok(graph_summary(&g))
}

fn simulate(a: &SimulateArgs) -> Result<Option<serde_json::Value>> {
    let g = load_multiplex(&a.sim.graph)?;
    let seeds = read_seeds(&a.sim.seeds)?;
    let cfg = SimulationConfig {
        overlap: !a.no_overlap,
        ..SimulationConfig::new(a.mc, a.rng_seed)
    };
    let est = estimate_spread_nodes(&g, &seeds, &cfg)?;
    let pct = infected_percentage(est.mean, &g);
    if !a.json {
        println!(
            "spread {:.4} +- {:.4} ({:.4}% of {} nodes), {:.2} rounds",
            est.mean,
            est.stderr,
            100.0 * pct,
            g.num_nodes(),
            est.rounds_mean
        );
        return Ok(None);
    }
    Ok(Some(json!({
        "spread": est.mean,
        "stderr": est.stderr,
        "percentage": pct,
        "rounds_mean": est.rounds_mean,
        "replications": est.replications,
        "rng_seed": a.rng_seed,
        "rng_algorithm": rng::RNG_ALGORITHM,
    })))
}

fn oracle(a: &OracleArgs) -> Result<serde_json::Value> {
    let g = load_multiplex(&a.graph)?;
    let mut o = ExactOracle::new(&g, OracleBudget { max_probabilistic_edges: a.max_edges })?;
    if a.no_overlap {
        o = o.without_overlap();
    }
    if let Some(b) = a.greedy {
        let trace = o.greedy_trace(b);
        return Ok(json!({
            "seeds": trace.iter().map(|t| t.0).collect::<Vec<_>>(),
            "spread": trace.last().map_or(0.0, |t| t.1),
            "gains": marginal_gains(&trace),
            "worlds": o.num_worlds(),
        }));
    }
    let seeds = read_seeds(a.seeds.as_ref().expect("clap requires --seeds"))?;
    let spread = o.spread(&seeds);
    Ok(json!({
        "spread": spread,
        "percentage": infected_percentage(spread, &g),
        "worlds": o.num_worlds(),
    }))
}

fn dataset(a: &DatasetArgs) -> Result<Dataset> {
    let g = load_multiplex(&a.graph)?;
    let mut cfg = a.cfg.load()?;
    if let Some(s) = a.size {
        cfg.dataset.size = s;
    }
    if let Some(m) = a.mc {
        cfg.dataset.label_replications = m;
    }
    let b = cfg.budget.resolve(g.num_nodes())?;
    let rng_seed = rng::derive_seed(cfg.seed, 11);
    let sim = SimulationConfig::new(cfg.dataset.label_replications, rng_seed);
    let sets = generate_x0(&g, b, &cfg.dataset, rng::derive_seed(cfg.seed, 12));
    let labelled = label_sets(&g, &sets, &sim)?;
    Ok(Dataset {
        num_nodes: g.num_nodes(),
        budget: b,
        replications: sim.replications,
        rng_seed,
        samples: labelled
            .into_iter()
            .map(|(s, label)| Sample { seeds: s.nodes(), label })
            .collect(),
    })
}

fn need_graph(p: &Option<PathBuf>, stage: &str) -> Result<MultiplexGraph> {
    let p = p.as_ref().ok_or_else(|| anyhow!("--graph is required for the {stage} stage"))?;
    Ok(load_multiplex(p)?)
}

fn train(a: &TrainArgs) -> Result<serde_json::Value> {
    let cfg = a.cfg.load()?;
    let data = Dataset::load(&a.data)?;
    let start = Instant::now();
    match a.stage {
        Stage::Vae => {
            let out = a.checkpoint.as_ref().ok_or_else(|| anyhow!("--checkpoint is required"))?;
            let mut vae = Seed2Vec::new(VaeConfig { num_nodes: data.num_nodes, ..cfg.vae.clone() }, rng::derive_seed(cfg.seed, 13))?;
            let seeds = data.seed_vectors()?;
            let curve = vae.train(&seeds, a.epochs.unwrap_or(cfg.train.vae_epochs), rng::derive_seed(cfg.seed, 21))?;
            vae.save(out)?;
            Ok(json!({
                "stage": "vae",
                "final_loss": curve.last(),
                "reconstruction_error": vae.reconstruction_error(&seeds)?,
                "seconds": start.elapsed().as_secs_f64(),
            }))
        }
        Stage::Pmoe => {
            let out = a.checkpoint.as_ref().ok_or_else(|| anyhow!("--checkpoint is required"))?;
            let g = need_graph(&a.graph, "pmoe")?;
            let mut pmoe = Pmoe::new(cfg.pmoe.clone(), &g, rng::derive_seed(cfg.seed, 14))?;
            let pairs: Vec<(Vec<f64>, f64)> = data.labelled()?.into_iter().map(|(s, y)| (s.into_values(), y)).collect();
            let curve = pmoe.train(&pairs, a.epochs.unwrap_or(cfg.train.pmoe_epochs), rng::derive_seed(cfg.seed, 22))?;
            pmoe.save(out)?;
            Ok(json!({
                "stage": "pmoe",
                "final_loss": curve.last(),
                "mse": pmoe.mse(&pairs)?,
                "seconds": start.elapsed().as_secs_f64(),
            }))
        }
        Stage::Rem => {
            let g = need_graph(&a.graph, "rem")?;
            let dir = a.model_dir.as_ref().ok_or_else(|| anyhow!("--model-dir is required"))?;
            std::fs::create_dir_all(dir)?;
            let mut tcfg = cfg.train.clone();
            tcfg.label_sim = SimulationConfig::new(data.replications, data.rng_seed);
            tcfg.seed = rng::derive_seed(cfg.seed, 15);
            if let Some(e) = a.epochs {
                tcfg.explore.episodes = e;
            }
            let x0 = data.labelled()?;
            let trainer = match (&a.vae, &a.pmoe) {
                (Some(v), Some(p)) => {
                    let mut t = RemTrainer::new(&g, data.budget, tcfg, Seed2Vec::load(v)?, Pmoe::load(p, &g)?, x0)?;
                    t.run()?;
                    t
                }
                (None, None) => {
                    let vae = Seed2Vec::new(VaeConfig { num_nodes: g.num_nodes(), ..cfg.vae.clone() }, rng::derive_seed(cfg.seed, 13))?;
                    let pmoe = Pmoe::new(cfg.pmoe.clone(), &g, rng::derive_seed(cfg.seed, 14))?;
                    rem_train(&g, data.budget, tcfg, vae, pmoe, x0)?
                }
                _ => bail!("pass both --vae and --pmoe, or neither"),
            };
            trainer.vae.save(dir.join("vae.ckpt"))?;
            trainer.pmoe.save(dir.join("pmoe.ckpt"))?;
            if let Some(p) = &a.log {
                write_jsonl(p, trainer.logs())?;
            }
            Ok(json!({
                "stage": "rem",
                "episodes": trainer.logs(),
                "dataset_size": trainer.dataset().len(),
                "seconds": start.elapsed().as_secs_f64(),
            }))
        }
    }
}

fn load_models(m: &ModelArgs) -> Result<(MultiplexGraph, Seed2Vec, Pmoe)> {
    let g = load_multiplex(&m.graph)?;
    let vae = Seed2Vec::load(&m.vae).with_context(|| format!("loading {}", m.vae.display()))?;
    let pmoe = Pmoe::load(&m.pmoe, &g).with_context(|| format!("loading {}", m.pmoe.display()))?;
    if vae.num_nodes() != g.num_nodes() {
        bail!("VAE expects {} nodes, the graph has {}", vae.num_nodes(), g.num_nodes());
    }
    Ok((g, vae, pmoe))
}

fn infer(a: &InferArgs) -> Result<serde_json::Value> {
    let (g, vae, pmoe) = load_models(&a.models)?;
    let mut cfg = a.cfg.load()?;
    if let Some(s) = a.steps {
        cfg.inference.steps = s;
    }
    if let Some(b) = a.beta {
        cfg.inference.beta = b;
    }
    if let Some(r) = a.restarts {
        cfg.inference.restarts = r;
    }
    cfg.inference.faithful |= a.faithful;
    let b = cfg.budget.resolve(g.num_nodes())?;
    let start = Instant::now();
    let out = rem_predict(&vae, &pmoe, b, &cfg.inference, rng::derive_seed(cfg.seed, 16))?;
    let seeds = out.seeds.nodes();
    if let Some(p) = &a.seeds_out {
        write_seeds(p, &seeds)?;
    }
    Ok(json!({
        "budget": b,
        "seeds": seeds,
        "predicted": out.predicted,
        "latent_prediction": out.latent_prediction,
        "restarts_used": out.restarts_used,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn predict_spread(a: &PredictArgs) -> Result<serde_json::Value> {
    let g = load_multiplex(&a.graph)?;
    let pmoe = Pmoe::load(&a.pmoe, &g)?;
    let seeds = SeedVector::from_nodes(g.num_nodes(), &read_seeds(&a.seeds)?)?;
    let p = pmoe.predict(seeds.values())?;
    Ok(json!({
        "y_soft": p.y_soft,
        "y_hard": p.y_hard,
        "gate_weights": p.gate_weights,
    }))
}

fn baseline(name: &str, g: &MultiplexGraph, b: usize, cfg: &RunConfig) -> Result<SeedVector> {
    let n = g.num_nodes();
    Ok(match name {
        "random" => baseline_random(n, b, &mut rng::stream(rng::derive_seed(cfg.seed, 17), "random-baseline")),
        "degree" => baseline_degree(g, b),
        "mc_greedy" => baseline_mc_greedy(
            g,
            b,
            &SimulationConfig::new(cfg.evaluation.greedy_replications, rng::derive_seed(cfg.seed, 18)),
        )?,
        other => bail!("unknown baseline `{other}`"),
    })
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<serde_json::Value> {
    let g = load_multiplex(&a.graph)?;
    let mut cfg = a.cfg.load()?;
    if let Some(m) = a.mc {
        cfg.evaluation.replications = m;
    }
    if let Some(s) = a.rng_seed {
        cfg.evaluation.rng_seed = s;
    }
    if let Some(m) = a.greedy_mc {
        cfg.evaluation.greedy_replications = m;
    }
    if a.sets.is_empty() && a.baselines.is_empty() {
        bail!("nothing to evaluate: pass --set name=path or --baselines");
    }
    let b = cfg.budget.resolve(g.num_nodes())?;
    let mut methods = Vec::new();
    for (name, path) in &a.sets {
        methods.push(MethodSeeds {
            method: name.clone(),
            seeds: SeedVector::from_nodes(g.num_nodes(), &read_seeds(path)?)?,
            seconds: None,
        });
    }
    for name in &a.baselines {
        let start = Instant::now();
        let seeds = baseline(name, &g, b, &cfg)?;
        methods.push(MethodSeeds {
            method: name.clone(),
            seeds,
            seconds: Some(start.elapsed().as_secs_f64()),
        });
    }
    let sim = SimulationConfig::new(cfg.evaluation.replications, cfg.evaluation.rng_seed);
    Ok(serde_json::to_value(evaluate(&g, b, &methods, &sim)?)?)
}

fn bench(a: &BenchArgs) -> Result<serde_json::Value> {
    let g = load_multiplex(&a.graph)?;
    let base = a.cfg.load()?;
    let budgets = if a.budgets.is_empty() { vec![base.budget] } else { a.budgets.clone() };
    let mut w = csv::Writer::from_path(&a.csv).with_context(|| format!("writing {}", a.csv.display()))?;
    w.write_record(["method", "budget", "spread", "stderr", "percentage", "seconds"])?;
    let mut runs = Vec::new();
    for budget in budgets {
        let cfg = RunConfig { budget, ..base.clone() };
        let (report, _) = run_pipeline(&g, &cfg)?;
        for r in &report.reports {
            w.write_record([
                r.method.clone(),
                r.budget.to_string(),
                r.spread.to_string(),
                r.stderr.to_string(),
                r.percentage.to_string(),
                r.seconds.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        runs.push(report);
    }
    w.flush()?;
    Ok(serde_json::to_value(runs)?)
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_ref();
    match &cli.cmd {
        Cmd::Ingest(a) => emit(&ingest(a)?, out),
        Cmd::Simulate(a) => match simulate(a)? {
            Some(v) => emit(&v, out),
            None => Ok(()),
        },
        Cmd::Oracle(a) => emit(&oracle(a)?, out),
        Cmd::Dataset(a) => emit(&dataset(a)?, out),
        Cmd::Train(a) => emit(&train(a)?, out),
        Cmd::Infer(a) => emit(&infer(a)?, out),
        Cmd::PredictSpread(a) => emit(&predict_spread(a)?, out),
        Cmd::Evaluate(a) => emit(&evaluate_cmd(a)?, out),
        Cmd::Bench(a) => emit(&bench(a)?, out),
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
