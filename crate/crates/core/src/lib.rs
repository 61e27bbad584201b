//! Multiplex influence maximization by latent seed-set search.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: multiplex graphs, the edge-list format and seed vectors;
//! * [`diffusion`]: IC/LT simulation with overlapping activation and Monte
//!   Carlo spread estimation;
//! * [`oracle`]: exact expected spread by live-edge enumeration;
//! * [`autodiff`]: a small reverse-mode tape over dense `f64` tensors;
//! * [`seed2vec`]: a VAE over seed vectors;
//! * [`pmoe`]: a mixture of GNN experts that predicts spread;
//! * [`explore`]: latent exploration, the priority replay memory and the
//!   outer retraining loop;
//! * [`pipeline`]: inference, baselines, evaluation and run configuration.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod explore;
pub mod graph;
pub mod oracle;
pub mod pipeline;
pub mod pmoe;
pub mod rng;
pub mod seed2vec;
pub mod stats;
pub mod synth;

pub use diffusion::{estimate_spread, infected_percentage, simulate_once, DiffusionOutcome, SimulationConfig, SpreadEstimate};
pub use error::{RemError, Result};
pub use graph::{binarize_topb, load_multiplex, save_multiplex, DiffusionModelKind, Layer, MultiplexGraph, NodeId, SeedVector};
pub use oracle::{exact_greedy, exact_spread, OracleBudget};
