//! Shared fixtures for the benchmarks.

use rem_core::{synth, DiffusionModelKind, MultiplexGraph};

/// Uniform two-layer IC/LT multiplex with `degree * n` edges per layer.
pub fn random_ic_lt(n: usize, degree: usize, seed: u64) -> MultiplexGraph {
    synth::random_multiplex(
        n,
        &[DiffusionModelKind::IC, DiffusionModelKind::lt()],
        &[degree * n, degree * n],
        seed,
    )
    .expect("valid multiplex")
}

/// The hub-heavy block multiplex used for model benchmarks.
pub fn hub_multiplex(n: usize, seed: u64) -> MultiplexGraph {
    synth::dc_sbm_multiplex(
        n,
        &[(DiffusionModelKind::IC, 0.02), (DiffusionModelKind::lt(), 0.2)],
        4,
        0.001,
        1.5,
        seed,
    )
    .expect("valid multiplex")
}
