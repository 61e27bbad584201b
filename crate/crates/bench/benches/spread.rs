use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use rem_bench::random_ic_lt;
use rem_core::diffusion::{estimate_spread_nodes, estimate_spread_serial};
use rem_core::{rng, synth, SimulationConfig};

fn spread_by_size(c: &mut Criterion) {
    let mut group = c.benchmark_group("estimate_spread");
    group.sample_size(10);
    for n in [1_000usize, 10_000, 50_000] {
        let g = random_ic_lt(n, 3, 1);
        let seeds = synth::random_seed_set(n, (n / 100).max(1), &mut rng::stream(2, "bench"));
        let cfg = SimulationConfig::new(100, 3);
        group.throughput(Throughput::Elements(g.total_edges() as u64));
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, _| {
            b.iter(|| estimate_spread_nodes(&g, &seeds, &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("serial", n), &n, |b, _| {
            b.iter(|| estimate_spread_serial(&g, &seeds, &cfg))
        });
    }
    group.finish();
}

criterion_group!(benches, spread_by_size);
criterion_main!(benches);
