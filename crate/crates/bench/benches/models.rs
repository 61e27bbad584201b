use criterion::{criterion_group, criterion_main, Criterion};

use rem_bench::hub_multiplex;
use rem_core::pipeline::ascend_latent;
use rem_core::pmoe::{Pmoe, PmoeConfig};
use rem_core::seed2vec::{Seed2Vec, VaeConfig};
use rem_core::{rng, synth};

fn models(c: &mut Criterion) {
    let g = hub_multiplex(200, 1);
    let n = g.num_nodes();
    let pmoe = Pmoe::new(PmoeConfig::default(), &g, 1).unwrap();
    let vae = Seed2Vec::new(VaeConfig::for_nodes(n), 2).unwrap();
    let mut r = rng::stream(3, "bench");
    let x: Vec<f64> = {
        let set = synth::random_seed_set(n, 20, &mut r);
        let mut v = vec![0.0; n];
        for s in set {
            v[s as usize] = 1.0;
        }
        v
    };
    let batch: Vec<Vec<f64>> = (0..32).map(|_| x.clone()).collect();
    let z0 = vae.sample_prior(&mut r);

    let mut group = c.benchmark_group("models");
    group.sample_size(20);
    group.bench_function("pmoe_predict", |b| b.iter(|| pmoe.predict(&x).unwrap()));
    group.bench_function("pmoe_predict_batch32", |b| b.iter(|| pmoe.predict_soft_batch(&batch).unwrap()));
    group.bench_function("vae_reconstruct", |b| b.iter(|| vae.reconstruct(&x).unwrap()));
    group.bench_function("latent_ascent_10_steps", |b| {
        b.iter(|| ascend_latent(&vae, &pmoe, z0.clone(), 10, 1e-2).unwrap())
    });
    group.finish();
}

criterion_group!(benches, models);
criterion_main!(benches);
