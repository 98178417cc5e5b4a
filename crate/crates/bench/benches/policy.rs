use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use mmoforge_core::config::{default_config, RngStream, StreamName};
use mmoforge_core::engine::WorldState;
use mmoforge_core::neural::{LossSeed, Policy, PolicyParams};
use mmoforge_core::obsio::{build_schema, observe};
use mmoforge_core::trainer::{compute_packet, RolloutEnv};

fn policy(c: &mut Criterion) {
    let mut cfg = default_config();
    cfg.map_width = 32;
    cfg.map_height = 32;
    cfg.batch_actions = 1024;
    let params = Arc::new(PolicyParams::<f32>::init(&cfg));

    let mut state = WorldState::new(cfg.clone()).unwrap();
    for _ in 0..40 {
        state.step(&Default::default());
    }
    let id = *state.agents.keys().next().unwrap();
    let obs = observe(&state, id).unwrap();

    let mut pol = Policy::new(params.clone());
    let mut rng = RngStream::new(1, StreamName::PolicySampling);
    c.bench_function("forward one decision", |b| b.iter(|| pol.forward(black_box(&obs), &mut rng).unwrap().0));

    let trace = pol.evaluate(&obs, [0, 0, 0]).unwrap();
    c.bench_function("backward one decision", |b| {
        b.iter(|| {
            let mut sink = pol.sink(trace.population);
            pol.backward(&trace, LossSeed { d_logp: -0.5, d_value: 0.2, d_entropy: 0.0 }, &mut sink).unwrap();
            sink.steps()
        })
    });

    let mut env = RolloutEnv::new(&cfg, 0).unwrap();
    while env.finished_actions() < cfg.batch_actions {
        env.tick_local(&mut pol).unwrap();
    }
    let trajectories = env.take_finished();
    let schema = build_schema(&cfg);
    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    group.bench_function("gradient packet for 1024 actions", |b| {
        b.iter(|| compute_packet(&mut pol, black_box(&trajectories), &cfg, &schema).unwrap().stats.actions)
    });
    group.finish();
}

criterion_group!(benches, policy);
criterion_main!(benches);
