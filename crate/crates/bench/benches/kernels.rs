use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ixplore_core::semantics::HypercubeCover;
use ixplore_core::{
    estimate_primitives, run_episode, AgentModel, AgentType, ExperimentConfig, Feedback, GramAccumulator, Instance,
    ModelVector, Outcome, PolicyKind, PosteriorState, PrimitiveMode, Prior, RoundRecord, SemanticMap, TypeSource,
    WarmstartPlan,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(d: usize, k: usize, horizon: usize, warm_start: usize) -> Instance {
    Instance {
        d,
        k,
        c_u: 2.0,
        c_x: 1.0,
        sparsity: d,
        noise: 1.0,
        horizon,
        warm_start,
        feedback: Feedback::Bandit,
    }
}

fn min_eigen(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram_min_eigen");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in [4, 16, 64] {
        let mut gram = GramAccumulator::new(d);
        for _ in 0..4 * d {
            let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            gram.absorb(&v).unwrap();
        }
        group.bench_with_input(BenchmarkId::from_parameter(d), &gram, |b, g| {
            b.iter(|| g.min_eigen().unwrap())
        });
    }
    group.finish();
}

fn gaussian_update(c: &mut Criterion) {
    let d = 8;
    let inst = instance(d, 2, 100, 0);
    let prior = Prior::Gaussian {
        mean: vec![0.0; d],
        cov: (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..d).map(|_| rng.random_range(-0.3..0.3)).collect())
        .collect();
    let x = AgentType::new(rows, 0).unwrap();
    let rec = RoundRecord::new(1, 0, &x, 0, Outcome { reward: 0.4, aux: None }).unwrap();
    let post = PosteriorState::new(prior).unwrap();
    c.bench_function("gaussian_posterior_update_d8", |b| {
        b.iter(|| black_box(post.updated(&rec, &inst).unwrap()))
    });
    c.bench_function("gaussian_posterior_sample_d8", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.iter(|| black_box(post.sample(&mut rng).unwrap()))
    });
}

fn ranking_apply(c: &mut Criterion) {
    let smap = SemanticMap::ranking();
    let u = ModelVector::new(vec![0.3, 0.9, 0.1, 0.5, 0.7, 0.2]);
    c.bench_function("ranking_apply_d6", |b| b.iter(|| smap.apply(0, black_box(&u)).unwrap()));
}

fn two_model_episode(c: &mut Criterion) {
    let x = AgentType::identity(2);
    let cfg = ExperimentConfig {
        instance: instance(2, 2, 500, 8),
        prior: Prior::Discrete {
            models: vec![ModelVector::new(vec![0.9, 0.1]), ModelVector::new(vec![0.2, 0.8])],
            weights: vec![0.5, 0.5],
        },
        smap: SemanticMap::argmax_direct(std::slice::from_ref(&x)).unwrap(),
        policy: PolicyKind::Fps,
        warmup: WarmstartPlan::per_arm(4),
        types: TypeSource::Homogeneous { x0: x },
        agent_model: AgentModel::Compliant,
        seed: 1,
        replicates: 1,
    };
    c.bench_function("fps_episode_two_model_T500", |b| {
        b.iter(|| run_episode(&cfg, 0).unwrap())
    });
}

fn hypercube_primitives(c: &mut Criterion) {
    let prior = Prior::UniformBox {
        lo: vec![-1.0, -1.0],
        hi: vec![1.0, 1.0],
    };
    let smap = SemanticMap::HypercubeCover(HypercubeCover::new(vec![-1.0, -1.0], 0.125, vec![8, 8]).unwrap());
    let types = [AgentType::identity(2)];
    c.bench_function("exact_primitives_hypercube_8x8", |b| {
        b.iter(|| estimate_primitives(&prior, &smap, &types, PrimitiveMode::Exact, 0).unwrap())
    });
}

criterion_group!(
    benches,
    min_eigen,
    gaussian_update,
    ranking_apply,
    two_model_episode,
    hypercube_primitives
);
criterion_main!(benches);
