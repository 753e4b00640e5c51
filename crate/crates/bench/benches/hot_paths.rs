use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use qdlab::qd::evaluate_solution;
use qdlab::qdt::{evaluate_goal, ModelDims, QdtModel, Trainer};
use qdlab::{build_cvt, spread};
use qdlab_bench::*;

fn geometry(c: &mut Criterion) {
    for k in [10, 64] {
        let bds = random_bds(k, 1);
        c.bench_function(&format!("spread k={k}"), |b| b.iter(|| spread(black_box(&bds)).unwrap()));
    }
    let cells = build_cvt(&point_env().bd_space(), 256, 25_600, 100, 0).unwrap();
    let queries = random_bds(1000, 2);
    c.bench_function("nearest_cell x1000 (256 cells)", |b| {
        b.iter(|| queries.iter().map(|q| cells.nearest_cell(q.coords())).sum::<usize>())
    });
}

fn rollouts(c: &mut Criterion) {
    let env = point_env();
    let g = desk_policy(3);
    c.bench_function("rollout T=100", |b| b.iter(|| env.rollout(&mut g.policy(), black_box(7)).unwrap()));
    let cells = build_cvt(&env.bd_space(), 256, 25_600, 100, 0).unwrap();
    c.bench_function("evaluate_solution E=10", |b| {
        b.iter(|| evaluate_solution(&g, &env, &cells, 10, black_box(11)).unwrap())
    });
}

fn transformer(c: &mut Criterion) {
    let ds = small_dataset(8, 5);
    let batch = batch_of(&ds, 8);
    let model = QdtModel::new(desk_qdt(), ModelDims::of(&ds.header), 0).unwrap();
    let mut group = c.benchmark_group("qdt");
    group.sample_size(10);
    group.bench_function("train step B=8 T=100", |b| {
        b.iter_batched(
            || Trainer::new(model.clone(), 0),
            |mut t| t.train_step(&batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let env = point_env();
    group.bench_function("goal rollout 10 episodes", |b| {
        b.iter(|| evaluate_goal(&model, &env, black_box(&[3.0, -2.0]), 10, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, rollouts, transformer);
criterion_main!(benches);
