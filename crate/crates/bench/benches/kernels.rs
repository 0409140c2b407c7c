use std::hint::black_box;

use cmta::diff::{ParamGroup, ParamStore, ParamTensor, Tape};
use cmta_bench::{desk_model, random_matrix, random_state, warm_trainer};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn tape_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("tape_matmul");
    for n in [32, 64, 128] {
        let mut store = ParamStore::new();
        let w = store.add(ParamTensor::new("w", ParamGroup::Free, random_matrix(n, n, 1)));
        let x = random_matrix(192, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new(&store);
                let xv = tape.constant(x.clone());
                let wv = tape.param(w);
                let y = tape.matmul(xv, wv);
                let r = tape.relu(y);
                let s = tape.sum(r);
                black_box(tape.backward(s))
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = desk_model(6);
    let (state, hidden) = random_state(&model, 3);
    c.bench_function("forward_single", |b| {
        b.iter(|| black_box(model.forward(black_box(&state), 1, &hidden).unwrap()))
    });
    let states = vec![state.clone(); 3];
    let hiddens = vec![hidden.clone(); 3];
    c.bench_function("act_batch3", |b| {
        b.iter(|| black_box(model.act(&states, &[0, 1, 2], &hiddens, None).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for k in [2, 6] {
        let trainer = warm_trainer(k, 32);
        group.bench_with_input(BenchmarkId::new("experts", k), &k, |b, _| {
            b.iter_batched(
                || trainer.clone(),
                |mut t| black_box(t.train_step().unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, tape_matmul, forward, train_step);
criterion_main!(benches);
