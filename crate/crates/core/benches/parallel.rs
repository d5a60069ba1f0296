//! Sequential vs data-parallel execution of the two hot loops: a training
//! batch's loss and gradients, and the nearest-neighbour inversion scan.
//!
//! `cargo bench -p cyphertalk --bench parallel`
//! Without the `parallel` feature only the sequential rows are measured.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use cyphertalk::attacks::{inversion_attack_with, Metric};
use cyphertalk::data::{Batch, SyntheticConfig, SyntheticTask};
use cyphertalk::model::{loss_and_grads_with, FreezeMask, LanguageModel, ModelDims};
use cyphertalk::numeric::{Matrix, Rng};
use cyphertalk::par::Execution;

fn paths() -> Vec<(&'static str, Execution)> {
    vec![
        ("sequential", Execution::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Execution::Parallel),
    ]
}

fn bench_gradients(c: &mut Criterion) {
    let dims = ModelDims::default();
    let m = LanguageModel::init(dims, false, &mut Rng::new(1)).unwrap();
    let cfg = SyntheticConfig {
        train: 64,
        test: 1,
        ..SyntheticConfig::default()
    };
    let data = SyntheticTask::generate(&cfg, 2).unwrap().train;
    let mut group = c.benchmark_group("loss_and_grads");
    for batch_size in [8usize, 64] {
        let rows: Vec<usize> = (0..batch_size).collect();
        let task = data.task_batch(&rows).unwrap();
        let lm = data.awareness_batch(&rows);
        for (name, exec) in paths() {
            for (mode, batch) in [("task", &task), ("lm", &lm)] {
                group.bench_with_input(
                    BenchmarkId::new(format!("{name}/{mode}"), batch_size),
                    batch,
                    |b, batch: &Batch| {
                        b.iter(|| {
                            loss_and_grads_with(exec, &m, black_box(batch), &FreezeMask::none())
                        })
                    },
                );
            }
        }
    }
    group.finish();
}

fn bench_inversion(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let mut group = c.benchmark_group("inversion");
    for vocab in [256usize, 1024] {
        let public = Matrix::from_fn(vocab, 32, |_, _| rng.next_normal());
        let observed =
            Matrix::from_fn(vocab, 32, |r, c| public.get(r, c) + 0.5 * rng.next_normal());
        for (name, exec) in paths() {
            group.bench_function(BenchmarkId::new(name, vocab), |b| {
                b.iter(|| {
                    inversion_attack_with(
                        exec,
                        black_box(&public),
                        black_box(&observed),
                        Metric::Cosine,
                    )
                })
            });
        }
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_gradients, bench_inversion
}
criterion_main!(benches);
