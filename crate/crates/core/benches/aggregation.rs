//! Aggregation and training-round throughput on a 1-worker pool versus the
//! default pool. Build with `--no-default-features` to time the sequential
//! fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedfft::adversary::random_weights;
use fedfft::aggregators::{krum, KrumParam};
use fedfft::detector::{mal_test, DetectorConfig};
use fedfft::fedsim::{Experiment, SyntheticTask, TrainConfig};
use fedfft::fft_aggregator::{fft_aggregate, FftStrategy};
use fedfft::par;
use fedfft::tensors::{ClientUpdate, ModelWeights, TensorShape};

const POOLS: [(&str, usize); 2] = [("1-thread", 1), ("auto", 0)];

fn updates(clients: usize) -> Vec<ClientUpdate> {
    let template = ModelWeights::new(vec![
        (TensorShape::matrix(64, 32).unwrap(), vec![0.0; 64 * 32]),
        (TensorShape::vector(32).unwrap(), vec![0.0; 32]),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..clients)
        .map(|k| ClientUpdate::new(k, random_weights(&template, &mut rng), 100).unwrap())
        .collect()
}

fn aggregation(c: &mut Criterion) {
    let ups = updates(20);
    let mut group = c.benchmark_group("aggregate");
    group.sample_size(20);
    for (label, threads) in POOLS {
        group.bench_with_input(BenchmarkId::new("fft_kde", label), &threads, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    fft_aggregate(black_box(&ups), &FftStrategy::default()).unwrap()
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("krum", label), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || krum(black_box(&ups), KrumParam { f: 4 }).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("mal_test", label), &threads, |b, &t| {
            let cfg = DetectorConfig::default();
            b.iter(|| {
                par::with_threads(t, || {
                    let mut rng = ChaCha8Rng::seed_from_u64(1);
                    mal_test(black_box(&ups), &cfg, &mut rng).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn training_round(c: &mut Criterion) {
    let cfg = TrainConfig {
        rounds: 1,
        ..Default::default()
    };
    let task = SyntheticTask::default();
    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for (label, threads) in POOLS {
        group.bench_with_input(BenchmarkId::new("fedavg", label), &threads, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    let mut exp = Experiment::new(&cfg, &task).unwrap();
                    exp.step().unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, aggregation, training_round);
criterion_main!(benches);
