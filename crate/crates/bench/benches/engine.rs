use std::hint::black_box;

use cmcseg::data::{gen_synthetic_case, Dataset};
use cmcseg::network::{forward, init_params, ModelConfig};
use cmcseg::ops::{conv2d, Mode, Padding};
use cmcseg::training::{run_two_phase, TrainConfig};
use cmcseg::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&[12, 8, 64, 64], 1.0, &mut rng);
    let k = Tensor::<f32>::randn(&[8, 8, 3, 3], 0.1, &mut rng);
    let b = Tensor::<f32>::zeros(&[8]);
    c.bench_function("conv2d 12x8x64x64 k3", |bench| {
        bench.iter(|| conv2d(black_box(&x), &k, &b, Padding::Same).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let params = init_params::<f32>(&ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(&[1, 3, 4, 64, 64], 1.0, &mut rng);
    c.bench_function("forward eval B1 T3 64x64", |bench| {
        bench.iter(|| forward(&params, black_box(&x), Mode::Eval).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cases = (0..2)
        .map(|s| gen_synthetic_case(s, (16, 64, 64)).unwrap())
        .collect();
    let dataset = Dataset::new(cases, 3, 3).unwrap();
    let config = TrainConfig {
        phase1_steps: 1,
        phase2_steps: 0,
        ..TrainConfig::default()
    };
    let initial = init_params::<f32>(&ModelConfig::default()).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train step B3 T3 64x64", |bench| {
        bench.iter_batched(
            || initial.clone(),
            |mut p| run_two_phase(&config, &mut p, &dataset, |_| {}).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_forward, bench_train_step);
criterion_main!(benches);
