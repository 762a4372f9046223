use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mno_core::exec;
use mno_core::operator::{MixerKind, ModelConfig, OperatorModel};
use mno_core::pde_data::{build_sampleset, regenerate_sample, DarcyConfig, DataConfig};
use mno_core::train_eval::{sample_loss_grad, LossKind};

fn darcy_config(n: usize, grid: usize) -> DataConfig {
    DataConfig { n_train: n, n_test: 1, darcy: DarcyConfig { grid, ..Default::default() }, ..Default::default() }
}

fn batch_gradients(c: &mut Criterion) {
    let data = build_sampleset(&darcy_config(8, 16)).unwrap().train_pairs();
    let cfg = ModelConfig { in_channels: 2, d_v: 16, depth: 2, mixer_kind: MixerKind::MambaBidirectional, ..Default::default() };
    let model = OperatorModel::<f32>::new(cfg, 0).unwrap();
    let grad = |k: usize| sample_loss_grad(&model, &data[k].0, &data[k].1, LossKind::RelativeL2).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| black_box(exec::sequential::map_range(data.len(), grad))));
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| b.iter(|| black_box(exec::parallel::map_range(data.len(), grad))));
    group.finish();
}

fn darcy_generation(c: &mut Criterion) {
    let cfg = darcy_config(16, 32);
    let solve = |k: usize| regenerate_sample(&cfg, k).unwrap();
    let mut group = c.benchmark_group("darcy_generation");
    group.sample_size(10);
    for n in [4usize, 16] {
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| black_box(exec::sequential::map_range(n, solve)))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
            b.iter(|| black_box(exec::parallel::map_range(n, solve)))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, darcy_generation);
criterion_main!(benches);
