use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rirci_core::blocks::{Glci, GlciConfig, NonLocalBlock, Scse, SpectralTransform};
use rirci_core::nn::Params;
use rirci_core::{Model, ModelConfig};

fn input(c: usize, size: usize) -> Tensor {
    Tensor::randn(0f32, 1.0, (1, c, size, size), &Device::Cpu).unwrap()
}

fn blocks(c: &mut Criterion) {
    let p = Params::new(0, DType::F32, &Device::Cpu);
    let glci = Glci::new(&p.pp("glci"), &GlciConfig::new(32, (4, 4), (4, 4))).unwrap();
    let spectral = SpectralTransform::new(&p.pp("spectral"), 32).unwrap();
    let scse = Scse::new(&p.pp("scse"), 32, 4).unwrap();
    let nonlocal = NonLocalBlock::new(&p.pp("nonlocal"), 32).unwrap();

    let mut group = c.benchmark_group("blocks");
    for size in [32, 64] {
        let x = input(32, size);
        group.bench_with_input(BenchmarkId::new("glci", size), &x, |b, x| b.iter(|| glci.forward(x).unwrap()));
        group.bench_with_input(BenchmarkId::new("spectral", size), &x, |b, x| {
            b.iter(|| spectral.forward(x).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("scse", size), &x, |b, x| b.iter(|| scse.forward(x).unwrap()));
        group.bench_with_input(BenchmarkId::new("nonlocal", size), &x, |b, x| {
            b.iter(|| nonlocal.forward(x).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let model = Model::new(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
    let j = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
    c.bench_function("tiny_model_forward_64", |b| b.iter(|| model.forward(&j).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = blocks, model
}
criterion_main!(benches);
