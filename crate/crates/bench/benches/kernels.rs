use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use collapse_lab::collapse::{SymbolTable, TokenPreset};
use collapse_lab::numerics::{round_slice, softmax};
use collapse_lab::{FloatFormat, ModelConfig, PeScheme, Transformer};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    let symbols = SymbolTable::new(64, 0);
    for pe in [PeScheme::NoPe, PeScheme::rope()] {
        let model = Transformer::init(ModelConfig { pe, ..ModelConfig::with_dim(64) }).unwrap();
        for n in [256, 1024] {
            let seq = TokenPreset::Digits.build(n, 0, &symbols).unwrap();
            group.bench_with_input(BenchmarkId::new(pe.tag(), n), &seq, |b, seq| b.iter(|| model.last_token(black_box(seq)).unwrap()));
        }
    }
    let model = Transformer::init(ModelConfig::with_dim(64)).unwrap();
    let seq = TokenPreset::Digits.build(1024, 0, &symbols).unwrap();
    group.bench_function("bf16/1024", |b| b.iter(|| model.last_token_at(black_box(&seq), FloatFormat::BFloat16).unwrap()));
    group.finish();
}

fn jacobian(c: &mut Criterion) {
    let symbols = SymbolTable::new(16, 0);
    let model = Transformer::init(ModelConfig { layers: 3, ..ModelConfig::with_dim(16) }).unwrap();
    let seq = TokenPreset::Gaussian.build(16, 0, &symbols).unwrap();
    c.bench_function("jacobian/n16_l3", |b| b.iter(|| model.jacobian(black_box(&seq), 0, None).unwrap()));
}

fn kernels(c: &mut Criterion) {
    let x: Vec<f64> = (0..100_000).map(|i| ((i * 7919) % 1000) as f64 / 100.0).collect();
    c.bench_function("softmax/1e5", |b| b.iter(|| softmax(black_box(&x)).unwrap()));
    c.bench_function("round_bf16/1e5", |b| {
        b.iter(|| {
            let mut v = x.clone();
            round_slice(black_box(&mut v), FloatFormat::BFloat16);
            v
        })
    });
}

criterion_group!(benches, forward, jacobian, kernels);
criterion_main!(benches);
