use criterion::{criterion_group, criterion_main, Criterion};
use maskclip_bench::{tensor, toy_trainer};
use maskclip_core::decoder::conv3x3;
use maskclip_core::evaluation::Confusion;
use maskclip_core::nn::AttentionParams;
use maskclip_core::params::ParamBuilder;
use maskclip_core::resize::resize_nhwc;
use maskclip_core::spm::attention;
use maskclip_core::{DType, Device};

fn kernels(c: &mut Criterion) {
    let x = tensor(&[16, 32, 32, 64], 1).unwrap();
    let w = tensor(&[16, 64, 3, 3], 2).unwrap();
    let b = tensor(&[16], 3).unwrap();
    c.bench_function("conv3x3 16x32x32x64 -> 16", |bench| bench.iter(|| conv3x3(&x, &w, &b).unwrap()));

    let small = tensor(&[16, 8, 8, 64], 4).unwrap();
    c.bench_function("resize_nhwc 8x8 -> 64x64", |bench| bench.iter(|| resize_nhwc(&small, (64, 64)).unwrap()));

    let mut pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
    let params = AttentionParams::new(&mut pb, "attn", 64, 64, 64, 8, false).unwrap();
    let q = tensor(&[16, 64, 64], 5).unwrap();
    let kv = tensor(&[16, 16, 64], 6).unwrap();
    c.bench_function("attention 64 queries x 16 keys", |bench| bench.iter(|| attention(&q, &kv, &kv, &params).unwrap()));

    let pred: Vec<u8> = (0..256 * 256).map(|i| ((i * 7) % 3 == 0) as u8).collect();
    let gt: Vec<u8> = (0..256 * 256).map(|i| ((i * 5) % 4 == 0) as u8).collect();
    c.bench_function("confusion 256x256", |bench| bench.iter(|| Confusion::count(&pred, &gt).unwrap()));
}

fn training(c: &mut Criterion) {
    // Parameters keep updating across iterations; only the timing matters.
    let (_dir, mut trainer) = toy_trainer(16).unwrap();
    let all: Vec<usize> = (0..16).collect();
    let mut group = c.benchmark_group("toy");
    group.sample_size(10);
    group.bench_function("train step, batch 16", |bench| {
        bench.iter(|| trainer.train_step(&all, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kernels, training);
criterion_main!(benches);
