use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use writer_ssl::encoder::{patches_to_tensor, Encoder, EncoderConfig};
use writer_ssl::loss::{loss_and_grad, LossConfig};
use writer_ssl::nn::Mode;
use writer_ssl::preprocess::patchify;
use writer_ssl_bench::{random_canvases, random_matrix};

fn loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad");
    for (n, d) in [(512, 128), (512, 2048)] {
        let (za, zb) = (random_matrix(n, d, 1), random_matrix(n, d, 2));
        let cfg = LossConfig::default();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{d}")), &(), |b, _| {
            b.iter(|| loss_and_grad(black_box(&za), black_box(&zb), &cfg).unwrap())
        });
    }
    group.finish();
}

fn patches(c: &mut Criterion) {
    let canvases = random_canvases(64, 3);
    c.bench_function("patchify_64", |b| b.iter(|| patchify(black_box(&canvases)).unwrap()));
}

fn encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encoder_forward");
    group.sample_size(10);
    let batch = patchify(&random_canvases(16, 4)).unwrap();
    let mut enc = Encoder::new(&EncoderConfig::small(128), 0).unwrap();
    group.bench_function("small_128_16_images", |b| {
        b.iter(|| enc.forward_encode(black_box(&batch), Mode::eval()).unwrap())
    });
    group.bench_function("patches_to_tensor", |b| {
        b.iter(|| patches_to_tensor(black_box(&batch)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, loss, patches, encoder_forward);
criterion_main!(benches);
