use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitcomp_core::bottleneck::{inject, SplitConfig};
use splitcomp_core::codec::{dequantize, quantize, Codec};
use splitcomp_core::model::{build_teacher, ArchId};
use splitcomp_core::runtime::wire::{decode_frame, InferRequest};
use splitcomp_core::runtime::Message;
use splitcomp_core::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn codec(c: &mut Criterion) {
    let mut g = c.benchmark_group("codec");
    for shape in [[3usize, 8, 8], [12, 29, 29]] {
        let t = random(&shape, 1);
        let label = format!("{}x{}x{}", shape[0], shape[1], shape[2]);
        g.throughput(Throughput::Elements(t.numel() as u64));
        g.bench_with_input(BenchmarkId::new("quantize", &label), &t, |b, t| b.iter(|| quantize(black_box(t)).unwrap()));
        let q = quantize(&t).unwrap();
        g.bench_with_input(BenchmarkId::new("dequantize", &label), &q, |b, q| b.iter(|| dequantize(black_box(q)).unwrap()));
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let teacher = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 0).unwrap();
    let pair = inject(&teacher, &SplitConfig::sp1(3), 0).unwrap().split().unwrap();
    let x = random(&[1, 3, 32, 32], 2);
    let z = pair.head.predict(&x).unwrap();
    let mut g = c.benchmark_group("forward");
    g.bench_function("teacher", |b| b.iter(|| teacher.net.predict(black_box(&x)).unwrap()));
    g.bench_function("head", |b| b.iter(|| pair.head.predict(black_box(&x)).unwrap()));
    g.bench_function("tail", |b| b.iter(|| pair.tail.predict(black_box(&z)).unwrap()));
    g.finish();
}

fn framing(c: &mut Criterion) {
    let t = random(&[12, 29, 29], 3);
    let mut g = c.benchmark_group("framing");
    for codec in Codec::ALL {
        let msg = Message::InferRequest(InferRequest {
            request_id: 1,
            dims: vec![12, 29, 29],
            codec: codec.wire_id(),
            payload: codec.encode(&t).unwrap(),
        });
        let bytes = msg.encode();
        g.throughput(Throughput::Bytes(bytes.len() as u64));
        g.bench_function(BenchmarkId::new("encode", codec), |b| b.iter(|| black_box(&msg).encode()));
        g.bench_function(BenchmarkId::new("decode", codec), |b| b.iter(|| decode_frame(black_box(&bytes)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, codec, forward, framing);
criterion_main!(benches);
