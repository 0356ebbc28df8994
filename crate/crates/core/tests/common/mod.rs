//! Helpers shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use splitcomp_core::bottleneck::{BottleneckedModel, SplitConfig};
use splitcomp_core::distill::{
    evaluate_accuracy, loss_and_grad, synthetic, train_teacher, train_with_recipe, Dataset, EpochLog, LossKind, LrDecay,
    Objective, OptimizerKind, RecipeName, ScheduleOptions, StageSpec,
};
use splitcomp_core::model::{
    build_teacher_with_width, ArchId, AvgPool2d, BatchNorm2d, Conv2d, ConvTranspose2d, LayerKind, LayerSpec, Linear, Merge,
    MergeOp, ModelGraph, Sequential,
};
use splitcomp_core::Tensor;

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn layer(kind: LayerKind<f64>) -> LayerSpec<f64> {
    LayerSpec { id: 0, kind }
}

/// 73 parameters: conv, bn, relu, a residual conv+bn, relu, global pooling and a linear head.
pub fn toy_classifier(rng: &mut ChaCha8Rng) -> Sequential<f64> {
    let layers = vec![
        layer(LayerKind::Conv(Conv2d::new(1, 2, 3, 1, 1, true, rng))),
        layer(LayerKind::BatchNorm(BatchNorm2d::new(2))),
        layer(LayerKind::Relu),
        layer(LayerKind::Branch),
        layer(LayerKind::Conv(Conv2d::new(2, 2, 3, 1, 1, false, rng))),
        layer(LayerKind::BatchNorm(BatchNorm2d::new(2))),
        layer(LayerKind::Merge(Merge { op: MergeOp::Add, projection: Vec::new() })),
        layer(LayerKind::Relu),
        layer(LayerKind::AvgPool(AvgPool2d { kernel: 4, stride: 4 })),
        layer(LayerKind::FullyConnected(Linear::new(2, 3, rng))),
    ];
    let mut seq = Sequential::new(vec![1, 4, 4], layers).unwrap();
    perturb_params(&mut seq, rng);
    seq
}

/// 33 parameters: strided conv, bn, relu and a deconvolution back to the input size.
pub fn toy_autoencoder(rng: &mut ChaCha8Rng) -> Sequential<f64> {
    let layers = vec![
        layer(LayerKind::Conv(Conv2d::new(1, 2, 3, 2, 1, true, rng))),
        layer(LayerKind::BatchNorm(BatchNorm2d::new(2))),
        layer(LayerKind::Relu),
        layer(LayerKind::Deconv(ConvTranspose2d::new(2, 1, 2, 2, 0, true, rng))),
    ];
    let mut seq = Sequential::new(vec![1, 4, 4], layers).unwrap();
    perturb_params(&mut seq, rng);
    seq
}

/// Moves every parameter away from its initial value so no gradient is trivially zero.
fn perturb_params(seq: &mut Sequential<f64>, rng: &mut ChaCha8Rng) {
    for l in &mut seq.layers {
        l.visit_params_mut(&mut |p| {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        });
    }
}

pub fn param_count(seq: &Sequential<f64>) -> usize {
    seq.num_params()
}

fn with_param(seq: &mut Sequential<f64>, k: usize, f: &mut dyn FnMut(&mut f64)) {
    let mut seen = 0;
    for l in &mut seq.layers {
        l.visit_params_mut(&mut |p| {
            let n = p.value.numel();
            if k >= seen && k < seen + n {
                f(&mut p.value.data_mut()[k - seen]);
            }
            seen += n;
        });
    }
}

fn analytic_grads(seq: &Sequential<f64>) -> Vec<f64> {
    let mut g = Vec::new();
    for l in &seq.layers {
        l.visit_params(&mut |p| g.extend_from_slice(p.grad.data()));
    }
    g
}

/// Relative error `|a - n| / max(|a|, |n|)` between the backpropagated gradient
/// and central finite differences, with every layer trainable.
pub fn gradient_check(seq: &Sequential<f64>, x: &Tensor<f64>, objective: &Objective<'_, f64>) -> f64 {
    let all = |_: usize| true;
    let mut model = seq.clone();
    loss_and_grad(&mut model, x, objective, &all).unwrap();
    let analytic = analytic_grads(&model);
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..analytic.len() {
        let mut plus = seq.clone();
        with_param(&mut plus, k, &mut |v| *v += h);
        let mut minus = seq.clone();
        with_param(&mut minus, k, &mut |v| *v -= h);
        let lp = loss_and_grad(&mut plus, x, objective, &all).unwrap().0;
        let lm = loss_and_grad(&mut minus, x, objective, &all).unwrap().0;
        numeric.push((lp - lm) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric))
}

/// Relative gradient errors of the four training objectives on the toy models.
pub fn all_gradient_checks(seed: u64) -> Vec<(&'static str, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cls = toy_classifier(&mut rng);
    let ae = toy_autoencoder(&mut rng);
    let x = randn(&[4, 1, 4, 4], &mut rng);
    let labels = [0usize, 2, 1, 2];
    let teacher_logits = randn(&[4, 3], &mut rng);
    let hint_a = randn(&[4, 2, 4, 4], &mut rng);
    let hint_b = randn(&[4, 2, 4, 4], &mut rng);
    let recon = randn(&[4, 1, 4, 4], &mut rng);

    let ghnd = Objective::Hints { terms: vec![(2, 1.0, &hint_a), (6, 0.5, &hint_b)] };
    let ce = Objective::CrossEntropy { labels: &labels };
    let kd = Objective::Distillation { labels: &labels, teacher_logits: &teacher_logits, alpha: 0.5, tau: 2.0 };
    let ae_recon = Objective::Hints { terms: vec![(3, 1.0, &recon)] };
    vec![
        ("ghnd", param_count(&cls), gradient_check(&cls, &x, &ghnd)),
        ("ce", param_count(&cls), gradient_check(&cls, &x, &ce)),
        ("kd", param_count(&cls), gradient_check(&cls, &x, &kd)),
        ("ae_recon", param_count(&ae), gradient_check(&ae, &x, &ae_recon)),
    ]
}

/// Desk-scale benchmark: 10 synthetic classes at 32x32, a small residual teacher
/// and the strongest bottleneck (3 channels at the early split point).
pub struct Benchmark {
    pub train: Dataset,
    pub val: Dataset,
    pub teacher: ModelGraph<f32>,
    pub teacher_top1: f64,
    pub config: SplitConfig,
    pub schedule: ScheduleOptions,
}

pub const BENCH_TRAIN: usize = 4000;
pub const BENCH_VAL: usize = 1000;

pub fn benchmark() -> Benchmark {
    let data = synthetic(BENCH_TRAIN + BENCH_VAL, 32, 7).unwrap();
    let (train, val) = data.split_at(BENCH_TRAIN);
    let mut teacher = build_teacher_with_width::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 16, 1).unwrap();
    let stage = StageSpec {
        loss: LossKind::Ce,
        optimizer: OptimizerKind::Adam,
        epochs: 15,
        initial_lr: 2e-3,
        lr_decay: LrDecay { factor: 0.1, every_epochs: 10 },
        frozen: Default::default(),
        kd_alpha: 0.5,
        kd_tau: 1.0,
        lambdas: Default::default(),
        batch_size: 64,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    train_teacher(&mut teacher, &train, None, &stage, 1).unwrap();
    let teacher_top1 = evaluate_accuracy(&teacher, &val).unwrap();
    Benchmark {
        train,
        val,
        teacher,
        teacher_top1,
        config: SplitConfig::sp1(3),
        schedule: ScheduleOptions { stage_epochs: 10, ..ScheduleOptions::default() },
    }
}

impl Benchmark {
    pub fn train(&self, recipe: RecipeName, seed: u64) -> (BottleneckedModel<f32>, Vec<EpochLog>, f64) {
        let (model, log) =
            train_with_recipe(recipe, &self.teacher, &self.config, &self.train, None, &self.schedule, seed).unwrap();
        let top1 = evaluate_accuracy(&model, &self.val).unwrap();
        (model, log, top1)
    }
}

/// A TCP relay that records every byte sent from clients towards `upstream`.
pub struct RecordingProxy {
    pub addr: SocketAddr,
    pub recorded: Arc<Mutex<Vec<u8>>>,
}

pub fn recording_proxy(upstream: SocketAddr) -> RecordingProxy {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let recorded = Arc::new(Mutex::new(Vec::new()));
    let rec = recorded.clone();
    thread::spawn(move || {
        for client in listener.incoming() {
            let Ok(client) = client else { return };
            let server = TcpStream::connect(upstream).unwrap();
            let (mut c_read, mut s_write) = (client.try_clone().unwrap(), server.try_clone().unwrap());
            let (mut s_read, mut c_write) = (server, client);
            let rec = rec.clone();
            thread::spawn(move || {
                let mut buf = [0u8; 8192];
                loop {
                    match c_read.read(&mut buf) {
                        Ok(0) | Err(_) => {
                            let _ = s_write.shutdown(Shutdown::Write);
                            return;
                        }
                        Ok(n) => {
                            rec.lock().unwrap().extend_from_slice(&buf[..n]);
                            if s_write.write_all(&buf[..n]).is_err() {
                                return;
                            }
                        }
                    }
                }
            });
            thread::spawn(move || {
                let _ = std::io::copy(&mut s_read, &mut c_write);
                let _ = c_write.shutdown(Shutdown::Write);
            });
        }
    });
    RecordingProxy { addr, recorded }
}

/// A malformed or adversarial variant of the valid request frame `valid`.
pub fn fuzz_frame(rng: &mut ChaCha8Rng, valid: &[u8]) -> Vec<u8> {
    use splitcomp_core::runtime::wire::{encode_header, MAX_BODY_LEN};
    let body = &valid[10..];
    let mut frame = match rng.random_range(0..10) {
        0 => (0..rng.random_range(0..40)).map(|_| rng.random()).collect(),
        1 => {
            let len = rng.random_range(0..64usize);
            let mut f = encode_header(rng.random(), len as u32).to_vec();
            f.extend((0..len).map(|_| rng.random::<u8>()));
            f
        }
        2 => {
            let mut f = valid.to_vec();
            for _ in 0..rng.random_range(1..5) {
                let i = rng.random_range(0..f.len());
                f[i] ^= 1 << rng.random_range(0..8);
            }
            f
        }
        3 => valid[..rng.random_range(0..valid.len())].to_vec(),
        4 => {
            let mut f = valid.to_vec();
            f[4] = rng.random_range(2..=255);
            f
        }
        5 => {
            let mut f = valid.to_vec();
            f[5] = [0u8, 2, 4, 7, 254, 255][rng.random_range(0..6)];
            f
        }
        6 => encode_header(1, rng.random_range(MAX_BODY_LEN + 1..=u32::MAX)).to_vec(),
        7 => {
            let mut f = valid.to_vec();
            let dim = 10 + 4 + 1 + 4 * rng.random_range(0..body[4] as usize);
            f[dim] = f[dim].wrapping_add(rng.random_range(1..=255));
            f
        }
        8 => {
            let mut f = valid.to_vec();
            if rng.random_bool(0.5) {
                f.truncate(f.len() - rng.random_range(1..4));
            } else {
                f.extend((0..rng.random_range(1..4)).map(|_| rng.random::<u8>()));
            }
            let len = (f.len() - 10) as u32;
            f[6..10].copy_from_slice(&len.to_le_bytes());
            f
        }
        _ => {
            let mut f = valid.to_vec();
            let codec_at = 10 + 4 + 1 + 4 * body[4] as usize;
            if rng.random_bool(0.5) {
                f[codec_at] = rng.random_range(2..=255);
            } else {
                f[codec_at] = 1;
                let payload_at = codec_at + 1;
                let bad = [f32::NAN, f32::INFINITY, -1.0, 0.0][rng.random_range(0..4)];
                f.truncate(payload_at);
                f.extend_from_slice(&bad.to_le_bytes());
                f.extend(std::iter::repeat_n(7u8, body.len() - (payload_at - 10)));
                let len = (f.len() - 10) as u32;
                f[6..10].copy_from_slice(&len.to_le_bytes());
            }
            f
        }
    };
    if frame.is_empty() && rng.random_bool(0.5) {
        frame.push(b'S');
    }
    frame
}

/// Sends one raw frame on a fresh connection and returns every frame the server sent back.
pub fn send_raw(addr: SocketAddr, bytes: &[u8]) -> Vec<splitcomp_core::runtime::wire::ReadOutcome> {
    use splitcomp_core::runtime::wire::{read_frame, ReadOutcome};
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(std::time::Duration::from_secs(10))).unwrap();
    let _ = s.write_all(bytes);
    let _ = s.shutdown(Shutdown::Write);
    let mut replies = Vec::new();
    loop {
        match read_frame(&mut s) {
            Ok(ReadOutcome::Eof) | Err(_) => return replies,
            Ok(r) => replies.push(r),
        }
    }
}
