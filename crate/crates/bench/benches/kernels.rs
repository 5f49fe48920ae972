use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use slowfast_core::linalg::svd;
use slowfast_core::projector::{CrossCorrAccumulator, build_basis, ProjectorKind, RankPolicy};
use slowfast_core::{BnMode, LayerSpec, Network, Tape, Tensor};

/// Deterministic full-rank fill in `[-0.5, 0.5)`.
fn filled(shape: &[usize], k: f64) -> Tensor {
    let salt = k.to_bits();
    Tensor::from_fn(shape, |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

fn matmul(c: &mut Criterion) {
    for n in [32, 128] {
        let (a, b) = (filled(&[n, n], 0.37), filled(&[n, n], 0.91));
        c.bench_function(&format!("matmul {n}x{n}"), |bch| bch.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    }
}

fn decomposition(c: &mut Criterion) {
    for (p, q) in [(17, 64), (65, 128)] {
        let m = filled(&[p, q], 0.53);
        c.bench_function(&format!("svd {p}x{q}"), |bch| bch.iter(|| svd(black_box(&m)).unwrap()));
    }
}

fn projection(c: &mut Criterion) {
    let mut net = Network::new(&[16], &LayerSpec::mlp_trunk(16, &[64, 64]), 1).unwrap();
    net.add_head(0, 4).unwrap();
    let x = filled(&[256, 16], 0.29);
    let labels: Vec<usize> = (0..256).map(|i| i % 4).collect();
    let ios = net.capture_layer_io(&x, &labels, 0, BnMode::Eval).unwrap();
    let mut acc = CrossCorrAccumulator::new(&net, ProjectorKind::Tpnsp);
    acc.accumulate(&ios).unwrap();
    c.bench_function("build basis mlp 16-64-64", |bch| {
        bch.iter(|| build_basis(&[black_box(&acc)], RankPolicy::default()).unwrap())
    });
    let basis = build_basis(&[&acc], RankPolicy::default()).unwrap();
    let layer = basis.layer(3).unwrap();
    let delta = filled(&[64, 65], 0.11);
    c.bench_function("project 64x65 update", |bch| bch.iter(|| layer.project(black_box(&delta)).unwrap()));
}

fn forward_backward(c: &mut Criterion) {
    let cases = [
        ("mlp 16-64-64", vec![16], LayerSpec::mlp_trunk(16, &[64, 64]), 64),
        (
            "conv 3x16x16",
            vec![3, 16, 16],
            vec![
                LayerSpec::Conv2d { in_channels: 3, out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::BatchNorm { channels: 8 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 8, out_channels: 8, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            16,
        ),
    ];
    for (name, shape, specs, batch) in cases {
        let mut net = Network::new(&shape, &specs, 2).unwrap();
        net.add_head(0, 4).unwrap();
        let mut xs = vec![batch];
        xs.extend(&shape);
        let x = filled(&xs, 0.17);
        let labels: Vec<usize> = (0..batch).map(|i| i % 4).collect();
        c.bench_function(&format!("forward+backward {name} batch {batch}"), |bch| {
            bch.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let trace = net.trace(&mut tape, xv, 0, BnMode::Train).unwrap();
                let l = tape.cross_entropy(trace.logits, &labels).unwrap();
                tape.backward(l).unwrap();
                black_box(tape.value(l).item())
            })
        });
    }
}

criterion_group!(kernels, matmul, decomposition, projection, forward_backward);
criterion_main!(kernels);
