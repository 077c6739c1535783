use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use lfsa_core::kernels::conv2d;
use lfsa_core::{assign_scene, lfsa_forward, BBox, CellKey, GridLevel, GroundTruth, LfsaParams, Prediction, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_lfsa(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("lfsa_forward");
    for &(ch, h, w) in &[(8, 16, 16), (16, 32, 32), (32, 40, 40)] {
        let p = LfsaParams::random(ch, 0.1, &mut rng);
        let x = Tensor::uniform(&[ch, h, w], -1.0, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{h}x{w}")), &x, |b, x| {
            b.iter(|| lfsa_forward(black_box(x), &p).unwrap())
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[32, 40, 40], -1.0, 1.0, &mut rng);
    let w3 = Tensor::uniform(&[32, 32, 3, 3], -0.1, 0.1, &mut rng);
    let dw = Tensor::uniform(&[32, 1, 7, 7], -0.1, 0.1, &mut rng);
    c.bench_function("conv2d_3x3_32x40x40", |b| b.iter(|| conv2d(black_box(&x), &w3, None, 1, 1, 1).unwrap()));
    c.bench_function("depthwise_7x7_32x40x40", |b| b.iter(|| conv2d(black_box(&x), &dw, None, 1, 3, 32).unwrap()));
}

fn bench_assign(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let level = GridLevel { rows: 16, cols: 16, stride: 8.0, anchors: vec![(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)] };
    let gts: Vec<GroundTruth> = (0..8)
        .map(|_| GroundTruth {
            bbox: BBox::new(
                rng.gen_range(8.0..120.0),
                rng.gen_range(8.0..120.0),
                rng.gen_range(8.0..48.0),
                rng.gen_range(8.0..48.0),
            )
            .unwrap(),
            class_id: rng.gen_range(0..4),
        })
        .collect();
    let mut preds = BTreeMap::new();
    for anchor in 0..3 {
        for row in 0..16 {
            for col in 0..16 {
                let bbox = BBox::new(
                    col as f64 * 8.0 + 4.0,
                    row as f64 * 8.0 + 4.0,
                    rng.gen_range(8.0..48.0),
                    rng.gen_range(8.0..48.0),
                )
                .unwrap();
                let class_probs = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
                preds.insert(CellKey { level: 0, anchor, row, col }, Prediction { bbox, class_probs, objectness: 0.5 });
            }
        }
    }
    let levels = [level];
    c.bench_function("assign_scene_8gt_16x16x3", |b| {
        b.iter(|| assign_scene(black_box(&gts), &preds, &levels, 3.0, 4.0).unwrap())
    });
}

criterion_group!(benches, bench_lfsa, bench_conv, bench_assign);
criterion_main!(benches);
