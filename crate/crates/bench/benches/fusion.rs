use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use detfuse::ensemble::{ensemble_fuse_bundle, FusionConfig, WeightVector};
use detfuse::evaluation::evaluate_bundle;
use detfuse::{build_pairs, iou, nms_fuse_bundle, train_weights, BoundingBox, EvalConfig, NmsConfig, TrainConfig};
use detfuse_bench::image_bundle;

fn geometry(c: &mut Criterion) {
    let a = BoundingBox::from_array([10.0, 20.0, 110.0, 140.0]);
    let b = BoundingBox::from_array([30.0, 10.0, 130.0, 120.0]);
    c.bench_function("iou", |bench| bench.iter(|| iou(black_box(&a), black_box(&b))));
}

fn fusion(c: &mut Criterion) {
    let bundle = image_bundle(300, 1);
    let weights = WeightVector::uniform(bundle.num_detectors(), 1.0 / 3.0);
    c.bench_function("nms_300_images", |bench| {
        bench.iter(|| nms_fuse_bundle(black_box(&bundle), &NmsConfig::default()).unwrap())
    });
    c.bench_function("ensemble_fuse_300_images", |bench| {
        bench.iter(|| ensemble_fuse_bundle(black_box(&bundle), &weights, &FusionConfig::default()).unwrap())
    });
    c.bench_function("evaluate_300_images", |bench| {
        bench.iter(|| evaluate_bundle(black_box(&bundle), &EvalConfig::default()).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let bundle = image_bundle(100, 2);
    let ids: Vec<String> = bundle.images.iter().map(|i| i.image_id.clone()).collect();
    c.bench_function("build_pairs_100_images", |bench| {
        bench.iter(|| build_pairs(black_box(&bundle), &ids, 0.5).unwrap())
    });
    let pairs = build_pairs(&bundle, &ids, 0.5).unwrap();
    let config = TrainConfig { max_epochs: 200, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("200_epochs", |bench| {
        bench.iter(|| train_weights(black_box(&pairs), &config).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, fusion, training);
criterion_main!(benches);
