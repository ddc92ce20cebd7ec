use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use hoi_bench::{detections, features, model};
use hoi_core::dataset::synthetic::{generate_synthetic, SynthConfig};
use hoi_core::eval::{average_precision, evaluate, ground_truth_predictions, match_detections, EvalConfig, Interpolation, Matcher};
use hoi_core::features::{random_map, roi_align};
use hoi_core::inference::{cascade, InferenceConfig, TargetScorer};
use hoi_core::model::{batch_loss_and_grad, LossWeights};
use hoi_core::trainer::step_samples;
use hoi_core::{iou, nms, seed, ActionRegistry, SyntheticProvider, TrainConfig};

fn geometry(c: &mut Criterion) {
    let dets = detections(1000, 3);
    c.bench_function("iou_1000_pairs", |b| {
        b.iter(|| dets.windows(2).map(|w| iou(&w[0].bbox, &w[1].bbox)).sum::<f64>())
    });
    for n in [100, 1000] {
        let d = detections(n, 4);
        c.bench_with_input(BenchmarkId::new("nms", n), &d, |b, d| b.iter(|| nms(black_box(d), 0.3)));
    }
}

fn roi(c: &mut Criterion) {
    let mut rng = seed::rng(5, &[]);
    let map = random_map(64, 30, 40, 16.0, &mut rng);
    let boxes = detections(100, 6);
    c.bench_function("roi_align_7x7_64ch_100_boxes", |b| {
        b.iter(|| boxes.iter().map(|d| roi_align(&map, &d.bbox, 7).values.len()).sum::<usize>())
    });
}

fn training_step(c: &mut Criterion) {
    let ds = generate_synthetic(&SynthConfig {
        scenes: 64,
        seed: 7,
        ..SynthConfig::default()
    });
    let dim = SyntheticProvider::min_dim(ds.categories.len(), ds.registry.num_verbs()) + 4;
    let prov = SyntheticProvider::for_dataset(&ds, dim, 0.1).expect("valid provider");
    let m = model(dim, 64);
    let cfg = TrainConfig::default();
    let batch = step_samples(&ds, &prov, &cfg, m.config.num_actions, 0).expect("features");
    c.bench_function("forward_backward_16_images", |b| {
        b.iter(|| batch_loss_and_grad(&m, &LossWeights::default(), black_box(&batch)).expect("finite"))
    });
}

fn inference(c: &mut Criterion) {
    let reg = ActionRegistry::vcoco();
    let m = model(48, 64);
    let cfg = InferenceConfig::default();
    let mut g = c.benchmark_group("cascade");
    for n in [10, 100] {
        let d = detections(n, 8);
        let x = features(n, 48, 8);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| cascade(&m, &reg, 0, &d, &x, &cfg, TargetScorer::Model).expect("runs"))
        });
    }
    g.finish();
}

fn ap(c: &mut Criterion) {
    let mut rng = seed::rng(9, &[]);
    let hits: Vec<bool> = (0..10_000).map(|_| rand::Rng::random_bool(&mut rng, 0.3)).collect();
    c.bench_function("average_precision_10k", |b| {
        b.iter(|| average_precision(black_box(&hits), 4000, Interpolation::AllPoint))
    });
    let cands: Vec<Vec<usize>> = (0..2000)
        .map(|i| vec![i % 500, (i * 7) % 500])
        .collect();
    c.bench_function("maximal_matching_2000", |b| {
        b.iter(|| match_detections(black_box(&cands), 500, Matcher::Maximal))
    });
    let ds = generate_synthetic(&SynthConfig {
        scenes: 200,
        seed: 10,
        ..SynthConfig::default()
    });
    let preds = ground_truth_predictions(&ds);
    c.bench_function("evaluate_200_scenes", |b| {
        b.iter(|| evaluate(&ds, black_box(&preds), &EvalConfig::default()).expect("valid"))
    });
}

criterion_group!(benches, geometry, roi, training_step, inference, ap);
criterion_main!(benches);
