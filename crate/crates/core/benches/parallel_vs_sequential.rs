use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use csf_autograd::par;
use csf_core::assets::{builtin, AssetStore, INCEPTION};
use csf_core::candidates::{generate_candidates, score_all, OracleBackend, ScoreVariant};
use csf_core::eval::fid;
use csf_core::toy::{make_toy_set, procedural_image, ToySpec};
use csf_core::trainer::{TrainConfig, TrainItem, Trainer};

fn candidate_scoring(c: &mut Criterion) {
    let store = AssetStore::builtin();
    let lpips = store.lpips().unwrap();
    let set = make_toy_set(&ToySpec { count: 1, ..ToySpec::default() }, &lpips).unwrap();
    let scene = &set[0].scene;
    let cands = generate_candidates(scene, &OracleBackend::graded(8), 8, 3).unwrap();
    let mut g = c.benchmark_group("score_8_candidates");
    g.bench_function("parallel", |b| b.iter(|| score_all(black_box(&cands), scene, &lpips).unwrap()));
    g.bench_function("sequential", |b| {
        b.iter(|| par::with_single_thread(|| score_all(black_box(&cands), scene, &lpips).unwrap()))
    });
    g.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let store = AssetStore::builtin();
    let set = make_toy_set(&ToySpec { count: 4, ..ToySpec::default() }, &store.lpips().unwrap()).unwrap();
    let items: Vec<TrainItem> = set
        .into_iter()
        .map(|t| TrainItem::from_set(t.scene, &t.candidates, 3, ScoreVariant::MseLpips).unwrap())
        .collect();
    let trainer = Trainer::new(TrainConfig::toy(), store.perceptual().unwrap()).unwrap();
    let prepared = trainer.prepare(&items).unwrap();
    let batch: Vec<_> = prepared.iter().collect();
    let mut g = c.benchmark_group("batch_gradients_4x32");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| trainer.batch_gradients(black_box(&batch), 0.5).unwrap()));
    g.bench_function("sequential", |b| {
        b.iter(|| par::with_single_thread(|| trainer.batch_gradients(black_box(&batch), 0.5).unwrap()))
    });
    g.finish();
}

fn fid_features(c: &mut Criterion) {
    let net = builtin(INCEPTION, 0, 2048).unwrap();
    let a: Vec<_> = (0..16).map(|s| procedural_image(32, s).pixels).collect();
    let b: Vec<_> = (16..32).map(|s| procedural_image(32, s).pixels).collect();
    let mut g = c.benchmark_group("fid_16_images");
    g.sample_size(10);
    g.bench_function("parallel", |bch| bch.iter(|| fid(black_box(&a), &b, &net).unwrap()));
    g.bench_function("sequential", |bch| bch.iter(|| par::with_single_thread(|| fid(black_box(&a), &b, &net).unwrap())));
    g.finish();
}

criterion_group!(benches, candidate_scoring, batch_gradients, fid_features);
criterion_main!(benches);
