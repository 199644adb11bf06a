use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fimmerge_core::alpha::AlphaAssignment;
use fimmerge_core::fim::{estimate_fim_with, FimOptions};
use fimmerge_core::merge::trim::{survivor_count, top_k_mask};
use fimmerge_core::merge::{merge, MergeMethod, MergePlan};
use fimmerge_core::{parse_topology, MicroModel, MicroModelConfig, NamingScheme, TensorArchive};

fn pair() -> (MicroModel, MicroModel) {
    let base = MicroModel::new(MicroModelConfig::default()).unwrap();
    let mut tuned = base.clone();
    for (i, p) in tuned.params_mut().iter_mut().enumerate() {
        *p = (*p + 1e-3 * ((i as f64) * 0.618).sin()) as f32 as f64;
    }
    (base, tuned)
}

fn archive(c: &mut Criterion) {
    let a = pair().0.to_archive();
    let bytes = a.to_bytes();
    c.bench_function("archive_encode", |b| b.iter(|| black_box(&a).to_bytes()));
    c.bench_function("archive_decode", |b| b.iter(|| TensorArchive::from_bytes(black_box(&bytes)).unwrap()));
}

fn fisher(c: &mut Criterion) {
    let (base, _) = pair();
    let topo = parse_topology(&base.to_archive(), &NamingScheme::default()).unwrap();
    let opts = FimOptions { n_samples: 4, ..FimOptions::default() };
    c.bench_function("estimate_fim_4x64", |b| b.iter(|| estimate_fim_with(&base, &opts, &topo).unwrap()));
}

fn merging(c: &mut Criterion) {
    let (base, tuned) = pair();
    let (b0, t0) = (base.to_archive(), tuned.to_archive());
    let topo = parse_topology(&b0, &NamingScheme::default()).unwrap();
    let fim = estimate_fim_with(&base, &FimOptions { n_samples: 2, ..FimOptions::default() }, &topo).unwrap();
    let alphas = AlphaAssignment::uniform(0..4, 0.6);
    for method in [MergeMethod::FimTa, MergeMethod::FimTies] {
        let plan = MergePlan::new(method, alphas.clone());
        c.bench_function(&format!("merge_{method:?}"), |b| {
            b.iter(|| merge(&b0, &t0, &plan, Some(&fim), &topo).unwrap())
        });
    }
}

fn top_k(c: &mut Criterion) {
    let w: Vec<f64> = (0..100_000).map(|i| ((i as f64) * 12.9898).sin().abs()).collect();
    let k = survivor_count(0.2, w.len());
    c.bench_function("top_k_1e5", |b| b.iter_batched(|| w.clone(), |w| top_k_mask(&w, k), BatchSize::LargeInput));
}

criterion_group!(benches, archive, fisher, merging, top_k);
criterion_main!(benches);
