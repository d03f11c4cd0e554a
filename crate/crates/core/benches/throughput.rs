//! Throughput of the data-parallel kernels.
//!
//! The library kernels run on whichever backend the `parallel` feature selects.
//! Run once with default features and once with `--no-default-features`,
//! saving and comparing criterion baselines. The `per_study_map` group
//! compares a plain iterator against the parallel map within one run.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vlct_core::encoding::{encode_volume, EncodingConfig};
use vlct_core::eval::{bidirectional_retrieval, monte_carlo_within1, EquivalenceClasses};
use vlct_core::parallel;
use vlct_core::repr::{embed_slices, ToyVisionEncoder};
use vlct_core::synth::{generate, SyntheticSpec};
use vlct_core::train::{batch_loss_grad, FrozenBases, ModelConfig, ModelParams, StudyFeatures};
use vlct_core::volume::{resample_isotropic, Spacing, VoxelVolume};

fn backend() -> &'static str {
    if parallel::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn monte_carlo(c: &mut Criterion) {
    let p = [0.312, 0.224, 0.464];
    c.bench_function("monte_carlo_within1_1e6", |b| {
        b.iter(|| monte_carlo_within1(black_box(p), black_box(p), 1_000_000, 3))
    });
}

fn resampling(c: &mut Criterion) {
    let data = Array3::from_shape_fn((80, 96, 96), |(z, y, x)| ((z * 7 + y * 3 + x) % 400) as i16 - 200);
    let v = VoxelVolume::new(data, Spacing([2.5, 0.8, 0.8]), "bench").unwrap();
    c.bench_function("resample_isotropic_1mm", |b| {
        b.iter(|| resample_isotropic(black_box(&v), 1.0).unwrap())
    });
}

fn retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 600;
    let sim = gaussian(n, n, &mut rng);
    let classes = EquivalenceClasses::from_ids((0..n).map(|i| i % 150).collect());
    c.bench_function("bidirectional_retrieval_600", |b| {
        b.iter(|| bidirectional_retrieval(black_box(sim.view()), &classes, &[1, 5, 10]).unwrap())
    });
}

fn contrastive_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 1).unwrap();
    let bases = FrozenBases::identity(cfg.dim);
    let data: Vec<StudyFeatures> = (0..8)
        .map(|i| StudyFeatures {
            study_id: format!("s{i}"),
            slices: gaussian(28, cfg.vision_in, &mut rng),
            text: gaussian(1, cfg.text_in, &mut rng).row(0).to_owned(),
            impression: format!("impression {}", i % 4),
        })
        .collect();
    let batch: Vec<&StudyFeatures> = data.iter().collect();
    c.bench_function("batch_loss_grad_8x28", |b| {
        b.iter(|| batch_loss_grad(&params, &bases, black_box(&batch), Some(5), true).unwrap())
    });
}

fn per_study_map(c: &mut Criterion) {
    let studies = generate(&SyntheticSpec {
        studies: 16,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let cfg = EncodingConfig::default();
    let encoder = ToyVisionEncoder::new(512, 4, 11).unwrap();
    let work = |s: &vlct_core::synth::SyntheticStudy| {
        let slices = encode_volume(&s.volume, &cfg, 0).unwrap();
        embed_slices(&encoder, &s.study_id, &slices).unwrap().len()
    };
    let mut group = c.benchmark_group("per_study_map");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("encode_embed_16", "iter"), |b| {
        b.iter(|| studies.iter().map(work).sum::<usize>())
    });
    group.bench_function(BenchmarkId::new("encode_embed_16", backend()), |b| {
        b.iter(|| parallel::map(&studies, work).into_iter().sum::<usize>())
    });
    group.finish();
}

criterion_group!(benches, monte_carlo, resampling, retrieval, contrastive_step, per_study_map);
criterion_main!(benches);
