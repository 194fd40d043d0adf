//! Stage-level throughput with parallel dispatch on and off: tiled
//! generation, per-frame segmentation and tracking evaluation.

use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hrtrack_core::dataset::{make_inference_pairs, synthesize_aoi, SceneSpec};
use hrtrack_core::metrics::evaluate_aoi;
use hrtrack_core::patch::generate_full;
use hrtrack_core::sr::{GeneratorConfig, SrModel};
use hrtrack_core::tracker::{TrackerConfig, TrackerModel};
use hrtrack_nn::exec;

fn modes() -> [(bool, &'static str); 2] {
    [(false, "sequential"), (true, "parallel")]
}

fn tiled_generation(c: &mut Criterion) {
    let aoi = synthesize_aoi(&SceneSpec { seed: 1, hr_size: 128, n_timesteps: 2, ..Default::default() }).unwrap();
    let pairs = make_inference_pairs(&aoi.lr, aoi.hr.frames().last().unwrap()).unwrap();
    let model = SrModel::init(GeneratorConfig::desk(), 0).unwrap();
    let sample = Arc::new(pairs[0].clone());
    let mut group = c.benchmark_group("generate_full_128px_4_tiles");
    group.sample_size(10);
    for (parallel, label) in modes() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            exec::set_parallel(parallel);
            b.iter(|| black_box(generate_full(&model, &sample, sample.time, 64).unwrap()));
        });
    }
    group.finish();
    exec::set_parallel(true);
}

fn segmentation(c: &mut Criterion) {
    let aoi = synthesize_aoi(&SceneSpec { seed: 2, n_timesteps: 4, ..Default::default() }).unwrap();
    let model = TrackerModel::init(TrackerConfig::desk(), 0).unwrap();
    let mut group = c.benchmark_group("segment_series_4x64px");
    group.sample_size(10);
    for (parallel, label) in modes() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            exec::set_parallel(parallel);
            b.iter(|| black_box(model.segment_series(&aoi.hr).unwrap()));
        });
    }
    group.finish();
    exec::set_parallel(true);
}

fn evaluation(c: &mut Criterion) {
    let spec = SceneSpec { seed: 3, hr_size: 256, building_count: (40, 60), ..Default::default() };
    let aoi = synthesize_aoi(&spec).unwrap();
    let labels = aoi.labels.clone().unwrap();
    let mut group = c.benchmark_group("evaluate_aoi_256px");
    group.sample_size(10);
    for (parallel, label) in modes() {
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            exec::set_parallel(parallel);
            b.iter(|| black_box(evaluate_aoi("bench", &labels, &labels, 8, 256, 256).unwrap()));
        });
    }
    group.finish();
    exec::set_parallel(true);
}

criterion_group!(benches, tiled_generation, segmentation, evaluation);
criterion_main!(benches);
