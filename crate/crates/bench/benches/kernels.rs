use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fsseg_bench::{blob_image, wave};
use fsseg_core::correlation::{build_pyramid, correlation_4d};
use fsseg_core::features::toy_extract_features;
use fsseg_core::fusion::kshot_vote;
use fsseg_core::matching::{center_pivot_conv4d, forward_full, BranchMode, CenterPivotKernel, MatchingConfig, MatchingParams};
use fsseg_core::spectral::{affinity_graph, eigensegments, eigensolve_with, multi_otsu, EigenRoute, SpectralParams};
use fsseg_core::{MaskMap, Tensor};

fn correlation(c: &mut Criterion) {
    let mut g = c.benchmark_group("correlation_4d");
    for side in [8, 16, 32] {
        let fq = wave(&[64, side, side], 0.0);
        let fs = wave(&[64, side, side], 1.0);
        g.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| correlation_4d(&fq, &fs).unwrap())
        });
    }
    g.finish();
}

fn center_pivot(c: &mut Criterion) {
    let x = wave(&[4, 16, 16, 16, 16], 0.3);
    let k = CenterPivotKernel {
        query: wave(&[16, 4, 3, 3], 0.1),
        support: wave(&[16, 4, 3, 3], 0.2),
        bias: Some(wave(&[16], 0.4)),
        support_stride: 2,
    };
    c.bench_function("center_pivot_conv4d 4->16 at 16^4", |b| b.iter(|| center_pivot_conv4d(&x, &k).unwrap()));
}

fn spectral(c: &mut Criterion) {
    let img = blob_image(128);
    let f = toy_extract_features(&img).unwrap();
    let params = SpectralParams::default();
    let z = affinity_graph(&img, f.semantic().unwrap(), &params).unwrap();
    let mut g = c.benchmark_group("eigensolve 1024 nodes");
    g.sample_size(10);
    for route in [EigenRoute::Dense, EigenRoute::Lanczos] {
        g.bench_function(format!("{route:?}"), |b| b.iter(|| eigensolve_with(&z, 5, route).unwrap()));
    }
    g.finish();
    let mut g = c.benchmark_group("spectral");
    g.sample_size(10);
    g.bench_function("eigensegments 128x128", |b| b.iter(|| eigensegments(&img, &f, &params).unwrap()));
    let map = Tensor::from_fn([128, 128], |i| wave(&[1], i as f32).data()[0] as f64);
    g.bench_function("multi_otsu 3 classes", |b| b.iter(|| multi_otsu(&map, 3).unwrap()));
    g.finish();
}

fn matching(c: &mut Criterion) {
    let q = toy_extract_features(&blob_image(32)).unwrap();
    let s = toy_extract_features(&fsseg_core::harness::two_blob_fixture(1, 32).image).unwrap();
    let mask = MaskMap::from_fn(32, 32, |y, x| (y as i32 - 16).pow(2) + (x as i32 - 16).pow(2) < 80);
    let params = MatchingParams::init(MatchingConfig::toy(), BranchMode::TwoBranch, 0);
    c.bench_function("build_pyramid toy 32px", |b| b.iter(|| build_pyramid(&q, &s, &mask).unwrap()));
    c.bench_function("forward_full toy 32px", |b| b.iter(|| forward_full(&q, &s, &mask, &params).unwrap()));
    let preds: Vec<MaskMap> = (0..5).map(|k| MaskMap::from_fn(256, 256, |y, x| (x + y * k) % 7 < 3)).collect();
    c.bench_function("kshot_vote 5x256^2", |b| b.iter(|| kshot_vote(&preds, 0.4).unwrap()));
}

criterion_group!(benches, correlation, center_pivot, spectral, matching);
criterion_main!(benches);
