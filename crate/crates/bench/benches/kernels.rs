use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nightrack_bench::{noise, scan_problem};
use nightrack_core::init::seeded_rng;
use nightrack_core::kernels::matmul;
use nightrack_core::mlle::{Enhancer, EnhancerConfig};
use nightrack_core::nn::{conv2d, Conv2dSpec};
use nightrack_core::ssm::{selective_scan_parallel, selective_scan_seq};
use nightrack_core::synth::{square_sequence, SquareMotion};
use nightrack_core::vltrack::{Tracker, TrackerConfig};
use nightrack_core::ParamStore;

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("selective_scan");
    for l in [64, 1024] {
        let (u, p) = scan_problem(1, l, 32, 16);
        g.bench_with_input(BenchmarkId::new("sequential", l), &l, |b, _| {
            b.iter(|| selective_scan_seq(black_box(&u), &p).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("parallel", l), &l, |b, _| {
            b.iter(|| selective_scan_parallel(black_box(&u), &p).unwrap())
        });
    }
    g.finish();
}

fn dense(c: &mut Criterion) {
    let a = noise(2, &[256, 384]);
    let w = noise(3, &[384, 384]);
    c.bench_function("matmul_256x384x384", |b| {
        b.iter(|| matmul(black_box(a.data()), w.data(), 256, 384, 384))
    });
    let x = noise(4, &[40, 64, 64]);
    let k = noise(5, &[40, 40, 3, 3]);
    c.bench_function("conv2d_40x64x64_3x3", |b| {
        b.iter(|| conv2d(black_box(&x), &k, None, Conv2dSpec::new(1, 1)).unwrap())
    });
}

fn pipelines(c: &mut Criterion) {
    let enhancer = Enhancer::new(EnhancerConfig::default());
    let mut store = ParamStore::new();
    enhancer.init(&mut store, &mut seeded_rng(6)).unwrap();
    let img = noise(7, &[3, 64, 64]);
    c.bench_function("enhance_64x64", |b| {
        b.iter(|| enhancer.enhance(&store, black_box(&img)).unwrap())
    });

    let tracker = Tracker::new(TrackerConfig::toy()).unwrap();
    let mut store = ParamStore::new();
    tracker.init(&mut store, &mut seeded_rng(8)).unwrap();
    let seq = square_sequence(
        9,
        &SquareMotion {
            frames: 2,
            ..Default::default()
        },
    );
    let state = tracker
        .prepare(&store, &seq.frames[0], &seq.boxes[0], &seq.prompt)
        .unwrap();
    c.bench_function("toy_track_step", |b| {
        b.iter(|| {
            let mut s = state.clone();
            tracker
                .step(&store, &mut s, black_box(&seq.frames[1]))
                .unwrap()
        })
    });
}

criterion_group!(benches, scan, dense, pipelines);
criterion_main!(benches);
