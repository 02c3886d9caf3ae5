use std::hint::black_box;

use aquarange_bench::session;
use aquarange_core::hydrosim::run_session;
use aquarange_core::stages::{Pipeline, StageInput};
use aquarange_core::WaveformSpec;
use criterion::{criterion_group, criterion_main, Criterion};

fn stages(c: &mut Criterion) {
    let input = StageInput::new(&WaveformSpec::short(), 500.0, 7).unwrap();
    let mut pipe = Pipeline::new(&input.preamble);
    let lag = pipe.xcorr(&input);
    let mut g = c.benchmark_group("stages_500ms");
    g.bench_function("cross_correlation", |b| b.iter(|| black_box(pipe.xcorr(black_box(&input)))));
    let pipe = Pipeline::new(&input.preamble);
    g.bench_function("auto_correlation", |b| b.iter(|| black_box(pipe.autocorr(&input, lag))));
    g.bench_function("channel_estimation", |b| b.iter(|| black_box(pipe.estimate(&input, lag))));
    g.finish();
}

fn sessions(c: &mut Criterion) {
    let sc = session(20.0, 4);
    let mut g = c.benchmark_group("session");
    g.sample_size(10);
    g.bench_function("four_exchanges_20m", |b| b.iter(|| black_box(run_session(&sc, 0).unwrap())));
    g.finish();
}

criterion_group!(benches, stages, sessions);
criterion_main!(benches);
