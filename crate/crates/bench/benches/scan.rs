use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dmamba::rng::{stream, Stream};
use dmamba::scan::{scan_parallel, scan_sequential, ScanMode};
use dmamba::ssm::selective_ssm;
use dmamba::{Tape, Tensor};
use rand::Rng;

fn lanes(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan_lane");
    for l in [64usize, 1024, 4096] {
        let mut rng = stream(0, Stream::Data);
        let a: Vec<f64> = (0..l).map(|_| rng.random_range(0.5..1.0)).collect();
        let u: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut h = vec![0.0; l];
        let mut work = Vec::new();
        g.bench_with_input(BenchmarkId::new("sequential", l), &l, |b, _| {
            b.iter(|| scan_sequential(&a, &u, &mut h))
        });
        g.bench_with_input(BenchmarkId::new("parallel", l), &l, |b, _| {
            b.iter(|| scan_parallel(&a, &u, &mut h, &mut work))
        });
    }
    g.finish();
}

fn selective(c: &mut Criterion) {
    let (bsz, l, d, n) = (4, 64, 32, 16);
    let mut rng = stream(1, Stream::Data);
    let mut r =
        |shape: Vec<usize>, lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
    let x = r(vec![bsz, l, d], -1.0, 1.0);
    let dt = r(vec![bsz, l, d], 0.001, 0.1);
    let a_log = r(vec![d, n], 0.0, 2.7);
    let bm = r(vec![bsz, l, n], -1.0, 1.0);
    let cm = r(vec![bsz, l, n], -1.0, 1.0);
    let mut g = c.benchmark_group("selective_ssm");
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        g.bench_function(format!("forward_{mode:?}").to_lowercase(), |b| {
            b.iter(|| {
                let tape = Tape::inference();
                let v = |t: &Tensor| tape.constant(t.clone());
                selective_ssm(v(&x), v(&dt), v(&a_log), v(&bm), v(&cm), mode)
                    .unwrap()
                    .to_tensor()
            })
        });
        g.bench_function(format!("forward_backward_{mode:?}").to_lowercase(), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let v = |t: &Tensor| tape.leaf(t.clone().with_grad());
                let y = selective_ssm(v(&x), v(&dt), v(&a_log), v(&bm), v(&cm), mode).unwrap();
                y.sum_all().backward().unwrap();
            })
        });
    }
    g.finish();
}

criterion_group!(benches, lanes, selective);
criterion_main!(benches);
