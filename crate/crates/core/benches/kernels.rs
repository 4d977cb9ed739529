use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sstda::autodiff::{Graph, Tensor};
use sstda::features::{DoaTrack, InputTensor, NUM_BINS};
use sstda::par::Exec;
use sstda::tracker::{collate, train_step, CrnnConfig, Example, Optimizers, SstModel};

fn strategies() -> Vec<(&'static str, Exec)> {
    #[allow(unused_mut)]
    let mut out = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    out.push(("parallel", Exec::Parallel));
    out
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[4, 18, 64, 49]);
    let w = rand_tensor(&mut rng, &[8, 18, 3, 3]);
    let b = rand_tensor(&mut rng, &[8]);
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut g = Graph::with_exec(exec);
                let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
                let y = g.conv2d(xv, wv, bv).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn gru(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, t, f, h) = (16, 20, 32, 32);
    let x = rand_tensor(&mut rng, &[n, t, f]);
    let wx = rand_tensor(&mut rng, &[3 * h, f]);
    let wh = rand_tensor(&mut rng, &[3 * h, h]);
    let b = rand_tensor(&mut rng, &[3 * h]);
    let lengths: Vec<usize> = (0..n).map(|i| t - i % 5).collect();
    let mut group = c.benchmark_group("gru_fwd_bwd");
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut g = Graph::with_exec(exec);
                let v: Vec<_> = [&x, &wx, &wh, &b]
                    .iter()
                    .map(|t| g.input((*t).clone()))
                    .collect();
                let y = g.gru(v[0], v[1], v[2], v[3], None, Some(&lengths)).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn dense(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[144, 256]);
    let w = rand_tensor(&mut rng, &[180, 256]);
    let b = rand_tensor(&mut rng, &[180]);
    let mut group = c.benchmark_group("linear_fwd_bwd");
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut g = Graph::with_exec(exec);
                let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
                let y = g.linear(xv, wv, bv).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn step(c: &mut Criterion) {
    let cfg = CrnnConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let examples: Vec<Example> = (0..8)
        .map(|_| {
            let input = InputTensor(rand_tensor(&mut rng, &[cfg.input_channels, NUM_BINS, 49]));
            let truth = DoaTrack {
                azimuth: (0..49).map(|_| Some(rng.gen_range(0.0..3.1))).collect(),
                active: vec![true; 49],
            };
            Example::new(input, &truth, cfg.time_stride()).unwrap()
        })
        .collect();
    let batch = collate(&examples.iter().collect::<Vec<_>>()).unwrap();
    let model = SstModel::new(&cfg, 0, &mut rng).unwrap();
    let mut group = c.benchmark_group("toy_train_step");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            let mut m = model.clone();
            let mut opt = Optimizers::new(&m, 1e-3);
            bench.iter(|| train_step(&mut m, &mut opt, &batch, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, gru, dense, step);
criterion_main!(benches);
