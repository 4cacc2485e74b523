//! Criterion suite for the hot paths: convolution kernels, batch
//! inference, soft-target collection, training steps, and the DE weight
//! search.
//!
//! With the `parallel` feature (default) every workload is measured
//! twice, on a single-thread rayon pool and on the default pool, so one
//! run shows the data-parallel speedup. Building with
//! `--no-default-features` measures the sequential fallback; numbers are
//! bit-identical either way.

use criterion::{criterion_group, criterion_main, Criterion};

use kdta::dataio::Dataset;
use kdta::distill::{collect_soft_targets, train_model, DistillConfig, TrainTargets};
use kdta::ensemble::{de_optimize, DEConfig, PredictionMatrixSet};
use kdta::models::{build_network, Network, NetworkSpec};
use kdta::pipeline::make_toy_dataset;
use kdta::tensor::ops::conv2d_forward;
use kdta::Tensor;

fn bench_both<F: Fn() + Sync>(c: &mut Criterion, name: &str, f: F) {
    let mut group = c.benchmark_group(name);
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool");
        group.bench_function("threads-1", |b| b.iter(|| single.install(&f)));
        group.bench_function("threads-default", |b| b.iter(&f));
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| b.iter(&f));
    group.finish();
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = kdta::rng::rng_from(seed);
    let len: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn teacher_and_data() -> (Network, Dataset) {
    let data = make_toy_dataset(1, 512, 4).unwrap();
    let spec = NetworkSpec::new(10, 4, (1, 8, 8), 8, 7);
    (build_network(&spec).unwrap(), data)
}

fn conv_forward_bench(c: &mut Criterion) {
    let input = random_tensor(&[32, 8, 28, 28], 1);
    let kernel = random_tensor(&[8, 8, 3, 3], 2);
    let bias = random_tensor(&[8], 3);
    bench_both(c, "conv2d_forward_32x8x28x28", move || {
        conv2d_forward(&input, &kernel, &bias).unwrap();
    });
}

fn predict_bench(c: &mut Criterion) {
    let (net, data) = teacher_and_data();
    let batch = data.batch_images(&(0..256).collect::<Vec<_>>());
    bench_both(c, "predict_logits_teacher_batch256", move || {
        net.predict_logits(&batch).unwrap();
    });
}

fn soft_target_bench(c: &mut Criterion) {
    let (net, data) = teacher_and_data();
    bench_both(c, "collect_soft_targets_512", move || {
        collect_soft_targets(&net, &data, 4.0).unwrap();
    });
}

fn train_epoch_bench(c: &mut Criterion) {
    let data = make_toy_dataset(3, 256, 4).unwrap();
    let spec = NetworkSpec::new(4, 4, (1, 8, 8), 8, 9);
    let config = DistillConfig { epochs: 1, learning_rate: 0.01, ..Default::default() };
    bench_both(c, "train_epoch_size4_n256", move || {
        let mut net = build_network(&spec).unwrap();
        train_model(&mut net, &data, TrainTargets::Hard, None, &config).unwrap();
    });
}

fn de_bench(c: &mut Criterion) {
    use rand::Rng;
    let mut rng = kdta::rng::rng_from(11);
    let n = 500;
    let k_classes = 10;
    let members: Vec<Tensor> = (0..5)
        .map(|m| {
            let mut data = Vec::with_capacity(n * k_classes);
            for _ in 0..n {
                let mut row: Vec<f64> =
                    (0..k_classes).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                data.extend(row);
            }
            random_member(m, data, n, k_classes)
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k_classes)).collect();
    let set = PredictionMatrixSet::new(members, labels).unwrap();
    let config = DEConfig { max_generations: 30, seed: 5, ..Default::default() };
    bench_both(c, "de_optimize_5members_500examples", move || {
        de_optimize(&set, &config).unwrap();
    });
}

fn random_member(_m: usize, data: Vec<f64>, n: usize, k: usize) -> Tensor {
    Tensor::from_vec(&[n, k], data).unwrap()
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv_forward_bench, predict_bench, soft_target_bench, train_epoch_bench, de_bench
}
criterion_main!(benches);
