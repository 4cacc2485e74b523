//! Temporary calibration harness; deleted before finishing.

use std::time::Instant;

use kdta::ensemble::{
    de_minimize, de_optimize, grid_search_weights, DEConfig, PredictionMatrixSet,
};
use kdta::pipeline::{
    read_metrics, run_experiment, ExperimentConfig, ModelRole,
};
use kdta::rng::{rng_from, stage_seed};
use kdta::Tensor;
use rand::Rng;

#[test]
#[ignore]
fn calibrate_de_quadratic() {
    for seed in 0..5u64 {
        let mut rng = rng_from(stage_seed(seed, "target", 0));
        let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let config = DEConfig { seed: stage_seed(seed, "de", 0), max_generations: 300, ..Default::default() };
        let start = Instant::now();
        let result = de_minimize(5, &config, |w| {
            w.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .unwrap();
        let linf = result
            .weights
            .as_slice()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!(
            "seed {seed}: linf {linf:.2e} best {:.2e} gens {} time {:?}",
            result.best_error,
            result.history.len() - 1,
            start.elapsed()
        );
    }
}

fn random_prediction_set(seed: u64, members: usize, n: usize, classes: usize) -> PredictionMatrixSet {
    let mut rng = rng_from(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let quality: Vec<f64> = (0..members).map(|_| rng.gen_range(0.3..2.0)).collect();
    let mats: Vec<Tensor> = (0..members)
        .map(|m| {
            let mut data = Vec::with_capacity(n * classes);
            for &label in &labels {
                let logits: Vec<f64> = (0..classes)
                    .map(|c| {
                        let signal = if c == label { quality[m] } else { 0.0 };
                        signal + rng.gen_range(-1.0..1.0)
                    })
                    .collect();
                let m_ = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - m_).exp()).collect();
                let s: f64 = exps.iter().sum();
                data.extend(exps.iter().map(|e| e / s));
            }
            Tensor::from_vec(&[n, classes], data).unwrap()
        })
        .collect();
    PredictionMatrixSet::new(mats, labels).unwrap()
}

#[test]
#[ignore]
fn calibrate_de_vs_grid() {
    let start = Instant::now();
    let mut wins = 0;
    for case in 0..10u64 {
        let set = random_prediction_set(stage_seed(case, "case", 0), 3, 200, 3);
        let (gw, grid_err) = grid_search_weights(&set, 0.01).unwrap();
        let config = DEConfig { seed: stage_seed(case, "de", 0), ..Default::default() };
        let de = de_optimize(&set, &config).unwrap();
        let ok = de.best_error <= grid_err + 1e-9;
        if ok {
            wins += 1;
        }
        println!(
            "case {case}: de {:.4} grid {:.4} ok={ok} gridw {:?}",
            de.best_error,
            grid_err,
            gw.as_slice()
        );
    }
    println!("wins {wins}/10, total {:?}", start.elapsed());
}

#[test]
#[ignore]
fn calibrate_toy_ladder() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.toy_n = 600;
    cfg.toy_classes = 4;
    cfg.epochs = 3;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 32;
    cfg.seeds = vec![1, 2, 3, 4, 5];
    cfg.output_dir = dir.path().to_path_buf();
    let summary = run_experiment(&cfg).unwrap();
    println!("toy ladder wall: {:?}", start.elapsed());
    let records = read_metrics(&summary.metrics_path).unwrap();
    for seed in &cfg.seeds {
        let acc = |cond: &str| {
            records
                .iter()
                .find(|r| {
                    r.seed == *seed
                        && r.condition == cond
                        && r.model_role == ModelRole::Student
                        && r.epoch == "final"
                })
                .map(|r| r.accuracy)
                .unwrap()
        };
        println!(
            "seed {seed}: standalone {:.4} baseline_kd {:.4} single_ta {:.4} simple {:.4} weighted {:.4}",
            acc("standalone"),
            acc("baseline_kd"),
            acc("single_ta"),
            acc("ensemble_simple"),
            acc("ensemble_weighted"),
        );
    }
    for r in &records {
        if r.model_role != ModelRole::Student && r.epoch == "final" {
            println!(
                "seed {} {} size {}: acc {:.4}",
                r.seed,
                r.model_role.as_str(),
                r.model_size,
                r.accuracy
            );
        }
    }
}

#[test]
#[ignore]
fn calibrate_mnist_scale_throughput() {
    // one epoch of a size-10 teacher on 28x28 synthetic data, to size
    // the real desk-scale run
    use kdta::dataio::{Dataset, SplitTag};
    use kdta::distill::{train_model, DistillConfig, TrainTargets};
    use kdta::models::{build_network, NetworkSpec};
    let n = 1000;
    let mut rng = rng_from(3);
    let images = Tensor::from_vec(
        &[n, 1, 28, 28],
        (0..n * 784).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
    let data = Dataset::new(images, labels, 10, SplitTag::Train).unwrap();
    let spec = NetworkSpec::new(10, 10, (1, 28, 28), 8, 1);
    let mut net = build_network(&spec).unwrap();
    let config = DistillConfig { epochs: 1, ..Default::default() };
    let start = Instant::now();
    train_model(&mut net, &data, TrainTargets::Hard, None, &config).unwrap();
    println!("teacher(10) 1 epoch on 1000x28x28: {:?}", start.elapsed());
}
