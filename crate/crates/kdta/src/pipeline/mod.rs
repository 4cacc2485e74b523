//! Experiment orchestration: the five-condition ladder, the
//! teacher-depth sweep, and artifact persistence.
//!
//! Stage seeds derive from (run seed, stage tag, model size) through
//! [`crate::rng::stage_seed`], so adding a condition never perturbs the
//! randomness of another stage. Teacher and assistant stages key on the
//! model size only and are cached, so they train at most once per seed
//! no matter how many conditions need them; student init and shuffle
//! seeds are shared across conditions so conditions differ only in
//! their training signal.

mod config;
mod metrics;
mod toy;

pub use config::{Condition, DatasetKind, ExperimentConfig};
pub use metrics::{
    append_metrics, emit_report, read_metrics, summarize_conditions, ConditionSummary,
    MetricsRecord, ModelRole, METRICS_HEADER,
};
pub use toy::{make_toy_dataset, make_toy_dataset_with_noise, nearest_pattern_class};

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::dataio::{self, Dataset, SplitPlan, SplitTag};
use crate::distill::{
    collect_soft_targets, save_soft_targets, train_model, SoftTargetSet, TrainReport,
    TrainTargets,
};
use crate::ensemble::{
    de_optimize, simple_average, weighted_average, write_weights_file, PredictionMatrixSet,
};
use crate::exec;
use crate::models::{build_network, save_checkpoint, Network, NetworkSpec};
use crate::rng::stage_seed;
use crate::{Error, Result};

/// Paths produced by a run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub metrics_path: PathBuf,
    pub weights_files: Vec<PathBuf>,
    pub report_path: PathBuf,
}

struct SeedData {
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let (mut train, mut test) = match config.dataset {
        DatasetKind::Toy => {
            let test_n = (config.toy_n / 5).max(10 * config.toy_classes);
            (
                make_toy_dataset(stage_seed(seed, "toy-train", 0), config.toy_n, config.toy_classes)?,
                make_toy_dataset(stage_seed(seed, "toy-test", 0), test_n, config.toy_classes)?,
            )
        }
        DatasetKind::Mnist => {
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone().ok_or_else(|| {
                    Error::Config(format!("dataset=mnist requires the {key} path"))
                })
            };
            let train = dataio::load_mnist(
                &need(&config.mnist_images, "mnist_images")?,
                &need(&config.mnist_labels, "mnist_labels")?,
            )?;
            let test = dataio::load_mnist(
                &need(&config.mnist_test_images, "mnist_test_images")?,
                &need(&config.mnist_test_labels, "mnist_test_labels")?,
            )?;
            (train, test)
        }
        DatasetKind::Cifar10 => {
            if config.cifar_train_batches.is_empty() {
                return Err(Error::Config(
                    "dataset=cifar10 requires cifar_train_batches".into(),
                ));
            }
            let test_batch = config.cifar_test_batch.clone().ok_or_else(|| {
                Error::Config("dataset=cifar10 requires cifar_test_batch".into())
            })?;
            (
                dataio::load_cifar10(&config.cifar_train_batches)?,
                dataio::load_cifar10(&[test_batch])?,
            )
        }
    };
    if config.subset_size > 0 {
        train = dataio::subset(&train, config.subset_size, stage_seed(seed, "data-subset", 0))?;
    }
    if config.test_subset_size > 0 {
        test = dataio::subset(&test, config.test_subset_size, stage_seed(seed, "data-subset", 1))?;
    }
    let train = dataio::normalize_dataset(&train, None);
    let stats = train.stats.clone().expect("fitted above");
    let mut test = dataio::normalize_dataset(&test, Some(&stats));
    test.split_tag = SplitTag::Test;
    let plan = SplitPlan::new(
        1.0 - config.validation_fraction,
        config.validation_fraction,
        stage_seed(seed, "data-split", 0),
    );
    let (train, validation) = dataio::split_dataset(&train, &plan)?;
    Ok(SeedData { train, validation, test })
}

fn network_spec(config: &ExperimentConfig, data: &SeedData, size: usize, seed: u64) -> NetworkSpec {
    NetworkSpec {
        size_n: size,
        num_classes: data.train.num_classes,
        input_shape: data.train.example_shape(),
        base_channels: config.base_channels,
        seed,
    }
}

/// Emits the per-epoch rows plus a `final` row for one training run.
fn report_records(
    config: &ExperimentConfig,
    seed: u64,
    condition: &str,
    role: ModelRole,
    size: usize,
    report: &TrainReport,
) -> Vec<MetricsRecord> {
    let base = MetricsRecord {
        run_id: format!("{}-seed{seed}", config.dataset.as_str()),
        seed,
        dataset: config.dataset.as_str().to_string(),
        condition: condition.to_string(),
        model_role: role,
        model_size: size,
        epoch: String::new(),
        loss: 0.0,
        accuracy: 0.0,
        wall_seconds: 0.0,
    };
    let mut rows = Vec::with_capacity(report.epoch_loss.len() + 1);
    for e in 0..report.epoch_loss.len() {
        rows.push(MetricsRecord {
            epoch: e.to_string(),
            loss: report.epoch_loss[e],
            accuracy: report.epoch_accuracy[e],
            ..base.clone()
        });
    }
    rows.push(MetricsRecord {
        epoch: "final".to_string(),
        loss: report.epoch_loss.last().copied().unwrap_or(0.0),
        accuracy: report.final_accuracy,
        wall_seconds: report.wall_seconds,
        ..base
    });
    rows
}

/// Teacher or assistant artifacts cached within one seed.
struct TrainedModel {
    network: Network,
    transfer_soft: SoftTargetSet,
}

struct SeedContext<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    data: SeedData,
    records: Vec<MetricsRecord>,
    teacher: Option<TrainedModel>,
    tas: BTreeMap<usize, TrainedModel>,
}

impl<'a> SeedContext<'a> {
    fn new(config: &'a ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(SeedContext {
            config,
            seed,
            data: prepare_data(config, seed)?,
            records: Vec::new(),
            teacher: None,
            tas: BTreeMap::new(),
        })
    }

    /// Trains the teacher on hard labels once; later calls reuse it.
    fn teacher(&mut self) -> Result<&TrainedModel> {
        if self.teacher.is_none() {
            let size = self.config.teacher_size;
            let spec = network_spec(
                self.config,
                &self.data,
                size,
                stage_seed(self.seed, "teacher-init", size as u64),
            );
            let mut net = build_network(&spec)?;
            let cfg = self
                .config
                .distill_config(stage_seed(self.seed, "teacher-train", size as u64));
            let report =
                train_model(&mut net, &self.data.train, TrainTargets::Hard, Some(&self.data.test), &cfg)?;
            self.records.extend(report_records(
                self.config,
                self.seed,
                "shared",
                ModelRole::Teacher,
                size,
                &report,
            ));
            let transfer_soft =
                collect_soft_targets(&net, &self.data.train, self.config.temperature)?;
            self.teacher = Some(TrainedModel { network: net, transfer_soft });
        }
        Ok(self.teacher.as_ref().expect("just built"))
    }

    /// Trains the assistants of the listed sizes (distilled from the
    /// teacher) that are not cached yet. Independent assistants train
    /// concurrently.
    fn ensure_tas(&mut self, sizes: &[usize]) -> Result<()> {
        let missing: Vec<usize> =
            sizes.iter().copied().filter(|s| !self.tas.contains_key(s)).collect();
        if missing.is_empty() {
            return Ok(());
        }
        self.teacher()?;
        let teacher_soft = &self.teacher.as_ref().expect("trained above").transfer_soft;
        let config = self.config;
        let seed = self.seed;
        let data = &self.data;
        let trained: Vec<Result<(usize, Network, TrainReport)>> =
            exec::map_collect(&missing, |&size| {
                let spec = network_spec(
                    config,
                    data,
                    size,
                    stage_seed(seed, "ta-init", size as u64),
                );
                let mut net = build_network(&spec)?;
                let cfg = config.distill_config(stage_seed(seed, "ta-train", size as u64));
                let report = train_model(
                    &mut net,
                    &data.train,
                    TrainTargets::Distill(teacher_soft),
                    Some(&data.test),
                    &cfg,
                )?;
                Ok((size, net, report))
            });
        for item in trained {
            let (size, net, report) = item?;
            self.records.extend(report_records(
                config,
                seed,
                "shared",
                ModelRole::Ta,
                size,
                &report,
            ));
            let transfer_soft = collect_soft_targets(&net, &data.train, config.temperature)?;
            self.tas.insert(size, TrainedModel { network: net, transfer_soft });
        }
        Ok(())
    }

    /// Builds and trains a fresh student. Init and shuffle seeds are
    /// shared across conditions; only the targets differ.
    fn train_student(&mut self, targets: TrainTargets, condition: &str) -> Result<TrainReport> {
        let size = self.config.student_size;
        let spec = network_spec(
            self.config,
            &self.data,
            size,
            stage_seed(self.seed, "student-init", size as u64),
        );
        let mut net = build_network(&spec)?;
        let cfg = self
            .config
            .distill_config(stage_seed(self.seed, "student-train", size as u64));
        let report =
            train_model(&mut net, &self.data.train, targets, Some(&self.data.test), &cfg)?;
        self.records.extend(report_records(
            self.config,
            self.seed,
            condition,
            ModelRole::Student,
            size,
            &report,
        ));
        Ok(report)
    }

    /// Prediction matrices of the ladder assistants on the validation
    /// split at temperature 1 (their actual predictive distributions).
    fn validation_matrices(&self) -> Result<PredictionMatrixSet> {
        let mut members = Vec::with_capacity(self.config.ta_sizes.len());
        for size in &self.config.ta_sizes {
            let ta = self.tas.get(size).expect("ladder assistants trained");
            let preds = collect_soft_targets(&ta.network, &self.data.validation, 1.0)?;
            members.push(preds.distributions().clone());
        }
        PredictionMatrixSet::new(members, self.data.validation.labels.clone())
    }

    /// Transfer-set soft targets of the ladder assistants, in ladder
    /// order, as a prediction set over the training split.
    fn transfer_matrices(&self) -> Result<PredictionMatrixSet> {
        let members: Vec<_> = self
            .config
            .ta_sizes
            .iter()
            .map(|size| {
                self.tas
                    .get(size)
                    .expect("ladder assistants trained")
                    .transfer_soft
                    .distributions()
                    .clone()
            })
            .collect();
        PredictionMatrixSet::new(members, self.data.train.labels.clone())
    }

    fn save_model_artifacts(&self, out: &std::path::Path) -> Result<()> {
        let seed = self.seed;
        if let Some(teacher) = &self.teacher {
            save_checkpoint(
                &teacher.network,
                &out.join(format!("checkpoints/teacher_size{}_seed{seed}.kdta", self.config.teacher_size)),
            )?;
            save_soft_targets(
                &teacher.transfer_soft,
                &out.join(format!("soft_targets/teacher_size{}_seed{seed}.kdst", self.config.teacher_size)),
            )?;
        }
        for (size, ta) in &self.tas {
            save_checkpoint(
                &ta.network,
                &out.join(format!("checkpoints/ta_size{size}_seed{seed}.kdta")),
            )?;
            save_soft_targets(
                &ta.transfer_soft,
                &out.join(format!("soft_targets/ta_size{size}_seed{seed}.kdst")),
            )?;
        }
        Ok(())
    }
}

/// Runs the requested conditions for every seed, appending metrics and
/// writing weights files, checkpoints, soft-target sets, and the
/// summary report under `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.csv");
    let mut weights_files = Vec::new();

    for &seed in &config.seeds {
        let mut ctx = SeedContext::new(config, seed)?;
        let conditions = &config.conditions;

        if conditions.contains(&Condition::BaselineKd)
            || conditions.contains(&Condition::SingleTa)
            || conditions.contains(&Condition::EnsembleSimple)
            || conditions.contains(&Condition::EnsembleWeighted)
        {
            ctx.teacher()?;
        }
        let mut ta_needed = Vec::new();
        if conditions.contains(&Condition::EnsembleSimple)
            || conditions.contains(&Condition::EnsembleWeighted)
        {
            ta_needed.extend_from_slice(&config.ta_sizes);
        }
        if conditions.contains(&Condition::SingleTa)
            && !ta_needed.contains(&config.single_ta_size)
        {
            ta_needed.push(config.single_ta_size);
        }
        ctx.ensure_tas(&ta_needed)?;

        for condition in Condition::ALL {
            if !conditions.contains(&condition) {
                continue;
            }
            match condition {
                Condition::Standalone => {
                    ctx.train_student(TrainTargets::Hard, condition.as_str())?;
                }
                Condition::BaselineKd => {
                    let soft = ctx.teacher()?.transfer_soft.clone();
                    ctx.train_student(TrainTargets::Distill(&soft), condition.as_str())?;
                }
                Condition::SingleTa => {
                    let soft = ctx.tas[&config.single_ta_size].transfer_soft.clone();
                    ctx.train_student(TrainTargets::Distill(&soft), condition.as_str())?;
                }
                Condition::EnsembleSimple => {
                    let combined = simple_average(&ctx.transfer_matrices()?)?;
                    let soft = SoftTargetSet::new(
                        config.temperature,
                        combined,
                        "ensemble-simple".into(),
                    )?;
                    ctx.train_student(TrainTargets::Distill(&soft), condition.as_str())?;
                }
                Condition::EnsembleWeighted => {
                    let matrices = ctx.validation_matrices()?;
                    let de_cfg = config.de_config(stage_seed(seed, "de-weights", 0));
                    let result = de_optimize(&matrices, &de_cfg)?;
                    let weights_path = out.join(format!(
                        "weights_{}_seed{seed}.txt",
                        config.dataset.as_str()
                    ));
                    write_weights_file(
                        &weights_path,
                        config.dataset.as_str(),
                        &result.weights,
                        result.best_error,
                    )?;
                    weights_files.push(weights_path);
                    let combined = weighted_average(&ctx.transfer_matrices()?, &result.weights)?;
                    let soft = SoftTargetSet::new(
                        config.temperature,
                        combined,
                        "ensemble-weighted".into(),
                    )?;
                    ctx.train_student(TrainTargets::Distill(&soft), condition.as_str())?;
                }
            }
        }

        ctx.save_model_artifacts(out)?;
        append_metrics(&metrics_path, &ctx.records)?;
    }

    let report_path = emit_report(out)?;
    Ok(RunSummary { metrics_path, weights_files, report_path })
}

/// Trains a teacher of each listed depth, distills each directly into
/// the student, and records student accuracy keyed by teacher depth.
pub fn gap_sweep(config: &ExperimentConfig, teacher_sizes: &[usize]) -> Result<RunSummary> {
    if teacher_sizes.is_empty() {
        return Err(Error::Config("gap sweep needs at least one teacher size".into()));
    }
    if let Some(&bad) = teacher_sizes.iter().find(|&&s| s <= config.student_size) {
        return Err(Error::Config(format!(
            "sweep teacher size {bad} does not exceed student size {}",
            config.student_size
        )));
    }
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.csv");

    for &seed in &config.seeds {
        let mut ctx = SeedContext::new(config, seed)?;
        for &size in teacher_sizes {
            // Same stage tags as the ladder teacher, so a one-size sweep
            // reproduces the baseline_kd path exactly.
            let spec = network_spec(
                config,
                &ctx.data,
                size,
                stage_seed(seed, "teacher-init", size as u64),
            );
            let mut teacher = build_network(&spec)?;
            let cfg = config.distill_config(stage_seed(seed, "teacher-train", size as u64));
            let report = train_model(
                &mut teacher,
                &ctx.data.train,
                TrainTargets::Hard,
                Some(&ctx.data.test),
                &cfg,
            )?;
            ctx.records.extend(report_records(
                config,
                seed,
                "shared",
                ModelRole::Teacher,
                size,
                &report,
            ));
            let soft = collect_soft_targets(&teacher, &ctx.data.train, config.temperature)?;
            let condition = format!("gap_sweep_teacher{size}");
            ctx.train_student(TrainTargets::Distill(&soft), &condition)?;
        }
        append_metrics(&metrics_path, &ctx.records)?;
    }

    let report_path = emit_report(out)?;
    Ok(RunSummary { metrics_path, weights_files: Vec::new(), report_path })
}
