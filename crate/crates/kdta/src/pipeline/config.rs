//! Experiment configuration: a flat UTF-8 `key = value` file.
//!
//! Unknown keys are hard errors. Lines starting with `#` and blank
//! lines are ignored. Lists are comma separated.
//!
//! Recognized keys (defaults in parentheses):
//!
//! ```text
//! dataset               toy | mnist | cifar10            (toy)
//! mnist_images          path to the training image IDX file
//! mnist_labels          path to the training label IDX file
//! mnist_test_images     path to the test image IDX file
//! mnist_test_labels     path to the test label IDX file
//! cifar_train_batches   comma-separated batch file paths
//! cifar_test_batch      path to the test batch
//! subset_size           stratified training subset, 0 = all  (0)
//! test_subset_size      stratified test subset, 0 = all      (0)
//! teacher_size          (10)
//! ta_sizes              (8,7,6,5,4)
//! single_ta_size        (6)
//! student_size          (2)
//! base_channels         (8)
//! toy_n                 toy training set size               (600)
//! toy_classes           (4)
//! temperature           (4.0)
//! lambda                (0.5)
//! learning_rate         (0.001)
//! momentum              (0.9)
//! epochs                (5)
//! batch_size            (32)
//! loss_mode             convex_mix | unscaled_kd           (convex_mix)
//! validation_fraction   DE fitness split from train        (0.1)
//! de_population         0 = 15 * members                   (0)
//! de_generations        (100)
//! de_crossover          (0.7)
//! de_tolerance          (0.01)
//! de_mutation_min       (0.5)
//! de_mutation_max       (1.0)
//! conditions            subset of standalone,baseline_kd,single_ta,
//!                       ensemble_simple,ensemble_weighted  (all five)
//! seeds                 (1)
//! sweep_teacher_sizes   gap-sweep teacher depths           (4,6,8,10)
//! output_dir            (out)
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use crate::distill::{DistillConfig, LossMode};
use crate::ensemble::DEConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Toy,
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Toy => "toy",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// The five experiment conditions of the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    Standalone,
    BaselineKd,
    SingleTa,
    EnsembleSimple,
    EnsembleWeighted,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Standalone,
        Condition::BaselineKd,
        Condition::SingleTa,
        Condition::EnsembleSimple,
        Condition::EnsembleWeighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Standalone => "standalone",
            Condition::BaselineKd => "baseline_kd",
            Condition::SingleTa => "single_ta",
            Condition::EnsembleSimple => "ensemble_simple",
            Condition::EnsembleWeighted => "ensemble_weighted",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "standalone" => Ok(Condition::Standalone),
            "baseline_kd" => Ok(Condition::BaselineKd),
            "single_ta" => Ok(Condition::SingleTa),
            "ensemble_simple" => Ok(Condition::EnsembleSimple),
            "ensemble_weighted" => Ok(Condition::EnsembleWeighted),
            other => Err(Error::Config(format!("unknown condition {other:?}"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parsed experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
    pub cifar_train_batches: Vec<PathBuf>,
    pub cifar_test_batch: Option<PathBuf>,
    pub subset_size: usize,
    pub test_subset_size: usize,
    pub teacher_size: usize,
    pub ta_sizes: Vec<usize>,
    pub single_ta_size: usize,
    pub student_size: usize,
    pub base_channels: usize,
    pub toy_n: usize,
    pub toy_classes: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub validation_fraction: f64,
    pub de_population: usize,
    pub de_generations: usize,
    pub de_crossover: f64,
    pub de_tolerance: f64,
    pub de_mutation_min: f64,
    pub de_mutation_max: f64,
    pub conditions: BTreeSet<Condition>,
    pub seeds: Vec<u64>,
    pub sweep_teacher_sizes: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Toy,
            mnist_images: None,
            mnist_labels: None,
            mnist_test_images: None,
            mnist_test_labels: None,
            cifar_train_batches: Vec::new(),
            cifar_test_batch: None,
            subset_size: 0,
            test_subset_size: 0,
            teacher_size: 10,
            ta_sizes: vec![8, 7, 6, 5, 4],
            single_ta_size: 6,
            student_size: 2,
            base_channels: 8,
            toy_n: 600,
            toy_classes: 4,
            temperature: 4.0,
            lambda: 0.5,
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 5,
            batch_size: 32,
            loss_mode: LossMode::ConvexMix,
            validation_fraction: 0.1,
            de_population: 0,
            de_generations: 100,
            de_crossover: 0.7,
            de_tolerance: 0.01,
            de_mutation_min: 0.5,
            de_mutation_max: 1.0,
            conditions: Condition::ALL.into_iter().collect(),
            seeds: vec![1],
            sweep_teacher_sizes: vec![4, 6, 8, 10],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses `key = value` text, rejecting unknown keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, found {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))
        }
        fn num_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
        where
            T::Err: fmt::Display,
        {
            value.split(',').map(|tok| num::<T>(key, tok.trim())).collect()
        }

        match key {
            "dataset" => {
                self.dataset = match value {
                    "toy" => DatasetKind::Toy,
                    "mnist" => DatasetKind::Mnist,
                    "cifar10" => DatasetKind::Cifar10,
                    other => {
                        return Err(Error::Config(format!("unknown dataset {other:?}")))
                    }
                }
            }
            "mnist_images" => self.mnist_images = Some(PathBuf::from(value)),
            "mnist_labels" => self.mnist_labels = Some(PathBuf::from(value)),
            "mnist_test_images" => self.mnist_test_images = Some(PathBuf::from(value)),
            "mnist_test_labels" => self.mnist_test_labels = Some(PathBuf::from(value)),
            "cifar_train_batches" => {
                self.cifar_train_batches =
                    value.split(',').map(|s| PathBuf::from(s.trim())).collect()
            }
            "cifar_test_batch" => self.cifar_test_batch = Some(PathBuf::from(value)),
            "subset_size" => self.subset_size = num(key, value)?,
            "test_subset_size" => self.test_subset_size = num(key, value)?,
            "teacher_size" => self.teacher_size = num(key, value)?,
            "ta_sizes" => self.ta_sizes = num_list(key, value)?,
            "single_ta_size" => self.single_ta_size = num(key, value)?,
            "student_size" => self.student_size = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "toy_n" => self.toy_n = num(key, value)?,
            "toy_classes" => self.toy_classes = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "loss_mode" => {
                self.loss_mode = match value {
                    "convex_mix" => LossMode::ConvexMix,
                    "unscaled_kd" => LossMode::UnscaledKd,
                    other => {
                        return Err(Error::Config(format!("unknown loss_mode {other:?}")))
                    }
                }
            }
            "validation_fraction" => self.validation_fraction = num(key, value)?,
            "de_population" => self.de_population = num(key, value)?,
            "de_generations" => self.de_generations = num(key, value)?,
            "de_crossover" => self.de_crossover = num(key, value)?,
            "de_tolerance" => self.de_tolerance = num(key, value)?,
            "de_mutation_min" => self.de_mutation_min = num(key, value)?,
            "de_mutation_max" => self.de_mutation_max = num(key, value)?,
            "conditions" => {
                self.conditions = value
                    .split(',')
                    .map(|tok| Condition::parse(tok.trim()))
                    .collect::<Result<_>>()?
            }
            "seeds" => self.seeds = num_list(key, value)?,
            "sweep_teacher_sizes" => self.sweep_teacher_sizes = num_list(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            unknown => {
                return Err(Error::Config(format!("unknown key {unknown:?}")));
            }
        }
        Ok(())
    }

    /// Structural checks, including the size ordering the method
    /// presumes: `student < min(ta_sizes) < teacher`.
    pub fn validate(&self) -> Result<()> {
        if self.ta_sizes.is_empty() {
            return Err(Error::Config("ta_sizes must not be empty".into()));
        }
        let min_ta = *self.ta_sizes.iter().min().expect("non-empty");
        let max_ta = *self.ta_sizes.iter().max().expect("non-empty");
        if !(self.student_size < min_ta && max_ta < self.teacher_size) {
            return Err(Error::Config(format!(
                "size ordering violated: need student_size < every TA size < teacher_size, \
                 got student {} / ta {:?} / teacher {}",
                self.student_size, self.ta_sizes, self.teacher_size
            )));
        }
        if !(self.student_size < self.single_ta_size && self.single_ta_size < self.teacher_size) {
            return Err(Error::Config(format!(
                "single_ta_size {} must lie strictly between student {} and teacher {}",
                self.single_ta_size, self.student_size, self.teacher_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("conditions must not be empty".into()));
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in (0,1), got {}",
                self.validation_fraction
            )));
        }
        self.distill_config(0).validate()?;
        Ok(())
    }

    /// Training hyperparameters with the given stage seed.
    pub fn distill_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss_mode: self.loss_mode,
            seed,
        }
    }

    /// Weight-search settings with the given stage seed.
    pub fn de_config(&self, seed: u64) -> DEConfig {
        DEConfig {
            population_size: if self.de_population == 0 {
                None
            } else {
                Some(self.de_population)
            },
            max_generations: self.de_generations,
            mutation_range: (self.de_mutation_min, self.de_mutation_max),
            crossover_rate: self.de_crossover,
            tolerance: self.de_tolerance,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.teacher_size, 10);
        assert_eq!(cfg.ta_sizes, vec![8, 7, 6, 5, 4]);
        assert_eq!(cfg.conditions.len(), 5);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let err = ExperimentConfig::parse("learnig_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learnig_rate"), "{err}");
    }

    #[test]
    fn size_ordering_enforced_at_parse_time() {
        let err = ExperimentConfig::parse("student_size = 9").unwrap_err();
        assert!(err.to_string().contains("size ordering"), "{err}");
    }

    #[test]
    fn comments_and_lists_parse() {
        let cfg = ExperimentConfig::parse(
            "# a comment\nseeds = 3, 4, 5\nconditions = standalone, baseline_kd\nta_sizes=7,5\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![3, 4, 5]);
        assert_eq!(cfg.conditions.len(), 2);
        assert_eq!(cfg.ta_sizes, vec![7, 5]);
    }
}
