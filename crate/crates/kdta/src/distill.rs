//! Temperature-softened outputs, distillation losses, and the
//! SGD-Nesterov training loop.
//!
//! The KL term follows the standard distillation direction,
//! `KL(teacher || student)`, scaled by tau^2. Two combination modes are
//! supported for the total loss: `ConvexMix` (default),
//! `(1-lambda)*L_SL + lambda*L_KD`, and `UnscaledKd`,
//! `(1-lambda)*L_SL + L_KD`, which keeps the KD term at unit weight.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::dataio::Dataset;
use crate::models::Network;
use crate::rng;
use crate::tensor::{ops, Parameter, Tape, Tensor};
use crate::{Error, Result};

const LOG_CLAMP: f64 = 1e-12;

/// How the supervised and distillation losses combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// `(1-lambda) * L_SL + lambda * L_KD`
    #[default]
    ConvexMix,
    /// `(1-lambda) * L_SL + L_KD`
    UnscaledKd,
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 4.0,
            lambda: 0.5,
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 5,
            batch_size: 32,
            loss_mode: LossMode::ConvexMix,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Domain(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Domain("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-example softened output distributions collected from one model at
/// a fixed temperature.
#[derive(Debug, Clone)]
pub struct SoftTargetSet {
    temperature: f64,
    distributions: Tensor,
    source_id: String,
}

impl SoftTargetSet {
    /// Validates that every row is a distribution: sums to 1 within
    /// 1e-9, entries inside (0,1) up to f64 rounding. A confident model
    /// legitimately produces rows where the top entry rounds to exactly
    /// 1.0, so the bound check is closed.
    pub fn new(temperature: f64, distributions: Tensor, source_id: String) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let &[n, k] = distributions.shape() else {
            return Err(Error::Dimension(format!(
                "soft targets must be 2-D, got {:?}",
                distributions.shape()
            )));
        };
        for r in 0..n {
            let row = &distributions.data()[r * k..(r + 1) * k];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("soft target row {r} sums to {sum}")));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Contract(format!(
                    "soft target row {r} has entries outside [0,1]"
                )));
            }
        }
        Ok(SoftTargetSet { temperature, distributions, source_id })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn distributions(&self) -> &Tensor {
        &self.distributions
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn num_examples(&self) -> usize {
        self.distributions.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.distributions.shape()[1]
    }

    /// Rows for the listed examples as a `[len, k]` tensor.
    pub fn rows(&self, indices: &[usize]) -> Tensor {
        let k = self.num_classes();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(&self.distributions.data()[i * k..(i + 1) * k]);
        }
        Tensor::from_vec(&[indices.len(), k], data).expect("row gather preserves counts")
    }

    /// Sub-set of rows as a new `SoftTargetSet` with the same
    /// temperature and source.
    pub fn select(&self, indices: &[usize]) -> SoftTargetSet {
        SoftTargetSet {
            temperature: self.temperature,
            distributions: self.rows(indices),
            source_id: self.source_id.clone(),
        }
    }
}

/// Row-wise `softmax(logits / tau)` with max subtraction.
pub fn softened_output(logits: &Tensor, tau: f64) -> Result<Tensor> {
    ops::softmax_rows(logits, tau)
}

/// Mean over the batch of `-log p[label]`, probabilities clamped below
/// at 1e-12 before the log.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let &[n, k] = probs.shape() else {
        return Err(Error::Dimension(format!(
            "probabilities must be 2-D, got {:?}",
            probs.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::Contract(format!("{n} probability rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
    }
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        loss -= probs.data()[r * k + label].max(LOG_CLAMP).ln();
    }
    Ok(loss / n as f64)
}

/// `tau^2 *` mean over the batch of `KL(teacher || softened student)`.
///
/// `tau` must equal the temperature the soft targets were collected at.
pub fn kd_loss(student_logits: &Tensor, teacher: &SoftTargetSet, tau: f64) -> Result<f64> {
    if teacher.temperature() != tau {
        return Err(Error::Contract(format!(
            "soft targets were collected at temperature {} but kd_loss was called with {tau}",
            teacher.temperature()
        )));
    }
    if student_logits.shape() != teacher.distributions().shape() {
        return Err(Error::Dimension(format!(
            "student logits {:?} do not match soft targets {:?}",
            student_logits.shape(),
            teacher.distributions().shape()
        )));
    }
    let &[n, k] = student_logits.shape() else { unreachable!() };
    let student = ops::softmax_rows(student_logits, tau)?;
    let mut loss = 0.0;
    for r in 0..n {
        for i in 0..k {
            let t = teacher.distributions().data()[r * k + i];
            if t > 0.0 {
                loss += t * (t.ln() - student.data()[r * k + i].max(LOG_CLAMP).ln());
            }
        }
    }
    Ok(loss * tau * tau / n as f64)
}

/// Combines the supervised and distillation losses under `mode`.
pub fn student_loss(l_sl: f64, l_kd: f64, lambda: f64, mode: LossMode) -> f64 {
    match mode {
        LossMode::ConvexMix => (1.0 - lambda) * l_sl + lambda * l_kd,
        LossMode::UnscaledKd => (1.0 - lambda) * l_sl + l_kd,
    }
}

/// One Nesterov momentum step; zeroes the gradient afterwards.
///
/// `v <- mu*v - lr*g; value <- value + mu*v - lr*g`
pub fn sgd_nesterov_update(param: &mut Parameter, lr: f64, momentum: f64) {
    let g = param.gradient.data().to_vec();
    for ((v, val), &gi) in param
        .velocity
        .data_mut()
        .iter_mut()
        .zip(param.value.data_mut().iter_mut())
        .zip(&g)
    {
        *v = momentum * *v - lr * gi;
        *val += momentum * *v - lr * gi;
    }
    param.zero_gradients();
}

/// What the training loop fits against.
#[derive(Clone, Copy)]
pub enum TrainTargets<'a> {
    /// Supervised loss on the dataset's hard labels only.
    Hard,
    /// Distillation: hard labels plus soft targets index-aligned with
    /// the dataset.
    Distill(&'a SoftTargetSet),
}

/// Per-run training record.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub wall_seconds: f64,
    pub final_accuracy: f64,
}

/// Trains `network` in place for `config.epochs` passes.
///
/// Shuffling is derived from `(config.seed, epoch)`, so a rerun with the
/// same inputs reproduces parameters bit for bit. Per-epoch accuracy is
/// measured on `eval_data` when given, otherwise on the training data.
pub fn train_model(
    network: &mut Network,
    data: &Dataset,
    targets: TrainTargets,
    eval_data: Option<&Dataset>,
    config: &DistillConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    if let TrainTargets::Distill(soft) = targets {
        if soft.num_examples() != data.len() {
            return Err(Error::Contract(format!(
                "{} soft target rows for {} training examples",
                soft.num_examples(),
                data.len()
            )));
        }
        if soft.temperature() != config.temperature {
            return Err(Error::Contract(format!(
                "soft targets at temperature {} but config.temperature is {}",
                soft.temperature(),
                config.temperature
            )));
        }
    }

    let start = Instant::now();
    let n = data.len();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut epoch_accuracy = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::rng_from(rng::stage_seed(
            config.seed,
            "epoch-shuffle",
            epoch as u64,
        )));

        let mut loss_sum = 0.0;
        for batch_indices in order.chunks(config.batch_size) {
            let images = data.batch_images(batch_indices);
            let labels: Vec<usize> = batch_indices.iter().map(|&i| data.labels[i]).collect();

            let mut tape = Tape::new();
            let logits = network.forward_on_tape(&images, &mut tape)?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let loss = match targets {
                TrainTargets::Hard => ce,
                TrainTargets::Distill(soft) => {
                    let rows = soft.rows(batch_indices);
                    let kl = tape.tempered_kl(logits, rows, config.temperature)?;
                    let (c_sl, c_kd) = match config.loss_mode {
                        LossMode::ConvexMix => (1.0 - config.lambda, config.lambda),
                        LossMode::UnscaledKd => (1.0 - config.lambda, 1.0),
                    };
                    tape.affine_combine(ce, c_sl, kl, c_kd)?
                }
            };
            loss_sum += tape.value(loss).item()? * batch_indices.len() as f64;
            tape.backward(loss, network.params_mut())?;
            for p in network.params_mut() {
                sgd_nesterov_update(p, config.learning_rate, config.momentum);
            }
        }
        epoch_loss.push(loss_sum / n as f64);
        epoch_accuracy.push(evaluate_accuracy(network, eval_data.unwrap_or(data))?);
    }

    let final_accuracy = match epoch_accuracy.last() {
        Some(&acc) => acc,
        None => evaluate_accuracy(network, eval_data.unwrap_or(data))?,
    };
    Ok(TrainReport {
        epoch_loss,
        epoch_accuracy,
        wall_seconds: start.elapsed().as_secs_f64(),
        final_accuracy,
    })
}

const EVAL_CHUNK: usize = 512;

/// Fraction of examples whose argmax logit equals the label; argmax
/// ties go to the lowest class index.
pub fn evaluate_accuracy(network: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = network.predict_logits(&data.batch_images(chunk))?;
        for (row, &i) in chunk.iter().enumerate() {
            if logits.argmax_row(row) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Runs the frozen network over the transfer set and softens each
/// logits row at temperature `tau`.
pub fn collect_soft_targets(network: &Network, transfer: &Dataset, tau: f64) -> Result<SoftTargetSet> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if transfer.is_empty() {
        return Err(Error::Domain("cannot collect soft targets on an empty dataset".into()));
    }
    let k = network.spec().num_classes;
    let indices: Vec<usize> = (0..transfer.len()).collect();
    let mut rows = Vec::with_capacity(transfer.len() * k);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = network.predict_logits(&transfer.batch_images(chunk))?;
        let soft = softened_output(&logits, tau)?;
        rows.extend_from_slice(soft.data());
    }
    SoftTargetSet::new(
        tau,
        Tensor::from_vec(&[transfer.len(), k], rows)?,
        network.source_id(),
    )
}

const SOFT_MAGIC: &[u8; 4] = b"KDST";
const SOFT_VERSION: u32 = 1;

/// Writes a soft-target set: little-endian header (magic `KDST`,
/// version u32, tau f64, num_examples u64, num_classes u64, source-id
/// length u32 + UTF-8 bytes) then row-major f64 distributions.
pub fn save_soft_targets(set: &SoftTargetSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SOFT_MAGIC);
    buf.extend_from_slice(&SOFT_VERSION.to_le_bytes());
    buf.extend_from_slice(&set.temperature.to_le_bytes());
    buf.extend_from_slice(&(set.num_examples() as u64).to_le_bytes());
    buf.extend_from_slice(&(set.num_classes() as u64).to_le_bytes());
    let sid = set.source_id.as_bytes();
    buf.extend_from_slice(&(sid.len() as u32).to_le_bytes());
    buf.extend_from_slice(sid);
    for &v in set.distributions.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a soft-target set written by [`save_soft_targets`].
pub fn load_soft_targets(path: &Path) -> Result<SoftTargetSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format(format!(
                "soft-target file truncated at byte {} of {}",
                *off,
                bytes.len()
            )));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let mut off = 0usize;
    let magic = take(&mut off, 4)?;
    if magic != SOFT_MAGIC {
        return Err(Error::Format(format!(
            "bad soft-target magic: expected {SOFT_MAGIC:?}, found {magic:?}"
        )));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != SOFT_VERSION {
        return Err(Error::Format(format!("unsupported soft-target version {version}")));
    }
    let tau = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let n = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let k = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let sid_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let source_id = String::from_utf8(take(&mut off, sid_len)?.to_vec())
        .map_err(|e| Error::Format(format!("source id is not UTF-8: {e}")))?;
    let payload = take(&mut off, n * k * 8)?;
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after soft-target payload",
            bytes.len() - off
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SoftTargetSet::new(tau, Tensor::from_vec(&[n, k], data)?, source_id)
}
