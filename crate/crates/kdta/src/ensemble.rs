//! Combining member predictions by simple or weighted averaging, and
//! searching the member weights with differential evolution (rand/1/bin)
//! constrained to the probability simplex.
//!
//! Candidates live in raw gene space; every fitness evaluation first
//! clamps the genes to [0,1] and renormalizes to sum 1, so the simplex
//! constraint is exact and the fitness stays a total function. Within a
//! generation all trial vectors are built first (consuming randomness in
//! a fixed order) and then evaluated, so fitness evaluations can run in
//! parallel without changing any result.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::exec;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A point on the probability simplex: every entry in [0,1], entries
/// summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("weights must not be empty".into()));
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::Domain(format!("weights outside [0,1]: {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("weights sum to {sum}, expected 1")));
        }
        Ok(EnsembleWeights(weights))
    }

    pub fn uniform(k: usize) -> Self {
        EnsembleWeights(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Member prediction matrices over a common example set, plus the true
/// labels for fitness evaluation.
#[derive(Debug, Clone)]
pub struct PredictionMatrixSet {
    members: Vec<Tensor>,
    labels: Vec<usize>,
}

impl PredictionMatrixSet {
    pub fn new(members: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Domain("prediction set needs at least one member".into()));
        }
        let shape = members[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "member matrices must be 2-D, got {shape:?}"
            )));
        }
        for (i, m) in members.iter().enumerate() {
            if m.shape() != shape {
                return Err(Error::Dimension(format!(
                    "member {i} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
        }
        if labels.len() != shape[0] {
            return Err(Error::Contract(format!(
                "{} labels for {} prediction rows",
                labels.len(),
                shape[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {} classes",
                shape[1]
            )));
        }
        Ok(PredictionMatrixSet { members, labels })
    }

    pub fn members(&self) -> &[Tensor] {
        &self.members
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn num_examples(&self) -> usize {
        self.members[0].shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].shape()[1]
    }
}

/// Elementwise mean across members.
pub fn simple_average(set: &PredictionMatrixSet) -> Result<Tensor> {
    weighted_average(set, &EnsembleWeights::uniform(set.num_members()))
}

/// Convex combination of member matrices under `weights`.
pub fn weighted_average(set: &PredictionMatrixSet, weights: &EnsembleWeights) -> Result<Tensor> {
    if weights.len() != set.num_members() {
        return Err(Error::Contract(format!(
            "{} weights for {} members",
            weights.len(),
            set.num_members()
        )));
    }
    let mut out = Tensor::zeros(set.members[0].shape());
    let od = out.data_mut();
    for (member, &w) in set.members.iter().zip(weights.as_slice()) {
        for (o, &m) in od.iter_mut().zip(member.data()) {
            *o += w * m;
        }
    }
    Ok(out)
}

/// Clamps each entry to [0,1] and renormalizes to sum 1; an all-zero
/// clamp falls back to uniform weights.
pub fn normalize_to_simplex(raw: &[f64]) -> EnsembleWeights {
    let k = raw.len();
    let clamped: Vec<f64> = raw.iter().map(|&w| w.clamp(0.0, 1.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum <= 0.0 {
        return EnsembleWeights::uniform(k);
    }
    EnsembleWeights(clamped.into_iter().map(|w| w / sum).collect())
}

/// `1 - accuracy` of the weighted ensemble's argmax against the labels;
/// argmax ties go to the lowest class index.
pub fn ensemble_error(set: &PredictionMatrixSet, weights: &EnsembleWeights) -> Result<f64> {
    let combined = weighted_average(set, weights)?;
    let n = set.num_examples();
    let mut correct = 0usize;
    for (r, &label) in set.labels.iter().enumerate() {
        if combined.argmax_row(r) == label {
            correct += 1;
        }
    }
    Ok(1.0 - correct as f64 / n as f64)
}

/// Differential evolution settings.
#[derive(Debug, Clone)]
pub struct DEConfig {
    /// Population size; `None` means `15 * k`.
    pub population_size: Option<usize>,
    pub max_generations: usize,
    /// Per-generation dither range for the mutation factor F.
    pub mutation_range: (f64, f64),
    pub crossover_rate: f64,
    /// Stop when `max - min` population fitness falls to
    /// `tolerance * |mean fitness| + 1e-12`.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for DEConfig {
    fn default() -> Self {
        DEConfig {
            population_size: None,
            max_generations: 100,
            mutation_range: (0.5, 1.0),
            crossover_rate: 0.7,
            tolerance: 0.01,
            seed: 0,
        }
    }
}

/// Outcome of a weight search.
#[derive(Debug, Clone)]
pub struct DeResult {
    pub weights: EnsembleWeights,
    pub best_error: f64,
    /// Best population fitness after initialization and after each
    /// generation; non-increasing.
    pub history: Vec<f64>,
}

/// rand/1/bin differential evolution over `k` genes, minimizing
/// `fitness` of the simplex-normalized candidate. Deterministic for a
/// fixed `config.seed`.
pub fn de_minimize<F>(k: usize, config: &DEConfig, fitness: F) -> Result<DeResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if k == 0 {
        return Err(Error::Domain("cannot optimize zero weights".into()));
    }
    if k == 1 {
        let weights = EnsembleWeights(vec![1.0]);
        let best_error = fitness(weights.as_slice());
        return Ok(DeResult { weights, best_error, history: vec![best_error] });
    }
    let pop_size = config.population_size.unwrap_or(15 * k);
    if pop_size < 4 {
        return Err(Error::Config(format!(
            "population_size {pop_size} too small: rand/1 mutation needs 4 distinct members"
        )));
    }
    let (f_lo, f_hi) = config.mutation_range;
    if !(f_lo < f_hi && f_lo >= 0.0) {
        return Err(Error::Config(format!(
            "invalid mutation range [{f_lo}, {f_hi})"
        )));
    }
    if !(0.0..=1.0).contains(&config.crossover_rate) || config.crossover_rate == 0.0 {
        return Err(Error::Config(format!(
            "crossover rate must be in (0,1], got {}",
            config.crossover_rate
        )));
    }

    let mut rng = rng::rng_from(config.seed);
    // The population is stored in simplex-normalized form: differences
    // between members are then tangent to the feasible set, which keeps
    // mutation steps meaningful instead of drifting through the clamp's
    // dead zone outside [0,1].
    let mut population: Vec<Vec<f64>> = (0..pop_size)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            normalize_to_simplex(&raw).as_slice().to_vec()
        })
        .collect();
    let eval = |genes: &Vec<f64>| fitness(normalize_to_simplex(genes).as_slice());
    let mut fitnesses: Vec<f64> = exec::map_collect(&population, eval);

    let best_of = |fit: &[f64]| -> usize {
        let mut best = 0;
        for (i, &f) in fit.iter().enumerate() {
            if f < fit[best] {
                best = i;
            }
        }
        best
    };
    let mut history = vec![fitnesses[best_of(&fitnesses)]];

    for _gen in 0..config.max_generations {
        let max = fitnesses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = fitnesses.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = fitnesses.iter().sum::<f64>() / pop_size as f64;
        if max - min <= config.tolerance * mean.abs() + 1e-12 {
            break;
        }

        let f_factor = rng.gen_range(f_lo..f_hi);
        let mut trials: Vec<Vec<f64>> = Vec::with_capacity(pop_size);
        for i in 0..pop_size {
            let mut pick = || loop {
                let r = rng.gen_range(0..pop_size);
                if r != i {
                    return r;
                }
            };
            let a = pick();
            let b = loop {
                let r = pick();
                if r != a {
                    break r;
                }
            };
            let c = loop {
                let r = pick();
                if r != a && r != b {
                    break r;
                }
            };
            let forced = rng.gen_range(0..k);
            let trial: Vec<f64> = (0..k)
                .map(|j| {
                    let mutant = population[a][j]
                        + f_factor * (population[b][j] - population[c][j]);
                    if j == forced || rng.gen_range(0.0..1.0) < config.crossover_rate {
                        mutant
                    } else {
                        population[i][j]
                    }
                })
                .collect();
            trials.push(trial);
        }

        let trial_fitnesses: Vec<f64> = exec::map_collect(&trials, eval);
        for (i, (trial, tf)) in trials.into_iter().zip(trial_fitnesses).enumerate() {
            if tf <= fitnesses[i] {
                population[i] = normalize_to_simplex(&trial).as_slice().to_vec();
                fitnesses[i] = tf;
            }
        }
        history.push(fitnesses[best_of(&fitnesses)]);
    }

    let best = best_of(&fitnesses);
    Ok(DeResult {
        weights: normalize_to_simplex(&population[best]),
        best_error: fitnesses[best],
        history,
    })
}

/// Searches ensemble weights minimizing classification error on `set`.
pub fn de_optimize(set: &PredictionMatrixSet, config: &DEConfig) -> Result<DeResult> {
    let k = set.num_members();
    de_minimize(k, config, |w| {
        ensemble_error(set, &EnsembleWeights(w.to_vec())).expect("weights come normalized")
    })
}

/// Exhaustive search over the simplex lattice with the given step.
///
/// Enumerates weight vectors in ascending lexicographic order and keeps
/// the first minimizer. Brute force; limited to k <= 4 members.
pub fn grid_search_weights(
    set: &PredictionMatrixSet,
    step: f64,
) -> Result<(EnsembleWeights, f64)> {
    let k = set.num_members();
    if k > 4 {
        return Err(Error::Domain(format!(
            "grid search over {k} members is combinatorially infeasible; use de_optimize for k > 4"
        )));
    }
    if step <= 0.0 || step > 1.0 {
        return Err(Error::Domain(format!("step must be in (0,1], got {step}")));
    }
    let m = (1.0 / step).round() as usize;
    if m == 0 || (m as f64 * step - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("step {step} does not divide 1 evenly")));
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut counts = vec![0usize; k];
    enumerate_compositions(m, 0, &mut counts, &mut |counts| {
        let w: Vec<f64> = counts.iter().map(|&c| c as f64 * step).collect();
        let weights = normalize_to_simplex(&w);
        let err = ensemble_error(set, &weights).expect("weights come normalized");
        if best.as_ref().is_none_or(|(_, b)| err < *b) {
            best = Some((weights.as_slice().to_vec(), err));
        }
    });
    let (w, err) = best.expect("lattice is never empty");
    Ok((EnsembleWeights::new(w)?, err))
}

/// Visits all ways to write `remaining` as an ordered sum of `k - pos`
/// non-negative counts, in ascending lexicographic order of the counts.
fn enumerate_compositions(
    remaining: usize,
    pos: usize,
    counts: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if pos == counts.len() - 1 {
        counts[pos] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[pos] = c;
        enumerate_compositions(remaining - c, pos + 1, counts, visit);
    }
}

/// Writes the weights text format: a `dataset_id` line, a line of
/// comma-separated weights with 9 significant digits, and an
/// `error=<float>` line.
pub fn write_weights_file(
    path: &Path,
    dataset_id: &str,
    weights: &EnsembleWeights,
    error: f64,
) -> Result<()> {
    let line = weights
        .as_slice()
        .iter()
        .map(|w| format!("{w:.9}"))
        .collect::<Vec<_>>()
        .join(",");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, format!("{dataset_id}\n{line}\nerror={error}\n"))?;
    Ok(())
}

/// Parses a weights file; returns `(dataset_id, raw weights, error)`.
/// The raw weights are not forced onto the simplex so callers can check
/// file contents as written.
pub fn read_weights_file(path: &Path) -> Result<(String, Vec<f64>, f64)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let dataset_id = lines
        .next()
        .ok_or_else(|| Error::Format("weights file is empty".into()))?
        .trim()
        .to_string();
    let weights_line = lines
        .next()
        .ok_or_else(|| Error::Format("weights file is missing the weights line".into()))?;
    let weights = weights_line
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("bad weight {tok:?}: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let error_line = lines
        .next()
        .ok_or_else(|| Error::Format("weights file is missing the error line".into()))?;
    let error = error_line
        .strip_prefix("error=")
        .ok_or_else(|| Error::Format(format!("expected error=<float>, found {error_line:?}")))?
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("bad error value: {e}")))?;
    Ok((dataset_id, weights, error))
}

/// Writes the labels sidecar for serialized prediction matrices: UTF-8,
/// one class index per line.
pub fn write_labels_file(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_labels_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("bad label {l:?}: {e}")))
        })
        .collect()
}
