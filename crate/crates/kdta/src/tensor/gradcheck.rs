//! Finite-difference verification of taped gradients.

use crate::Result;

use super::{Parameter, Tape, ValueId};

const STEP: f64 = 1e-5;

/// Compares analytic gradients against central finite differences for an
/// arbitrary taped scalar computation over `params`.
///
/// `forward` must rebuild the same computation every call (it runs once
/// for the analytic pass and twice per parameter element for the numeric
/// one). Returns the maximum over all parameter elements of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(params: &mut [Parameter], forward: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Parameter]) -> Result<ValueId>,
{
    for p in params.iter_mut() {
        p.zero_gradients();
    }
    let mut tape = Tape::new();
    let loss = forward(&mut tape, params)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.gradient.data().to_vec()).collect();

    let eval = |params: &[Parameter]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, params)?;
        tape.value(loss).item()
    };

    let mut max_rel: f64 = 0.0;
    for pi in 0..params.len() {
        for j in 0..params[pi].value.len() {
            let orig = params[pi].value.data()[j];
            params[pi].value.data_mut()[j] = orig + STEP;
            let plus = eval(params)?;
            params[pi].value.data_mut()[j] = orig - STEP;
            let minus = eval(params)?;
            params[pi].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let rel = (analytic[pi][j] - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tensor};
    use rand::Rng;

    #[test]
    fn dense_layer_gradients_match_finite_differences() {
        let mut rng = crate::rng::rng_from(11);
        let mut params = vec![
            Parameter::new(Tensor::from_vec(
                &[3, 2],
                (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()),
            Parameter::new(Tensor::from_vec(
                &[2],
                (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()),
        ];
        let input = Tensor::from_vec(&[2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let target = Tensor::from_vec(&[2, 2], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let max_rel = gradient_check(&mut params, |tape, params| {
            let x = tape.constant(input.clone());
            let w = tape.param(ParamId::new(0), params)?;
            let b = tape.param(ParamId::new(1), params)?;
            let y = tape.dense(x, w, b)?;
            tape.sum_squared_error(y, target.clone())
        })
        .unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn frozen_zero_network_has_zero_gradients_both_ways() {
        let mut params = vec![
            Parameter::new(Tensor::zeros(&[2, 2])),
            Parameter::new(Tensor::zeros(&[2])),
        ];
        let max_rel = gradient_check(&mut params, |tape, params| {
            let x = tape.constant(Tensor::zeros(&[1, 2]));
            let w = tape.param(ParamId::new(0), params)?;
            let b = tape.param(ParamId::new(1), params)?;
            let y = tape.dense(x, w, b)?;
            Ok(tape.sum_squared_error(y, Tensor::zeros(&[1, 2]))?)
        })
        .unwrap();
        assert!(max_rel < 1e-9, "expected ~0, got {max_rel}");
    }
}
