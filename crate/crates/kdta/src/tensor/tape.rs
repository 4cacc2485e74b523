//! Reverse-mode tape for the fixed layer set.
//!
//! A forward pass pushes values and backward records onto the tape;
//! `backward` replays the records in exact reverse execution order and
//! accumulates gradients into the caller's [`Parameter`] slice. A tape
//! is consumed by exactly one backward pass and cleared afterwards.

use crate::{Error, Result};

use super::ops;
use super::{Parameter, Tensor};

/// Handle to a value produced on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Index of a parameter in the caller-owned parameter slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn new(index: usize) -> Self {
        ParamId(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

enum Node {
    ParamLeaf { param: usize, out: usize },
    Dense { input: usize, weight: usize, bias: usize, out: usize },
    Conv2d { input: usize, kernel: usize, bias: usize, out: usize },
    MaxPool { input: usize, argmax: Vec<usize>, out: usize },
    Relu { input: usize, out: usize },
    Reshape { input: usize, out: usize },
    Sum { input: usize, out: usize },
    Scale { input: usize, factor: f64, out: usize },
    AffineCombine { a: usize, ca: f64, b: usize, cb: f64, out: usize },
    SumSquaredError { input: usize, target: Tensor, out: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, out: usize },
    TemperedKl { logits: usize, targets: Tensor, tau: f64, out: usize },
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    consumed: bool,
}

const LOG_CLAMP: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// The forward value behind a handle.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, t: Tensor) -> usize {
        self.values.push(t);
        self.values.len() - 1
    }

    /// Pushes a leaf value that receives no gradient (inputs, constants).
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        ValueId(self.push(t))
    }

    /// Brings a parameter's current value onto the tape; its gradient
    /// accumulates into `params[id].gradient` during backward.
    pub fn param(&mut self, id: ParamId, params: &[Parameter]) -> Result<ValueId> {
        let p = params.get(id.0).ok_or_else(|| {
            Error::Contract(format!("parameter index {} out of range", id.0))
        })?;
        let out = self.push(p.value.clone());
        self.nodes.push(Node::ParamLeaf { param: id.0, out });
        Ok(ValueId(out))
    }

    pub fn dense(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        let y = ops::dense_forward(
            &self.values[input.0],
            &self.values[weight.0],
            &self.values[bias.0],
        )?;
        let out = self.push(y);
        self.nodes.push(Node::Dense { input: input.0, weight: weight.0, bias: bias.0, out });
        Ok(ValueId(out))
    }

    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, bias: ValueId) -> Result<ValueId> {
        let y = ops::conv2d_forward(
            &self.values[input.0],
            &self.values[kernel.0],
            &self.values[bias.0],
        )?;
        let out = self.push(y);
        self.nodes.push(Node::Conv2d { input: input.0, kernel: kernel.0, bias: bias.0, out });
        Ok(ValueId(out))
    }

    pub fn max_pool2d(&mut self, input: ValueId) -> Result<ValueId> {
        let (y, argmax) = ops::maxpool2d_forward(&self.values[input.0])?;
        let out = self.push(y);
        self.nodes.push(Node::MaxPool { input: input.0, argmax, out });
        Ok(ValueId(out))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let y = ops::relu(&self.values[input.0]);
        let out = self.push(y);
        self.nodes.push(Node::Relu { input: input.0, out });
        ValueId(out)
    }

    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId> {
        let y = self.values[input.0].reshape(shape)?;
        let out = self.push(y);
        self.nodes.push(Node::Reshape { input: input.0, out });
        Ok(ValueId(out))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let s: f64 = self.values[input.0].data().iter().sum();
        let out = self.push(Tensor::scalar(s));
        self.nodes.push(Node::Sum { input: input.0, out });
        ValueId(out)
    }

    pub fn scale(&mut self, input: ValueId, factor: f64) -> ValueId {
        let data = self.values[input.0].data().iter().map(|&x| factor * x).collect();
        let shape = self.values[input.0].shape().to_vec();
        let out = self.push(Tensor { shape, data });
        self.nodes.push(Node::Scale { input: input.0, factor, out });
        ValueId(out)
    }

    /// `ca * a + cb * b` elementwise over same-shape values.
    pub fn affine_combine(&mut self, a: ValueId, ca: f64, b: ValueId, cb: f64) -> Result<ValueId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Dimension(format!(
                "affine combine over mismatched shapes {:?} and {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        let out = self.push(Tensor { shape, data });
        self.nodes.push(Node::AffineCombine { a: a.0, ca, b: b.0, cb, out });
        Ok(ValueId(out))
    }

    /// `sum((x - target)^2)` as a scalar.
    pub fn sum_squared_error(&mut self, input: ValueId, target: Tensor) -> Result<ValueId> {
        if self.values[input.0].shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "squared error over mismatched shapes {:?} and {:?}",
                self.values[input.0].shape(),
                target.shape()
            )));
        }
        let s: f64 = self.values[input.0]
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (x - t) * (x - t))
            .sum();
        let out = self.push(Tensor::scalar(s));
        self.nodes.push(Node::SumSquaredError { input: input.0, target, out });
        Ok(ValueId(out))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, with the
    /// probability clamped below at 1e-12 before the log.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let z = &self.values[logits.0];
        let &[batch, k] = z.shape() else {
            return Err(Error::Dimension(format!("logits must be 2-D, got {:?}", z.shape())));
        };
        if labels.len() != batch {
            return Err(Error::Contract(format!(
                "{batch} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
        }
        let probs = ops::softmax_rows(z, 1.0)?;
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            loss -= probs.data()[r * k + label].max(LOG_CLAMP).ln();
        }
        loss /= batch as f64;
        let out = self.push(Tensor::scalar(loss));
        self.nodes.push(Node::SoftmaxCrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            out,
        });
        Ok(ValueId(out))
    }

    /// `tau^2 *` mean over the batch of `KL(targets || softmax(logits / tau))`.
    pub fn tempered_kl(&mut self, logits: ValueId, targets: Tensor, tau: f64) -> Result<ValueId> {
        let z = &self.values[logits.0];
        if z.shape() != targets.shape() {
            return Err(Error::Dimension(format!(
                "logits shape {:?} does not match target shape {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        let &[batch, k] = z.shape() else {
            return Err(Error::Dimension(format!("logits must be 2-D, got {:?}", z.shape())));
        };
        let s = ops::softmax_rows(z, tau)?;
        let mut loss = 0.0;
        for r in 0..batch {
            for i in 0..k {
                let t = targets.data()[r * k + i];
                if t > 0.0 {
                    loss += t * (t.ln() - s.data()[r * k + i].max(LOG_CLAMP).ln());
                }
            }
        }
        loss = loss * tau * tau / batch as f64;
        let out = self.push(Tensor::scalar(loss));
        self.nodes.push(Node::TemperedKl { logits: logits.0, targets, tau, out });
        Ok(ValueId(out))
    }

    /// Replays the tape backwards from a scalar loss, writing `dloss/dp`
    /// into each participating parameter's gradient buffer. The tape is
    /// cleared afterwards; a second call is a contract error.
    pub fn backward(&mut self, loss: ValueId, params: &mut [Parameter]) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by a backward pass".into()));
        }
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for node in self.nodes.iter().rev() {
            match node {
                Node::ParamLeaf { param, out } => {
                    if let Some(g) = grads[*out].take() {
                        accumulate(&mut params[*param].gradient, g.data());
                    }
                }
                Node::Dense { input, weight, bias, out } => {
                    if let Some(g) = grads[*out].take() {
                        let (di, dw, db) =
                            ops::dense_backward(&self.values[*input], &self.values[*weight], &g);
                        add_grad(&mut grads, *input, di);
                        add_grad(&mut grads, *weight, dw);
                        add_grad(&mut grads, *bias, db);
                    }
                }
                Node::Conv2d { input, kernel, bias, out } => {
                    if let Some(g) = grads[*out].take() {
                        let (di, dk, db) =
                            ops::conv2d_backward(&self.values[*input], &self.values[*kernel], &g);
                        add_grad(&mut grads, *input, di);
                        add_grad(&mut grads, *kernel, dk);
                        add_grad(&mut grads, *bias, db);
                    }
                }
                Node::MaxPool { input, argmax, out } => {
                    if let Some(g) = grads[*out].take() {
                        let di =
                            ops::maxpool2d_backward(self.values[*input].shape(), argmax, &g);
                        add_grad(&mut grads, *input, di);
                    }
                }
                Node::Relu { input, out } => {
                    if let Some(g) = grads[*out].take() {
                        let di = ops::relu_backward(&self.values[*input], &g);
                        add_grad(&mut grads, *input, di);
                    }
                }
                Node::Reshape { input, out } => {
                    if let Some(g) = grads[*out].take() {
                        let di = g.reshape(self.values[*input].shape())?;
                        add_grad(&mut grads, *input, di);
                    }
                }
                Node::Sum { input, out } => {
                    if let Some(g) = grads[*out].take() {
                        let gv = g.data()[0];
                        add_grad(&mut grads, *input, Tensor::full(self.values[*input].shape(), gv));
                    }
                }
                Node::Scale { input, factor, out } => {
                    if let Some(g) = grads[*out].take() {
                        let data = g.data().iter().map(|&x| factor * x).collect();
                        let di = Tensor { shape: self.values[*input].shape().to_vec(), data };
                        add_grad(&mut grads, *input, di);
                    }
                }
                Node::AffineCombine { a, ca, b, cb, out } => {
                    if let Some(g) = grads[*out].take() {
                        let da = g.data().iter().map(|&x| ca * x).collect();
                        let db = g.data().iter().map(|&x| cb * x).collect();
                        let shape = self.values[*a].shape().to_vec();
                        add_grad(&mut grads, *a, Tensor { shape: shape.clone(), data: da });
                        add_grad(&mut grads, *b, Tensor { shape, data: db });
                    }
                }
                Node::SumSquaredError { input, target, out } => {
                    if let Some(g) = grads[*out].take() {
                        let gv = g.data()[0];
                        let data = self.values[*input]
                            .data()
                            .iter()
                            .zip(target.data())
                            .map(|(&x, &t)| 2.0 * (x - t) * gv)
                            .collect();
                        let di = Tensor { shape: self.values[*input].shape().to_vec(), data };
                        add_grad(&mut grads, *input, di);
                    }
                }
                Node::SoftmaxCrossEntropy { logits, labels, out } => {
                    if let Some(g) = grads[*out].take() {
                        let gv = g.data()[0];
                        let z = &self.values[*logits];
                        let k = z.shape()[1];
                        let batch = z.shape()[0];
                        let mut probs = ops::softmax_rows(z, 1.0)?;
                        let pd = probs.data_mut();
                        for (r, &label) in labels.iter().enumerate() {
                            pd[r * k + label] -= 1.0;
                        }
                        let scale = gv / batch as f64;
                        for v in pd.iter_mut() {
                            *v *= scale;
                        }
                        add_grad(&mut grads, *logits, probs);
                    }
                }
                Node::TemperedKl { logits, targets, tau, out } => {
                    if let Some(g) = grads[*out].take() {
                        let gv = g.data()[0];
                        let z = &self.values[*logits];
                        let &[batch, k] = z.shape() else { unreachable!() };
                        let s = ops::softmax_rows(z, *tau)?;
                        let mut di = Tensor::zeros(&[batch, k]);
                        let dd = di.data_mut();
                        let scale = gv * tau / batch as f64;
                        for r in 0..batch {
                            let trow = &targets.data()[r * k..(r + 1) * k];
                            let tsum: f64 = trow.iter().sum();
                            for i in 0..k {
                                dd[r * k + i] =
                                    scale * (s.data()[r * k + i] * tsum - trow[i]);
                            }
                        }
                        add_grad(&mut grads, *logits, di);
                    }
                }
            }
        }

        self.values.clear();
        self.nodes.clear();
        self.consumed = true;
        Ok(())
    }
}

fn accumulate(into: &mut Tensor, from: &[f64]) {
    for (a, &b) in into.data_mut().iter_mut().zip(from) {
        *a += b;
    }
}

fn add_grad(grads: &mut [Option<Tensor>], slot: usize, contribution: Tensor) {
    match &mut grads[slot] {
        Some(existing) => accumulate(existing, contribution.data()),
        none => *none = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_linear_product() {
        // loss = w * x with x = 3: dloss/dw = 3
        let mut params = vec![Parameter::new(Tensor::from_vec(&[1, 1], vec![2.0]).unwrap())];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        let w = tape.param(ParamId::new(0), &params).unwrap();
        let zero_bias = tape.constant(Tensor::zeros(&[1]));
        let y = tape.dense(x, w, zero_bias).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params[0].gradient.data(), &[3.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        // loss = sum((w - 1)^2) at w = [0, 2]: gradient [-2, 2]
        let mut params = vec![Parameter::new(Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap())];
        let mut tape = Tape::new();
        let w = tape.param(ParamId::new(0), &params).unwrap();
        let loss = tape.sum_squared_error(w, Tensor::full(&[2], 1.0)).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params[0].gradient.data(), &[-2.0, 2.0]);
    }

    #[test]
    fn second_backward_on_same_tape_is_error() {
        let mut params = vec![Parameter::new(Tensor::scalar(1.0))];
        let mut tape = Tape::new();
        let w = tape.param(ParamId::new(0), &params).unwrap();
        let loss = tape.sum(w);
        tape.backward(loss, &mut params).unwrap();
        assert!(matches!(
            tape.backward(loss, &mut params),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut params = vec![Parameter::new(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap())];
        let mut tape = Tape::new();
        let w = tape.param(ParamId::new(0), &params).unwrap();
        assert!(matches!(
            tape.backward(w, &mut params),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn relu_gradient_at_minus_one_and_two() {
        // d/dx sum(relu(x)) at x = [-1, 2] is [0, 1]
        let mut params =
            vec![Parameter::new(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap())];
        let mut tape = Tape::new();
        let x = tape.param(ParamId::new(0), &params).unwrap();
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params[0].gradient.data(), &[0.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // loss = sum(w) + sum(w) doubles the gradient
        let mut params = vec![Parameter::new(Tensor::from_vec(&[2], vec![1.0, 4.0]).unwrap())];
        let mut tape = Tape::new();
        let w = tape.param(ParamId::new(0), &params).unwrap();
        let s1 = tape.sum(w);
        let s2 = tape.sum(w);
        let loss = tape.affine_combine(s1, 1.0, s2, 1.0).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params[0].gradient.data(), &[2.0, 2.0]);
    }

    #[test]
    fn maxpool_gradient_goes_only_to_argmax() {
        let mut params = vec![Parameter::new(
            Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]).unwrap(),
        )];
        let mut tape = Tape::new();
        let x = tape.param(ParamId::new(0), &params).unwrap();
        let y = tape.max_pool2d(x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params[0].gradient.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
