//! Forward and backward kernels for the supported layer set.
//!
//! Convolution spreads work across (batch, channel) output planes; each
//! plane is filled by exactly one task with a fixed inner summation
//! order, so results do not depend on the thread count.

use crate::exec;
use crate::{Error, Result};

use super::Tensor;

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        s => Err(Error::Dimension(format!("{what} must be 4-D, got {s:?}"))),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(Error::Dimension(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `out[b,j] = sum_i input[b,i] * weight[i,j] + bias[j]`
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, n_in) = dims2(input, "dense input")?;
    let (w_in, n_out) = dims2(weight, "dense weight")?;
    if n_in != w_in || bias.shape() != [n_out] {
        return Err(Error::Dimension(format!(
            "dense shapes do not conform: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[batch, n_out]);
    let od = out.data_mut();
    let id = input.data();
    let wd = weight.data();
    let bd = bias.data();
    for b in 0..batch {
        let orow = &mut od[b * n_out..(b + 1) * n_out];
        orow.copy_from_slice(bd);
        let irow = &id[b * n_in..(b + 1) * n_in];
        for (i, &x) in irow.iter().enumerate() {
            let wrow = &wd[i * n_out..(i + 1) * n_out];
            for (o, &w) in orow.iter_mut().zip(wrow) {
                *o += x * w;
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [batch, n_in] = input.shape() else { unreachable!() };
    let (batch, n_in) = (*batch, *n_in);
    let n_out = weight.shape()[1];
    let mut d_input = Tensor::zeros(&[batch, n_in]);
    let mut d_weight = Tensor::zeros(&[n_in, n_out]);
    let mut d_bias = Tensor::zeros(&[n_out]);
    let id = input.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let di = d_input.data_mut();
    let dw = d_weight.data_mut();
    let db = d_bias.data_mut();
    for b in 0..batch {
        let grow = &gd[b * n_out..(b + 1) * n_out];
        let irow = &id[b * n_in..(b + 1) * n_in];
        let dirow = &mut di[b * n_in..(b + 1) * n_in];
        for i in 0..n_in {
            let wrow = &wd[i * n_out..(i + 1) * n_out];
            let dwrow = &mut dw[i * n_out..(i + 1) * n_out];
            let mut acc = 0.0;
            let x = irow[i];
            for j in 0..n_out {
                acc += grow[j] * wrow[j];
                dwrow[j] += x * grow[j];
            }
            dirow[i] += acc;
        }
        for (dbj, &g) in db.iter_mut().zip(grow) {
            *dbj += g;
        }
    }
    (d_input, d_weight, d_bias)
}

/// 3x3 cross-correlation with zero same-padding, stride 1.
///
/// `input[batch, cin, h, w]`, `kernel[cout, cin, 3, 3]`, `bias[cout]` to
/// `output[batch, cout, h, w]`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, cin, h, w) = dims4(input, "conv input")?;
    let (cout, kin, kh, kw) = dims4(kernel, "conv kernel")?;
    if kh != 3 || kw != 3 {
        return Err(Error::Dimension(format!(
            "conv kernel spatial size must be 3x3, got {kh}x{kw}"
        )));
    }
    if kin != cin || bias.shape() != [cout] {
        return Err(Error::Dimension(format!(
            "conv shapes do not conform: input {:?}, kernel {:?}, bias {:?}",
            input.shape(),
            kernel.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[batch, cout, h, w]);
    let id = input.data();
    let kd = kernel.data();
    let bd = bias.data();
    let plane = h * w;
    exec::for_each_chunk_mut(out.data_mut(), plane, |pi, oplane| {
        let b = pi / cout;
        let co = pi % cout;
        oplane.fill(bd[co]);
        for ci in 0..cin {
            let iplane = &id[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
            let kbase = (co * cin + ci) * 9;
            for ky in 0..3 {
                let oy_lo = if ky == 0 { 1 } else { 0 };
                let oy_hi = if ky == 2 { h - 1 } else { h };
                for kx in 0..3 {
                    let kv = kd[kbase + ky * 3 + kx];
                    let ox_lo = if kx == 0 { 1 } else { 0 };
                    let ox_hi = if kx == 2 { w - 1 } else { w };
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - 1;
                        let orow = &mut oplane[oy * w + ox_lo..oy * w + ox_hi];
                        let irow = &iplane[iy * w + ox_lo + kx - 1..];
                        for (o, &x) in orow.iter_mut().zip(irow) {
                            *o += kv * x;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let &[batch, cin, h, w] = input.shape() else { unreachable!() };
    let cout = kernel.shape()[0];
    let plane = h * w;
    let id = input.data();
    let kd = kernel.data();
    let gd = grad_out.data();

    // d input: one task per (batch, cin) plane.
    let mut d_input = Tensor::zeros(&[batch, cin, h, w]);
    exec::for_each_chunk_mut(d_input.data_mut(), plane, |pi, dplane| {
        let b = pi / cin;
        let ci = pi % cin;
        for co in 0..cout {
            let gplane = &gd[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            let kbase = (co * cin + ci) * 9;
            for ky in 0..3 {
                let iy_lo = if ky == 2 { 1 } else { 0 };
                let iy_hi = if ky == 0 { h - 1 } else { h };
                for kx in 0..3 {
                    let kv = kd[kbase + ky * 3 + kx];
                    let ix_lo = if kx == 2 { 1 } else { 0 };
                    let ix_hi = if kx == 0 { w - 1 } else { w };
                    for iy in iy_lo..iy_hi {
                        let oy = iy + 1 - ky;
                        let drow = &mut dplane[iy * w + ix_lo..iy * w + ix_hi];
                        let grow = &gplane[oy * w + ix_lo + 1 - kx..];
                        for (d, &g) in drow.iter_mut().zip(grow) {
                            *d += kv * g;
                        }
                    }
                }
            }
        }
    });

    // d bias: plain plane sums over grad_out, summed in index order.
    let mut d_bias = Tensor::zeros(&[cout]);
    {
        let db = d_bias.data_mut();
        for b in 0..batch {
            for (co, dbj) in db.iter_mut().enumerate() {
                let gplane = &gd[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                *dbj += gplane.iter().sum::<f64>();
            }
        }
    }

    // d kernel: one task per output channel, batch summed in index order.
    let mut d_kernel = Tensor::zeros(kernel.shape());
    exec::for_each_chunk_mut(d_kernel.data_mut(), cin * 9, |co, dk| {
        for b in 0..batch {
            let gplane = &gd[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for ci in 0..cin {
                let iplane = &id[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for ky in 0..3 {
                    let oy_lo = if ky == 0 { 1 } else { 0 };
                    let oy_hi = if ky == 2 { h - 1 } else { h };
                    for kx in 0..3 {
                        let ox_lo = if kx == 0 { 1 } else { 0 };
                        let ox_hi = if kx == 2 { w - 1 } else { w };
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - 1;
                            let grow = &gplane[oy * w + ox_lo..oy * w + ox_hi];
                            let irow = &iplane[iy * w + ox_lo + kx - 1..];
                            for (&g, &x) in grow.iter().zip(irow) {
                                acc += g * x;
                            }
                        }
                        dk[ci * 9 + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    });
    (d_input, d_kernel, d_bias)
}

/// 2x2 max pooling with stride 2; a trailing odd row/column is pooled
/// with a 1-wide window. Returns the pooled tensor and, per output
/// element, the flat input index of the (first-scanned) maximum.
pub fn maxpool2d_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (batch, c, h, w) = dims4(input, "maxpool input")?;
    let ph = h.div_ceil(2);
    let pw = w.div_ceil(2);
    let mut out = Tensor::zeros(&[batch, c, ph, pw]);
    let mut argmax = vec![0usize; batch * c * ph * pw];
    let id = input.data();
    let od = out.data_mut();
    for p in 0..batch * c {
        let ibase = p * h * w;
        let obase = p * ph * pw;
        for oy in 0..ph {
            for ox in 0..pw {
                let y0 = oy * 2;
                let x0 = ox * 2;
                let mut best_idx = ibase + y0 * w + x0;
                let mut best = id[best_idx];
                for y in y0..(y0 + 2).min(h) {
                    for x in x0..(x0 + 2).min(w) {
                        let idx = ibase + y * w + x;
                        if id[idx] > best {
                            best = id[idx];
                            best_idx = idx;
                        }
                    }
                }
                od[obase + oy * pw + ox] = best;
                argmax[obase + oy * pw + ox] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to its recorded argmax position.
pub(crate) fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Tensor {
    let mut d_input = Tensor::zeros(input_shape);
    let dd = d_input.data_mut();
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        dd[src] += g;
    }
    d_input
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor { shape: input.shape().to_vec(), data }
}

/// Subgradient at 0 is 0.
pub(crate) fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor { shape: input.shape().to_vec(), data }
}

/// Row-wise `softmax(z / tau)` with max subtraction for overflow safety.
pub(crate) fn softmax_rows(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let (rows, k) = dims2(logits, "logits")?;
    let mut out = Tensor::zeros(&[rows, k]);
    let od = out.data_mut();
    let ld = logits.data();
    for r in 0..rows {
        let zrow = &ld[r * k..(r + 1) * k];
        let orow = &mut od[r * k..(r + 1) * k];
        let mut m = f64::NEG_INFINITY;
        for &z in zrow {
            m = m.max(z / tau);
        }
        let mut sum = 0.0;
        for (o, &z) in orow.iter_mut().zip(zrow) {
            *o = (z / tau - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_weight_passes_input() {
        let input = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let weight = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bias = Tensor::zeros(&[2]);
        let out = dense_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_hand_matrix_multiply() {
        let input = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let weight = Tensor::from_vec(&[2, 1], vec![2.0, 3.0]).unwrap();
        let bias = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let out = dense_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn dense_zero_input_passes_bias() {
        let input = Tensor::zeros(&[1, 2]);
        let weight = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.0, 8.0]).unwrap();
        let bias = Tensor::from_vec(&[2], vec![5.0, 7.0]).unwrap();
        let out = dense_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0]);
    }

    #[test]
    fn dense_shape_mismatch_names_both_shapes() {
        let input = Tensor::zeros(&[1, 3]);
        let weight = Tensor::zeros(&[2, 2]);
        let bias = Tensor::zeros(&[2]);
        let err = dense_forward(&input, &weight, &bias).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let input = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernel = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let out = conv2d_forward(&input, &kernel, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv_all_ones_kernel_with_zero_padding() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&input, &kernel, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_zero_kernel_emits_bias() {
        let input = Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let kernel = Tensor::zeros(&[2, 2, 3, 3]);
        let bias = Tensor::from_vec(&[2], vec![2.5, -1.0]).unwrap();
        let out = conv2d_forward(&input, &kernel, &bias).unwrap();
        assert!(out.data()[..9].iter().all(|&v| v == 2.5));
        assert!(out.data()[9..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let input = Tensor::zeros(&[1, 2, 4, 4]);
        let kernel = Tensor::zeros(&[3, 1, 3, 3]);
        let bias = Tensor::zeros(&[3]);
        assert!(matches!(
            conv2d_forward(&input, &kernel, &bias),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn maxpool_max_of_four() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = maxpool2d_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);
    }

    #[test]
    fn maxpool_ties_route_to_first_in_scan_order() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (out, argmax) = maxpool2d_forward(&input).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn maxpool_odd_edges_use_one_wide_windows() {
        let input =
            Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let (out, _) = maxpool2d_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn maxpool_backward_routes_entire_window_gradient() {
        let input =
            Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let (_, argmax) = maxpool2d_forward(&input).unwrap();
        let grad_out = Tensor::full(&[1, 1, 2, 2], 1.0);
        let d = maxpool2d_backward(&[1, 1, 4, 4], &argmax, &grad_out);
        assert_eq!(d.data().iter().sum::<f64>(), 4.0);
        // lower-right of each 2x2 window holds the max for this input
        assert_eq!(d.data()[5], 1.0);
        assert_eq!(d.data()[7], 1.0);
        assert_eq!(d.data()[13], 1.0);
        assert_eq!(d.data()[15], 1.0);
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let all_neg = Tensor::from_vec(&[2, 2], vec![-1.0, -5.0, -0.5, -2.0]).unwrap();
        assert!(relu(&all_neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let p = softmax_rows(&logits, 1.0).unwrap();
        for r in 0..2 {
            let s: f64 = p.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(softmax_rows(&logits, 0.0).is_err());
        assert!(softmax_rows(&logits, -1.0).is_err());
    }
}
