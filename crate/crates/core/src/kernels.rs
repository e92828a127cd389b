//! Dense numeric kernels and their hand-derived reverse-mode companions.
//!
//! Conventions shared by every kernel:
//! - the last axis is the feature axis; leading axes are flattened into rows;
//! - reductions run in a fixed sequential order, so results are
//!   bit-deterministic for identical inputs;
//! - outputs are checked for non-finite values (the top-k mask sentinel is
//!   the one sanctioned infinity and is exempt).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight matrix `(out_dim x in_dim)` with optional bias `(out_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "linear_params",
                expected: vec![0, 0],
                got: weight.shape().to_vec(),
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::ShapeMismatch {
                    op: "linear_params bias",
                    expected: vec![weight.shape()[0]],
                    got: b.shape().to_vec(),
                });
            }
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Affine layer-normalization parameters over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub epsilon: T,
}

impl<T: Scalar> LayerNormParams<T> {
    /// Unit gamma, zero beta.
    pub fn identity(dim: usize, epsilon: T) -> Self {
        LayerNormParams {
            gamma: Tensor::filled(&[dim], T::one()),
            beta: Tensor::zeros(&[dim]),
            epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.last_dim()
    }
}

fn ensure_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise x * sigmoid(x).
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_finite(x, "silu input")?;
    Ok(x.map(|v| v * sigmoid(v)))
}

/// d silu / dx = sigmoid(x) * (1 + x * (1 - sigmoid(x))), times upstream.
pub fn silu_vjp<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    for ((o, &xv), &g) in out
        .data_mut()
        .iter_mut()
        .zip(x.data())
        .zip(upstream.data())
    {
        let s = sigmoid(xv);
        *o = g * (s + xv * s * (T::one() - s));
    }
    out
}

/// Row-wise layer normalization with biased variance:
/// `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    let dim = x.last_dim();
    if dim != p.dim() {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            expected: vec![p.dim()],
            got: vec![dim],
        });
    }
    let n = T::from_f64(dim as f64);
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.n_rows() {
        let row = x.row(r);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let inv_std = T::one() / (var + p.epsilon).sqrt();
        let o = out.row_mut(r);
        for j in 0..dim {
            o[j] = (row[j] - mean) * inv_std * p.gamma.data()[j] + p.beta.data()[j];
        }
    }
    ensure_finite(&out, "layer_norm")?;
    Ok(out)
}

/// Reverse-mode layer norm. Returns `(d_x, d_gamma, d_beta)`.
pub fn layer_norm_vjp<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerNormParams<T>,
    upstream: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let dim = x.last_dim();
    let n = T::from_f64(dim as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(&[dim]);
    let mut gbeta = Tensor::zeros(&[dim]);
    for r in 0..x.n_rows() {
        let row = x.row(r);
        let g = upstream.row(r);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let inv_std = T::one() / (var + p.epsilon).sqrt();

        // h = upstream * gamma (grad wrt normalized x); two row means of h
        // and h*xhat close the reverse pass.
        let mut mean_h = T::zero();
        let mut mean_hx = T::zero();
        for j in 0..dim {
            let xhat = (row[j] - mean) * inv_std;
            let h = g[j] * p.gamma.data()[j];
            mean_h += h;
            mean_hx += h * xhat;
            ggamma.data_mut()[j] += g[j] * xhat;
            gbeta.data_mut()[j] += g[j];
        }
        mean_h = mean_h / n;
        mean_hx = mean_hx / n;
        let go = gx.row_mut(r);
        for j in 0..dim {
            let xhat = (row[j] - mean) * inv_std;
            let h = g[j] * p.gamma.data()[j];
            go[j] = (h - mean_h - xhat * mean_hx) * inv_std;
        }
    }
    (gx, ggamma, gbeta)
}

/// Row-wise softmax with max-subtraction. Entries equal to `-inf` are mask
/// sentinels and map to exactly zero; a fully masked row is an error.
pub fn softmax<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let dim = s.last_dim();
    let mut out = Tensor::zeros(s.shape());
    for r in 0..s.n_rows() {
        let row = s.row(r);
        let mut max = T::neg_infinity();
        for &v in row {
            if v.is_nan() {
                return Err(Error::NonFinite { op: "softmax input" });
            }
            if v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::EmptySupport);
        }
        let o = out.row_mut(r);
        let mut sum = T::zero();
        for j in 0..dim {
            // exp(-inf - max) is exactly 0, which keeps masked gates at 0.
            let e = (row[j] - max).exp();
            o[j] = e;
            sum += e;
        }
        for v in o.iter_mut() {
            *v = *v / sum;
        }
    }
    ensure_finite(&out, "softmax")?;
    Ok(out)
}

/// Reverse-mode softmax from its output `p`:
/// `d_s = p * (upstream - sum(upstream * p))` per row.
/// Masked positions have `p = 0` and therefore receive exactly zero gradient.
pub fn softmax_vjp<T: Scalar>(p: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let dim = p.last_dim();
    let mut out = Tensor::zeros(p.shape());
    for r in 0..p.n_rows() {
        let pr = p.row(r);
        let g = upstream.row(r);
        let mut dot = T::zero();
        for j in 0..dim {
            dot += g[j] * pr[j];
        }
        let o = out.row_mut(r);
        for j in 0..dim {
            o[j] = pr[j] * (g[j] - dot);
        }
    }
    out
}

/// Indices of the `k` largest entries of `row`, ties broken toward the lower
/// index. Returned ascending.
pub fn topk_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Keep the `k` largest entries per row; everything else is set to the `-inf`
/// mask sentinel so a following softmax yields exact zeros there.
pub fn topk_mask<T: Scalar>(s: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let dim = s.last_dim();
    if k == 0 || k > dim {
        return Err(Error::InvalidConfig(format!(
            "top_k must be in [1, {dim}], got {k}"
        )));
    }
    let mut out = Tensor::filled(s.shape(), T::neg_infinity());
    for r in 0..s.n_rows() {
        let row = s.row(r);
        let kept = topk_indices(row, k);
        let o = out.row_mut(r);
        for &j in &kept {
            o[j] = row[j];
        }
    }
    Ok(out)
}

/// `x @ weight^T (+ bias)`. `x` is `[rows x in_dim]` (rank 1 is one row);
/// output is `[rows x out_dim]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let in_dim = p.in_dim();
    let out_dim = p.out_dim();
    if x.last_dim() != in_dim {
        return Err(Error::ShapeMismatch {
            op: "linear",
            expected: p.weight.shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = out_dim;
    let mut out = Tensor::zeros(&out_shape);
    for r in 0..x.n_rows() {
        let row = x.row(r);
        let o = out.row_mut(r);
        for oi in 0..out_dim {
            let w = p.weight.row(oi);
            let mut acc = T::zero();
            for j in 0..in_dim {
                acc += w[j] * row[j];
            }
            if let Some(b) = &p.bias {
                acc += b.data()[oi];
            }
            o[oi] = acc;
        }
    }
    ensure_finite(&out, "linear")?;
    Ok(out)
}

/// Reverse-mode linear. Returns `(d_x, d_weight, d_bias)`.
pub fn linear_vjp<T: Scalar>(
    x: &Tensor<T>,
    p: &LinearParams<T>,
    upstream: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let in_dim = p.in_dim();
    let out_dim = p.out_dim();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(p.weight.shape());
    let mut gb = p.bias.as_ref().map(|_| Tensor::zeros(&[out_dim]));
    for r in 0..x.n_rows() {
        let row = x.row(r);
        let g = upstream.row(r);
        let go = gx.row_mut(r);
        for oi in 0..out_dim {
            let w = p.weight.row(oi);
            let gout = g[oi];
            for j in 0..in_dim {
                go[j] += gout * w[j];
            }
        }
        for oi in 0..out_dim {
            let gout = g[oi];
            let wrow = gw.row_mut(oi);
            for j in 0..in_dim {
                wrow[j] += gout * row[j];
            }
            if let Some(b) = &mut gb {
                b.data_mut()[oi] += gout;
            }
        }
    }
    (gx, gw, gb)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`[batch x vocab]`).
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    ensure_finite(logits, "cross_entropy input")?;
    let vocab = logits.last_dim();
    let batch = logits.n_rows();
    if targets.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            expected: vec![batch],
            got: vec![targets.len()],
        });
    }
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::TargetOutOfRange { target: t, vocab });
        }
        let row = logits.row(r);
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        total += sum.ln() + (max - row[t]);
    }
    Ok(total / T::from_f64(batch as f64))
}

/// Reverse-mode cross entropy: `upstream / batch * (softmax(row) - onehot)`.
pub fn cross_entropy_vjp<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    upstream: T,
) -> Tensor<T> {
    let batch = logits.n_rows();
    let scale = upstream / T::from_f64(batch as f64);
    let p = softmax(logits).expect("finite logits");
    let mut out = p;
    for (r, &t) in targets.iter().enumerate() {
        let row = out.row_mut(r);
        row[t] = row[t] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    out
}

/// Load-balance penalty from importance and load vectors:
/// `n_routable * sum_e importance[e] * load[e]` over the routable experts.
///
/// Shared by the plain statistics path and the tape op so both produce
/// bit-identical values.
pub fn balance_penalty_from<T: Scalar>(importance: &[T], load: &[T], first_routable: usize) -> T {
    let n_routable = T::from_f64((importance.len() - first_routable) as f64);
    let mut acc = T::zero();
    for e in first_routable..importance.len() {
        acc += importance[e] * load[e];
    }
    n_routable * acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn silu_fixed_points() {
        let y = silu(&t1(&[0.0, 1.0, -20.0])).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.7310585786300049).abs() < 1e-12);
        // large negative input stays tiny instead of blowing up
        let expected = -20.0 * ((-20.0f64).exp() / (1.0 + (-20.0f64).exp()));
        assert!((y.data()[2] / expected - 1.0).abs() < 1e-12);
        assert!((y.data()[2] - (-4.1223072e-8)).abs() < 1e-14);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let p = LayerNormParams::identity(4, 1e-5);
        let y = layer_norm(&t1(&[5.0, 5.0, 5.0, 5.0]), &p).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_two_point_rows() {
        let p = LayerNormParams::identity(2, 1e-12);
        let y = layer_norm(&t1(&[1.0, 3.0]), &p).unwrap();
        assert!((y.data()[0] - (-1.0)).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);

        let affine = LayerNormParams {
            gamma: Tensor::filled(&[2], 2.0),
            beta: Tensor::filled(&[2], 1.0),
            epsilon: 1e-12,
        };
        let y = layer_norm(&t1(&[1.0, -1.0]), &affine).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-6);
        assert!((y.data()[1] - (-1.0)).abs() < 1e-6);
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let y = softmax(&t1(&[0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.25, 0.25, 0.25, 0.25]);

        let inf = f64::NEG_INFINITY;
        let y = softmax(&t1(&[3.0, inf, 2.0, inf])).unwrap();
        assert!((y.data()[0] - 0.7310585786300049).abs() < 1e-12);
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[2] - 0.2689414213699951).abs() < 1e-12);
        assert_eq!(y.data()[3], 0.0);
        let sum: f64 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let y = softmax(&t1(&[1000.0, 0.0])).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn softmax_empty_support_errors() {
        let inf = f64::NEG_INFINITY;
        let err = softmax(&t1(&[inf, inf])).unwrap_err();
        assert!(matches!(err, Error::EmptySupport));
    }

    #[test]
    fn topk_mask_basics() {
        let inf = f64::NEG_INFINITY;
        let m = topk_mask(&t1(&[3.0, 1.0, 2.0, 0.0]), 2).unwrap();
        assert_eq!(m.data(), &[3.0, inf, 2.0, inf]);

        // k = len leaves the row unchanged
        let s = t1(&[0.5, -1.0, 2.0]);
        assert_eq!(topk_mask(&s, 3).unwrap(), s);

        // ties break toward the lower index
        let m = topk_mask(&t1(&[1.0, 1.0, 1.0]), 1).unwrap();
        assert_eq!(m.data(), &[1.0, inf, inf]);
    }

    #[test]
    fn topk_mask_idempotent() {
        let s = t1(&[0.3, -2.0, 0.3, 9.0, 1.0]);
        let once = topk_mask(&s, 2).unwrap();
        let twice = topk_mask(&once, 2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn topk_mask_k_out_of_range() {
        let err = topk_mask(&t1(&[1.0, 2.0]), 3).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        let err = topk_mask(&t1(&[1.0, 2.0]), 0).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn linear_identity_zero_and_hand_case() {
        let id = LinearParams::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            None,
        )
        .unwrap();
        let x = t1(&[0.7, -0.3]);
        assert_eq!(linear(&x, &id).unwrap(), x);

        let zero = LinearParams::new(Tensor::zeros(&[2, 2]), None).unwrap();
        assert_eq!(linear(&x, &zero).unwrap().data(), &[0.0, 0.0]);

        let w = LinearParams::new(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            None,
        )
        .unwrap();
        let y = linear(&t1(&[1.0, 1.0]), &w).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let w = LinearParams::new(Tensor::zeros(&[2, 3]), None).unwrap();
        let err = linear(&t1(&[1.0, 1.0]), &w).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // uniform logits over 10 classes
        let logits = Tensor::<f64>::zeros(&[1, 10]);
        let loss = cross_entropy(&logits, &[3]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);

        // saturated correct class
        let mut data = vec![0.0; 10];
        data[3] = 50.0;
        let logits = Tensor::new(vec![1, 10], data).unwrap();
        assert!(cross_entropy(&logits, &[3]).unwrap() < 1e-20);

        // two-class closed form: -ln(sigmoid(-1))
        let logits = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let loss: f64 = cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - 1.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let logits = Tensor::<f64>::zeros(&[1, 4]);
        let err = cross_entropy(&logits, &[4]).unwrap_err();
        assert!(matches!(err, Error::TargetOutOfRange { target: 4, vocab: 4 }));
    }
}
