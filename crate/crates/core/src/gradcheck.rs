//! Finite-difference oracle for the reverse sweep.
//!
//! The check only ever evaluates the forward pass, so it stays independent of
//! the backward kernels it verifies.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

/// Outcome of a gradient check. `max_rel_err` uses a
/// `max(|analytic|, |numeric|) + 1e-8` denominator guard.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub worst_param: usize,
    pub worst_elem: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval_scalar<T, F>(build: &F, params: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut GradTape<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = GradTape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(Error::ShapeMismatch {
            op: "grad_check root",
            expected: vec![1],
            got: v.shape().to_vec(),
        });
    }
    let v = v.scalar_value();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check f" });
    }
    Ok(v)
}

/// Compare the tape gradient of the scalar function built by `build` against
/// central finite differences `(f(p + eps) - f(p - eps)) / 2 eps`, element by
/// element over every parameter tensor.
pub fn grad_check<T, F>(build: F, params: &[Tensor<T>], eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut GradTape<T>, &[NodeId]) -> Result<NodeId>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidConfig(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }

    // analytic pass
    let mut tape = GradTape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &ids)?;
    {
        let v = tape.value(root);
        if v.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "grad_check root",
                expected: vec![1],
                got: v.shape().to_vec(),
            });
        }
        if !v.scalar_value().is_finite() {
            return Err(Error::NonFinite { op: "grad_check f" });
        }
    }
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Tensor<T>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.take_or_zeros(id, p.shape()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        n_checked: 0,
        worst_param: 0,
        worst_elem: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let two_eps = (eps + eps).to_f64();
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval_scalar(&build, &work)?.to_f64();
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval_scalar(&build, &work)?.to_f64();
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / two_eps;
            let a = analytic[pi].data()[ei].to_f64();
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-8);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_elem = ei;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
