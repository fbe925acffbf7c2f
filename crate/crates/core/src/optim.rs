//! Adam optimizer and the finite-difference gradient verification harness.

use crate::autodiff::{AdResult, AutodiffError, ParamSet};

/// Default central-difference step.
pub const FD_DEFAULT_EPS: f64 = 1e-5;

/// Per-parameter first/second moment accumulators plus hyperparameters.
/// Moment buffers are aligned with the [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    /// Rebuilds a state from serialized pieces (checkpoint loading).
    pub fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

/// One Adam update with bias correction. Consumes and zeroes the accumulated
/// parameter gradients.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> AdResult<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(AutodiffError::LengthMismatch {
            expected: params.len(),
            got: state.m.len(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for idx in 0..params.len() {
        let p = params.get_mut(idx);
        let n = p.tensor.len();
        if state.m[idx].len() != n || state.v[idx].len() != n {
            return Err(AutodiffError::LengthMismatch {
                expected: n,
                got: state.m[idx].len(),
            });
        }
        for c in 0..n {
            let g = p.tensor.grad()[c];
            let m = state.beta1 * state.m[idx][c] + (1.0 - state.beta1) * g;
            let v = state.beta2 * state.v[idx][c] + (1.0 - state.beta2) * g * g;
            state.m[idx][c] = m;
            state.v[idx][c] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            p.tensor.values_mut()[c] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        p.tensor.zero_grad();
    }
    Ok(())
}

/// Compares an analytic gradient against central finite differences.
///
/// For each coordinate i the harness evaluates `f` at `theta[i] +/- eps` and
/// forms `(f+ - f-) / (2 eps)`. The relative error uses a `max(1, |analytic|)`
/// denominator. Returns the maximum relative error across coordinates;
/// `theta` is restored on return.
pub fn finite_diff_check<F>(
    theta: &mut [f64],
    analytic: &[f64],
    eps: f64,
    mut f: F,
) -> AdResult<f64>
where
    F: FnMut(&[f64]) -> AdResult<f64>,
{
    if theta.len() != analytic.len() {
        return Err(AutodiffError::LengthMismatch {
            expected: theta.len(),
            got: analytic.len(),
        });
    }
    let mut max_rel = 0.0_f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let f_plus = f(theta)?;
        theta[i] = orig - eps;
        let f_minus = f(theta)?;
        theta[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "finite_diff_check",
            });
        }
        let fd = (f_plus - f_minus) / (2.0 * eps);
        let rel = (fd - analytic[i]).abs() / 1.0_f64.max(analytic[i].abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
