//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward passes, so it is independent of every
//! backward rule it verifies. Vector outputs are contracted with a fixed
//! pseudo-random weight vector before differencing, which exercises every
//! output component at once.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::Parameters;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Deterministic weights in [0.5, 1.5) used to project outputs to a scalar.
fn projection(n: usize) -> Vec<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.5 + (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn project(y: &Tensor, w: &[f64]) -> f64 {
    y.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Compares analytic and numeric gradients of `f` with respect to each
/// tensor in `inputs`.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let y = f(&tape, &vars)?;
    let w = projection(y.value().numel());
    let wv = tape.constant(Tensor::from_fn(y.shape(), |i| w[i]));
    let loss = y.mul(wv)?.sum_all();
    loss.backward()?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars)?.to_tensor();
        Ok(project(&y, &w))
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (i, ga) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - step;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = ga.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Like [`check`], but also differentiates every tensor reachable through
/// `params`. Inputs are reported with indices `0..inputs.len()`, parameters
/// follow in visiting order.
pub fn check_with_params<P, F>(params: &P, inputs: &[Tensor], step: f64, f: F) -> Result<GradReport>
where
    P: Parameters + Clone,
    F: for<'t> Fn(&'t Tape, &P, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let y = f(&tape, params, &vars)?;
    let w = projection(y.value().numel());
    let wv = tape.constant(Tensor::from_fn(y.shape(), |i| w[i]));
    y.mul(wv)?.sum_all().backward()?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            v.grad()
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; v.value().numel()])
        })
        .collect();
    params.visit("", &mut |_, t| {
        analytic.push(tape.param_grad(t).unwrap_or_else(|| vec![0.0; t.numel()]));
    });

    let eval = |ps: &P, xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, ps, &vars)?.to_tensor();
        Ok(project(&y, &w))
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut xs: Vec<Tensor> = inputs.to_vec();
    let mut ps = params.clone();
    for (i, ga) in analytic.iter().enumerate() {
        for (j, &a) in ga.iter().enumerate() {
            let nudge = |ps: &mut P, xs: &mut Vec<Tensor>, delta: f64| {
                if i < xs.len() {
                    xs[i].data_mut()[j] += delta;
                } else {
                    let mut k = inputs.len();
                    ps.visit_mut("", &mut |_, t| {
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        k += 1;
                    });
                }
            };
            nudge(&mut ps, &mut xs, step);
            let up = eval(&ps, &xs)?;
            nudge(&mut ps, &mut xs, -2.0 * step);
            let down = eval(&ps, &xs)?;
            nudge(&mut ps, &mut xs, step);
            let numeric = (up - down) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
