//! Convex minimization of the l1-penalized surrogate objectives.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::kernel::{soft_threshold, Matrix};
use crate::loss::SurrogateLoss;
use crate::network::AdaNetModel;

/// `F(w) = (1/m) sum_i Phi(a_i - y_i w . u(x_i)) + sum_j gamma_j |w_j|`.
///
/// For a boosting round the offsets are the cached margins
/// `a_i = 1 - y_i f_{t-1}(x_i)` and `u` are the candidate's top-unit outputs.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    loss: SurrogateLoss,
    offsets: Vec<f64>,
    /// `y_i u_j(x_i)`, m x B.
    signed: Matrix,
    penalties: Vec<f64>,
}

impl ObjectiveSpec {
    /// One penalty `gamma` shared by every coordinate of the block.
    pub fn new(
        loss: SurrogateLoss,
        offsets: Vec<f64>,
        labels: &[f64],
        outputs: &Matrix,
        gamma: f64,
    ) -> Result<Self> {
        let b = outputs.cols();
        Self::with_penalties(loss, offsets, labels, outputs, vec![gamma; b])
    }

    pub fn with_penalties(
        loss: SurrogateLoss,
        offsets: Vec<f64>,
        labels: &[f64],
        outputs: &Matrix,
        penalties: Vec<f64>,
    ) -> Result<Self> {
        let m = outputs.rows();
        if offsets.len() != m || labels.len() != m {
            return Err(invalid_input(format!(
                "{} offsets and {} labels for {m} rows",
                offsets.len(),
                labels.len()
            )));
        }
        if penalties.len() != outputs.cols() {
            return Err(invalid_input(format!(
                "{} penalties for {} coordinates",
                penalties.len(),
                outputs.cols()
            )));
        }
        if penalties.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(invalid_param("penalties must be finite and >= 0"));
        }
        if offsets.iter().any(|a| !a.is_finite()) {
            return Err(invalid_input("non-finite offset"));
        }
        let mut signed = outputs.clone();
        for (i, y) in labels.iter().enumerate() {
            signed.row_mut(i).iter_mut().for_each(|v| *v *= y);
        }
        Ok(Self {
            loss,
            offsets,
            signed,
            penalties,
        })
    }

    pub fn dim(&self) -> usize {
        self.signed.cols()
    }

    pub fn len(&self) -> usize {
        self.signed.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn loss(&self) -> SurrogateLoss {
        self.loss
    }

    pub fn penalties(&self) -> &[f64] {
        &self.penalties
    }

    fn arguments(&self, w: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.offsets[i] - crate::kernel::dot(self.signed.row(i), w))
            .collect()
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.penalties)
            .map(|(w, g)| g * w.abs())
            .sum()
    }

    fn smooth(&self, w: &[f64]) -> f64 {
        let z = self.arguments(w);
        z.iter().map(|&z| self.loss.value(z)).sum::<f64>() / self.len() as f64
    }

    fn smooth_with_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let m = self.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim()];
        for (i, z) in self.arguments(w).into_iter().enumerate() {
            let (v, d) = self.loss.surrogate(z);
            value += v;
            for (g, s) in grad.iter_mut().zip(self.signed.row(i)) {
                *g -= s * d;
            }
        }
        grad.iter_mut().for_each(|g| *g /= m);
        (value / m, grad)
    }

    /// Distance of 0 from the subdifferential at `w`, max over coordinates.
    fn residual(&self, w: &[f64], grad: &[f64]) -> f64 {
        w.iter()
            .zip(grad)
            .zip(&self.penalties)
            .map(|((&w, &g), &gamma)| {
                if w != 0.0 {
                    (g + gamma * w.signum()).abs()
                } else {
                    (g.abs() - gamma).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Full objective value and the gradient of its smooth part.
pub fn objective_round(spec: &ObjectiveSpec, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_point(spec, w)?;
    let (v, g) = spec.smooth_with_grad(w);
    Ok((v + spec.penalty(w), g))
}

fn check_point(spec: &ObjectiveSpec, w: &[f64]) -> Result<()> {
    if w.len() != spec.dim() {
        return Err(invalid_input(format!(
            "w has {} entries, expected {}",
            w.len(),
            spec.dim()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(invalid_input("non-finite weight"));
    }
    Ok(())
}

/// `(1/m) sum_i Phi(1 - y_i f(x_i)) + sum_j gamma_j |w_j|` for a model on a
/// prepared sample, with `gammas` aligned to its output weights.
pub fn objective_full(
    model: &AdaNetModel,
    d: &Dataset,
    loss: SurrogateLoss,
    gammas: &[f64],
) -> Result<f64> {
    let scores = model.scores(d)?;
    objective_from_scores(model, &scores, d.labels(), loss, gammas)
}

/// As [`objective_full`] with precomputed scores.
pub fn objective_from_scores(
    model: &AdaNetModel,
    scores: &[f64],
    labels: &[f64],
    loss: SurrogateLoss,
    gammas: &[f64],
) -> Result<f64> {
    let weights = model.output_weights();
    if gammas.len() != weights.len() {
        return Err(invalid_input(format!(
            "{} penalties for {} output weights",
            gammas.len(),
            weights.len()
        )));
    }
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(invalid_input(
            "scores and labels must be non-empty and aligned",
        ));
    }
    let data: f64 = scores
        .iter()
        .zip(labels)
        .map(|(f, y)| loss.value(1.0 - y * f))
        .sum::<f64>()
        / scores.len() as f64;
    let penalty: f64 = weights.iter().zip(gammas).map(|(o, g)| g * o.w.abs()).sum();
    Ok(data + penalty)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// First trial step of the backtracking search.
    pub initial_step: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            initial_step: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub w: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub tol: f64,
    pub max_iter: usize,
    /// Objective value after each iteration.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

const MIN_STEP: f64 = 1e-300;
const MAX_STEP: f64 = 1e12;
/// Relative slack for objective comparisons at the optimum.
pub const ROUNDING: f64 = 1e-14;

/// Proximal gradient descent with halving backtracking. The step starts at
/// `opts.initial_step` and is doubled after each accepted iteration.
pub fn prox_solve(spec: &ObjectiveSpec, w0: &[f64], opts: SolveOptions) -> Result<SolveReport> {
    if !(opts.tol > 0.0) {
        return Err(invalid_param(format!("tol must be > 0, got {}", opts.tol)));
    }
    if !(opts.initial_step > 0.0 && opts.initial_step.is_finite()) {
        return Err(invalid_param("initial step must be finite and > 0"));
    }
    check_point(spec, w0)?;
    let mut w = w0.to_vec();
    let (mut smooth, mut grad) = spec.smooth_with_grad(&w);
    let mut value = smooth + spec.penalty(&w);
    let mut residual = spec.residual(&w, &grad);
    let mut step = opts.initial_step;
    let mut trace = Vec::new();
    let mut iterations = 0;

    while residual > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let mut accepted = None;
        while step >= MIN_STEP {
            let z: Vec<f64> = w
                .iter()
                .zip(&grad)
                .zip(&spec.penalties)
                .map(|((w, g), gamma)| soft_threshold(w - step * g, step * gamma))
                .collect();
            let (s, g) = spec.smooth_with_grad(&z);
            let diff: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a - b).collect();
            let sq = crate::kernel::dot(&diff, &diff);
            let upper = smooth + crate::kernel::dot(&grad, &diff) + sq / (2.0 * step);
            // For convex losses the curvature test implies the value test;
            // it stays reliable once value differences reach rounding level.
            let dg: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let curvature_ok = crate::kernel::dot(&diff, &dg) <= sq / (2.0 * step);
            if s.is_finite() && (s <= upper || curvature_ok) {
                accepted = Some((z, s, g));
                break;
            }
            step *= 0.5;
        }
        let Some((z, s, g)) = accepted else {
            break;
        };
        let v = s + spec.penalty(&z);
        if v > value + ROUNDING * value.abs() || z == w {
            break;
        }
        w = z;
        smooth = s;
        grad = g;
        value = v;
        residual = spec.residual(&w, &grad);
        trace.push(value);
        step = (step * 2.0).min(MAX_STEP);
    }

    Ok(SolveReport {
        converged: residual <= opts.tol,
        w,
        value,
        iterations,
        residual,
        tol: opts.tol,
        max_iter: opts.max_iter,
        trace,
    })
}

/// Line minimization for a single coordinate by bisection on the one-sided
/// derivatives, carried to floating-point resolution. `tol` bounds the
/// reported derivative residual.
pub fn bisect_1d(spec: &ObjectiveSpec, tol: f64) -> Result<SolveReport> {
    if spec.dim() != 1 {
        return Err(invalid_input(format!(
            "bisect_1d needs B = 1, got {}",
            spec.dim()
        )));
    }
    if !(tol > 0.0) {
        return Err(invalid_param(format!("tol must be > 0, got {tol}")));
    }
    let gamma = spec.penalties[0];
    let deriv = |w: f64| spec.smooth_with_grad(&[w]).1[0];
    let g0 = deriv(0.0);
    let finish = |w: f64, iterations: usize, residual: f64, converged: bool| {
        let value = spec.smooth(&[w]) + gamma * w.abs();
        SolveReport {
            w: vec![w],
            value,
            iterations,
            residual,
            converged,
            tol,
            max_iter: 0,
            trace: vec![value],
        }
    };
    if g0 + gamma >= 0.0 && g0 - gamma <= 0.0 {
        let residual = (g0.abs() - gamma).max(0.0);
        return Ok(finish(0.0, 0, residual, true));
    }
    // Search on the side where the one-sided derivative is negative.
    let dir = if g0 + gamma < 0.0 { 1.0 } else { -1.0 };
    let slope = |t: f64| dir * deriv(dir * t) + gamma;

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut iterations = 0;
    while slope(hi) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        iterations += 1;
        if iterations > 1100 || !hi.is_finite() {
            return Err(Error::Numeric("line search bracket does not close".into()));
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        let s = slope(mid);
        iterations += 1;
        if s == 0.0 || mid <= lo || mid >= hi {
            return Ok(finish(dir * mid, iterations, s.abs(), s.abs() <= tol));
        }
        if s < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}
