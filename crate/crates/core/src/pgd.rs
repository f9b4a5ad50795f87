//! Projected gradient descent `x ← Π_Q(x − η∇Ĵ(x))`.
//!
//! Two modes: a fixed number of warm-started steps (the per-batch update)
//! and run-to-convergence (the cold-start baseline and test oracles).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{norm1, norm2, Rng};
use crate::objectives::Objective;

/// Halvings allowed when a step lands outside the objective's domain.
pub const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Fixed(f64),
    /// `1/L̂` from the objective's curvature; quadratic objectives only.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdMode {
    FixedSteps,
    ToConvergence { tol: f64, max_iter: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig {
    pub steps: usize,
    pub step_size: StepSize,
    pub mode: PgdMode,
    /// Upper bound on `‖η∇Ĵ‖₁` per step.
    pub w2_clamp: Option<f64>,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig { steps: 1, step_size: StepSize::Auto, mode: PgdMode::FixedSteps, w2_clamp: None }
    }
}

impl PgdConfig {
    pub fn fixed(steps: usize, step_size: StepSize) -> Self {
        PgdConfig { steps, step_size, ..Default::default() }
    }

    pub fn to_convergence(step_size: StepSize, tol: f64, max_iter: usize) -> Self {
        PgdConfig { steps: 1, step_size, mode: PgdMode::ToConvergence { tol, max_iter }, w2_clamp: None }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("PGD needs at least one step".into()));
        }
        if let StepSize::Fixed(eta) = self.step_size {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::Config(format!("PGD step size must be positive, got {eta}")));
            }
        }
        if let PgdMode::ToConvergence { tol, max_iter } = self.mode {
            if !(tol > 0.0) || max_iter == 0 {
                return Err(Error::Config("convergence mode needs tol > 0 and max_iter >= 1".into()));
            }
        }
        if let Some(c) = self.w2_clamp {
            if !(c >= 0.0) {
                return Err(Error::Config("step clamp must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PgdResult {
    pub point: Vec<f64>,
    /// `Ĵ` at the start point followed by `Ĵ` after each step.
    pub trajectory: Vec<f64>,
    pub iterations: usize,
    /// Seconds per iteration.
    pub iter_times: Vec<f64>,
}

/// Resolve the configured step size against an objective.
pub fn resolve_step(obj: &dyn Objective, step: StepSize) -> Result<f64> {
    match step {
        StepSize::Fixed(eta) => Ok(eta),
        StepSize::Auto => match obj.curvature() {
            Some(l) if l > 0.0 && l.is_finite() => Ok(1.0 / l),
            Some(_) => Ok(1.0),
            None => Err(Error::Config("automatic step size needs a quadratic objective".into())),
        },
    }
}

pub fn run(obj: &dyn Objective, x0: &[f64], cfg: &PgdConfig) -> Result<PgdResult> {
    cfg.validate()?;
    if x0.len() != obj.dim() {
        return contract(format!("start point has length {}, objective has {}", x0.len(), obj.dim()));
    }
    if !obj.constraint().is_feasible(x0, 1e-8) {
        return contract("PGD start point is infeasible; project it first");
    }
    let eta = resolve_step(obj, cfg.step_size)?;
    let (max_iter, tol) = match cfg.mode {
        PgdMode::FixedSteps => (cfg.steps, None),
        PgdMode::ToConvergence { tol, max_iter } => (max_iter, Some(tol)),
    };

    let mut x = x0.to_vec();
    let (mut current, mut grad) = obj.value_and_gradient(&x);
    let mut trajectory = Vec::with_capacity(max_iter + 1);
    trajectory.push(current);
    let mut iter_times = Vec::with_capacity(max_iter);
    let mut iterations = 0;

    while iterations < max_iter {
        let started = Instant::now();
        let mut step = eta;
        if let Some(clamp) = cfg.w2_clamp {
            let g1 = norm1(&grad);
            if step * g1 > clamp {
                step = clamp / g1;
            }
        }
        let (next, value, next_grad) = step_with_backtracking(obj, &x, &grad, step)?;
        x = next;
        grad = next_grad;
        let previous = current;
        current = value;
        trajectory.push(current);
        iterations += 1;
        iter_times.push(started.elapsed().as_secs_f64());
        if let Some(tol) = tol {
            if previous.is_finite() && (current - previous).abs() <= tol * (1.0 + current.abs()) {
                break;
            }
        }
    }
    Ok(PgdResult { point: x, trajectory, iterations, iter_times })
}

/// Projected step, halved until the objective is finite. Returns the new
/// point with its value and gradient.
fn step_with_backtracking(
    obj: &dyn Objective,
    x: &[f64],
    grad: &[f64],
    eta: f64,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let mut step = eta;
    for _ in 0..=MAX_HALVINGS {
        let moved: Vec<f64> = x.iter().zip(grad).map(|(xi, gi)| xi - step * gi).collect();
        let y = obj.constraint().project(&moved)?;
        let (v, g) = obj.value_and_gradient(&y);
        if v.is_finite() {
            return Ok((y, v, g));
        }
        step *= 0.5;
    }
    Err(Error::StepFailure { halvings: MAX_HALVINGS, last: x.to_vec() })
}

/// Iterations of the diminishing-step reference solver.
pub const ORACLE_ITERS: usize = 100_000;

/// Reference solution for convex objectives: PGD with `η_t = η₀/√t` for
/// [`ORACLE_ITERS`] iterations, returning the best iterate seen.
///
/// `η₀ = 1/L̂`, where `L̂` is the exact curvature for quadratics and
/// otherwise a power-iteration estimate from finite-difference
/// Hessian-vector products at the start point.
pub fn oracle_solve(obj: &dyn Objective, x0: &[f64]) -> Result<Vec<f64>> {
    let start = obj.constraint().project(x0)?;
    let curvature = match obj.curvature() {
        Some(l) => l,
        None => estimate_curvature(obj, &start),
    };
    let eta0 = if curvature > 0.0 && curvature.is_finite() { 1.0 / curvature } else { 1.0 };
    oracle_solve_with(obj, &start, eta0, ORACLE_ITERS)
}

pub fn oracle_solve_with(obj: &dyn Objective, x0: &[f64], eta0: f64, iters: usize) -> Result<Vec<f64>> {
    let mut x = obj.constraint().project(x0)?;
    let (v0, mut grad) = obj.value_and_gradient(&x);
    let mut best = (v0, x.clone());
    for t in 1..=iters {
        let eta = eta0 / (t as f64).sqrt();
        let (next, v, g) = step_with_backtracking(obj, &x, &grad, eta)?;
        x = next;
        grad = g;
        if v < best.0 {
            best = (v, x.clone());
        }
    }
    Ok(best.1)
}

/// Largest eigenvalue of the Hessian at `x`, by power iteration on
/// central-difference Hessian-vector products.
pub fn estimate_curvature(obj: &dyn Objective, x: &[f64]) -> f64 {
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let mut rng = Rng::new(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    let scale = 1e-6 * (1.0 + norm2(x));
    let mut lambda = 0.0;
    for _ in 0..30 {
        let up: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + scale * b).collect();
        let dn: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - scale * b).collect();
        let gu = obj.gradient(&up);
        let gd = obj.gradient(&dn);
        let hv: Vec<f64> = gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * scale)).collect();
        let norm = norm2(&hv);
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        lambda = norm;
        v = hv.into_iter().map(|a| a / norm).collect();
    }
    lambda
}
