//! Feasible sets for weight estimation and their exact Euclidean
//! projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConstraintSet {
    /// `{ w : w ≥ 0, |mean(w) − 1| ≤ ε }`
    NonnegMeanBand { epsilon: f64 },
    /// `{ β : β ≥ 0, aᵀβ = 1 }`
    NonnegWeightedSumOne { a: Vec<f64> },
    /// `{ β : β ≥ 0 }`
    NonnegOrthant,
}

impl ConstraintSet {
    pub fn mean_band(epsilon: f64) -> Result<Self> {
        let set = ConstraintSet::NonnegMeanBand { epsilon };
        set.validate()?;
        Ok(set)
    }

    pub fn weighted_sum_one(a: Vec<f64>) -> Result<Self> {
        let set = ConstraintSet::NonnegWeightedSumOne { a };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConstraintSet::NonnegMeanBand { epsilon } => {
                if !(*epsilon > 0.0) || !epsilon.is_finite() {
                    return Err(Error::Config(format!("mean band slack must be > 0, got {epsilon}")));
                }
            }
            ConstraintSet::NonnegWeightedSumOne { a } => {
                if a.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return Err(Error::Config("sum constraint coefficients must be finite and >= 0".into()));
                }
                if !(a.iter().sum::<f64>() > 0.0) {
                    return Err(Error::Config("sum constraint coefficients are all zero".into()));
                }
            }
            ConstraintSet::NonnegOrthant => {}
        }
        Ok(())
    }

    /// `argmin_{y ∈ Q} ‖y − x‖₂`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("projection input must be finite".into()));
        }
        Ok(match self {
            ConstraintSet::NonnegOrthant => x.iter().map(|&v| v.max(0.0)).collect(),
            ConstraintSet::NonnegMeanBand { epsilon } => project_mean_band(x, *epsilon),
            ConstraintSet::NonnegWeightedSumOne { a } => {
                if a.len() != x.len() {
                    return Err(Error::Contract(format!(
                        "constraint has dimension {}, point has {}",
                        a.len(),
                        x.len()
                    )));
                }
                project_weighted_sum_one(x, a)
            }
        })
    }

    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        if x.iter().any(|v| !v.is_finite() || *v < -tol) {
            return false;
        }
        match self {
            ConstraintSet::NonnegOrthant => true,
            ConstraintSet::NonnegMeanBand { epsilon } => {
                if x.is_empty() {
                    return false;
                }
                let m = x.iter().sum::<f64>() / x.len() as f64;
                (m - 1.0).abs() <= epsilon + tol
            }
            ConstraintSet::NonnegWeightedSumOne { a } => {
                a.len() == x.len() && (dot(a, x) - 1.0).abs() <= tol
            }
        }
    }
}

/// Clip to the orthant; if the mean leaves the band, project onto the
/// scaled simplex `{w ≥ 0, Σw = n·c}` for the violated bound `c`.
fn project_mean_band(x: &[f64], epsilon: f64) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let clipped: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
    let m = clipped.iter().sum::<f64>() / n as f64;
    let target = if m > 1.0 + epsilon {
        1.0 + epsilon
    } else if m < 1.0 - epsilon {
        1.0 - epsilon
    } else {
        return clipped;
    };
    project_scaled_simplex(x, target * n as f64)
}

/// Sorted-threshold projection onto `{y ≥ 0, Σy = s}`, `s > 0`.
fn project_scaled_simplex(x: &[f64], s: f64) -> Vec<f64> {
    let mut u = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - s) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    x.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// `β(τ) = max(x − τa, 0)` with `τ` chosen so that `aᵀβ(τ) = 1`.
///
/// `aᵀβ(τ)` is piecewise linear and nonincreasing with breakpoints
/// `x_l / a_l`; the active segment is found by a descending sweep and `τ`
/// solved in closed form on it. Coordinates with `a_l = 0` do not touch
/// the equality and clip to `max(x_l, 0)`.
fn project_weighted_sum_one(x: &[f64], a: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).filter(|&l| a[l] > 0.0).collect();
    let brk = |l: usize| x[l] / a[l];
    order.sort_by(|&i, &j| brk(j).total_cmp(&brk(i)));

    let mut sum_ax = 0.0;
    let mut sum_aa = 0.0;
    let mut tau = 0.0;
    for (k, &l) in order.iter().enumerate() {
        sum_ax += a[l] * x[l];
        sum_aa += a[l] * a[l];
        tau = (sum_ax - 1.0) / sum_aa;
        match order.get(k + 1) {
            Some(&next) if tau < brk(next) => continue,
            _ => break,
        }
    }
    x.iter()
        .zip(a)
        .map(|(&xl, &al)| if al > 0.0 { (xl - tau * al).max(0.0) } else { xl.max(0.0) })
        .collect()
}
