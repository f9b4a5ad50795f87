//! Weight-estimation objectives: value, analytic gradient and the feasible
//! set each one is minimised over.
//!
//! KMM and the Wasserstein-1 objective work on per-sample weights. KLIEP
//! and LSIF work on the coefficients `β` of a kernel ratio model
//! `g(z) = βᵀψ(z)` whose centres are the validation representations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{contract, Error, Result};
use crate::kernels::{BasisSet, RbfKernel};
use crate::numerics::{dot, Mat};

/// Below this the KLIEP log argument is treated as zero.
pub const KLIEP_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Kmm,
    Kliep,
    Lsif,
    W1,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] =
        [EstimatorKind::Kmm, EstimatorKind::Kliep, EstimatorKind::Lsif, EstimatorKind::W1];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Kmm => "kmm",
            EstimatorKind::Kliep => "kliep",
            EstimatorKind::Lsif => "lsif",
            EstimatorKind::W1 => "w1",
        }
    }

    /// Parametric estimators optimise `β` rather than per-sample weights.
    pub fn is_parametric(&self) -> bool {
        matches!(self, EstimatorKind::Kliep | EstimatorKind::Lsif)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}` (expected kmm, kliep, lsif or w1)")))
    }
}

/// A smooth objective minimised over a [`ConstraintSet`].
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    /// May return `+∞` outside the domain (KLIEP).
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    fn constraint(&self) -> &ConstraintSet;

    /// Both at once; quadratic objectives share one matrix product.
    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.value(x), self.gradient(x))
    }

    /// Largest Hessian eigenvalue, for objectives with a constant Hessian.
    fn curvature(&self) -> Option<f64> {
        None
    }
}

/// Power iterations used for curvature estimates.
const CURVATURE_ITERS: usize = 30;

/// `Ĵ(w) = wᵀKw − 2kᵀw` over the mean band.
#[derive(Debug, Clone)]
pub struct KmmObjective {
    gram: Mat,
    targets: Vec<f64>,
    constraint: ConstraintSet,
    curvature: f64,
}

impl KmmObjective {
    pub fn build(kernel: &RbfKernel, train: &[Vec<f64>], val: &[Vec<f64>], epsilon: f64) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return contract("KMM needs nonempty training and validation representations");
        }
        let gram = kernel.gram_sym(train)?;
        let targets = kernel.kmm_targets(train, val)?;
        Self::from_parts(gram, targets, epsilon)
    }

    pub fn from_parts(gram: Mat, targets: Vec<f64>, epsilon: f64) -> Result<Self> {
        if gram.rows() != gram.cols() || gram.rows() != targets.len() {
            return contract("KMM gram matrix and target vector disagree in size");
        }
        if !gram.is_symmetric(1e-12) {
            return contract("KMM gram matrix must be symmetric");
        }
        let curvature = 2.0 * gram.power_iteration(CURVATURE_ITERS);
        Ok(KmmObjective { gram, targets, constraint: ConstraintSet::mean_band(epsilon)?, curvature })
    }

    pub fn gram(&self) -> &Mat {
        &self.gram
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

impl Objective for KmmObjective {
    fn dim(&self) -> usize {
        self.targets.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let kw = self.gram.gemv(w).expect("dimension checked at build");
        dot(w, &kw) - 2.0 * dot(&self.targets, w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let kw = self.gram.gemv(w).expect("dimension checked at build");
        kw.iter().zip(&self.targets).map(|(a, b)| 2.0 * a - 2.0 * b).collect()
    }

    fn value_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let kw = self.gram.gemv(w).expect("dimension checked at build");
        let value = dot(w, &kw) - 2.0 * dot(&self.targets, w);
        (value, kw.iter().zip(&self.targets).map(|(a, b)| 2.0 * a - 2.0 * b).collect())
    }

    fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }

    fn curvature(&self) -> Option<f64> {
        Some(self.curvature)
    }
}

/// Linear-in-parameter ratio model `g(z) = βᵀψ(z)`.
#[derive(Debug, Clone)]
pub struct RatioModel {
    pub basis: BasisSet,
    pub kernel: RbfKernel,
}

impl RatioModel {
    pub fn new(basis: BasisSet, kernel: RbfKernel) -> Self {
        RatioModel { basis, kernel }
    }

    pub fn num_params(&self) -> usize {
        self.basis.len()
    }

    /// `w_i = βᵀψ(z_i)`; negative roundoff is clipped to zero.
    pub fn weights_from_params(&self, beta: &[f64], reps: &[Vec<f64>]) -> Result<Vec<f64>> {
        if beta.len() != self.basis.len() {
            return contract(format!("β has length {}, basis has {}", beta.len(), self.basis.len()));
        }
        Ok(reps
            .iter()
            .map(|z| dot(beta, &self.basis.features(&self.kernel, z)).max(0.0))
            .collect())
    }
}

/// `Ĵ(β) = −(1/n_v) Σ_j log βᵀψ(z_j^v)` subject to `β ≥ 0, βᵀψ̄_tr = 1`.
#[derive(Debug, Clone)]
pub struct KliepObjective {
    model: RatioModel,
    val_features: Mat,
    constraint: ConstraintSet,
}

impl KliepObjective {
    pub fn build(basis: BasisSet, kernel: RbfKernel, train: &[Vec<f64>], val: &[Vec<f64>]) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return contract("KLIEP needs nonempty training and validation representations");
        }
        let mean_train = basis.mean_features(&kernel, train);
        let val_features = basis.feature_matrix(&kernel, val);
        let constraint = ConstraintSet::weighted_sum_one(mean_train)?;
        Ok(KliepObjective { model: RatioModel::new(basis, kernel), val_features, constraint })
    }

    pub fn model(&self) -> &RatioModel {
        &self.model
    }

    /// The `ψ̄_tr` vector of the equality constraint.
    pub fn mean_train_features(&self) -> &[f64] {
        match &self.constraint {
            ConstraintSet::NonnegWeightedSumOne { a } => a,
            _ => unreachable!("KLIEP always uses the weighted-sum set"),
        }
    }

    /// Local curvature bound `λ_max((1/n_v) Σ ψψᵀ / (βᵀψ)²)` at `beta`.
    pub fn local_curvature(&self, beta: &[f64]) -> f64 {
        let n = self.val_features.rows();
        let b = self.val_features.cols();
        let scaled: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let row = self.val_features.row(j);
                let g = dot(beta, row).max(KLIEP_FLOOR);
                row.iter().map(|v| v / g).collect()
            })
            .collect();
        let mut acc = vec![0.0; b * b];
        for u in &scaled {
            for l in 0..b {
                for m in l..b {
                    acc[l * b + m] += u[l] * u[m];
                }
            }
        }
        let hess = Mat::from_fn(b, b, |l, m| acc[l.min(m) * b + l.max(m)] / n as f64);
        hess.power_iteration(CURVATURE_ITERS)
    }
}

impl Objective for KliepObjective {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn value(&self, beta: &[f64]) -> f64 {
        let n = self.val_features.rows();
        let mut acc = 0.0;
        for j in 0..n {
            let g = dot(beta, self.val_features.row(j));
            if !(g > KLIEP_FLOOR) {
                return f64::INFINITY;
            }
            acc += g.ln();
        }
        -acc / n as f64
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let n = self.val_features.rows();
        let mut grad = vec![0.0; beta.len()];
        for j in 0..n {
            let row = self.val_features.row(j);
            let g = dot(beta, row).max(KLIEP_FLOOR);
            for (gl, &psi) in grad.iter_mut().zip(row) {
                *gl -= psi / g;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n as f64);
        grad
    }

    fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }
}

/// `Ĵ(β) = ½βᵀĤβ − ĥᵀβ + λ1ᵀβ` subject to `β ≥ 0`.
#[derive(Debug, Clone)]
pub struct LsifObjective {
    model: RatioModel,
    h_mat: Mat,
    h_vec: Vec<f64>,
    lambda: f64,
    constraint: ConstraintSet,
    curvature: f64,
}

impl LsifObjective {
    pub fn build(
        basis: BasisSet,
        kernel: RbfKernel,
        train: &[Vec<f64>],
        val: &[Vec<f64>],
        lambda: f64,
    ) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return contract("LSIF needs nonempty training and validation representations");
        }
        let train_features = basis.feature_matrix(&kernel, train);
        let b = basis.len();
        let n_tr = train.len() as f64;
        let h_mat = Mat::from_fn(b, b, |l, m| {
            (0..train.len()).map(|i| train_features.get(i, l) * train_features.get(i, m)).sum::<f64>() / n_tr
        });
        let h_vec = basis.mean_features(&kernel, val);
        Self::from_parts(RatioModel::new(basis, kernel), h_mat, h_vec, lambda)
    }

    pub fn from_parts(model: RatioModel, h_mat: Mat, h_vec: Vec<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return contract(format!("LSIF regulariser must be >= 0, got {lambda}"));
        }
        if h_mat.rows() != h_vec.len() || h_mat.cols() != h_vec.len() {
            return contract("LSIF Ĥ and ĥ disagree in size");
        }
        let curvature = h_mat.power_iteration(CURVATURE_ITERS);
        Ok(LsifObjective { model, h_mat, h_vec, lambda, constraint: ConstraintSet::NonnegOrthant, curvature })
    }

    pub fn model(&self) -> &RatioModel {
        &self.model
    }

    pub fn h_vec(&self) -> &[f64] {
        &self.h_vec
    }
}

impl Objective for LsifObjective {
    fn dim(&self) -> usize {
        self.h_vec.len()
    }

    fn value(&self, beta: &[f64]) -> f64 {
        let hb = self.h_mat.gemv(beta).expect("dimension checked at build");
        0.5 * dot(beta, &hb) - dot(&self.h_vec, beta) + self.lambda * beta.iter().sum::<f64>()
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let hb = self.h_mat.gemv(beta).expect("dimension checked at build");
        hb.iter().zip(&self.h_vec).map(|(a, h)| a - h + self.lambda).collect()
    }

    fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }

    fn curvature(&self) -> Option<f64> {
        Some(self.curvature)
    }
}

/// Per-sample weight gradient of the Wasserstein-1 dual gap, using the
/// empirical training measure: `g_i = −Φ(z_i)/n_tr`.
pub fn w1_weight_gradient(critic_on_train: &[f64], n_tr: usize) -> Vec<f64> {
    let n = n_tr.max(1) as f64;
    critic_on_train.iter().map(|&phi| -phi / n).collect()
}

/// Dual gap `mean_v Φ − (1/n_tr) Σ w_i Φ(z_i^tr)` for a frozen critic,
/// linear in `w`.
#[derive(Debug, Clone)]
pub struct W1Objective {
    critic_on_train: Vec<f64>,
    val_mean: f64,
    constraint: ConstraintSet,
}

impl W1Objective {
    pub fn new(critic_on_train: Vec<f64>, critic_on_val: &[f64], epsilon: f64) -> Result<Self> {
        if critic_on_train.is_empty() || critic_on_val.is_empty() {
            return contract("W1 objective needs critic values on both sets");
        }
        if critic_on_train.iter().chain(critic_on_val).any(|v| !v.is_finite()) {
            return contract("critic values must be finite");
        }
        let val_mean = critic_on_val.iter().sum::<f64>() / critic_on_val.len() as f64;
        Ok(W1Objective { critic_on_train, val_mean, constraint: ConstraintSet::mean_band(epsilon)? })
    }
}

impl Objective for W1Objective {
    fn dim(&self) -> usize {
        self.critic_on_train.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.val_mean - dot(w, &self.critic_on_train) / self.critic_on_train.len() as f64
    }

    fn gradient(&self, _w: &[f64]) -> Vec<f64> {
        w1_weight_gradient(&self.critic_on_train, self.critic_on_train.len())
    }

    fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }
}
