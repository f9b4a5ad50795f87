//! One-hidden-layer classifier with softmax cross-entropy and hand-written
//! backprop, plus the two sample transformations used for weight
//! estimation (loss value and normalised hidden activation).
//!
//! Parameter layout: `[W₁ (h×d), b₁ (h), W₂ (C×h), b₂ (C)]`.

use crate::error::{contract, Result};
use crate::numerics::{dot, Rng};
use crate::optim::{Optimizer, OptimizerKind};

/// Floor applied to per-sample losses so they stay strictly positive.
pub const LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Classifier {
    input_dim: usize,
    hidden: usize,
    classes: usize,
    params: Vec<f64>,
    optimizer: Optimizer,
}

/// Per-sample losses with the activations needed for backprop.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub losses: Vec<f64>,
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
    hidden: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

impl LossBatch {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn hidden(&self) -> &[Vec<f64>] {
        &self.hidden
    }

    pub fn labels(&self) -> &[usize] {
        &self.ys
    }
}

/// Representations of one class inside a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroup {
    pub class: usize,
    /// Positions within the batch.
    pub positions: Vec<usize>,
    pub reps: Vec<Vec<f64>>,
}

impl Classifier {
    pub fn new(input_dim: usize, hidden: usize, classes: usize, optimizer: OptimizerKind, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || classes < 2 {
            return contract("classifier needs d >= 1, h >= 1 and at least two classes");
        }
        let n = hidden * input_dim + hidden + classes * hidden + classes;
        let mut params = vec![0.0; n];
        let a1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + classes) as f64).sqrt();
        for p in &mut params[..hidden * input_dim] {
            *p = rng.uniform_range(-a1, a1);
        }
        let o = hidden * input_dim + hidden;
        for p in &mut params[o..o + classes * hidden] {
            *p = rng.uniform_range(-a2, a2);
        }
        Ok(Classifier { input_dim, hidden, classes, params, optimizer: Optimizer::new(optimizer, n) })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return contract("classifier parameter vector has the wrong length");
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        (b1, w2, b2)
    }

    pub fn hidden_activation(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        let (ob1, _, _) = self.offsets();
        (0..self.hidden)
            .map(|j| (dot(&self.params[j * d..(j + 1) * d], x) + self.params[ob1 + j]).tanh())
            .collect()
    }

    fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let (_, ow2, ob2) = self.offsets();
        let hd = self.hidden;
        (0..self.classes)
            .map(|c| dot(&self.params[ow2 + c * hd..ow2 + (c + 1) * hd], h) + self.params[ob2 + c])
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_from_hidden(&self.hidden_activation(x))
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn forward_loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<LossBatch> {
        if xs.len() != ys.len() {
            return contract("inputs and labels differ in length");
        }
        if let Some(&bad) = ys.iter().find(|&&y| y >= self.classes) {
            return contract(format!("label {bad} out of range for {} classes", self.classes));
        }
        if xs.iter().any(|x| x.len() != self.input_dim) {
            return contract("input dimension mismatch");
        }
        let mut losses = Vec::with_capacity(xs.len());
        let mut hidden = Vec::with_capacity(xs.len());
        let mut probs = Vec::with_capacity(xs.len());
        for (x, &y) in xs.iter().zip(ys) {
            let h = self.hidden_activation(x);
            let z = self.logits_from_hidden(&h);
            let p = softmax(&z);
            let lse = log_sum_exp(&z);
            losses.push((lse - z[y]).max(LOSS_FLOOR));
            hidden.push(h);
            probs.push(p);
        }
        Ok(LossBatch { losses, xs: xs.to_vec(), ys: ys.to_vec(), hidden, probs })
    }

    /// `∇_θ (1/n) Σ w_i ℓ_i`.
    pub fn weighted_gradient(&self, lb: &LossBatch, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != lb.len() {
            return contract("one weight per sample is required");
        }
        let (ob1, ow2, ob2) = self.offsets();
        let (d, hd, c) = (self.input_dim, self.hidden, self.classes);
        let mut grad = vec![0.0; self.params.len()];
        let n = lb.len().max(1) as f64;
        for i in 0..lb.len() {
            let w = weights[i] / n;
            if w == 0.0 {
                continue;
            }
            let h = &lb.hidden[i];
            let x = &lb.xs[i];
            // dℓ/dlogits = p − onehot(y)
            let mut dz = lb.probs[i].clone();
            dz[lb.ys[i]] -= 1.0;
            let mut dh = vec![0.0; hd];
            for k in 0..c {
                let g = w * dz[k];
                grad[ob2 + k] += g;
                let row = ow2 + k * hd;
                for j in 0..hd {
                    grad[row + j] += g * h[j];
                    dh[j] += g * self.params[row + j];
                }
            }
            for j in 0..hd {
                let da = dh[j] * (1.0 - h[j] * h[j]);
                grad[ob1 + j] += da;
                for q in 0..d {
                    grad[j * d + q] += da * x[q];
                }
            }
        }
        Ok(grad)
    }

    /// One optimiser step on the weighted empirical risk; returns the
    /// gradient that was applied.
    pub fn weighted_update(&mut self, lb: &LossBatch, weights: &[f64], lr: f64) -> Result<Vec<f64>> {
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return contract("sample weights must be nonnegative");
        }
        let grad = self.weighted_gradient(lb, weights)?;
        self.apply_gradient(&grad, lr)?;
        Ok(grad)
    }

    /// One optimiser step along a precomputed gradient.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.params.len() {
            return contract("gradient has the wrong length");
        }
        self.optimizer.step(&mut self.params, grad, lr);
        Ok(())
    }

    /// L2-normalised hidden activations grouped by label, in ascending
    /// class order. Zero activations are left at zero.
    pub fn transform_hidden(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<Vec<ClassGroup>> {
        if xs.len() != ys.len() {
            return contract("inputs and labels differ in length");
        }
        let reps: Vec<Vec<f64>> = xs.iter().map(|x| l2_normalize(self.hidden_activation(x))).collect();
        Ok(group_by_class(&reps, ys))
    }
}

pub fn group_by_class(reps: &[Vec<f64>], ys: &[usize]) -> Vec<ClassGroup> {
    let classes = ys.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups: Vec<ClassGroup> =
        (0..classes).map(|class| ClassGroup { class, positions: Vec::new(), reps: Vec::new() }).collect();
    for (i, (r, &y)) in reps.iter().zip(ys).enumerate() {
        groups[y].positions.push(i);
        groups[y].reps.push(r.clone());
    }
    groups.retain(|g| !g.positions.is_empty());
    groups
}

pub fn l2_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Each sample becomes the one-dimensional vector `[ℓ_i]`.
pub fn transform_loss(lb: &LossBatch) -> Vec<Vec<f64>> {
    lb.losses.iter().map(|&l| vec![l]).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}
