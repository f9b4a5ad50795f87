//! Wasserstein-1 critic `Φ_ν(z) = w₂ᵀ tanh(W₁z + b₁) + b₂` trained on the
//! gradient-penalised dual objective.
//!
//! Parameters live in one flat vector laid out as `[W₁ (h×d, row-major),
//! b₁ (h), w₂ (h), b₂]`. All gradients are analytic, including the
//! second-order term of the penalty `(‖∇_zΦ‖ − 1)²` with respect to `ν`.

use crate::error::{contract, Result};
use crate::numerics::{dot, Rng};
use crate::optim::{AdamParams, Optimizer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticConfig {
    pub hidden: usize,
    /// Penalty coefficient κ.
    pub kappa: f64,
    pub learning_rate: f64,
    /// Minibatches trained without the penalty term.
    pub warm_start_batches: usize,
    pub updates_per_batch: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig { hidden: 16, kappa: 10.0, learning_rate: 1e-4, warm_start_batches: 50, updates_per_batch: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    input_dim: usize,
    hidden: usize,
    params: Vec<f64>,
    kappa: f64,
    optimizer: Optimizer,
}

/// Loss value and its parameter gradient.
#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Mean `‖∇_zΦ‖` over the interpolation points.
    pub mean_grad_norm: f64,
}

impl Critic {
    pub fn new(input_dim: usize, hidden: usize, kappa: f64, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return contract("critic needs positive input and hidden widths");
        }
        if !(kappa >= 0.0) {
            return contract("penalty coefficient must be >= 0");
        }
        let n = hidden * input_dim + 2 * hidden + 1;
        let mut params = vec![0.0; n];
        let a1 = (1.0 / input_dim as f64).sqrt();
        let a2 = (1.0 / hidden as f64).sqrt();
        for p in &mut params[..hidden * input_dim] {
            *p = rng.uniform_range(-a1, a1);
        }
        let w2 = hidden * input_dim + hidden;
        for p in &mut params[w2..w2 + hidden] {
            *p = rng.uniform_range(-a2, a2);
        }
        Ok(Critic { input_dim, hidden, params, kappa, optimizer: Optimizer::adam(n, AdamParams::default()) })
    }

    pub fn zeros(input_dim: usize, hidden: usize, kappa: f64) -> Self {
        let n = hidden * input_dim + 2 * hidden + 1;
        Critic { input_dim, hidden, params: vec![0.0; n], kappa, optimizer: Optimizer::adam(n, AdamParams::default()) }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return contract("critic parameter vector has the wrong length");
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn w1(&self) -> &[f64] {
        &self.params[..self.hidden * self.input_dim]
    }

    fn b1(&self) -> &[f64] {
        let o = self.hidden * self.input_dim;
        &self.params[o..o + self.hidden]
    }

    fn w2(&self) -> &[f64] {
        let o = self.hidden * self.input_dim + self.hidden;
        &self.params[o..o + self.hidden]
    }

    fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    fn hidden_act(&self, z: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        let w1 = self.w1();
        self.b1()
            .iter()
            .enumerate()
            .map(|(j, b)| (dot(&w1[j * d..(j + 1) * d], z) + b).tanh())
            .collect()
    }

    /// `Φ(z)` alone.
    pub fn value(&self, z: &[f64]) -> f64 {
        dot(self.w2(), &self.hidden_act(z)) + self.b2()
    }

    pub fn values(&self, zs: &[Vec<f64>]) -> Vec<f64> {
        zs.iter().map(|z| self.value(z)).collect()
    }

    /// `Φ(z)` and `∇_zΦ(z) = W₁ᵀ(w₂ ⊙ (1 − h²))`.
    pub fn forward(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.input_dim {
            return contract(format!("critic input has length {}, expected {}", z.len(), self.input_dim));
        }
        let h = self.hidden_act(z);
        let value = dot(self.w2(), &h) + self.b2();
        let d = self.input_dim;
        let w1 = self.w1();
        let mut grad = vec![0.0; d];
        for (j, (&hj, &w2j)) in h.iter().zip(self.w2()).enumerate() {
            let c = w2j * (1.0 - hj * hj);
            for k in 0..d {
                grad[k] += c * w1[j * d + k];
            }
        }
        Ok((value, grad))
    }

    /// Accumulate `scale · ∂Φ(z)/∂ν` into `out`.
    fn add_value_grad(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let (d, hd) = (self.input_dim, self.hidden);
        let h = self.hidden_act(z);
        let w2 = self.w2().to_vec();
        let o_b1 = hd * d;
        let o_w2 = o_b1 + hd;
        for j in 0..hd {
            let c = scale * w2[j] * (1.0 - h[j] * h[j]);
            for k in 0..d {
                out[j * d + k] += c * z[k];
            }
            out[o_b1 + j] += c;
            out[o_w2 + j] += scale * h[j];
        }
        out[o_w2 + hd] += scale;
    }

    /// Accumulate `scale · ∂(‖∇_zΦ(z)‖ − 1)²/∂ν` into `out`; returns the
    /// penalty value and `‖∇_zΦ(z)‖`.
    fn add_penalty_grad(&self, z: &[f64], scale: f64, out: &mut [f64]) -> (f64, f64) {
        let (d, hd) = (self.input_dim, self.hidden);
        let h = self.hidden_act(z);
        let w1 = self.w1().to_vec();
        let w2 = self.w2().to_vec();
        let s: Vec<f64> = h.iter().map(|hj| 1.0 - hj * hj).collect();
        let mut g = vec![0.0; d];
        for j in 0..hd {
            let c = w2[j] * s[j];
            for k in 0..d {
                g[k] += c * w1[j * d + k];
            }
        }
        let norm = dot(&g, &g).sqrt();
        let penalty = (norm - 1.0) * (norm - 1.0);
        if norm < 1e-12 {
            // Direction of ∇‖g‖ is undefined at g = 0.
            return (penalty, norm);
        }
        // r = ∂P/∂g
        let r: Vec<f64> = g.iter().map(|gk| 2.0 * (norm - 1.0) * gk / norm).collect();
        let o_b1 = hd * d;
        let o_w2 = o_b1 + hd;
        for j in 0..hd {
            let w1r = dot(&w1[j * d..(j + 1) * d], &r);
            // through w₂ⱼ
            out[o_w2 + j] += scale * s[j] * w1r;
            // through W₁ directly
            for k in 0..d {
                out[j * d + k] += scale * r[k] * w2[j] * s[j];
            }
            // through sⱼ = 1 − tanh²(aⱼ), dsⱼ/daⱼ = −2hⱼsⱼ
            let via_a = scale * w2[j] * w1r * (-2.0 * h[j] * s[j]);
            for k in 0..d {
                out[j * d + k] += via_a * z[k];
            }
            out[o_b1 + j] += via_a;
        }
        (penalty, norm)
    }

    /// Straight-line interpolates `u·z^v + (1 − u)·z^tr` for
    /// `min(n_tr, n_v)` pairs. Validation endpoints are uniform; training
    /// endpoints are drawn proportional to `weights` (uniform if all zero).
    pub fn sample_interpolates(
        train: &[Vec<f64>],
        weights: &[f64],
        val: &[Vec<f64>],
        rng: &mut Rng,
    ) -> Vec<Vec<f64>> {
        let m = train.len().min(val.len());
        let total: f64 = weights.iter().sum();
        (0..m)
            .map(|_| {
                let v = &val[rng.below(val.len())];
                let t = &train[rng.weighted_index(weights, total)];
                let u = rng.uniform();
                v.iter().zip(t).map(|(a, b)| u * a + (1.0 - u) * b).collect()
            })
            .collect()
    }

    /// Penalised dual loss at fixed interpolation points:
    /// `(1/n_tr)Σ w̄_iΦ(z_i^tr) − (1/n_v)ΣΦ(z_j^v) + κ·mean_k (‖∇Φ(z̃_k)‖ − 1)²`
    /// with `w̄ = w/mean(w)`, so the weighted training measure has unit mass
    /// and the loss stays bounded in the output bias. All-zero weights are
    /// used as given.
    pub fn loss_at(
        &self,
        train: &[Vec<f64>],
        weights: &[f64],
        val: &[Vec<f64>],
        interpolates: &[Vec<f64>],
        kappa: f64,
    ) -> Result<CriticLoss> {
        if train.is_empty() || val.is_empty() {
            return contract("critic loss needs at least one training and one validation sample");
        }
        if weights.len() != train.len() {
            return contract("one weight per training sample is required");
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return contract("critic weights must be nonnegative");
        }
        let dims_ok = train.iter().chain(val).chain(interpolates).all(|z| z.len() == self.input_dim);
        if !dims_ok {
            return contract("critic inputs have the wrong dimension");
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut value = 0.0;
        let n_tr = train.len() as f64;
        let mean_w = weights.iter().sum::<f64>() / n_tr;
        let norm = if mean_w > 0.0 { mean_w } else { 1.0 };
        for (z, &w) in train.iter().zip(weights) {
            let w = w / norm;
            value += w * self.value(z) / n_tr;
            self.add_value_grad(z, w / n_tr, &mut grad);
        }
        let n_v = val.len() as f64;
        for z in val {
            value -= self.value(z) / n_v;
            self.add_value_grad(z, -1.0 / n_v, &mut grad);
        }
        let mut norm_acc = 0.0;
        if !interpolates.is_empty() {
            let m = interpolates.len() as f64;
            if kappa > 0.0 {
                for z in interpolates {
                    let (p, norm) = self.add_penalty_grad(z, kappa / m, &mut grad);
                    value += kappa * p / m;
                    norm_acc += norm;
                }
            } else {
                for z in interpolates {
                    let g = self.forward(z)?.1;
                    norm_acc += dot(&g, &g).sqrt();
                }
            }
            norm_acc /= m;
        }
        Ok(CriticLoss { value, grad, mean_grad_norm: norm_acc })
    }

    /// Loss with freshly sampled interpolates and this critic's κ.
    pub fn penalized_loss(
        &self,
        train: &[Vec<f64>],
        weights: &[f64],
        val: &[Vec<f64>],
        rng: &mut Rng,
    ) -> Result<CriticLoss> {
        let interps = Self::sample_interpolates(train, weights, val, rng);
        self.loss_at(train, weights, val, &interps, self.kappa)
    }

    /// One Adam step on the penalised loss. With `penalty_active = false`
    /// (warm start) the penalty term is dropped.
    pub fn train_step(
        &mut self,
        train: &[Vec<f64>],
        weights: &[f64],
        val: &[Vec<f64>],
        learning_rate: f64,
        penalty_active: bool,
        rng: &mut Rng,
    ) -> Result<CriticLoss> {
        if !(learning_rate > 0.0) {
            return contract("critic learning rate must be positive");
        }
        let interps = Self::sample_interpolates(train, weights, val, rng);
        let kappa = if penalty_active { self.kappa } else { 0.0 };
        let loss = self.loss_at(train, weights, val, &interps, kappa)?;
        self.optimizer.step(&mut self.params, &loss.grad, learning_rate);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;

    #[test]
    fn zero_critic_is_flat() {
        let c = Critic::zeros(3, 4, 10.0);
        let (v, g) = c.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0; 3]);
        let loss = c.loss_at(&[vec![0.0; 3]], &[1.0], &[vec![1.0; 3]], &[], 0.0).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn small_weight_regime_is_linear() {
        // Φ(z) ≈ w₂ᵀW₁z for tiny first-layer weights, so ∇_zΦ ≈ W₁ᵀw₂.
        let mut c = Critic::zeros(2, 3, 0.0);
        let p = vec![1e-3, 2e-3, -1e-3, 0.5e-3, 3e-3, 1e-3, 0.0, 0.0, 0.0, 100.0, 200.0, -50.0, 0.0];
        c.set_params(&p).unwrap();
        let a = [100.0 * 1e-3 + 200.0 * -1e-3 - 50.0 * 3e-3, 100.0 * 2e-3 + 200.0 * 0.5e-3 - 50.0 * 1e-3];
        let (_, g) = c.forward(&[0.1, -0.2]).unwrap();
        assert!((g[0] - a[0]).abs() < 1e-3 && (g[1] - a[1]).abs() < 1e-3);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let c = Critic::new(3, 16, 10.0, &mut rng).unwrap();
            let z: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let err = check_gradient(|x| c.value(x), |x| c.forward(x).unwrap().1, &z, 1e-5).unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn parameter_gradient_includes_penalty_term() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let c = Critic::new(2, 4, 10.0, &mut rng).unwrap();
            let train: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let val: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.normal() + 1.0, rng.normal()]).collect();
            let w: Vec<f64> = (0..5).map(|_| rng.uniform_range(0.0, 2.0)).collect();
            let interps = Critic::sample_interpolates(&train, &w, &val, &mut rng);
            let f = |p: &[f64]| {
                let mut probe = c.clone();
                probe.set_params(p).unwrap();
                probe.loss_at(&train, &w, &val, &interps, 10.0).unwrap().value
            };
            let g = |p: &[f64]| {
                let mut probe = c.clone();
                probe.set_params(p).unwrap();
                probe.loss_at(&train, &w, &val, &interps, 10.0).unwrap().grad
            };
            let err = check_gradient(f, g, c.params(), 1e-6).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn matched_samples_cancel_without_penalty() {
        let mut rng = Rng::new(3);
        let c = Critic::new(2, 16, 0.0, &mut rng).unwrap();
        let pts: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let loss = c.penalized_loss(&pts, &[1.0; 6], &pts, &mut rng).unwrap();
        assert!(loss.value.abs() < 1e-14);
    }

    #[test]
    fn loss_ignores_weight_scale() {
        let mut rng = Rng::new(11);
        let c = Critic::new(2, 8, 10.0, &mut rng).unwrap();
        let tr: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let va: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0 + rng.normal(), rng.normal()]).collect();
        let w: Vec<f64> = (0..8).map(|_| rng.uniform_range(0.1, 3.0)).collect();
        let interps = Critic::sample_interpolates(&tr, &w, &va, &mut rng);
        let a = c.loss_at(&tr, &w, &va, &interps, 10.0).unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| 7.5 * v).collect();
        let b = c.loss_at(&tr, &scaled, &va, &interps, 10.0).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn zero_gradient_step_keeps_parameters() {
        let mut c = Critic::zeros(1, 2, 0.0);
        let before = c.params().to_vec();
        let mut rng = Rng::new(4);
        // All-zero parameters: the only nonzero path is b₂, whose gradient
        // mean(w) − 1 vanishes here.
        c.train_step(&[vec![1.0]], &[1.0], &[vec![1.0]], 0.1, false, &mut rng).unwrap();
        assert_eq!(c.params(), &before[..]);
    }

    #[test]
    fn critic_separates_clouds() {
        let mut rng = Rng::new(5);
        let mut c = Critic::new(1, 16, 10.0, &mut rng).unwrap();
        let train: Vec<Vec<f64>> = (0..32).map(|_| vec![-2.0 + 0.3 * rng.normal()]).collect();
        let val: Vec<Vec<f64>> = (0..32).map(|_| vec![2.0 + 0.3 * rng.normal()]).collect();
        let w = vec![1.0; 32];
        for _ in 0..200 {
            c.train_step(&train, &w, &val, 1e-2, false, &mut rng).unwrap();
        }
        let gap = crate::numerics::mean(&c.values(&val)) - crate::numerics::mean(&c.values(&train));
        assert!(gap > 0.0, "{gap}");
    }

    #[test]
    fn penalty_drives_gradient_norm_towards_one() {
        let mut rng = Rng::new(6);
        let mut c = Critic::new(1, 16, 10.0, &mut rng).unwrap();
        let train: Vec<Vec<f64>> = (0..32).map(|_| vec![-1.0 + 0.5 * rng.normal()]).collect();
        let val: Vec<Vec<f64>> = (0..32).map(|_| vec![1.0 + 0.5 * rng.normal()]).collect();
        let w = vec![1.0; 32];
        for step in 0..3000 {
            c.train_step(&train, &w, &val, 1e-2, step >= 50, &mut rng).unwrap();
        }
        let mut norms = 0.0;
        for _ in 0..20 {
            norms += c.penalized_loss(&train, &w, &val, &mut rng).unwrap().mean_grad_norm;
        }
        let mean_norm = norms / 20.0;
        assert!((0.5..=1.5).contains(&mean_norm), "{mean_norm}");
    }

    #[test]
    fn long_training_stays_bounded() {
        let mut rng = Rng::new(7);
        let mut c = Critic::new(2, 16, 10.0, &mut rng).unwrap();
        let train: Vec<Vec<f64>> = (0..16).map(|_| vec![rng.uniform_range(-1.0, 1.0), rng.uniform()]).collect();
        let val: Vec<Vec<f64>> = (0..16).map(|_| vec![rng.uniform_range(0.0, 2.0), rng.uniform()]).collect();
        let w = vec![1.0; 16];
        for _ in 0..10_000 {
            c.train_step(&train, &w, &val, 1e-3, true, &mut rng).unwrap();
        }
        assert!(c.params().iter().all(|p| p.is_finite() && p.abs() < 1e6));
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Critic::zeros(2, 2, 1.0);
        assert!(c.forward(&[1.0]).is_err());
        assert!(c.loss_at(&[vec![0.0, 0.0]], &[-1.0], &[vec![0.0, 0.0]], &[], 1.0).is_err());
        assert!(c.loss_at(&[], &[], &[vec![0.0, 0.0]], &[], 1.0).is_err());
    }
}
