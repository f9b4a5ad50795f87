//! Dense linear algebra on `f64`, a portable seeded generator, and a
//! central-difference gradient checker.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Matrices are row-major [`Mat`].

use crate::error::{contract, Error, Result};

/// Matrices at least this large use a row-parallel gemv. Each row is still
/// reduced sequentially, so results do not depend on the thread count.
const PAR_GEMV_MIN: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return contract("ragged rows in matrix literal");
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Mat { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// `m · v`.
    pub fn gemv(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return contract(format!(
                "gemv: matrix has {} columns, vector has length {}",
                self.cols,
                v.len()
            ));
        }
        if self.rows * self.cols >= PAR_GEMV_MIN {
            use rayon::prelude::*;
            return Ok(self.data.par_chunks(self.cols).map(|r| dot(r, v)).collect());
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `mᵀ · v`.
    pub fn gemv_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return contract(format!(
                "gemv_t: matrix has {} rows, vector has length {}",
                self.rows,
                v.len()
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    /// Largest eigenvalue of a symmetric PSD matrix by power iteration.
    /// Starts from the all-ones direction so the result is deterministic.
    pub fn power_iteration(&self, iters: usize) -> f64 {
        let n = self.rows;
        if n == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..iters {
            let mv = self.gemv(&v).expect("square");
            let norm = norm2(&mv);
            if norm == 0.0 {
                return 0.0;
            }
            lambda = dot(&v, &mv);
            v = mv.into_iter().map(|x| x / norm).collect();
        }
        lambda.max(dot(&v, &self.gemv(&v).expect("square")))
    }

    /// Smallest eigenvalue of a symmetric matrix, via power iteration on
    /// the shifted matrix `λ_max·I − m`.
    pub fn min_eigenvalue(&self, iters: usize) -> f64 {
        let n = self.rows;
        let frob = self.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let shift = frob.max(1e-300);
        let shifted = Mat::from_fn(n, n, |i, j| {
            let id = if i == j { shift } else { 0.0 };
            id - self.get(i, j)
        });
        // Rayleigh quotient on a deterministic, non-degenerate start vector.
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let nv = norm2(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        for _ in 0..iters {
            let mv = shifted.gemv(&v).expect("square");
            let norm = norm2(&mv);
            if norm == 0.0 {
                break;
            }
            v = mv.into_iter().map(|x| x / norm).collect();
        }
        let top = dot(&v, &shifted.gemv(&v).expect("square"));
        shift - top
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().sum::<f64>() / a.len() as f64
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Median of a list (average of the middle pair for even lengths).
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Maximum relative error between an analytic gradient and central
/// differences: `max_i |g_i − fd_i| / (|g_i| + 1e-8)`.
pub fn check_gradient<F, G>(f: F, grad: G, x: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(h > 0.0) {
        return contract("check_gradient: step must be positive");
    }
    let analytic = grad(x);
    if analytic.len() != x.len() {
        return contract("check_gradient: gradient length differs from input length");
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value near coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Seeded pseudo-random generator: xoshiro256** with state expanded from
/// the 64-bit seed by SplitMix64. The stream depends only on the seed.
///
/// Uniform doubles take the top 53 bits; normals use Box–Muller with the
/// second variate cached.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut next = || {
            sm = sm.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Rng { s: [next(), next(), next(), next()], spare_normal: None }
    }

    /// Child generator for an independent sub-stream.
    pub fn fork(&mut self, salt: u64) -> Rng {
        Rng::new(self.next_u64() ^ salt.wrapping_mul(0xA24B_AED4_963E_E407))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// Index drawn with probability proportional to `weights`; uniform
    /// when every weight is zero.
    pub fn weighted_index(&mut self, weights: &[f64], total: f64) -> usize {
        if !(total > 0.0) {
            return self.below(weights.len());
        }
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
    }
}
