//! Gaussian RBF kernel: Gram matrices, KMM targets, and basis features
//! centred on validation representations.

use crate::error::{contract, Result};
use crate::numerics::{median, sq_dist, Mat};

/// `k(a, b) = exp(−‖a − b‖² / (2σ²))`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    sigma: f64,
}

impl RbfKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return contract(format!("kernel width must be positive and finite, got {sigma}"));
        }
        Ok(RbfKernel { sigma })
    }

    /// Width from the median pairwise distance of `points`. Falls back to
    /// 1.0 when every pair coincides.
    pub fn median_heuristic(points: &[Vec<f64>]) -> Self {
        let mut dists = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
        for i in 0..points.len() {
            for j in 0..i {
                dists.push(sq_dist(&points[i], &points[j]).sqrt());
            }
        }
        let med = median(&mut dists);
        let sigma = if med.is_finite() && med > 1e-12 { med } else { 1.0 };
        RbfKernel { sigma }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        (-sq_dist(a, b) / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn gram(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Mat> {
        check_dims(a, b)?;
        let mut m = Mat::zeros(a.len(), b.len());
        for (i, ai) in a.iter().enumerate() {
            for (j, bj) in b.iter().enumerate() {
                m.set(i, j, self.eval(ai, bj));
            }
        }
        Ok(m)
    }

    /// Symmetric Gram matrix of one point set; diagonal is exactly 1.
    pub fn gram_sym(&self, a: &[Vec<f64>]) -> Result<Mat> {
        check_dims(a, a)?;
        let n = a.len();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
            for j in 0..i {
                let v = self.eval(&a[i], &a[j]);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        Ok(m)
    }

    /// `k_i = (n_tr / n_v) Σ_j k(train_i, val_j)`.
    pub fn kmm_targets(&self, train: &[Vec<f64>], val: &[Vec<f64>]) -> Result<Vec<f64>> {
        if train.is_empty() || val.is_empty() {
            return contract("kmm_targets needs nonempty training and validation sets");
        }
        check_dims(train, val)?;
        let scale = train.len() as f64 / val.len() as f64;
        Ok(train
            .iter()
            .map(|t| scale * val.iter().map(|v| self.eval(t, v)).sum::<f64>())
            .collect())
    }
}

fn check_dims(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|p| p.len() != d) {
        return contract("representations have mismatched dimensions");
    }
    Ok(())
}

/// Kernel centres for the linear-in-parameter ratio model.
#[derive(Debug, Clone)]
pub struct BasisSet {
    centers: Vec<Vec<f64>>,
}

impl BasisSet {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        if centers.is_empty() {
            return contract("basis set needs at least one centre");
        }
        if centers.iter().any(|c| c.iter().any(|x| !x.is_finite())) {
            return contract("basis centres must be finite");
        }
        check_dims(&centers, &centers)?;
        Ok(BasisSet { centers })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// `ψ(z) = (ψ_1(z), …, ψ_b(z))`, each entry in (0, 1].
    pub fn features(&self, kernel: &RbfKernel, z: &[f64]) -> Vec<f64> {
        self.centers.iter().map(|c| kernel.eval(z, c)).collect()
    }

    /// Per-sample feature rows.
    pub fn feature_matrix(&self, kernel: &RbfKernel, zs: &[Vec<f64>]) -> Mat {
        Mat::from_fn(zs.len(), self.len(), |i, l| kernel.eval(&zs[i], &self.centers[l]))
    }

    /// Column mean of the feature rows of `zs`.
    pub fn mean_features(&self, kernel: &RbfKernel, zs: &[Vec<f64>]) -> Vec<f64> {
        let mut acc = vec![0.0; self.len()];
        for z in zs {
            for (a, f) in acc.iter_mut().zip(self.features(kernel, z)) {
                *a += f;
            }
        }
        let n = zs.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn pts(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn gram_examples() {
        let k = RbfKernel::new(1.0).unwrap();
        let x = vec![vec![0.3, -1.0]];
        assert_eq!(k.gram(&x, &x).unwrap().get(0, 0), 1.0);
        let g = k.gram(&[vec![0.0]], &[vec![2.0]]).unwrap();
        assert!((g.get(0, 0) - (-2.0f64).exp()).abs() < 1e-15);
        assert!((g.get(0, 0) - 0.1353352832366127).abs() < 1e-15);
    }

    #[test]
    fn gram_is_symmetric_psd_unit_diagonal() {
        let mut rng = Rng::new(1);
        let k = RbfKernel::new(0.8).unwrap();
        for _ in 0..20 {
            let p = pts(&mut rng, 5, 2);
            let g = k.gram(&p, &p).unwrap();
            assert!(g.is_symmetric(1e-12));
            for i in 0..5 {
                assert_eq!(g.get(i, i), 1.0);
            }
            assert!(g.min_eigenvalue(2000) >= -1e-10);
        }
    }

    #[test]
    fn gram_dimension_mismatch() {
        let k = RbfKernel::new(1.0).unwrap();
        assert!(k.gram(&[vec![0.0]], &[vec![0.0, 1.0]]).is_err());
        assert!(RbfKernel::new(0.0).is_err());
        assert!(RbfKernel::new(-1.0).is_err());
    }

    #[test]
    fn kmm_targets_examples() {
        let wide = RbfKernel::new(1e9).unwrap();
        let mut rng = Rng::new(2);
        let p = pts(&mut rng, 4, 1);
        for t in wide.kmm_targets(&p, &p).unwrap() {
            assert!((t - 4.0).abs() < 1e-9);
        }
        let k = RbfKernel::new(1.0).unwrap();
        assert_eq!(k.kmm_targets(&[vec![0.5]], &[vec![0.5]]).unwrap(), vec![1.0]);

        let train = vec![vec![0.0], vec![1.0]];
        let val = vec![vec![0.5], vec![-1.0], vec![2.0]];
        let got = k.kmm_targets(&train, &val).unwrap();
        for (i, t) in train.iter().enumerate() {
            let mut s = 0.0;
            for v in &val {
                s += (-(t[0] - v[0]).powi(2) / 2.0).exp();
            }
            assert!((got[i] - s * 2.0 / 3.0).abs() < 1e-14);
        }
        assert!(k.kmm_targets(&train, &[]).is_err());
    }

    #[test]
    fn features_examples() {
        let k = RbfKernel::new(1.0).unwrap();
        let basis = BasisSet::new(vec![vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(basis.features(&k, &[1.0])[1], 1.0);
        let f = basis.features(&k, &[0.5]);
        assert!((f[0] - (-0.125f64).exp()).abs() < 1e-15);
        assert!((f[1] - (-0.125f64).exp()).abs() < 1e-15);
        let narrow = RbfKernel::new(1e-3).unwrap();
        assert!(basis.features(&narrow, &[0.5]).iter().all(|&v| v < 1e-100));
        assert!(BasisSet::new(vec![]).is_err());
    }

    #[test]
    fn mean_features_matches_column_mean() {
        let mut rng = Rng::new(9);
        let k = RbfKernel::new(1.3).unwrap();
        let basis = BasisSet::new(pts(&mut rng, 6, 3)).unwrap();
        let zs = pts(&mut rng, 17, 3);
        let mean = basis.mean_features(&k, &zs);
        let fm = basis.feature_matrix(&k, &zs);
        for l in 0..6 {
            let col: f64 = (0..17).map(|i| fm.get(i, l)).sum::<f64>() / 17.0;
            assert!((col - mean[l]).abs() < 1e-12);
        }
        assert!(fm.as_slice().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn median_heuristic_scale() {
        let k = RbfKernel::median_heuristic(&[vec![0.0], vec![1.0], vec![3.0]]);
        assert_eq!(k.sigma(), 2.0);
        assert_eq!(RbfKernel::median_heuristic(&[vec![1.0], vec![1.0]]).sigma(), 1.0);
    }
}
