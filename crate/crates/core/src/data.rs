//! Synthetic shifted datasets with analytic density-ratio oracles, label
//! noise injectors and class-prior-shift sampling. Labels are 0-based.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{sq_dist, Rng};

/// One split in column form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub clean_labels: Vec<usize>,
    pub noisy: Vec<bool>,
}

impl Split {
    pub fn clean(xs: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        let n = labels.len();
        Split { xs, clean_labels: labels.clone(), labels, noisy: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Split {
        Split {
            xs: idx.iter().map(|&i| self.xs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            clean_labels: idx.iter().map(|&i| self.clean_labels[i]).collect(),
            noisy: idx.iter().map(|&i| self.noisy[i]).collect(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Content hash over features (bitwise) and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for x in &self.xs {
            for v in x {
                v.to_bits().hash(&mut h);
            }
        }
        self.labels.hash(&mut h);
        self.clean_labels.hash(&mut h);
        self.noisy.hash(&mut h);
        h.finish()
    }
}

/// Spherical Gaussian mixture: class priors, per-class means and standard
/// deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub priors: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.priors.len();
        if c < 2 {
            return contract("a mixture needs at least two classes");
        }
        if self.means.len() != c || self.stds.len() != c {
            return contract("priors, means and stds must have one entry per class");
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return contract("class means must share a positive dimension");
        }
        if self.stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return contract("covariance must be positive definite (std > 0)");
        }
        if self.priors.iter().any(|p| !(*p >= 0.0)) || !(self.priors.iter().sum::<f64>() > 0.0) {
            return contract("class priors must be nonnegative with a positive sum");
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn prior(&self, y: usize) -> f64 {
        self.priors[y] / self.priors.iter().sum::<f64>()
    }

    /// Joint density `p(x, y)`.
    pub fn density(&self, x: &[f64], y: usize) -> f64 {
        let s2 = self.stds[y] * self.stds[y];
        let d = x.len() as f64;
        let norm = (2.0 * std::f64::consts::PI * s2).powf(-d / 2.0);
        self.prior(y) * norm * (-sq_dist(x, &self.means[y]) / (2.0 * s2)).exp()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Split {
        let total: f64 = self.priors.iter().sum();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.weighted_index(&self.priors, total);
            let x = self.means[y].iter().map(|m| m + self.stds[y] * rng.normal()).collect();
            xs.push(x);
            ys.push(y);
        }
        Split::clean(xs, ys)
    }
}

/// Analytic `w*(x, y) = p_te(x, y) / p_tr(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub enum RatioOracle {
    Mixture { train: MixtureSpec, test: MixtureSpec },
    /// Labels are a deterministic function of x, so only the marginal moves.
    Covariate { train_mean: f64, test_mean: f64, std: f64 },
    ClassPrior { ratios: Vec<f64> },
}

impl RatioOracle {
    pub fn ratio(&self, x: &[f64], y: usize) -> f64 {
        match self {
            RatioOracle::Mixture { train, test } => test.density(x, y) / train.density(x, y),
            RatioOracle::Covariate { train_mean, test_mean, std } => {
                let s2 = std * std;
                let a = (x[0] - train_mean).powi(2);
                let b = (x[0] - test_mean).powi(2);
                ((a - b) / (2.0 * s2)).exp()
            }
            RatioOracle::ClassPrior { ratios } => ratios[y],
        }
    }

    pub fn ratios(&self, split: &Split) -> Vec<f64> {
        split.xs.iter().zip(&split.clean_labels).map(|(x, &y)| self.ratio(x, y)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftDataset {
    pub classes: usize,
    pub dim: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub oracle: Option<RatioOracle>,
}

impl ShiftDataset {
    pub fn validate(&self) -> Result<()> {
        if self.val.is_empty() {
            return contract("validation split is empty");
        }
        if self.train.len() < 10 * self.val.len() {
            return contract(format!(
                "training split ({}) must be at least ten times the validation split ({})",
                self.train.len(),
                self.val.len()
            ));
        }
        for s in [&self.train, &self.val, &self.test] {
            if s.xs.iter().any(|x| x.len() != self.dim) || s.labels.iter().any(|&y| y >= self.classes) {
                return contract("split has inconsistent dimensions or labels");
            }
        }
        Ok(())
    }
}

/// Train from `train_spec`; validation and test from `test_spec`.
pub fn make_gaussian_mixture(
    train_spec: &MixtureSpec,
    test_spec: &MixtureSpec,
    n_tr: usize,
    n_v: usize,
    n_te: usize,
    seed: u64,
) -> Result<ShiftDataset> {
    train_spec.validate()?;
    test_spec.validate()?;
    if train_spec.classes() != test_spec.classes() || train_spec.dim() != test_spec.dim() {
        return contract("train and test mixtures disagree in classes or dimension");
    }
    let mut rng = Rng::new(seed);
    let train = train_spec.sample(n_tr, &mut rng.fork(1));
    let val = test_spec.sample(n_v, &mut rng.fork(2));
    let test = test_spec.sample(n_te, &mut rng.fork(3));
    let ds = ShiftDataset {
        classes: train_spec.classes(),
        dim: train_spec.dim(),
        train,
        val,
        test,
        oracle: Some(RatioOracle::Mixture { train: train_spec.clone(), test: test_spec.clone() }),
    };
    ds.validate()?;
    Ok(ds)
}

/// Two symmetric classes at `±separation/2` along the first axis.
pub fn two_gaussians(dim: usize, separation: f64, std: f64) -> MixtureSpec {
    let mut m0 = vec![0.0; dim];
    let mut m1 = vec![0.0; dim];
    m0[0] = -separation / 2.0;
    m1[0] = separation / 2.0;
    MixtureSpec { priors: vec![0.5, 0.5], means: vec![m0, m1], stds: vec![std, std] }
}

/// Classes on a circle of the given radius in the first two coordinates.
pub fn ring_gaussians(classes: usize, dim: usize, radius: f64, std: f64) -> MixtureSpec {
    let means = (0..classes)
        .map(|c| {
            let t = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            let mut m = vec![0.0; dim];
            m[0] = radius * t.cos();
            if dim > 1 {
                m[1] = radius * t.sin();
            }
            m
        })
        .collect();
    MixtureSpec { priors: vec![1.0; classes], means, stds: vec![std; classes] }
}

/// One-dimensional covariate shift: `p_tr = N(0,1)`, `p_te = N(1,1)`,
/// label `1[x > ½]`. The oracle is `w*(x) = exp(x − ½)`.
pub fn make_covariate_shift_1d(n_tr: usize, n_v: usize, n_te: usize, seed: u64) -> Result<ShiftDataset> {
    let mut rng = Rng::new(seed);
    let draw = |n: usize, mean: f64, rng: &mut Rng| {
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![mean + rng.normal()]).collect();
        let ys = xs.iter().map(|x| (x[0] > 0.5) as usize).collect();
        Split::clean(xs, ys)
    };
    let train = draw(n_tr, 0.0, &mut rng.fork(1));
    let val = draw(n_v, 1.0, &mut rng.fork(2));
    let test = draw(n_te, 1.0, &mut rng.fork(3));
    let ds = ShiftDataset {
        classes: 2,
        dim: 1,
        train,
        val,
        test,
        oracle: Some(RatioOracle::Covariate { train_mean: 0.0, test_mean: 1.0, std: 1.0 }),
    };
    ds.validate()?;
    Ok(ds)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return contract(format!("noise rate must be in [0, 1), got {rate}"));
    }
    Ok(())
}

/// Each training label moves to its cyclic successor with probability
/// `rate`.
pub fn inject_pair_flip(ds: &ShiftDataset, rate: f64, seed: u64) -> Result<ShiftDataset> {
    check_rate(rate)?;
    let mut out = ds.clone();
    let mut rng = Rng::new(seed);
    let c = ds.classes;
    for i in 0..out.train.len() {
        if rng.bernoulli(rate) {
            out.train.labels[i] = (out.train.clean_labels[i] + 1) % c;
            out.train.noisy[i] = true;
        }
    }
    Ok(out)
}

/// Each training label moves to a uniformly chosen other class with
/// probability `rate`.
pub fn inject_symmetric_flip(ds: &ShiftDataset, rate: f64, seed: u64) -> Result<ShiftDataset> {
    check_rate(rate)?;
    if ds.classes < 2 {
        return contract("symmetric flip needs at least two classes");
    }
    let mut out = ds.clone();
    let mut rng = Rng::new(seed);
    let c = ds.classes;
    for i in 0..out.train.len() {
        if rng.bernoulli(rate) {
            let y = out.train.clean_labels[i];
            let k = rng.below(c - 1);
            out.train.labels[i] = if k >= y { k + 1 } else { k };
            out.train.noisy[i] = true;
        }
    }
    Ok(out)
}

/// Class-prior shift from a balanced base pool. `⌈μC⌉` randomly chosen
/// classes keep `⌈majority/ρ⌉` training samples, where `majority` is the
/// smallest per-class pool size left after carving out `n_val_per_class`
/// clean validation samples per class. The test split is balanced.
pub fn make_class_prior_shift(
    base: &ShiftDataset,
    mu: f64,
    rho: f64,
    n_val_per_class: usize,
    seed: u64,
) -> Result<ShiftDataset> {
    if !(mu > 0.0 && mu < 1.0) {
        return contract(format!("minority fraction must be in (0, 1), got {mu}"));
    }
    if !(rho >= 1.0) {
        return contract(format!("imbalance ratio must be >= 1, got {rho}"));
    }
    let c = base.classes;
    let mut rng = Rng::new(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in base.train.clean_labels.iter().enumerate() {
        per_class[y].push(i);
    }
    for p in &mut per_class {
        rng.shuffle(p);
    }
    let smallest = per_class.iter().map(Vec::len).min().unwrap_or(0);
    if n_val_per_class == 0 || smallest < n_val_per_class + 1 {
        return contract(format!(
            "base pool has {smallest} samples in its smallest class, need more than {n_val_per_class}"
        ));
    }
    let majority = smallest - n_val_per_class;
    let minority = ((majority as f64 / rho).ceil() as usize).max(1);
    let n_minor = ((mu * c as f64).ceil() as usize).min(c);
    let mut order = rng.permutation(c);
    order.truncate(n_minor);
    let is_minor: Vec<bool> = (0..c).map(|y| order.contains(&y)).collect();

    let mut val_idx = Vec::new();
    let mut tr_idx = Vec::new();
    for (y, pool) in per_class.iter().enumerate() {
        val_idx.extend_from_slice(&pool[..n_val_per_class]);
        let keep = if is_minor[y] { minority } else { majority };
        tr_idx.extend_from_slice(&pool[n_val_per_class..n_val_per_class + keep]);
    }
    rng.shuffle(&mut tr_idx);
    rng.shuffle(&mut val_idx);
    let train = base.train.subset(&tr_idx);
    let val = base.train.subset(&val_idx);

    let counts = train.class_counts(c);
    let n_tr = train.len() as f64;
    let ratios = counts.iter().map(|&k| (1.0 / c as f64) / (k as f64 / n_tr)).collect();
    Ok(ShiftDataset {
        classes: c,
        dim: base.dim,
        train,
        val,
        test: base.test.clone(),
        oracle: Some(RatioOracle::ClassPrior { ratios }),
    })
}

/// Indices of the minority classes of a class-prior-shifted set (classes
/// with fewer training samples than the largest class).
pub fn minority_classes(ds: &ShiftDataset) -> Vec<usize> {
    let counts = ds.train.class_counts(ds.classes);
    let max = counts.iter().copied().max().unwrap_or(0);
    (0..ds.classes).filter(|&y| counts[y] < max).collect()
}

/// CSV with columns `split,x0..x{d-1},label,clean_label,is_noisy`.
pub fn write_csv<W: Write>(ds: &ShiftDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["split".to_string()];
    header.extend((0..ds.dim).map(|k| format!("x{k}")));
    header.extend(["label", "clean_label", "is_noisy"].map(String::from));
    w.write_record(&header)?;
    for (name, s) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for i in 0..s.len() {
            let mut rec = vec![name.to_string()];
            rec.extend(s.xs[i].iter().map(|v| format!("{v:?}")));
            rec.push(s.labels[i].to_string());
            rec.push(s.clean_labels[i].to_string());
            rec.push((s.noisy[i] as u8).to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_csv`]. The ratio oracle is not stored.
pub fn read_csv<R: Read>(input: R) -> Result<ShiftDataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let dim = header.iter().filter(|h| h.starts_with('x')).count();
    if header.len() != dim + 4 || dim == 0 {
        return contract("dataset CSV header must be split,x0..,label,clean_label,is_noisy");
    }
    let mut splits = [Split::default(), Split::default(), Split::default()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| crate::Error::Contract(format!("row {}: bad {what}", line + 2));
        let slot = match &rec[0] {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            _ => return Err(bad("split name")),
        };
        let x: Vec<f64> = (1..=dim)
            .map(|k| rec[k].parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<_>>()?;
        let label = rec[dim + 1].parse().map_err(|_| bad("label"))?;
        let clean = rec[dim + 2].parse().map_err(|_| bad("clean_label"))?;
        let noisy = match &rec[dim + 3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("is_noisy")),
        };
        let s = &mut splits[slot];
        s.xs.push(x);
        s.labels.push(label);
        s.clean_labels.push(clean);
        s.noisy.push(noisy);
    }
    let [train, val, test] = splits;
    let classes = train.labels.iter().chain(&train.clean_labels).chain(&val.labels).chain(&test.labels).max().map_or(0, |m| m + 1);
    Ok(ShiftDataset { classes: classes.max(2), dim, train, val, test, oracle: None })
}
