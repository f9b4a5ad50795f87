//! Experiment specifications read from TOML.
//!
//! A spec has top-level run settings, a `[dataset]` table, a `[train]` table
//! (with `[train.we]` and `[train.critic]`), an optional `[sweep]` grid and
//! an optional `[oracle]` table for the weight-estimation benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    inject_pair_flip, inject_symmetric_flip, make_class_prior_shift, make_covariate_shift_1d,
    make_gaussian_mixture, read_csv, ring_gaussians, two_gaussians, ShiftDataset,
};
use crate::error::{Error, Result};
use crate::ratiobench::BenchConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Symmetric { rate: f64 },
    Pair { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two isotropic Gaussians split along the first axis.
    TwoGaussians {
        dim: usize,
        separation: f64,
        std: f64,
        n_train: usize,
        n_val: usize,
        n_test: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise: Option<NoiseSpec>,
    },
    /// Classes evenly spaced on a circle.
    Ring {
        classes: usize,
        dim: usize,
        radius: f64,
        std: f64,
        n_train: usize,
        n_val: usize,
        n_test: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise: Option<NoiseSpec>,
    },
    /// `p_tr = N(0,1)`, `p_te = N(1,1)`, label `1[x > ½]`.
    Covariate1d { n_train: usize, n_val: usize, n_test: usize },
    /// A ring pool with `mu` of the classes downsampled by `rho` in training.
    ClassPrior {
        classes: usize,
        dim: usize,
        radius: f64,
        std: f64,
        pool_per_class: usize,
        val_per_class: usize,
        n_test: usize,
        mu: f64,
        rho: f64,
    },
    /// A file in the `split,x0..,label,clean_label,is_noisy` layout.
    Csv { path: PathBuf },
}

fn field_err<T>(field: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Config(format!("{field} {msg}")))
}

fn check_noise(noise: &Option<NoiseSpec>) -> Result<()> {
    match noise {
        Some(NoiseSpec::Symmetric { rate }) | Some(NoiseSpec::Pair { rate }) if !(0.0..1.0).contains(rate) => {
            field_err("noise.rate", format!("must be in [0, 1), got {rate}"))
        }
        _ => Ok(()),
    }
}

fn check_sizes(n_train: usize, n_val: usize, n_test: usize) -> Result<()> {
    if n_val == 0 {
        return field_err("n_val", "must be >= 1");
    }
    if n_test == 0 {
        return field_err("n_test", "must be >= 1");
    }
    if n_train < 10 * n_val {
        return field_err("n_train", format!("must be at least 10 * n_val = {}, got {n_train}", 10 * n_val));
    }
    Ok(())
}

impl DatasetSpec {
    /// Checks that do not need the data itself.
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::TwoGaussians { dim, std, n_train, n_val, n_test, noise, .. } => {
                if *dim == 0 {
                    return field_err("dim", "must be >= 1");
                }
                if !(*std > 0.0) {
                    return field_err("std", "must be positive");
                }
                check_sizes(*n_train, *n_val, *n_test)?;
                check_noise(noise)
            }
            DatasetSpec::Ring { classes, dim, std, n_train, n_val, n_test, noise, .. } => {
                if *classes < 2 {
                    return field_err("classes", "must be >= 2");
                }
                if *dim == 0 {
                    return field_err("dim", "must be >= 1");
                }
                if !(*std > 0.0) {
                    return field_err("std", "must be positive");
                }
                check_sizes(*n_train, *n_val, *n_test)?;
                check_noise(noise)
            }
            DatasetSpec::Covariate1d { n_train, n_val, n_test } => check_sizes(*n_train, *n_val, *n_test),
            DatasetSpec::ClassPrior { classes, dim, std, pool_per_class, val_per_class, n_test, mu, rho, .. } => {
                if *classes < 2 {
                    return field_err("classes", "must be >= 2");
                }
                if *dim == 0 {
                    return field_err("dim", "must be >= 1");
                }
                if !(*std > 0.0) {
                    return field_err("std", "must be positive");
                }
                if *val_per_class == 0 || *pool_per_class <= *val_per_class {
                    return field_err("pool_per_class", "must exceed val_per_class, which must be >= 1");
                }
                if *n_test == 0 {
                    return field_err("n_test", "must be >= 1");
                }
                if !(*mu > 0.0 && *mu < 1.0) {
                    return field_err("mu", format!("must be in (0, 1), got {mu}"));
                }
                if !(*rho >= 1.0) {
                    return field_err("rho", format!("must be >= 1, got {rho}"));
                }
                Ok(())
            }
            DatasetSpec::Csv { path } => {
                if !path.is_file() {
                    return field_err("path", format!("does not name a readable file: {}", path.display()));
                }
                Ok(())
            }
        }
    }

    /// Builds the dataset for one trial. Every random draw derives from `seed`.
    pub fn build(&self, seed: u64) -> Result<ShiftDataset> {
        let noisy = |ds: ShiftDataset, noise: &Option<NoiseSpec>| match noise {
            None => Ok(ds),
            Some(NoiseSpec::Symmetric { rate }) => inject_symmetric_flip(&ds, *rate, seed ^ 0x6e6f_6973),
            Some(NoiseSpec::Pair { rate }) => inject_pair_flip(&ds, *rate, seed ^ 0x6e6f_6973),
        };
        match self {
            DatasetSpec::TwoGaussians { dim, separation, std, n_train, n_val, n_test, noise } => {
                let spec = two_gaussians(*dim, *separation, *std);
                noisy(make_gaussian_mixture(&spec, &spec, *n_train, *n_val, *n_test, seed)?, noise)
            }
            DatasetSpec::Ring { classes, dim, radius, std, n_train, n_val, n_test, noise } => {
                let spec = ring_gaussians(*classes, *dim, *radius, *std);
                noisy(make_gaussian_mixture(&spec, &spec, *n_train, *n_val, *n_test, seed)?, noise)
            }
            DatasetSpec::Covariate1d { n_train, n_val, n_test } => {
                make_covariate_shift_1d(*n_train, *n_val, *n_test, seed)
            }
            DatasetSpec::ClassPrior { classes, dim, radius, std, pool_per_class, val_per_class, n_test, mu, rho } => {
                let spec = ring_gaussians(*classes, *dim, *radius, *std);
                let pool = pool_per_class * classes;
                let base = make_gaussian_mixture(&spec, &spec, pool, (pool / 10).max(1), *n_test, seed)?;
                make_class_prior_shift(&base, *mu, *rho, *val_per_class, seed ^ 0x7072_696f)
            }
            DatasetSpec::Csv { path } => read_csv(fs::File::open(path)?),
        }
    }
}

/// A full experiment: dataset, training settings and the trials to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Output directory; `--out` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Trial seeds. Empty means `0..trials`.
    pub seeds: Vec<u64>,
    pub trials: usize,
    /// Run trials concurrently.
    pub parallel: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    pub train: TrainConfig,
    /// Grid axes: dotted field path to the values it takes.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
    pub oracle: BenchConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            out: None,
            seeds: Vec::new(),
            trials: 1,
            parallel: false,
            dataset: None,
            train: TrainConfig::default(),
            sweep: BTreeMap::new(),
            oracle: BenchConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn trial_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.trials as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn dataset(&self) -> Result<&DatasetSpec> {
        self.dataset.as_ref().ok_or_else(|| Error::Config("dataset: this command needs a [dataset] table".into()))
    }

    /// Field-level checks; error messages start with the dotted field path.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() && self.trials == 0 {
            return field_err("trials", "must be >= 1 when no seeds are listed");
        }
        if !self.seeds.is_empty() && self.trials != 1 && self.trials != self.seeds.len() {
            return field_err("trials", format!("is {} but {} seeds are listed", self.trials, self.seeds.len()));
        }
        if let Some(d) = &self.dataset {
            d.validate().map_err(|e| prefix(e, "dataset."))?;
        }
        self.train.validate(usize::MAX).map_err(|e| prefix(e, "train."))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    /// Parses and validates `src`. Errors carry the offending line when one
    /// can be found.
    pub fn parse(src: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(src).map_err(|e| toml_error(src, &e))?;
        spec.validate().map_err(|e| locate(src, e))?;
        Ok(spec)
    }

    /// Reads a spec file. A relative CSV dataset path resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut spec: ExperimentSpec = toml::from_str(&src).map_err(|e| with_file(toml_error(&src, &e), path))?;
        if let Some(DatasetSpec::Csv { path: p }) = &mut spec.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        spec.validate().map_err(|e| locate(&src, e)).map_err(|e| with_file(e, path))?;
        Ok(spec)
    }

    /// One spec per grid point, in row-major order over the sorted axes.
    pub fn expand_sweep(&self) -> Result<Vec<(Vec<(String, toml::Value)>, ExperimentSpec)>> {
        let mut base = match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config("spec does not serialise to a table".into())),
        };
        base.remove("sweep");
        let axes: Vec<(&String, &Vec<toml::Value>)> = self.sweep.iter().collect();
        if axes.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::Config("sweep: every axis needs at least one value".into()));
        }
        let total: usize = axes.iter().map(|(_, v)| v.len()).product();
        let mut out = Vec::with_capacity(total);
        for mut k in 0..total {
            let mut point = Vec::new();
            let mut table = base.clone();
            for (name, values) in axes.iter().rev() {
                let v = values[k % values.len()].clone();
                k /= values.len();
                set_path(&mut table, name, v.clone())?;
                point.push(((*name).clone(), v));
            }
            point.reverse();
            let spec = ExperimentSpec::deserialize(toml::Value::Table(table))
                .map_err(|e| Error::Config(format!("sweep point {}: {e}", describe(&point))))?;
            spec.validate().map_err(|e| Error::Config(format!("sweep point {}: {e}", describe(&point))))?;
            out.push((point, spec));
        }
        Ok(out)
    }
}

pub fn describe(point: &[(String, toml::Value)]) -> String {
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let last = last.ok_or_else(|| Error::Config(format!("sweep: empty field path '{path}'")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("sweep: '{path}' crosses a non-table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn prefix(e: Error, p: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{p}{m}")),
        other => other,
    }
}

fn with_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Line (1-based) of the assignment to `path` (like `train.we.steps`).
fn line_of(src: &str, path: &str) -> Option<usize> {
    let (table, key) = match path.rsplit_once('.') {
        Some((t, k)) => (t, k),
        None => ("", path),
    };
    let mut section = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            section = h.trim_end_matches(']').trim().to_string();
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            let k = k.trim().trim_matches('"');
            let full = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if full == path || (section == table && k == key) {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Dotted path of the key assigned on `line` (1-based).
fn key_at(src: &str, line: usize) -> Option<String> {
    let mut section = String::new();
    for (i, raw) in src.lines().enumerate() {
        let l = raw.trim();
        if let Some(h) = l.strip_prefix('[') {
            section = h.trim_end_matches(']').trim().to_string();
        } else if i + 1 == line {
            let (k, _) = l.split_once('=')?;
            let k = k.trim().trim_matches('"');
            return Some(if section.is_empty() { k.to_string() } else { format!("{section}.{k}") });
        }
    }
    None
}

fn locate(src: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => {
            let field = m.split_whitespace().next().unwrap_or("");
            match line_of(src, field) {
                Some(n) => Error::Config(format!("line {n}: {m}")),
                None => Error::Config(m),
            }
        }
        other => other,
    }
}

fn toml_error(src: &str, e: &toml::de::Error) -> Error {
    let msg = e.message().trim().to_string();
    let Some(span) = e.span() else {
        return Error::Config(msg);
    };
    let line = src[..span.start.min(src.len())].matches('\n').count() + 1;
    match key_at(src, line) {
        Some(key) => Error::Config(format!("line {line}: {key}: {msg}")),
        None => Error::Config(format!("line {line}: {msg}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::EstimatorKind;

    const SPEC: &str = r#"
name = "noisy"
seeds = [0, 1, 2]

[dataset]
kind = "two_gaussians"
dim = 2
separation = 3.0
std = 1.0
n_train = 2000
n_val = 100
n_test = 2000
noise = { type = "symmetric", rate = 0.4 }

[train]
estimator = "kliep"
epochs = 100
val_batch_size = 100

[train.we]
epsilon = 0.2

[sweep]
"train.learning_rate" = [1e-3, 1e-2]
"train.estimator" = ["kmm", "w1"]
"#;

    #[test]
    fn parses_and_round_trips() {
        let spec = ExperimentSpec::parse(SPEC).unwrap();
        assert_eq!(spec.train.estimator, EstimatorKind::Kliep);
        assert_eq!(spec.train.we.epsilon, 0.2);
        assert_eq!(spec.trial_seeds(), vec![0, 1, 2]);
        let again = ExperimentSpec::parse(&spec.to_toml()).unwrap();
        assert_eq!(spec, again);
        let d = ExperimentSpec::default();
        assert_eq!(ExperimentSpec::parse(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn defaults_match_reference_values() {
        let t = TrainConfig::default();
        let table: [(&str, f64, f64); 6] = [
            ("we.steps", t.we.steps as f64, 1.0),
            ("we.lambda", t.we.lambda, 1e-5),
            ("critic.kappa", t.critic.kappa, 10.0),
            ("critic.learning_rate", t.critic.learning_rate, 1e-4),
            ("critic.warm_start_batches", t.critic.warm_start_batches as f64, 50.0),
            ("critic.updates_per_batch", t.critic.updates_per_batch as f64, 3.0),
        ];
        for (name, got, want) in table {
            assert_eq!(got, want, "{name}");
        }
        assert_eq!(ExperimentSpec::parse("").unwrap().train, t);
    }

    #[test]
    fn unknown_estimator_names_field_and_line() {
        let src = "name = \"x\"\n[train]\nestimator = \"nope\"\n";
        let msg = ExperimentSpec::parse(src).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("train.estimator"), "{msg}");
    }

    #[test]
    fn semantic_errors_reference_lines() {
        let src = "[train]\nhidden = 4\nepochs = 0\n";
        let msg = ExperimentSpec::parse(src).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("train.epochs"), "{msg}");
        let src = "[dataset]\nkind = \"covariate1d\"\nn_train = 50\nn_val = 10\nn_test = 5\n";
        let msg = ExperimentSpec::parse(src).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("dataset.n_train"), "{msg}");
        let msg = ExperimentSpec::parse("[train]\nbogus = 1\n").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn sweep_expands_in_row_major_order() {
        let spec = ExperimentSpec::parse(SPEC).unwrap();
        let points = spec.expand_sweep().unwrap();
        assert_eq!(points.len(), 4);
        let got: Vec<String> = points.iter().map(|(p, _)| describe(p)).collect();
        assert_eq!(
            got,
            [
                "train.estimator=\"kmm\",train.learning_rate=0.001",
                "train.estimator=\"kmm\",train.learning_rate=0.01",
                "train.estimator=\"w1\",train.learning_rate=0.001",
                "train.estimator=\"w1\",train.learning_rate=0.01",
            ]
        );
        assert_eq!(points[3].1.train.estimator, EstimatorKind::W1);
        assert_eq!(points[3].1.train.learning_rate, 1e-2);
        assert!(points.iter().all(|(_, s)| s.sweep.is_empty() && s.train.we.epsilon == 0.2));
    }

    #[test]
    fn datasets_build_deterministically() {
        let spec = ExperimentSpec::parse(SPEC).unwrap();
        let d = spec.dataset().unwrap();
        let a = d.build(5).unwrap();
        let b = d.build(5).unwrap();
        assert_eq!(a.train.fingerprint(), b.train.fingerprint());
        let noisy = a.train.noisy.iter().filter(|&&n| n).count() as f64 / a.train.len() as f64;
        assert!((noisy - 0.4).abs() < 0.05);
        let prior = DatasetSpec::ClassPrior {
            classes: 4,
            dim: 2,
            radius: 2.0,
            std: 1.0,
            pool_per_class: 300,
            val_per_class: 5,
            n_test: 40,
            mu: 0.5,
            rho: 10.0,
        };
        let ds = prior.build(1).unwrap();
        assert_eq!(ds.val.len(), 20);
    }
}
