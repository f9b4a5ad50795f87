//! Python bindings: projections, the weight store, kernels, weight
//! estimation on fixed representations and full training runs.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use driftwt::config::ExperimentSpec;
use driftwt::constraints::ConstraintSet as RsSet;
use driftwt::kernels::RbfKernel as RsKernel;
use driftwt::numerics::Rng;
use driftwt::objectives::EstimatorKind;
use driftwt::ratiobench::{self, BenchConfig};
use driftwt::trainer::{self, TrainConfig};
use driftwt::weights::WeightStore as RsStore;

fn py_err(e: driftwt::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "ConstraintSet", module = "driftwt_py", from_py_object)]
#[derive(Clone)]
struct ConstraintSet(RsSet);

#[pymethods]
impl ConstraintSet {
    /// `{w >= 0, |mean(w) - 1| <= epsilon}`
    #[staticmethod]
    fn mean_band(epsilon: f64) -> PyResult<Self> {
        RsSet::mean_band(epsilon).map(Self).map_err(py_err)
    }

    /// `{b >= 0, a.b = 1}`
    #[staticmethod]
    fn weighted_sum_one(a: Vec<f64>) -> PyResult<Self> {
        RsSet::weighted_sum_one(a).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn orthant() -> Self {
        Self(RsSet::NonnegOrthant)
    }

    fn project(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.project(&x).map_err(py_err)
    }

    #[pyo3(signature = (x, tol = 1e-8))]
    fn is_feasible(&self, x: Vec<f64>, tol: f64) -> bool {
        self.0.is_feasible(&x, tol)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyclass(name = "WeightStore", module = "driftwt_py")]
struct WeightStore(RsStore);

#[pymethods]
impl WeightStore {
    #[new]
    fn new(n: usize) -> PyResult<Self> {
        RsStore::new(n).map(Self).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn gather(&self, indices: Vec<usize>) -> PyResult<Vec<f64>> {
        self.0.gather(&indices).map_err(py_err)
    }

    fn scatter(&mut self, indices: Vec<usize>, values: Vec<f64>) -> PyResult<()> {
        self.0.scatter(&indices, &values).map_err(py_err)
    }

    fn reset(&mut self) {
        self.0.reset();
    }
}

#[pyclass(name = "RbfKernel", module = "driftwt_py")]
struct RbfKernel(RsKernel);

#[pymethods]
impl RbfKernel {
    #[new]
    fn new(sigma: f64) -> PyResult<Self> {
        RsKernel::new(sigma).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn median_heuristic(points: Vec<Vec<f64>>) -> Self {
        Self(RsKernel::median_heuristic(&points))
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma()
    }

    fn gram(&self, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.0.gram(&a, &b).map_err(py_err)?;
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }
}

/// Per-sample weights for `train` from one estimator solved to convergence.
#[pyfunction]
#[pyo3(signature = (estimator, train, val, epsilon = 0.1, sigma = None, lam = 1e-5, seed = 0))]
fn estimate_weights(
    estimator: &str,
    train: Vec<Vec<f64>>,
    val: Vec<Vec<f64>>,
    epsilon: f64,
    sigma: Option<f64>,
    lam: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let kind: EstimatorKind = estimator.parse().map_err(py_err)?;
    let cfg = BenchConfig { epsilon, sigma, lambda: lam, ..BenchConfig::default() };
    ratiobench::estimate_weights(kind, &train, &val, &cfg, &mut Rng::new(seed)).map_err(py_err)
}

/// Scale-normalised squared error between estimated and true weights.
#[pyfunction]
fn we_nmse(estimated: Vec<f64>, oracle: Vec<f64>) -> PyResult<f64> {
    driftwt::metrics::we_nmse(&estimated, &oracle).map_err(py_err)
}

/// Default training settings as TOML.
#[pyfunction]
fn default_train_config() -> String {
    toml_of(&TrainConfig::default())
}

fn toml_of(cfg: &TrainConfig) -> String {
    ExperimentSpec { train: cfg.clone(), ..ExperimentSpec::default() }.to_toml()
}

/// Runs one trial of a TOML experiment spec and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (spec, seed = None))]
fn train(py: Python<'_>, spec: &str, seed: Option<u64>) -> PyResult<String> {
    let spec = ExperimentSpec::parse(spec).map_err(py_err)?;
    let seed = seed.or_else(|| spec.trial_seeds().first().copied()).unwrap_or(0);
    py.detach(|| {
        let data = spec.dataset()?.build(seed)?;
        let report = trainer::train(&data, &TrainConfig { seed, ..spec.train.clone() })?;
        Ok::<_, driftwt::Error>(report.to_json())
    })
    .map_err(py_err)
}

/// `(name, passed, detail)` for each built-in invariant check.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    driftwt::selftest::run().into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect()
}

#[pymodule]
fn driftwt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ConstraintSet>()?;
    m.add_class::<WeightStore>()?;
    m.add_class::<RbfKernel>()?;
    m.add_function(wrap_pyfunction!(estimate_weights, m)?)?;
    m.add_function(wrap_pyfunction!(we_nmse, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
