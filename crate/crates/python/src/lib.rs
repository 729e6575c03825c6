//! Python bindings: the LDP feature mechanisms, the privacy accountant, graph
//! construction, ranking metrics and the full experiment runner.

use dipsgnn_core::eval::{self, ExperimentConfig};
use dipsgnn_core::gnn::model;
use dipsgnn_core::graph_pipeline;
use dipsgnn_core::{ldp_feature, privacy_accountant};
use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: dipsgnn_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Privacy budget with the calibrated aggregation noise scale.
#[pyclass(name = "PrivacySpec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPrivacySpec {
    inner: privacy_accountant::PrivacySpec,
}

#[pymethods]
impl PyPrivacySpec {
    #[new]
    #[pyo3(signature = (epsilon1, epsilon2, delta, steps = 1, embed_norm = 1.0))]
    fn new(epsilon1: f64, epsilon2: f64, delta: f64, steps: usize, embed_norm: f64) -> PyResult<Self> {
        let inner = privacy_accountant::PrivacySpec::calibrated(epsilon1, epsilon2, delta, steps, embed_norm).map_err(py_err)?;
        Ok(PyPrivacySpec { inner })
    }

    #[getter]
    fn epsilon1(&self) -> f64 {
        self.inner.epsilon1
    }

    #[getter]
    fn epsilon2(&self) -> f64 {
        self.inner.epsilon2
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn embed_norm(&self) -> f64 {
        self.inner.embed_norm
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    fn recomputed_epsilon2(&self) -> f64 {
        self.inner.recomputed_epsilon2()
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!(
            "PrivacySpec(epsilon1={}, epsilon2={}, delta={}, steps={}, embed_norm={}, sigma={})",
            s.epsilon1, s.epsilon2, s.delta, s.steps, s.embed_norm, s.sigma
        )
    }
}

#[pyfunction]
fn pm_range_constant(epsilon: f64) -> PyResult<f64> {
    ldp_feature::pm_range_constant(epsilon).map_err(py_err)
}

/// Piecewise-mechanism perturbation of `x ∈ [-1, 1]`, one draw per value.
#[pyfunction]
#[pyo3(signature = (values, epsilon, seed = 0))]
fn perturb_number(values: Vec<f64>, epsilon: f64, seed: u64) -> PyResult<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    values.iter().map(|&x| ldp_feature::perturb_number(x, epsilon, &mut rng).map_err(py_err)).collect()
}

/// Unary-encoding perturbation of a one-hot vector.
#[pyfunction]
#[pyo3(signature = (onehot, epsilon, seed = 0))]
fn perturb_onehot(onehot: Vec<f64>, epsilon: f64, seed: u64) -> PyResult<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ldp_feature::perturb_onehot(&onehot, epsilon, &mut rng).map_err(py_err)
}

#[pyfunction]
fn select_k(n: usize, epsilon1: f64) -> PyResult<usize> {
    ldp_feature::select_k(n, epsilon1).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (epsilon2, delta, steps = 1, embed_norm = 1.0))]
fn calibrate_sigma(epsilon2: f64, delta: f64, steps: usize, embed_norm: f64) -> PyResult<f64> {
    privacy_accountant::calibrate_sigma(epsilon2, delta, steps, embed_norm).map_err(py_err)
}

#[pyfunction]
#[pyo3(name = "epsilon2", signature = (sigma, delta, steps = 1, embed_norm = 1.0))]
fn epsilon2_of(sigma: f64, delta: f64, steps: usize, embed_norm: f64) -> f64 {
    privacy_accountant::epsilon2(steps, embed_norm, sigma, delta)
}

/// (ε, δ)-DP bound of `steps` Gaussian releases, minimized over the Rényi order.
#[pyfunction]
#[pyo3(signature = (sensitivity, sigma, delta, steps = 1))]
fn rdp_to_dp(sensitivity: f64, sigma: f64, delta: f64, steps: usize) -> PyResult<f64> {
    let curve = privacy_accountant::rdp_of_gaussian(sensitivity, sigma, steps).map_err(py_err)?;
    privacy_accountant::rdp_to_dp(curve, delta).map_err(py_err)
}

#[pyfunction]
fn delta_default(num_edges: usize) -> PyResult<f64> {
    privacy_accountant::delta_default(num_edges).map_err(py_err)
}

/// Local graph of an item-index sequence as a dict with `node_items`,
/// `positions`, `a_out` and `a_in`.
#[pyfunction]
fn build_graph<'py>(py: Python<'py>, sequence: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let g = graph_pipeline::build_graph_from_indices(&sequence).map_err(py_err)?;
    let rows = |a: &Array2<u32>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let out = PyDict::new(py);
    out.set_item("node_items", g.node_items.clone())?;
    out.set_item("positions", g.positions.clone())?;
    out.set_item("a_out", rows(&g.a_out))?;
    out.set_item("a_in", rows(&g.a_in))?;
    Ok(out)
}

#[pyfunction]
fn clip_rows(rows: Vec<Vec<f64>>, embed_norm: f64) -> PyResult<Vec<Vec<f64>>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let flat: Vec<f64> = rows.concat();
    let h = Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(model::clip_rows(&h, embed_norm).rows().into_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn rank_items(scores: Vec<f64>) -> PyResult<Vec<usize>> {
    eval::rank_items(&scores).map_err(py_err)
}

#[pyfunction]
fn recall_at_k(ranked: Vec<usize>, label: usize, k: usize) -> PyResult<f64> {
    eval::recall_at_k(&ranked, label, k).map_err(py_err)
}

#[pyfunction]
fn mrr_at_k(ranked: Vec<usize>, label: usize, k: usize) -> PyResult<f64> {
    eval::mrr_at_k(&ranked, label, k).map_err(py_err)
}

/// Runs every cell of a TOML experiment config and returns the report rows
/// as dicts. Relative data paths resolve against the working directory.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config = ExperimentConfig::from_toml(config_toml).map_err(py_err)?;
    let report = py.detach(|| eval::run_experiment(&config)).map_err(py_err)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.method.name())?;
            d.set_item("epsilon1", r.epsilon1)?;
            d.set_item("epsilon2", r.epsilon2)?;
            d.set_item("delta", r.delta)?;
            d.set_item("steps", r.steps)?;
            d.set_item("embed_norm", r.embed_norm)?;
            d.set_item("sigma", r.sigma)?;
            d.set_item("seed", r.seed)?;
            d.set_item("epochs", r.epochs)?;
            d.set_item("split", &r.split)?;
            d.set_item("metric", &r.metric)?;
            d.set_item("k", r.k)?;
            d.set_item("value", r.value)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn dipsgnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPrivacySpec>()?;
    m.add_function(wrap_pyfunction!(pm_range_constant, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_number, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_onehot, m)?)?;
    m.add_function(wrap_pyfunction!(select_k, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon2_of, m)?)?;
    m.add_function(wrap_pyfunction!(rdp_to_dp, m)?)?;
    m.add_function(wrap_pyfunction!(delta_default, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(clip_rows, m)?)?;
    m.add_function(wrap_pyfunction!(rank_items, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mrr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
