//! Python bindings: instances, exact counts, samplers, fair reweighting,
//! evaluation, lotteries and oracle verification.

use std::collections::HashMap;
use std::sync::Arc;

use num_bigint::BigUint;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sortition::optimizer::SampledGradient;
use sortition::oracle::ExactGradient;
use sortition::{
    build_dp, build_lottery, evaluate as evaluate_panels, optimize as run_optimizer, parse_instance, verify_instance,
    DpOptions, DrawKey, Error, InstanceSource, Lottery, OptimizerConfig, PanelSampler, PlanConfig, SamplingError,
    TargetMarginals, WeightVector,
};

create_exception!(sortition_py, InfeasibleError, PyValueError);
create_exception!(sortition_py, SamplingTimeout, PyRuntimeError);

fn to_py(e: impl Into<Error>) -> PyErr {
    let e = e.into();
    let msg = e.to_string();
    match e {
        Error::Sampling(SamplingError::Infeasible { .. } | SamplingError::ZeroCount) => InfeasibleError::new_err(msg),
        Error::Instance(sortition::InstanceError::InfeasibleByCounting { .. }) => InfeasibleError::new_err(msg),
        Error::Sampling(SamplingError::Timeout { .. }) => SamplingTimeout::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

/// A pool, its features and quotas, and the panel size.
#[pyclass(frozen, from_py_object, name = "Instance")]
#[derive(Clone)]
struct PyInstance {
    inner: Arc<sortition::Instance>,
}

#[pymethods]
impl PyInstance {
    #[staticmethod]
    fn from_json(path: &str) -> PyResult<Self> {
        let inst = parse_instance(InstanceSource::Json(path.as_ref())).map_err(to_py)?;
        Ok(Self { inner: Arc::new(inst) })
    }

    #[staticmethod]
    fn from_json_str(text: &str) -> PyResult<Self> {
        let inst = parse_instance(InstanceSource::JsonBytes(text.as_bytes())).map_err(to_py)?;
        Ok(Self { inner: Arc::new(inst) })
    }

    #[staticmethod]
    fn from_csv(pool: &str, quotas: &str, panel_size: usize) -> PyResult<Self> {
        let inst = parse_instance(InstanceSource::CsvPair {
            pool: pool.as_ref(),
            quotas: quotas.as_ref(),
            panel_size,
        })
        .map_err(to_py)?;
        Ok(Self { inner: Arc::new(inst) })
    }

    #[getter]
    fn pool_size(&self) -> usize {
        self.inner.pool_size()
    }

    #[getter]
    fn panel_size(&self) -> usize {
        self.inner.panel_size()
    }

    #[getter]
    fn features(&self) -> Vec<String> {
        self.inner.features().iter().map(|f| f.name.clone()).collect()
    }

    #[getter]
    fn member_ids(&self) -> Vec<String> {
        (0..self.inner.pool_size()).map(|i| self.inner.member_id(i).to_string()).collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!(
            "Instance(pool_size={}, panel_size={}, features={:?})",
            self.inner.pool_size(),
            self.inner.panel_size(),
            self.features()
        )
    }
}

impl PyInstance {
    fn weights(&self, weights: Option<Vec<u64>>) -> PyResult<WeightVector> {
        match weights {
            Some(w) => WeightVector::new(w).map_err(to_py),
            None => Ok(WeightVector::uniform(self.inner.pool_size())),
        }
    }

    fn indices(&self, panel: &[String]) -> PyResult<Vec<usize>> {
        let mut out = panel
            .iter()
            .map(|id| {
                self.inner
                    .member_index(id)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown member '{id}'")))
            })
            .collect::<PyResult<Vec<usize>>>()?;
        out.sort_unstable();
        Ok(out)
    }
}

/// Exact (weighted) number of panels meeting the quotas of `features`
/// (all features when omitted).
#[pyfunction]
#[pyo3(signature = (instance, features=None, weights=None))]
fn count(py: Python<'_>, instance: &PyInstance, features: Option<Vec<String>>, weights: Option<Vec<u64>>) -> PyResult<BigUint> {
    let inst = &instance.inner;
    let wanted = match features {
        Some(names) => inst.resolve_features(&names).map_err(to_py)?,
        None => (0..inst.features().len()).collect(),
    };
    let w = instance.weights(weights)?;
    let options = DpOptions {
        retain_counts: false,
        ..DpOptions::default()
    };
    py.detach(|| build_dp(inst, &wanted, &w, None, &options).map(|t| t.total_count()))
        .map_err(to_py)
}

/// Exact sampler from the weighted panel distribution, with rejection for
/// features left out of the counting table.
#[pyclass(frozen, name = "Sampler")]
struct PySampler {
    instance: PyInstance,
    inner: PanelSampler,
}

#[pymethods]
impl PySampler {
    #[new]
    #[pyo3(signature = (instance, weights=None, seed=0))]
    fn new(py: Python<'_>, instance: PyInstance, weights: Option<Vec<u64>>, seed: u64) -> PyResult<Self> {
        let w = instance.weights(weights)?;
        let config = PlanConfig {
            seed,
            ..PlanConfig::default()
        };
        let inner = py
            .detach(|| PanelSampler::build(instance.inner.clone(), &w, &config))
            .map_err(to_py)?;
        Ok(Self { instance, inner })
    }

    /// Weighted count of the panels admitted by the counting table.
    #[getter]
    fn table_count(&self) -> BigUint {
        self.inner.table().total_count()
    }

    #[getter]
    fn dp_features(&self) -> Vec<String> {
        self.inner.plan().dp_features.clone()
    }

    #[getter]
    fn deferred_features(&self) -> Vec<String> {
        self.inner.plan().deferred_features.clone()
    }

    /// `num` panels (member id lists) on streams `0..num` of `seed`.
    #[pyo3(signature = (num, seed=0))]
    fn sample(&self, py: Python<'_>, num: usize, seed: u64) -> PyResult<Vec<Vec<String>>> {
        let panels = py.detach(|| self.inner.sample_many(seed, num)).map_err(to_py)?;
        Ok(panels.into_iter().map(|p| p.members).collect())
    }

    fn reweighted(&self, py: Python<'_>, weights: Vec<u64>) -> PyResult<Self> {
        let w = WeightVector::new(weights).map_err(to_py)?;
        let inner = py.detach(|| self.inner.reweighted(&w)).map_err(to_py)?;
        Ok(Self {
            instance: self.instance.clone(),
            inner,
        })
    }
}

/// Fits integer member weights whose panel distribution has the target
/// selection probabilities (member id -> probability).
#[pyfunction]
#[pyo3(signature = (instance, targets, exact=false, batch_size=10_000, max_iters=200, grad_tol=1e-3, seed=0))]
#[allow(clippy::too_many_arguments)]
fn optimize<'py>(
    py: Python<'py>,
    instance: &PyInstance,
    targets: HashMap<String, f64>,
    exact: bool,
    batch_size: usize,
    max_iters: usize,
    grad_tol: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let inst = instance.inner.clone();
    let goal = TargetMarginals::from_map(&inst, &targets).map_err(to_py)?;
    let config = OptimizerConfig {
        batch_size,
        max_iters,
        grad_tol,
        seed,
        ..OptimizerConfig::default()
    };
    let outcome = py
        .detach(|| -> Result<_, Error> {
            if exact {
                let mut source = ExactGradient::new(&inst)?;
                Ok(run_optimizer(&mut source, &goal, &config)?)
            } else {
                let sampler = PanelSampler::build(inst.clone(), &WeightVector::uniform(inst.pool_size()), &PlanConfig::default())?;
                let mut source = SampledGradient::new(sampler, batch_size, seed);
                Ok(run_optimizer(&mut source, &goal, &config)?)
            }
        })
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("weights", outcome.weights.as_slice().to_vec())?;
    out.set_item("theta", outcome.iterate.theta.clone())?;
    out.set_item("converged", outcome.converged)?;
    out.set_item("diverging", outcome.diverging)?;
    out.set_item("iterations", outcome.iterate.grad_norm_history.len())?;
    out.set_item("grad_norms", outcome.iterate.grad_norm_history.clone())?;
    out.set_item("warning", outcome.warning.clone())?;
    Ok(out)
}

/// Selection-probability estimates, fairness and diversity of `panels`.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, instance: &PyInstance, panels: Vec<Vec<String>>) -> PyResult<Bound<'py, PyDict>> {
    let idx = panels
        .iter()
        .map(|p| instance.indices(p))
        .collect::<PyResult<Vec<_>>>()?;
    let report = evaluate_panels(&instance.inner, &idx);
    let out = PyDict::new(py);
    let marginals: HashMap<&str, f64> = report.marginals.members.iter().map(|m| (m.id.as_str(), m.point)).collect();
    out.set_item("marginals", marginals)?;
    out.set_item("gini", report.fairness.gini)?;
    out.set_item("geometric_mean", report.fairness.geometric_mean)?;
    out.set_item("min_probability", report.fairness.min)?;
    out.set_item("max_probability", report.fairness.max)?;
    out.set_item("expected_vector_count", report.diversity.expected_vector_count)?;
    out.set_item("total_correlation", report.diversity.total_correlation)?;
    out.set_item("pairwise_nmi", report.diversity.pairwise_nmi.clone())?;
    Ok(out)
}

/// Maximum deviation of lottery selection frequencies from selection
/// probabilities that holds with probability `1 - delta`.
#[pyfunction]
fn deviation_bound(n: usize, m: usize, delta: f64) -> f64 {
    sortition::deviation_bound(n, m, delta)
}

/// A lottery of `m` panels as JSON lines (header first).
#[pyfunction]
#[pyo3(signature = (sampler, m, seed=0, delta=0.05))]
fn lottery(py: Python<'_>, sampler: &PySampler, m: usize, seed: u64, delta: f64) -> PyResult<String> {
    let lot = py.detach(|| build_lottery(&sampler.inner, m, seed, delta)).map_err(to_py)?;
    Ok(lot.to_jsonl())
}

/// Panel `index` of a lottery in JSON-lines form.
#[pyfunction]
fn lottery_draw(text: &str, index: u64) -> PyResult<Vec<String>> {
    let lot = Lottery::read(text.as_bytes()).map_err(to_py)?;
    let (_, members) = lot.draw(DrawKey::Index(index)).map_err(to_py)?;
    Ok(members.to_vec())
}

/// Cross-checks counting, pruning and sampling against enumeration.
#[pyfunction]
#[pyo3(signature = (instance, samples=20_000, seed=0))]
fn verify<'py>(py: Python<'py>, instance: &PyInstance, samples: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(|| verify_instance(&instance.inner, samples, seed))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("enumerated_panels", r.enumerated_panels)?;
    out.set_item("dp_count", r.dp_count)?;
    out.set_item("counts_match", r.counts_match)?;
    out.set_item("pruning_violations", r.pruning_violations)?;
    out.set_item("tv_distance", r.tv_distance)?;
    out.set_item("tv_bound", r.tv_bound)?;
    out.set_item("passed", r.passed)?;
    Ok(out)
}

#[pymodule]
fn sortition_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInstance>()?;
    m.add_class::<PySampler>()?;
    m.add_function(wrap_pyfunction!(count, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(deviation_bound, m)?)?;
    m.add_function(wrap_pyfunction!(lottery, m)?)?;
    m.add_function(wrap_pyfunction!(lottery_draw, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add("SamplingTimeout", m.py().get_type::<SamplingTimeout>())?;
    Ok(())
}
