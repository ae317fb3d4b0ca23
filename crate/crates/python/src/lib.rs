//! Python bindings for the `rsmpi` solver.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rsmpi::approx::{run_approx_mpi, ApproxConfig};
use rsmpi::io;
use rsmpi::model::{self, DeterministicPolicy, MdpModel, RiskParams};
use rsmpi::mpi::{self, MpiConfig, MpiTrace};
use rsmpi::operators::PositiveValueVector;
use rsmpi::oracles::{self, PerronConfig};
use rsmpi::transform::{self, TransformedMdp};

fn to_py(err: rsmpi::Error) -> PyErr {
    match err {
        rsmpi::Error::NonConvergence { .. } => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn nest3(flat: &[f64], n: usize, m: usize) -> Vec<Vec<Vec<f64>>> {
    flat.chunks(m * n)
        .map(|per_state| per_state.chunks(n).map(<[f64]>::to_vec).collect())
        .collect()
}

fn nest2(flat: &[f64], m: usize) -> Vec<Vec<f64>> {
    flat.chunks(m).map(<[f64]>::to_vec).collect()
}

/// A finite MDP with transition tensor `P[s][a][s']` and costs `c[s][a]`.
#[pyclass(name = "Model", module = "rsmpi_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: MdpModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(transition: Vec<Vec<Vec<f64>>>, cost: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = MdpModel::from_nested(&transition, &cost).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Seeded random model (Dirichlet rows, uniform costs).
    #[staticmethod]
    #[pyo3(signature = (seed, n_states, n_actions, cost_lo = 0.0, cost_hi = 1.0))]
    fn generate(seed: u64, n_states: usize, n_actions: usize, cost_lo: f64, cost_hi: f64) -> PyResult<Self> {
        let inner = model::generate_random(seed, n_states, n_actions, (cost_lo, cost_hi)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::model_from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        io::model_to_json(&self.inner).map_err(to_py)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn transition(&self) -> Vec<Vec<Vec<f64>>> {
        nest3(self.inner.transition_flat(), self.inner.n_states(), self.inner.n_actions())
    }

    #[getter]
    fn cost(&self) -> Vec<Vec<f64>> {
        nest2(self.inner.cost_flat(), self.inner.n_actions())
    }

    /// Violated invariants, one message each; empty when valid.
    fn validate(&self) -> Vec<String> {
        self.inner.validate().issues.iter().map(|i| i.to_string()).collect()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn with_mixing(&self, epsilon_mix: f64) -> PyResult<Self> {
        Ok(Self {
            inner: model::apply_mixing(&self.inner, epsilon_mix).map_err(to_py)?,
        })
    }

    fn stationary_distribution(&self, policy: Vec<usize>) -> PyResult<Vec<f64>> {
        let pi = model::stationary_distribution(&self.inner, &DeterministicPolicy::new(policy)).map_err(to_py)?;
        Ok(pi.into_inner())
    }

    fn risk_neutral_average_cost(&self, policy: Vec<usize>) -> PyResult<f64> {
        model::risk_neutral_average_cost(&self.inner, &DeterministicPolicy::new(policy)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(n_states={}, n_actions={})", self.inner.n_states(), self.inner.n_actions())
    }
}

/// The aperiodicity-transformed model at fixed `(alpha, kappa)`.
#[pyclass(name = "TransformedModel", module = "rsmpi_py", frozen)]
pub struct PyTransformed {
    inner: TransformedMdp,
}

#[pymethods]
impl PyTransformed {
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    #[getter]
    fn q(&self) -> Vec<Vec<Vec<f64>>> {
        nest3(self.inner.transition_flat(), self.inner.n_states(), self.inner.n_actions())
    }

    #[getter]
    fn d(&self) -> Vec<Vec<f64>> {
        nest2(self.inner.cost_flat(), self.inner.n_actions())
    }

    fn self_loop_floor(&self) -> f64 {
        self.inner.self_loop_floor()
    }

    fn to_json(&self) -> PyResult<String> {
        io::transformed_to_json(&self.inner).map_err(to_py)
    }

    /// `(r_bound, r_empirical, witness_min_entry)`.
    #[pyo3(signature = (search_cap = 10_000))]
    fn positivity_horizon(&self, search_cap: u64) -> (u64, Option<u64>, Option<f64>) {
        let c = transform::positivity_horizon(&self.inner, search_cap);
        (c.r_bound, c.r_empirical, c.witness_min_entry)
    }

    /// `(lambda_tilde, eigenvector, residual)` of a fixed policy.
    fn evaluate_policy(&self, policy: Vec<usize>) -> PyResult<(f64, Vec<f64>, f64)> {
        let e = oracles::evaluate_policy(&self.inner, &DeterministicPolicy::new(policy), &PerronConfig::default())
            .map_err(to_py)?;
        Ok((e.lambda_tilde, e.value.weights().to_vec(), e.residual))
    }

    /// Exhaustive search over deterministic policies.
    #[pyo3(signature = (cap = oracles::DEFAULT_POLICY_CAP))]
    fn brute_force<'py>(&self, py: Python<'py>, cap: u64) -> PyResult<Bound<'py, PyDict>> {
        let b = oracles::brute_force_optimal(&self.inner, &PerronConfig::default(), cap).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("optimal_lambda_tilde", b.optimal_lambda_tilde)?;
        let opt: Vec<Vec<usize>> = b.optimal_policies.iter().map(|f| f.actions().to_vec()).collect();
        d.set_item("optimal_policies", opt)?;
        let per: Vec<(Vec<usize>, f64)> = b.per_policy.iter().map(|(f, l)| (f.actions().to_vec(), *l)).collect();
        d.set_item("per_policy", per)?;
        Ok(d)
    }

    /// Modified policy iteration from the uniform vector.
    #[pyo3(signature = (m = 5, tol = 1e-10, max_outer = 10_000, diagnostics = false))]
    fn run_mpi<'py>(&self, py: Python<'py>, m: u32, tol: f64, max_outer: usize, diagnostics: bool) -> PyResult<Bound<'py, PyDict>> {
        let config = MpiConfig {
            tol,
            max_outer,
            diagnostics,
            ..MpiConfig::constant(m)
        };
        let init = PositiveValueVector::uniform(self.inner.n_states());
        let trace = mpi::run_mpi(&self.inner, &config, &init).map_err(to_py)?;
        trace_dict(py, &trace)
    }

    /// Approximate variant with seeded error injection.
    #[pyo3(signature = (epsilon, delta1, delta2, seed = 0, m = 5, tol = 1e-10, max_outer = 1_000))]
    #[allow(clippy::too_many_arguments)]
    fn run_approx_mpi<'py>(
        &self,
        py: Python<'py>,
        epsilon: f64,
        delta1: f64,
        delta2: f64,
        seed: u64,
        m: u32,
        tol: f64,
        max_outer: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let approx = ApproxConfig::new(epsilon, delta1, delta2, seed).map_err(to_py)?;
        let config = MpiConfig {
            tol,
            max_outer,
            ..MpiConfig::constant(m)
        };
        let init = PositiveValueVector::uniform(self.inner.n_states());
        let trace = run_approx_mpi(&self.inner, &config, &approx, &init).map_err(to_py)?;
        trace_dict(py, &trace)
    }
}

fn trace_dict<'py>(py: Python<'py>, trace: &MpiTrace) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("policy", trace.final_policy.actions().to_vec())?;
    d.set_item("lambda_tilde", trace.final_lambda_tilde)?;
    d.set_item("half_width", trace.half_width)?;
    d.set_item("converged", trace.converged)?;
    d.set_item("iterations", trace.records.len())?;
    d.set_item("beta_observed", trace.beta_observed)?;
    d.set_item("u", trace.records.iter().map(|r| r.u).collect::<Vec<_>>())?;
    d.set_item("l", trace.records.iter().map(|r| r.l).collect::<Vec<_>>())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (model, alpha, kappa = RiskParams::DEFAULT_KAPPA))]
fn transform_model(model: &PyModel, alpha: f64, kappa: f64) -> PyResult<PyTransformed> {
    let params = RiskParams::new(alpha, kappa).map_err(to_py)?;
    Ok(PyTransformed {
        inner: transform::transform(&model.inner, &params).map_err(to_py)?,
    })
}

/// Transform, run MPI, and map the optimal cost back to the original problem.
#[pyfunction]
#[pyo3(signature = (model, alpha, kappa = RiskParams::DEFAULT_KAPPA, m = 5, tol = 1e-10, max_outer = 10_000))]
fn solve<'py>(
    py: Python<'py>,
    model: &PyModel,
    alpha: f64,
    kappa: f64,
    m: u32,
    tol: f64,
    max_outer: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let params = RiskParams::new(alpha, kappa).map_err(to_py)?;
    let config = MpiConfig {
        tol,
        max_outer,
        ..MpiConfig::constant(m)
    };
    let r = mpi::solve(&model.inner, &params, &config).map_err(to_py)?;
    let d = trace_dict(py, &r.trace)?;
    d.set_item("lambda", r.lambda_star_estimate)?;
    Ok(d)
}

/// Brute force on the untransformed problem: `(lambda, optimal policies)`.
#[pyfunction]
#[pyo3(signature = (model, alpha, cap = oracles::DEFAULT_POLICY_CAP))]
fn brute_force_original(model: &PyModel, alpha: f64, cap: u64) -> PyResult<(f64, Vec<Vec<usize>>)> {
    let b = oracles::brute_force_original(&model.inner, alpha, &PerronConfig::default(), cap).map_err(to_py)?;
    let opt = b.optimal_policies.iter().map(|f| f.actions().to_vec()).collect();
    Ok((b.optimal_lambda_tilde, opt))
}

#[pyfunction]
fn finite_horizon_log_mgf(model: &PyModel, policy: Vec<usize>, alpha: f64, horizon: usize, start: usize) -> PyResult<f64> {
    oracles::finite_horizon_log_mgf(&model.inner, &DeterministicPolicy::new(policy), alpha, horizon, start).map_err(to_py)
}

#[pyfunction]
fn forward_cost(lambda_star: f64, kappa: f64) -> f64 {
    transform::forward_cost(lambda_star, kappa)
}

#[pyfunction]
fn invert_cost(lambda_tilde: f64, kappa: f64) -> PyResult<f64> {
    transform::invert_cost(lambda_tilde, kappa).map_err(to_py)
}

#[pymodule]
fn rsmpi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyTransformed>()?;
    m.add_function(wrap_pyfunction!(transform_model, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_original, m)?)?;
    m.add_function(wrap_pyfunction!(finite_horizon_log_mgf, m)?)?;
    m.add_function(wrap_pyfunction!(forward_cost, m)?)?;
    m.add_function(wrap_pyfunction!(invert_cost, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
