//! Python bindings.
//!
//! Curves are exposed as the `PhaseCurve` class and solver results as
//! `Allocation`. Objectives and strategies are passed by name. Sweep inputs
//! and reports cross the boundary as JSON text.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use engine::estimator::parse_estimate as parse_estimate_doc;
use engine::{Objective, ObjectiveKind, SolveConfig, StrategySpec};

fn to_py(err: engine::Error) -> PyErr {
    match err {
        engine::Error::NotConverged { .. } | engine::Error::ResourceLimit { .. } => {
            PyRuntimeError::new_err(err.to_string())
        }
        _ => PyValueError::new_err(err.to_string()),
    }
}

#[pyclass(name = "PhaseCurve", module = "phasealloc", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyPhaseCurve {
    inner: engine::PhaseCurve,
}

#[pymethods]
impl PyPhaseCurve {
    #[new]
    fn new(label: String, a: f64, b: f64) -> PyResult<Self> {
        engine::PhaseCurve::new(label, a, b).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn label(&self) -> &str {
        &self.inner.label
    }

    #[getter]
    fn a(&self) -> f64 {
        self.inner.ceiling_a
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.rate_b
    }

    /// Saturating utility a(1 - exp(-b x)).
    fn f(&self, x: f64) -> PyResult<f64> {
        self.inner.f(x).map_err(to_py)
    }

    fn f_prime(&self, x: f64) -> PyResult<f64> {
        self.inner.f_prime(x).map_err(to_py)
    }

    /// Pass-through quality 1 - a exp(-b x).
    fn g(&self, x: f64) -> PyResult<f64> {
        self.inner.g(x).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("PhaseCurve({:?}, a={}, b={})", self.inner.label, self.inner.ceiling_a, self.inner.rate_b)
    }
}

#[pyclass(name = "Allocation", module = "phasealloc", frozen, skip_from_py_object)]
pub struct PyAllocation {
    #[pyo3(get)]
    amounts: Vec<f64>,
    #[pyo3(get)]
    lambda_star: Option<f64>,
    #[pyo3(get)]
    objective_value: Option<f64>,
    #[pyo3(get)]
    log_objective_value: Option<f64>,
    #[pyo3(get)]
    budget_used: f64,
}

#[pymethods]
impl PyAllocation {
    fn fractions(&self) -> Vec<f64> {
        engine::Allocation::from_amounts(self.amounts.clone()).fractions()
    }

    fn __repr__(&self) -> String {
        format!(
            "Allocation(amounts={:?}, lambda_star={:?}, objective_value={:?})",
            self.amounts, self.lambda_star, self.objective_value
        )
    }
}

impl From<engine::Allocation> for PyAllocation {
    fn from(a: engine::Allocation) -> Self {
        Self {
            amounts: a.amounts,
            lambda_star: a.lambda_star,
            objective_value: a.objective_value,
            log_objective_value: a.log_objective_value,
            budget_used: a.budget_used,
        }
    }
}

fn unwrap_curves(curves: &[PyRef<'_, PyPhaseCurve>]) -> Vec<engine::PhaseCurve> {
    curves.iter().map(|c| c.inner.clone()).collect()
}

fn wrap_curves(curves: Vec<engine::PhaseCurve>) -> Vec<PyPhaseCurve> {
    curves.into_iter().map(|inner| PyPhaseCurve { inner }).collect()
}

fn objective(name: &str, curves: &[engine::PhaseCurve]) -> PyResult<Objective> {
    let kind: ObjectiveKind = name.parse().map_err(to_py)?;
    Ok(Objective::for_curves(kind, curves))
}

fn config(budget: f64, tolerance: Option<f64>, caps: Option<Vec<f64>>) -> SolveConfig {
    let mut cfg = SolveConfig::new(budget);
    if let Some(t) = tolerance {
        cfg = cfg.with_tolerance(t);
    }
    if let Some(c) = caps {
        cfg = cfg.with_caps(c);
    }
    cfg
}

/// Fit a curve from the token counts for basic (~50%) and great (~90%) quality.
#[pyfunction]
#[pyo3(signature = (label, tokens_basic, tokens_great, a, output_price, cost_ratio = 1.0))]
fn fit_two_point(
    label: String,
    tokens_basic: u32,
    tokens_great: u32,
    a: f64,
    output_price: f64,
    cost_ratio: f64,
) -> PyResult<PyPhaseCurve> {
    let points = engine::OperatingPoints::new(tokens_basic, tokens_great, a).map_err(to_py)?;
    let pricing = engine::PhasePricing::new(output_price)
        .and_then(|p| p.with_cost_ratio(cost_ratio))
        .map_err(to_py)?;
    engine::fit_two_point(label, &points, &pricing)
        .map(|inner| PyPhaseCurve { inner })
        .map_err(to_py)
}

/// Parse an estimate document and fit it with a pricing table (both JSON text).
/// Returns the curves and any warnings.
#[pyfunction]
fn fit_estimates(estimates: &str, pricing: &str) -> PyResult<(Vec<PyPhaseCurve>, Vec<String>)> {
    let doc = parse_estimate_doc(estimates, None, "python").map_err(to_py)?;
    let table = engine::PricingTable::from_json(pricing).map_err(to_py)?;
    let (curves, mut warnings) = doc.fit(&table).map_err(to_py)?;
    warnings.splice(0..0, doc.warnings);
    Ok((wrap_curves(curves), warnings))
}

#[pyfunction]
#[pyo3(signature = (curves, budget, objective = "additive", tolerance = None, caps = None))]
fn solve(
    curves: Vec<PyRef<'_, PyPhaseCurve>>,
    budget: f64,
    objective: &str,
    tolerance: Option<f64>,
    caps: Option<Vec<f64>>,
) -> PyResult<PyAllocation> {
    let curves = unwrap_curves(&curves);
    let obj = self::objective(objective, &curves)?;
    engine::solve(&curves, &obj, &config(budget, tolerance, caps))
        .map(Into::into)
        .map_err(to_py)
}

/// Re-solve `curves` on `budget - spent`.
#[pyfunction]
#[pyo3(signature = (curves, spent, budget, objective = "additive", tolerance = None))]
fn reallocate(
    curves: Vec<PyRef<'_, PyPhaseCurve>>,
    spent: f64,
    budget: f64,
    objective: &str,
    tolerance: Option<f64>,
) -> PyResult<PyAllocation> {
    let curves = unwrap_curves(&curves);
    let obj = self::objective(objective, &curves)?;
    engine::reallocate(&curves, &obj, spent, &config(budget, tolerance, None))
        .map(Into::into)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (curves, amounts, objective = "additive"))]
fn evaluate(curves: Vec<PyRef<'_, PyPhaseCurve>>, amounts: Vec<f64>, objective: &str) -> PyResult<f64> {
    let curves = unwrap_curves(&curves);
    let obj = self::objective(objective, &curves)?;
    engine::evaluate(&curves, &amounts, &obj).map(|v| v.value).map_err(to_py)
}

#[pyfunction]
fn inject_noise(curves: Vec<PyRef<'_, PyPhaseCurve>>, sigma: f64, seed: u64) -> PyResult<Vec<PyPhaseCurve>> {
    let spec = engine::NoiseSpec::new(sigma, seed).map_err(to_py)?;
    engine::inject_noise(&unwrap_curves(&curves), &spec)
        .map(wrap_curves)
        .map_err(to_py)
}

/// Allocate with a named strategy; objective values use `evaluation`.
#[pyfunction]
#[pyo3(signature = (strategy, curves, budget, evaluation = "additive", ratio = None))]
fn allocate(
    strategy: &str,
    curves: Vec<PyRef<'_, PyPhaseCurve>>,
    budget: f64,
    evaluation: &str,
    ratio: Option<Vec<f64>>,
) -> PyResult<PyAllocation> {
    let curves = unwrap_curves(&curves);
    let spec = match ratio {
        Some(r) if strategy == "fixed-ratio" => StrategySpec::fixed_ratio(r).map_err(to_py)?,
        Some(_) => return Err(PyValueError::new_err("ratio only applies to the fixed-ratio strategy")),
        None => strategy.parse().map_err(to_py)?,
    };
    let eval = self::objective(evaluation, &curves)?;
    engine::allocate(&spec, &curves, budget, &SolveConfig::new(budget), &eval)
        .map(Into::into)
        .map_err(to_py)
}

#[pyfunction]
fn budget_from_alpha(alpha: f64, reference_cost: f64) -> PyResult<f64> {
    engine::budget_from_alpha(alpha, reference_cost).map_err(to_py)
}

/// Run a sweep. Takes a pipeline and an experiment config as JSON text and
/// returns the report as JSON text.
#[pyfunction]
fn sweep(py: Python<'_>, pipeline: &str, config: &str) -> PyResult<String> {
    let pipeline: engine::SyntheticPipeline =
        serde_json::from_str(pipeline).map_err(|e| PyValueError::new_err(format!("pipeline: {e}")))?;
    let config: engine::ExperimentConfig =
        serde_json::from_str(config).map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    let report = py.detach(|| engine::sweep(&pipeline, &config)).map_err(to_py)?;
    report.to_json().map_err(to_py)
}

#[pymodule]
pub fn phasealloc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyPhaseCurve>()?;
    m.add_class::<PyAllocation>()?;
    m.add_function(wrap_pyfunction!(fit_two_point, m)?)?;
    m.add_function(wrap_pyfunction!(fit_estimates, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(reallocate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(budget_from_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
