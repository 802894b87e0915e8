//! Python bindings: exact divergences, the convergence study, the verification
//! suite and two-bit distillation.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use di4c_core::denoisers::{fit_product_to_oracle, TimeGrid};
use di4c_core::dist::{kl_probs, tv_probs, JointDistribution, StateSpace};
use di4c_core::forward::{DimGenerator, FactorizedForward};
use di4c_core::posterior::PosteriorContext;
use di4c_core::theory::{convergence_study as study, verify_suite, UniformExample, VerifyConfig};
use di4c_core::trainer::{chain_law, init_student, train, TrainConfig, TrainEnv};
use di4c_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Argument(_) | Error::Validation(_) | Error::SpaceMismatch { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn check_pair(p: &[f64], q: &[f64]) -> PyResult<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(PyValueError::new_err("distributions must be non-empty and of equal length"));
    }
    Ok(())
}

/// Total variation `½ Σ |p − q|`.
#[pyfunction]
fn tv(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    check_pair(&p, &q)?;
    Ok(tv_probs(&p, &q))
}

/// `KL(p ‖ q)`; infinite when `p` charges a zero of `q`.
#[pyfunction]
fn kl(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    check_pair(&p, &q)?;
    Ok(kl_probs(&p, &q))
}

/// TV of N-step analytical sampling on the correlated two-bit example.
#[pyfunction]
#[pyo3(signature = (steps, delta = 0.1, horizon = 1.0))]
fn convergence_study<'py>(py: Python<'py>, steps: Vec<usize>, delta: f64, horizon: f64) -> PyResult<Bound<'py, PyDict>> {
    let ex = UniformExample::new(delta, horizon).map_err(py_err)?;
    let ctx = ex.context().map_err(py_err)?;
    let rep = study(&ctx, delta, &steps).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("N", rep.rows.iter().map(|r| r.steps).collect::<Vec<_>>())?;
    out.set_item("tv", rep.rows.iter().map(|r| r.tv).collect::<Vec<_>>())?;
    out.set_item("n_times_tv", rep.rows.iter().map(|r| r.n_times_tv).collect::<Vec<_>>())?;
    out.set_item("slope", rep.slope)?;
    out.set_item("constant", ex.constant())?;
    Ok(out)
}

/// `Δ_δ` for `N` steps from the closed-form recursion and from the generic engine.
#[pyfunction]
#[pyo3(signature = (steps, delta = 0.1, horizon = 1.0))]
fn lower_bound_delta(steps: usize, delta: f64, horizon: f64) -> PyResult<(f64, f64)> {
    let ex = UniformExample::new(delta, horizon).map_err(py_err)?;
    let closed = ex.delta_trace(steps).map_err(py_err)?.final_delta();
    Ok((closed, ex.engine_delta(steps).map_err(py_err)?))
}

/// Runs the verification suite; returns `{name: (passed, worst, tolerance)}`.
#[pyfunction]
#[pyo3(signature = (trials = 1000, seed = 0))]
fn verify<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let rep = verify_suite(&VerifyConfig {
        trials,
        seed,
        ..Default::default()
    })
    .map_err(py_err)?;
    let out = PyDict::new(py);
    for c in rep.checks {
        out.set_item(c.name, (c.passed, c.worst, c.tolerance))?;
    }
    Ok(out)
}

/// Distils a `K`-component student from an `N`-step product teacher on two correlated bits.
#[pyfunction]
#[pyo3(signature = (components = 4, steps = 8, iterations = 20000, learning_rate = 5.0, seed = 0))]
fn distill_two_bit<'py>(
    py: Python<'py>,
    components: usize,
    steps: usize,
    iterations: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let run = || -> di4c_core::Result<(f64, f64, f64)> {
        let space = StateSpace::new(2, 2)?;
        let fwd = FactorizedForward::shared(space, DimGenerator::UniformClosedForm, 1.0)?;
        let ctx = PosteriorContext::new(fwd, JointDistribution::new(space, vec![0.5, 0.0, 0.0, 0.5])?)?;
        let grid = TimeGrid::uniform(steps, 1.0)?;
        let teacher = fit_product_to_oracle(&ctx, &grid)?;
        let cfg = TrainConfig {
            learning_rate,
            iterations,
            seed,
            ..Default::default()
        };
        let env = TrainEnv::new(&ctx, &teacher, &cfg.loss)?;
        let (student, _) = train(&init_student(&teacher, components, &cfg)?, &env, &cfg)?;
        let tv = |law: JointDistribution| di4c_core::dist::tv_distance(&law, ctx.data());
        Ok((
            tv(chain_law(&student, &ctx, &[0.0, 1.0])?)?,
            tv(chain_law(&teacher, &ctx, &[0.0, 1.0])?)?,
            tv(chain_law(&teacher, &ctx, grid.times())?)?,
        ))
    };
    let (student, teacher_one, teacher_grid) = py.detach(run).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("student_one_step_tv", student)?;
    out.set_item("teacher_one_step_tv", teacher_one)?;
    out.set_item("teacher_grid_tv", teacher_grid)?;
    Ok(out)
}

#[pymodule]
fn di4c_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tv, m)?)?;
    m.add_function(wrap_pyfunction!(kl, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_study, m)?)?;
    m.add_function(wrap_pyfunction!(lower_bound_delta, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(distill_two_bit, m)?)?;
    Ok(())
}
