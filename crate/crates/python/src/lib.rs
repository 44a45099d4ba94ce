use std::collections::HashMap;
use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fpp_opf::analysis::{
    self, brute_force_opf, report_from_json, report_to_json, validate_report, warm_start_from_report,
    GridSpec, RunStatus, SolveReport,
};
use fpp_opf::case::{parse_case, write_json};
use fpp_opf::driver::{Mode, SolverOptions};
use fpp_opf::error::OpfError;
use fpp_opf::network::CMatrix;
use fpp_opf::problem::{assemble, OpfProblem};
use fpp_opf::quadratics::{eigen_split as split_form, HermitianForm, HermitianSplit};

fn to_py(e: OpfError) -> PyErr {
    match e {
        OpfError::Conic(_) | OpfError::InfeasibleStart(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A parsed case together with its assembled problem.
#[pyclass(frozen)]
struct Case {
    case: fpp_opf::case::Case,
    problem: OpfProblem,
}

#[pymethods]
impl Case {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        let case = parse_case(&path).map_err(to_py)?;
        let problem = assemble(case.net.clone(), case.cost.clone()).map_err(to_py)?;
        Ok(Case { case, problem })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.case.name
    }

    #[getter]
    fn base_mva(&self) -> f64 {
        self.case.net.base_mva
    }

    #[getter]
    fn num_buses(&self) -> usize {
        self.case.net.buses.len()
    }

    /// Number of bus-phases (length of the voltage vector).
    #[getter]
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    #[getter]
    fn num_constraints(&self) -> usize {
        self.problem.constraints.len()
    }

    #[getter]
    fn power_unit(&self) -> &'static str {
        self.case.power_unit.label()
    }

    fn to_json(&self) -> PyResult<String> {
        write_json(&self.case).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Case({:?}, buses={}, dim={})", self.case.name, self.num_buses(), self.dim())
    }
}

#[pyclass(frozen)]
struct Report {
    inner: SolveReport,
}

#[pymethods]
impl Report {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Report { inner: report_from_json(text).map_err(to_py)? })
    }

    fn to_json(&self) -> PyResult<String> {
        report_to_json(&self.inner).map_err(to_py)
    }

    /// "feasible", "diagnosed-infeasible" or "not-converged".
    #[getter]
    fn status(&self) -> &'static str {
        match self.inner.status {
            RunStatus::Feasible => "feasible",
            RunStatus::DiagnosedInfeasible => "diagnosed-infeasible",
            RunStatus::NotConverged => "not-converged",
        }
    }

    #[getter]
    fn exit_code(&self) -> i32 {
        self.inner.status.exit_code()
    }

    #[getter]
    fn cost(&self) -> f64 {
        self.inner.cost.total
    }

    #[getter]
    fn cost_breakdown(&self) -> HashMap<&'static str, f64> {
        let c = &self.inner.cost;
        HashMap::from([
            ("generation", c.generation),
            ("curtailment", c.curtailment),
            ("reactive_support", c.reactive_support),
            ("constant", c.constant),
            ("total", c.total),
        ])
    }

    #[getter]
    fn max_violation(&self) -> f64 {
        self.inner.max_violation
    }

    #[getter]
    fn max_mismatch_mva(&self) -> f64 {
        self.inner.max_mismatch_mva
    }

    #[getter]
    fn runtime_s(&self) -> f64 {
        self.inner.runtime_s
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.trace.len()
    }

    /// `(bus, phase, magnitude, angle_deg)` per bus-phase.
    #[getter]
    fn voltages(&self) -> Vec<(usize, String, f64, f64)> {
        self.inner
            .voltages
            .iter()
            .map(|v| (v.bus, v.phase.to_string(), v.magnitude, v.angle_deg))
            .collect()
    }

    /// `(bus, phase, p, q)` in per-unit.
    #[getter]
    fn generation(&self) -> Vec<(usize, String, f64, f64)> {
        self.inner
            .generation
            .iter()
            .map(|g| (g.bus, g.phase.to_string(), g.p, g.q))
            .collect()
    }

    /// Ranked `(constraint, slack)` pairs; `None` outside diagnosis.
    #[getter]
    fn slacks(&self) -> Option<Vec<(String, f64)>> {
        self.inner
            .slacks
            .as_ref()
            .map(|s| s.iter().map(|r| (r.name.clone(), r.slack)).collect())
    }

    #[getter]
    fn notes(&self) -> Vec<String> {
        self.inner.notes.clone()
    }

    fn __repr__(&self) -> String {
        format!("Report({:?}, status={}, cost={:.6})", self.inner.case, self.status(), self.cost())
    }
}

#[allow(clippy::too_many_arguments)]
fn options(
    case: &Case,
    mode: Mode,
    eps1: Option<f64>,
    eps2: Option<f64>,
    max_iter: Option<usize>,
    tol_conic: Option<f64>,
    warm_start: Option<&Report>,
) -> PyResult<SolverOptions> {
    let mut opts = SolverOptions { mode, ..SolverOptions::default() };
    if let Some(x) = eps1 {
        opts.eps1 = x;
        opts.eps_voltage = x;
    }
    if let Some(x) = eps2 {
        opts.eps2 = x;
    }
    if let Some(x) = max_iter {
        opts.max_iter = x;
    }
    if let Some(x) = tol_conic {
        opts.conic_tol = x;
    }
    if let Some(r) = warm_start {
        opts.initial = warm_start_from_report(&case.problem, &r.inner).map_err(to_py)?;
    }
    opts.validate().map_err(to_py)?;
    Ok(opts)
}

fn run(py: Python<'_>, case: &Case, opts: SolverOptions) -> PyResult<Report> {
    let inner = py
        .allow_threads(|| analysis::solve(&case.case.name, &case.problem, &opts))
        .map_err(to_py)?;
    Ok(Report { inner })
}

/// Feasibility pump followed by sequential convex approximation.
#[pyfunction]
#[pyo3(signature = (case, *, eps1=None, eps2=None, max_iter=None, tol_conic=None, warm_start=None))]
fn solve(
    py: Python<'_>,
    case: &Case,
    eps1: Option<f64>,
    eps2: Option<f64>,
    max_iter: Option<usize>,
    tol_conic: Option<f64>,
    warm_start: Option<PyRef<'_, Report>>,
) -> PyResult<Report> {
    let opts = options(case, Mode::Solve, eps1, eps2, max_iter, tol_conic, warm_start.as_deref())?;
    run(py, case, opts)
}

/// Rank the constraints that block feasibility.
#[pyfunction]
#[pyo3(signature = (case, *, eps2=None, max_iter=None, tol_conic=None, warm_start=None))]
fn diagnose(
    py: Python<'_>,
    case: &Case,
    eps2: Option<f64>,
    max_iter: Option<usize>,
    tol_conic: Option<f64>,
    warm_start: Option<PyRef<'_, Report>>,
) -> PyResult<Report> {
    let opts = options(case, Mode::Diagnose, None, eps2, max_iter, tol_conic, warm_start.as_deref())?;
    run(py, case, opts)
}

/// Re-check a report against a case. Returns `(ok, max_violation, cost)`.
#[pyfunction]
fn validate(case: &Case, report: &Report) -> PyResult<(bool, f64, f64)> {
    let v = validate_report(&case.problem, &report.inner).map_err(to_py)?;
    Ok((v.ok, v.max_violation, v.cost))
}

/// Grid-search optimum of a small single-phase case, `None` if no grid point is feasible.
#[pyfunction]
#[pyo3(signature = (case, magnitude_step=1e-3, angle_step_deg=0.01, angle_window_deg=30.0))]
fn brute_force(
    py: Python<'_>,
    case: &Case,
    magnitude_step: f64,
    angle_step_deg: f64,
    angle_window_deg: f64,
) -> PyResult<Option<f64>> {
    let resolution = GridSpec { magnitude_step, angle_step_deg, angle_window_deg, ..GridSpec::default() };
    let found = py.allow_threads(|| brute_force_opf(&case.problem, &resolution)).map_err(to_py)?;
    Ok(found.map(|g| g.cost))
}

/// Split a Hermitian matrix into its PSD and NSD parts.
#[pyfunction]
fn eigen_split(matrix: Vec<Vec<Complex64>>) -> PyResult<(Vec<Vec<Complex64>>, Vec<Vec<Complex64>>, Vec<f64>)> {
    let n = matrix.len();
    if matrix.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    let a = CMatrix::from_fn(n, n, |r, c| matrix[r][c]);
    let form = HermitianForm::from_dense(&a, "python").map_err(to_py)?;
    let split = split_form(&form).map_err(to_py)?;
    let rows = |m: CMatrix| (0..n).map(|r| (0..n).map(|c| m[(r, c)]).collect()).collect();
    let mut eig = HermitianSplit::eigenvalues_of(&form);
    eig.sort_by(f64::total_cmp);
    Ok((rows(split.plus.to_dense(n)), rows(split.minus.to_dense(n)), eig))
}

#[pymodule]
fn fppopf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Case>()?;
    m.add_class::<Report>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(eigen_split, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
