//! Outer loops: feasible point pursuit, successive convex approximation and
//! slack-based infeasibility diagnosis.

use std::fmt;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::conic::{solve_conic, ConicSolution, ConicStatus, DEFAULT_TOL};
use crate::convexify::{
    build_diagnosis_subproblem, build_fpp_subproblem, build_sca_subproblem, implied_aux,
    SCA_ENTRY_TOL,
};
use crate::error::{OpfError, Result};
use crate::network::flat_voltage;
use crate::problem::{ConstraintId, OperatingPoint, OpfProblem};

/// Relative cost increase between SCA iterates attributed to solver noise.
pub const COST_TOL: f64 = 1e-9;

/// Slack below which a diagnosis slack counts as zero.
pub const ZERO_SLACK: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialPoint {
    Flat,
    Warm(Vec<Complex64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Solve,
    Diagnose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop FPP once the shared slack drops below this value.
    pub eps1: f64,
    /// Stop FPP once `‖v_i − v_{i−1}‖` drops below this value.
    pub eps_voltage: f64,
    /// Relative voltage change that ends SCA and diagnosis.
    pub eps2: f64,
    pub max_iter: usize,
    pub conic_tol: f64,
    /// Largest direct constraint violation accepted as feasible, in p.u.
    pub feasibility_tol: f64,
    pub initial: InitialPoint,
    pub mode: Mode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            eps1: 1e-11,
            eps_voltage: 1e-11,
            eps2: 1e-5,
            max_iter: 2000,
            conic_tol: DEFAULT_TOL,
            feasibility_tol: SCA_ENTRY_TOL,
            initial: InitialPoint::Flat,
            mode: Mode::Solve,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.eps1, self.eps_voltage, self.eps2, self.conic_tol, self.feasibility_tol];
        if positive.iter().any(|t| !(*t > 0.0)) || self.max_iter == 0 {
            return Err(OpfError::InvalidNetwork(
                "tolerances must be positive and max_iter at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Fpp,
    Sca,
    Diagnosis,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Fpp => "fpp",
            Stage::Sca => "sca",
            Stage::Diagnosis => "diagnosis",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: Stage,
    pub iteration: usize,
    /// Shared slack (FPP) or largest slack (diagnosis).
    pub slack: Option<f64>,
    pub objective: f64,
    pub delta_v: f64,
    pub millis: f64,
}

impl fmt::Display for IterationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:.6e} {:.10e} {:.3e} {:.2}",
            self.stage.as_str(),
            self.iteration,
            self.slack.unwrap_or(0.0),
            self.objective,
            self.delta_v,
            self.millis
        )
    }
}

pub type IterationTrace = Vec<IterationRecord>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FppStatus {
    Feasible,
    /// The iterates stopped moving with a positive slack.
    ConvergedInfeasible,
    MaxIter,
    ConicFailure,
}

#[derive(Clone, Debug)]
pub struct FppOutcome {
    pub status: FppStatus,
    pub point: OperatingPoint,
    pub slack: f64,
    pub max_violation: f64,
    pub trace: IterationTrace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaStatus {
    Converged,
    MaxIter,
    /// Stopped early on a solver failure or an iterate that left the
    /// feasible set; the last accepted point is kept.
    Stopped,
}

#[derive(Clone, Debug)]
pub struct ScaOutcome {
    pub status: ScaStatus,
    pub point: OperatingPoint,
    pub cost: f64,
    pub trace: IterationTrace,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankedSlack {
    pub id: ConstraintId,
    pub name: String,
    pub slack: f64,
}

#[derive(Clone, Debug)]
pub struct DiagnosisOutcome {
    /// Slacks sorted in descending order.
    pub ranked: Vec<RankedSlack>,
    pub converged: bool,
    /// Set when every slack vanished and the point passed the residual check.
    pub feasible_point: Option<OperatingPoint>,
    pub point: OperatingPoint,
    pub trace: IterationTrace,
}

fn initial_voltage(problem: &OpfProblem, init: &InitialPoint) -> Result<Vec<Complex64>> {
    match init {
        InitialPoint::Flat => Ok(flat_voltage(&problem.net)),
        InitialPoint::Warm(v) if v.len() == problem.dim() => Ok(v.clone()),
        InitialPoint::Warm(v) => Err(OpfError::DimensionMismatch {
            expected: problem.dim(),
            found: v.len(),
        }),
    }
}

fn norm_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest re-checked residual of a backend solution that the loops still use.
/// Every accepted iterate is re-certified directly, so this only filters out
/// solutions that are plainly wrong.
const USABLE_RESIDUAL: f64 = 1e-3;

fn usable(sol: &ConicSolution) -> bool {
    sol.status == ConicStatus::Optimal
        || (sol.status == ConicStatus::Inaccurate && sol.primal_residual <= USABLE_RESIDUAL)
}

/// Slack and voltage-change thresholds actually applied. Values below ten
/// times the conic tolerance are lifted to that floor, since the backend
/// cannot resolve them.
pub fn effective_eps1(opts: &SolverOptions) -> f64 {
    opts.eps1.max(10.0 * opts.conic_tol)
}

fn effective_eps_voltage(opts: &SolverOptions) -> f64 {
    opts.eps_voltage.max(10.0 * opts.conic_tol)
}

/// Feasible point pursuit from the configured initial point.
///
/// The slack of each iterate is recomputed from the surrogates at the returned
/// point rather than read from the solver. An iterate that does not lower it
/// means the subproblem optimum is `z` itself up to solver accuracy, so the
/// loop stops there.
pub fn run_fpp(problem: &OpfProblem, opts: &SolverOptions) -> Result<FppOutcome> {
    opts.validate()?;
    let eps1 = effective_eps1(opts);
    let eps_v = effective_eps_voltage(opts);
    let mut z = initial_voltage(problem, &opts.initial)?;
    let mut point = OperatingPoint {
        v: z.clone(),
        p_res: vec![0.0; problem.num_res()],
        q_res: vec![0.0; problem.num_res()],
    };
    let mut trace = Vec::new();
    let mut slack = f64::INFINITY;
    let mut status = FppStatus::MaxIter;

    for i in 1..=opts.max_iter {
        let started = Instant::now();
        let sub = build_fpp_subproblem(problem, &z)?;
        let sol = solve_conic(&sub.program, opts.conic_tol)?;
        if !usable(&sol) {
            log::warn!("fpp iteration {i}: conic solver returned {}", sol.status);
            status = FppStatus::ConicFailure;
            break;
        }
        let (v, aux) = sub.repaired(problem, &sol.x);
        let s = sub
            .surrogate_values(&v, &aux)
            .into_iter()
            .fold(0.0f64, f64::max);
        if s > slack {
            status = if problem.max_violation(&point) <= opts.feasibility_tol {
                FppStatus::Feasible
            } else {
                FppStatus::ConvergedInfeasible
            };
            break;
        }
        let delta_v = norm_diff(&v, &z);
        let record = IterationRecord {
            stage: Stage::Fpp,
            iteration: i,
            slack: Some(s),
            objective: s,
            delta_v,
            millis: started.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!("{record}");
        trace.push(record);
        z = v.clone();
        point = OperatingPoint { v, p_res: aux.p_res, q_res: aux.q_res };
        slack = s;

        let violation = problem.max_violation(&point);
        if s < eps1 && violation <= opts.feasibility_tol {
            status = FppStatus::Feasible;
            break;
        }
        if delta_v <= eps_v {
            status = if violation <= opts.feasibility_tol {
                FppStatus::Feasible
            } else {
                FppStatus::ConvergedInfeasible
            };
            break;
        }
    }
    let max_violation = problem.max_violation(&point);
    if status == FppStatus::MaxIter && max_violation <= opts.feasibility_tol && slack < eps1 {
        status = FppStatus::Feasible;
    }
    Ok(FppOutcome { status, point, slack, max_violation, trace })
}

/// Successive convex approximation from a feasible operating point.
pub fn run_sca(problem: &OpfProblem, start: &OperatingPoint, opts: &SolverOptions) -> Result<ScaOutcome> {
    opts.validate()?;
    let violation = problem.max_violation(start);
    if !(violation <= opts.feasibility_tol) {
        return Err(OpfError::InfeasibleStart(violation));
    }
    let mut z = start.clone();
    let mut cost = problem.cost_at(&z).total;
    let mut trace = Vec::new();
    let mut status = ScaStatus::MaxIter;

    for i in 1..=opts.max_iter {
        let started = Instant::now();
        let sub = build_sca_subproblem(problem, &z)?;
        let sol = solve_conic(&sub.program, opts.conic_tol)?;
        if !usable(&sol) {
            log::warn!("sca iteration {i}: conic solver returned {}", sol.status);
            status = ScaStatus::Stopped;
            break;
        }
        let next = sub.operating_point(&sol.x);
        let next_violation = problem.max_violation(&next);
        if next_violation > opts.feasibility_tol {
            log::warn!("sca iteration {i}: iterate violates constraints by {next_violation:.3e}");
            status = ScaStatus::Stopped;
            break;
        }
        let next_cost = problem.cost_at(&next).total;
        if next_cost > cost + COST_TOL * cost.abs().max(1.0) {
            // The subproblem optimum is z up to solver accuracy.
            status = ScaStatus::Converged;
            break;
        }
        let rel = norm_diff(&next.v, &z.v) / norm(&z.v).max(f64::MIN_POSITIVE);
        let record = IterationRecord {
            stage: Stage::Sca,
            iteration: i,
            slack: None,
            objective: next_cost,
            delta_v: rel,
            millis: started.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!("{record}");
        trace.push(record);
        z = next;
        cost = next_cost;
        if rel <= opts.eps2 {
            status = ScaStatus::Converged;
            break;
        }
    }
    Ok(ScaOutcome { status, point: z, cost, trace })
}

/// Slack each record needs at `point`, with generation and flows read off the
/// voltages. At the approximation point this equals the surrogate value.
pub fn terminal_slacks(problem: &OpfProblem, point: &OperatingPoint) -> Vec<f64> {
    let aux = implied_aux(problem, point);
    problem
        .constraints
        .iter()
        .map(|rec| problem.record_value(rec, &point.v, &aux).max(0.0))
        .collect()
}

/// Iterates the per-constraint slack problem and ranks the terminal slacks.
pub fn run_diagnosis(problem: &OpfProblem, opts: &SolverOptions) -> Result<DiagnosisOutcome> {
    opts.validate()?;
    let eps1 = effective_eps1(opts);
    let mut z = initial_voltage(problem, &opts.initial)?;
    let mut point = OperatingPoint {
        v: z.clone(),
        p_res: vec![0.0; problem.num_res()],
        q_res: vec![0.0; problem.num_res()],
    };
    let mut slacks = terminal_slacks(problem, &point);
    let mut objective: f64 = slacks.iter().map(|s| s * s).sum();
    let mut trace = Vec::new();
    let mut converged = false;

    for i in 1..=opts.max_iter {
        let started = Instant::now();
        let sub = build_diagnosis_subproblem(problem, &z)?;
        let sol = solve_conic(&sub.program, opts.conic_tol)?;
        if !usable(&sol) {
            log::warn!("diagnosis iteration {i}: conic solver returned {}", sol.status);
            break;
        }
        let (v, aux) = sub.repaired(problem, &sol.x);
        let candidate = OperatingPoint { v, p_res: aux.p_res, q_res: aux.q_res };
        let next = terminal_slacks(problem, &candidate);
        let v = candidate.v.clone();
        let next_objective: f64 = next.iter().map(|s| s * s).sum();
        if next_objective > objective {
            converged = true;
            break;
        }
        let largest = next.iter().fold(0.0f64, |m, &s| m.max(s));
        let rel = norm_diff(&v, &z) / norm(&z).max(f64::MIN_POSITIVE);
        let record = IterationRecord {
            stage: Stage::Diagnosis,
            iteration: i,
            slack: Some(largest),
            objective: next_objective,
            delta_v: rel,
            millis: started.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!("{record}");
        trace.push(record);
        z = v.clone();
        point = candidate;
        slacks = next;
        objective = next_objective;
        if largest < eps1 || rel <= opts.eps2 {
            converged = true;
            break;
        }
    }

    let mut ranked: Vec<RankedSlack> = problem
        .constraints
        .iter()
        .zip(&slacks)
        .map(|(rec, &slack)| RankedSlack { id: rec.id, name: rec.id.to_string(), slack })
        .collect();
    ranked.sort_by(|a, b| b.slack.total_cmp(&a.slack).then(a.id.cmp(&b.id)));
    let all_zero = ranked.first().is_none_or(|r| r.slack <= ZERO_SLACK);
    let feasible_point = (all_zero && problem.max_violation(&point) <= opts.feasibility_tol)
        .then(|| point.clone());
    Ok(DiagnosisOutcome { ranked, converged, feasible_point, point, trace })
}

/// Initial point taken from a previous solution's voltages.
pub fn warm_start(problem: &OpfProblem, previous: &[Complex64]) -> Result<InitialPoint> {
    if previous.len() != problem.dim() {
        return Err(OpfError::DimensionMismatch { expected: problem.dim(), found: previous.len() });
    }
    Ok(InitialPoint::Warm(previous.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Bus, BusPhase, CMatrix, GenLimits, Line, NetworkModel, Phase};
    use crate::problem::{assemble, CostModel, GenCost};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_bus(load: Complex64, vmin: f64, vmax: f64) -> OpfProblem {
        let g = GenLimits { pmin: 0.0, pmax: 5.0, qmin: -5.0, qmax: 5.0 };
        let bus = |id, load, gen, r| Bus {
            id,
            phases: vec![BusPhase {
                phase: Phase::A,
                load,
                vmin,
                vmax,
                gen,
                shunt: Complex64::default(),
            }],
            is_reference: r,
        };
        let net = NetworkModel::new(
            vec![bus(1, c(0.0, 0.0), Some(g), true), bus(2, load, None, false)],
            vec![Line::new(1, 2, vec![Phase::A], CMatrix::from_element(1, 1, c(0.01, 0.1)))],
            vec![],
            100.0,
        )
        .unwrap();
        let cost = CostModel {
            generation: vec![GenCost { bus: 1, phase: Phase::A, quadratic: 1.0, linear: 10.0 }],
            ..CostModel::default()
        };
        assemble(net, cost).unwrap()
    }

    #[test]
    fn no_load_network_is_feasible_at_once() {
        let p = two_bus(c(0.0, 0.0), 0.9, 1.1);
        let out = run_fpp(&p, &SolverOptions::default()).unwrap();
        assert_eq!(out.status, FppStatus::Feasible);
        assert!(out.trace.len() <= 2);
        assert!(out.max_violation <= 1e-7);
    }

    #[test]
    fn loaded_two_bus_reaches_feasibility_then_sca() {
        let p = two_bus(c(0.8, 0.2), 0.9, 1.1);
        let opts = SolverOptions::default();
        let out = run_fpp(&p, &opts).unwrap();
        assert_eq!(out.status, FppStatus::Feasible, "{:?}", out.trace);
        for w in out.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-12);
        }
        let sca = run_sca(&p, &out.point, &opts).unwrap();
        assert!(sca.cost <= p.cost_at(&out.point).total + 1e-9);
        assert!(p.max_violation(&sca.point) <= 1e-7);
    }

    #[test]
    fn overloaded_line_is_diagnosed() {
        let p = two_bus(c(6.0, 2.0), 0.95, 1.05);
        let opts = SolverOptions { max_iter: 200, ..SolverOptions::default() };
        let out = run_fpp(&p, &opts).unwrap();
        assert_ne!(out.status, FppStatus::Feasible);
        let diag = run_diagnosis(&p, &opts).unwrap();
        assert!(diag.ranked[0].slack > 1e-3);
        assert!(diag.feasible_point.is_none());
    }

    #[test]
    fn sca_rejects_infeasible_start_and_bad_warm_start() {
        let p = two_bus(c(0.8, 0.2), 0.9, 1.1);
        let flat = OperatingPoint { v: vec![c(1.0, 0.0); 2], p_res: vec![], q_res: vec![] };
        assert!(matches!(
            run_sca(&p, &flat, &SolverOptions::default()),
            Err(OpfError::InfeasibleStart(_))
        ));
        assert!(warm_start(&p, &[c(1.0, 0.0)]).is_err());
    }
}
