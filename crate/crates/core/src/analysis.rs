//! Post-solution verification, generation recovery, mismatch metrics and the
//! solve report.

use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convexify::SCA_ENTRY_TOL;
use crate::driver::{
    effective_eps1, run_diagnosis, run_fpp, run_sca, warm_start, FppStatus, InitialPoint,
    IterationTrace, Mode, RankedSlack, ScaStatus, SolverOptions,
};
use crate::error::{OpfError, Result};
use crate::network::{NetworkModel, Phase};
use crate::problem::{
    res_region_violation, ConstraintId, ConstraintKind, CostBreakdown, Location, OperatingPoint,
    OpfProblem, Residual,
};
use crate::quadratics::LineEnd;

pub const REPORT_SCHEMA: &str = "fppopf-report";
pub const REPORT_VERSION: u32 = 1;

/// Largest violation, in per-unit, of a point reported as feasible.
pub const FEASIBILITY_TOL: f64 = SCA_ENTRY_TOL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Feasible,
    DiagnosedInfeasible,
    NotConverged,
}

impl RunStatus {
    /// Process exit code for this outcome.
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Feasible => 0,
            RunStatus::DiagnosedInfeasible => 2,
            RunStatus::NotConverged => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageEntry {
    pub bus: usize,
    pub phase: Phase,
    pub magnitude: f64,
    /// Degrees, after rotating the reference bus to its nominal angle.
    pub angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationEntry {
    pub bus: usize,
    pub phase: Phase,
    pub p: f64,
    pub q: f64,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub within_bounds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResDispatch {
    pub unit: usize,
    pub bus: usize,
    pub phase: Phase,
    pub p: f64,
    pub curtailment: f64,
    pub q: f64,
}

/// Residuals of an operating point and the injection mismatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub residuals: Vec<Residual>,
    pub max_violation: f64,
    pub max_mismatch_pu: f64,
    pub max_mismatch_mva: f64,
}

/// Everything a run produces. Powers are per-unit on `base_mva`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub schema: String,
    pub version: u32,
    pub case: String,
    pub status: RunStatus,
    pub mode: Mode,
    pub base_mva: f64,
    pub options: SolverOptions,
    pub effective_eps1: f64,
    pub notes: Vec<String>,
    pub fpp_status: Option<FppStatus>,
    pub sca_status: Option<ScaStatus>,
    pub voltages: Vec<VoltageEntry>,
    pub generation: Vec<GenerationEntry>,
    pub res: Vec<ResDispatch>,
    pub cost: CostBreakdown,
    pub max_violation: f64,
    pub max_mismatch_pu: f64,
    pub max_mismatch_mva: f64,
    pub residuals: Vec<Residual>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slacks: Option<Vec<RankedSlack>>,
    pub trace: IterationTrace,
    pub runtime_s: f64,
}

/// Generation implied by the balance equations at every bus-phase, as
/// `(P^G, Q^G)` pairs. Values are never clipped.
pub fn recover_generation(problem: &OpfProblem, point: &OperatingPoint) -> Result<Vec<Complex64>> {
    check_point(problem, point)?;
    Ok(problem.generation_from_balance(point))
}

fn check_point(problem: &OpfProblem, point: &OperatingPoint) -> Result<()> {
    if point.v.len() != problem.dim() {
        return Err(OpfError::DimensionMismatch { expected: problem.dim(), found: point.v.len() });
    }
    if point.p_res.len() != problem.num_res() || point.q_res.len() != problem.num_res() {
        return Err(OpfError::DimensionMismatch {
            expected: problem.num_res(),
            found: point.p_res.len().min(point.q_res.len()),
        });
    }
    Ok(())
}

fn box_distance(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo - x
    } else if x > hi {
        x - hi
    } else {
        0.0
    }
}

/// Largest distance between the injection a bus-phase needs and the
/// generation box it can schedule, in per-unit.
fn max_mismatch(net: &NetworkModel, generation: &[Complex64]) -> f64 {
    generation
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let g = net.bus_phase(k).gen_limits();
            box_distance(s.re, g.pmin, g.pmax).hypot(box_distance(s.im, g.qmin, g.qmax))
        })
        .fold(0.0, f64::max)
}

pub fn evaluate_residuals(problem: &OpfProblem, point: &OperatingPoint) -> Result<ResidualSummary> {
    check_point(problem, point)?;
    let residuals = problem.constraint_residuals(point);
    let max_violation = residuals.iter().fold(0.0f64, |m, r| m.max(r.value));
    let mismatch = max_mismatch(&problem.net, &problem.generation_from_balance(point));
    Ok(ResidualSummary {
        residuals,
        max_violation,
        max_mismatch_pu: mismatch,
        max_mismatch_mva: mismatch * problem.net.base_mva,
    })
}

/// Residuals recomputed line by line from the raw network data, without the
/// cached quadratic forms. Same order and ids as
/// [`OpfProblem::constraint_residuals`].
pub fn independent_residuals(net: &NetworkModel, point: &OperatingPoint) -> Result<Vec<Residual>> {
    let n = net.total_dim();
    if point.v.len() != n {
        return Err(OpfError::DimensionMismatch { expected: n, found: point.v.len() });
    }
    let v = &point.v;
    let index = net.index();
    let mut current = vec![Complex64::default(); n];
    let mut flows = Vec::new();
    for (l, line) in net.lines.iter().enumerate() {
        let y = line
            .series_impedance
            .clone()
            .try_inverse()
            .ok_or(OpfError::SingularImpedance { index: l, from: line.from, to: line.to })?;
        let fi = index.indices(line.from, &line.phases).expect("validated line");
        let ti = index.indices(line.to, &line.phases).expect("validated line");
        let m = line.phases.len();
        let t = line.tap;
        // Series current from the tapped from-side to the to-side.
        let mut i_from = vec![Complex64::default(); m];
        let mut i_to = vec![Complex64::default(); m];
        for a in 0..m {
            for b in 0..m {
                let drop = v[fi[b]] / t - v[ti[b]];
                i_from[a] += y[(a, b)] * drop / t;
                i_to[a] -= y[(a, b)] * drop;
                i_from[a] += line.shunt_admittance[(a, b)] * 0.5 * v[fi[b]] / (t * t);
                i_to[a] += line.shunt_admittance[(a, b)] * 0.5 * v[ti[b]];
            }
        }
        for a in 0..m {
            current[fi[a]] += i_from[a];
            current[ti[a]] += i_to[a];
        }
        if let Some(limits) = &line.flow_limit {
            for (end, idx, cur) in [(LineEnd::From, &fi, &i_from), (LineEnd::To, &ti, &i_to)] {
                for a in 0..m {
                    let s = v[idx[a]] * cur[a].conj();
                    flows.push(Residual {
                        id: ConstraintId {
                            location: Location::LineEnd { line: l, end, phase: line.phases[a] },
                            kind: ConstraintKind::FlowLimit,
                        },
                        value: s.norm() - limits[a],
                    });
                }
            }
        }
    }
    let mut res = vec![Complex64::default(); n];
    for (u, unit) in net.res_units.iter().enumerate() {
        res[index.index(unit.bus, unit.phase).expect("validated unit")] +=
            Complex64::new(point.p_res[u], point.q_res[u]);
    }
    let mut out = Vec::with_capacity(6 * n + flows.len() + net.res_units.len());
    for (k, (bus, phase)) in index.iter() {
        let bp = net.bus_phase(k);
        let g = bp.gen_limits();
        let shunt_current = bp.shunt * v[k];
        let s = v[k] * (current[k] + shunt_current).conj();
        let gen = s - res[k] + bp.load;
        let mag2 = v[k].norm_sqr();
        let id = |kind| ConstraintId::bus_phase(bus, phase, kind);
        out.push(Residual { id: id(ConstraintKind::ActiveBalanceUpper), value: gen.re - g.pmax });
        out.push(Residual { id: id(ConstraintKind::ActiveBalanceLower), value: g.pmin - gen.re });
        out.push(Residual { id: id(ConstraintKind::ReactiveBalanceUpper), value: gen.im - g.qmax });
        out.push(Residual { id: id(ConstraintKind::ReactiveBalanceLower), value: g.qmin - gen.im });
        out.push(Residual { id: id(ConstraintKind::VoltageUpper), value: mag2 - bp.vmax * bp.vmax });
        out.push(Residual { id: id(ConstraintKind::VoltageLower), value: bp.vmin * bp.vmin - mag2 });
    }
    out.extend(flows);
    for (u, unit) in net.res_units.iter().enumerate() {
        out.push(Residual {
            id: ConstraintId { location: Location::Res { unit: u }, kind: ConstraintKind::ResRegion },
            value: res_region_violation(unit, point.p_res[u], point.q_res[u]),
        });
    }
    Ok(out)
}

/// Voltages rotated so the reference bus sits at its nominal angle.
fn rotated(problem: &OpfProblem, v: &[Complex64]) -> Vec<Complex64> {
    let net = &problem.net;
    let reference = net.reference_bus();
    let first = reference.phases[0].phase;
    let k = net.index().index(reference.id, first).expect("reference bus is indexed");
    if v[k].norm() == 0.0 {
        return v.to_vec();
    }
    let turn = Complex64::from_polar(1.0, first.nominal_angle()) * (v[k].conj() / v[k].norm());
    v.iter().map(|x| x * turn).collect()
}

/// Assembles the report for a final operating point.
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    case: &str,
    problem: &OpfProblem,
    opts: &SolverOptions,
    point: &OperatingPoint,
    status: RunStatus,
    fpp_status: Option<FppStatus>,
    sca_status: Option<ScaStatus>,
    slacks: Option<Vec<RankedSlack>>,
    trace: IterationTrace,
    runtime_s: f64,
) -> Result<SolveReport> {
    let summary = evaluate_residuals(problem, point)?;
    let generation = problem.generation_from_balance(point);
    let v = rotated(problem, &point.v);
    let net = &problem.net;
    let voltages = net
        .index()
        .iter()
        .map(|(k, (bus, phase))| VoltageEntry {
            bus,
            phase,
            magnitude: v[k].norm(),
            angle_deg: v[k].arg().to_degrees(),
        })
        .collect();
    let generation = net
        .index()
        .iter()
        .filter_map(|(k, (bus, phase))| {
            let g = net.bus_phase(k).gen?;
            let s = generation[k];
            let tol = FEASIBILITY_TOL;
            Some(GenerationEntry {
                bus,
                phase,
                p: s.re,
                q: s.im,
                pmin: g.pmin,
                pmax: g.pmax,
                qmin: g.qmin,
                qmax: g.qmax,
                within_bounds: s.re >= g.pmin - tol
                    && s.re <= g.pmax + tol
                    && s.im >= g.qmin - tol
                    && s.im <= g.qmax + tol,
            })
        })
        .collect();
    let res = net
        .res_units
        .iter()
        .enumerate()
        .map(|(u, unit)| ResDispatch {
            unit: u,
            bus: unit.bus,
            phase: unit.phase,
            p: point.p_res[u],
            curtailment: unit.available_power - point.p_res[u],
            q: point.q_res[u],
        })
        .collect();
    let eps1 = effective_eps1(opts);
    let mut notes = Vec::new();
    if eps1 > opts.eps1 {
        notes.push(format!(
            "slack and voltage-change thresholds raised from {:e} to {:e} (10x the conic tolerance)",
            opts.eps1, eps1
        ));
    }
    if status == RunStatus::NotConverged && fpp_status == Some(FppStatus::ConvergedInfeasible) {
        notes.push("feasible point pursuit stalled with a positive slack; run `diagnose` to rank the blocking constraints".into());
    }
    Ok(SolveReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        case: case.into(),
        status,
        mode: opts.mode,
        base_mva: net.base_mva,
        options: opts.clone(),
        effective_eps1: eps1,
        notes,
        fpp_status,
        sca_status,
        voltages,
        generation,
        res,
        cost: problem.cost_at(point),
        max_violation: summary.max_violation,
        max_mismatch_pu: summary.max_mismatch_pu,
        max_mismatch_mva: summary.max_mismatch_mva,
        residuals: summary.residuals,
        slacks,
        trace,
        runtime_s,
    })
}

/// Runs the configured mode end to end: FPP then SCA, or the diagnosis loop.
pub fn solve(case: &str, problem: &OpfProblem, opts: &SolverOptions) -> Result<SolveReport> {
    let started = Instant::now();
    match opts.mode {
        Mode::Solve => {
            let fpp = run_fpp(problem, opts)?;
            let mut trace = fpp.trace;
            if fpp.status != FppStatus::Feasible {
                return build_report(
                    case,
                    problem,
                    opts,
                    &fpp.point,
                    RunStatus::NotConverged,
                    Some(fpp.status),
                    None,
                    None,
                    trace,
                    started.elapsed().as_secs_f64(),
                );
            }
            let sca = run_sca(problem, &fpp.point, opts)?;
            trace.extend(sca.trace);
            let status = if problem.max_violation(&sca.point) <= FEASIBILITY_TOL {
                RunStatus::Feasible
            } else {
                RunStatus::NotConverged
            };
            build_report(
                case,
                problem,
                opts,
                &sca.point,
                status,
                Some(fpp.status),
                Some(sca.status),
                None,
                trace,
                started.elapsed().as_secs_f64(),
            )
        }
        Mode::Diagnose => {
            let d = run_diagnosis(problem, opts)?;
            let (point, status) = match &d.feasible_point {
                Some(p) => (p.clone(), RunStatus::Feasible),
                None => (d.point.clone(), RunStatus::DiagnosedInfeasible),
            };
            build_report(
                case,
                problem,
                opts,
                &point,
                status,
                None,
                None,
                Some(d.ranked),
                d.trace,
                started.elapsed().as_secs_f64(),
            )
        }
    }
}

/// Operating point stored in a report, in the report's rotated frame.
pub fn report_point(problem: &OpfProblem, report: &SolveReport) -> Result<OperatingPoint> {
    let net = &problem.net;
    if report.voltages.len() != problem.dim() {
        return Err(OpfError::DimensionMismatch { expected: problem.dim(), found: report.voltages.len() });
    }
    let mut v = vec![Complex64::default(); problem.dim()];
    for e in &report.voltages {
        let k = net.index().index(e.bus, e.phase).ok_or_else(|| {
            OpfError::InvalidNetwork(format!("report voltage at unknown bus {} phase {}", e.bus, e.phase))
        })?;
        v[k] = Complex64::from_polar(e.magnitude, e.angle_deg.to_radians());
    }
    if report.res.len() != problem.num_res() {
        return Err(OpfError::DimensionMismatch { expected: problem.num_res(), found: report.res.len() });
    }
    let mut p_res = vec![0.0; problem.num_res()];
    let mut q_res = vec![0.0; problem.num_res()];
    for r in &report.res {
        if r.unit >= problem.num_res() {
            return Err(OpfError::InvalidNetwork(format!("report names unknown RES unit {}", r.unit)));
        }
        p_res[r.unit] = r.p;
        q_res[r.unit] = r.q;
    }
    Ok(OperatingPoint { v, p_res, q_res })
}

/// Initial point for a new run taken from a previous report.
pub fn warm_start_from_report(problem: &OpfProblem, report: &SolveReport) -> Result<InitialPoint> {
    let point = report_point(problem, report)?;
    warm_start(problem, &point.v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub max_violation: f64,
    pub max_mismatch_mva: f64,
    /// Largest gap between form-based and raw-data residuals.
    pub residual_disagreement: f64,
    pub cost: f64,
    pub cost_difference: f64,
    pub ok: bool,
}

/// Independent re-check of a report against its case.
pub fn validate_report(problem: &OpfProblem, report: &SolveReport) -> Result<Validation> {
    if report.schema != REPORT_SCHEMA || report.version != REPORT_VERSION {
        return Err(OpfError::InvalidNetwork(format!(
            "unsupported report schema {} version {}",
            report.schema, report.version
        )));
    }
    let point = report_point(problem, report)?;
    let raw = independent_residuals(&problem.net, &point)?;
    let formed = problem.constraint_residuals(&point);
    let residual_disagreement = raw
        .iter()
        .zip(&formed)
        .map(|(a, b)| if a.id == b.id { (a.value - b.value).abs() } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let max_violation = raw.iter().fold(0.0f64, |m, r| m.max(r.value));
    let mismatch = max_mismatch(&problem.net, &problem.generation_from_balance(&point));
    let cost = problem.cost_at(&point).total;
    let cost_difference = (cost - report.cost.total).abs();
    // The report stores polar voltages, so allow for the conversion.
    let claims_hold = report.status != RunStatus::Feasible || max_violation <= FEASIBILITY_TOL + 1e-9;
    let ok = claims_hold
        && residual_disagreement <= 1e-9
        && cost_difference <= 1e-6 * cost.abs().max(1.0);
    Ok(Validation {
        max_violation,
        max_mismatch_mva: mismatch * problem.net.base_mva,
        residual_disagreement,
        cost,
        cost_difference,
        ok,
    })
}

/// Resolution of [`brute_force_opf`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub magnitude_step: f64,
    pub angle_step_deg: f64,
    /// Angles of non-reference buses are searched in `±angle_window_deg`.
    pub angle_window_deg: f64,
    /// Points per axis of the RES dispatch grid.
    pub res_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { magnitude_step: 1e-3, angle_step_deg: 0.01, angle_window_deg: 30.0, res_points: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOptimum {
    pub cost: f64,
    pub point: OperatingPoint,
    pub evaluated: usize,
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round().max(0.0) as usize;
    (0..=n).map(|i| (lo + i as f64 * step).min(hi)).collect()
}

/// Exhaustive grid search for tiny single-phase networks.
///
/// A grid point can only approximate the balance equalities, so each
/// balance is accepted within the first-order change of the injection over
/// half a grid cell. Returns `None` when no grid point is feasible.
pub fn brute_force_opf(problem: &OpfProblem, resolution: &GridSpec) -> Result<Option<GridOptimum>> {
    let net = &problem.net;
    if net.buses.len() > 3 || !net.is_single_phase() {
        return Err(OpfError::Unsupported("grid search handles at most 3 single-phase buses".into()));
    }
    let n = problem.dim();
    let reference = net
        .index()
        .index(net.reference_bus().id, Phase::A)
        .expect("single-phase reference");
    let mags: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let bp = net.bus_phase(k);
            grid(bp.vmin, bp.vmax, resolution.magnitude_step)
        })
        .collect();
    let angles: Vec<f64> = grid(-resolution.angle_window_deg, resolution.angle_window_deg, resolution.angle_step_deg)
        .into_iter()
        .map(f64::to_radians)
        .collect();
    let res_grid: Vec<Vec<(f64, f64)>> = net
        .res_units
        .iter()
        .map(|unit| {
            let m = resolution.res_points.max(2);
            let mut pts = Vec::new();
            for i in 0..m {
                let p = unit.available_power * i as f64 / (m - 1) as f64;
                for j in 0..m {
                    let q = unit.inverter_capacity * (2.0 * j as f64 / (m - 1) as f64 - 1.0);
                    if res_region_violation(unit, p, q) <= 1e-12 {
                        pts.push((p, q));
                    }
                }
            }
            pts
        })
        .collect();
    // Each dispatch with its cost and per-bus-phase injection.
    let dispatches: Vec<(Vec<f64>, Vec<f64>, [Complex64; 3])> = cartesian(&res_grid)
        .into_iter()
        .map(|d| {
            let p: Vec<f64> = d.iter().map(|x| x.0).collect();
            let q: Vec<f64> = d.iter().map(|x| x.1).collect();
            let mut inj = [Complex64::default(); 3];
            for (k, x) in problem.res_per_bus_phase(&p, &q).into_iter().enumerate() {
                inj[k] = x;
            }
            (p, q, inj)
        })
        .collect();

    let mut y = [[Complex64::default(); 3]; 3];
    for (r, row) in y.iter_mut().enumerate().take(n) {
        for (c, entry) in row.iter_mut().enumerate().take(n) {
            *entry = problem.admittance.get_entry(r, c).map(|e| e.into_value()).unwrap_or_default();
        }
    }
    let mut load = [Complex64::default(); 3];
    let mut limits = [crate::network::GenLimits::ZERO; 3];
    for k in 0..n {
        load[k] = net.bus_phase(k).load;
        limits[k] = net.bus_phase(k).gen_limits();
    }

    // Enumerate (magnitudes, angles) as mixed-radix counters.
    let mut axes: Vec<usize> = mags.iter().map(Vec::len).collect();
    for k in 0..n {
        axes.push(if k == reference { 1 } else { angles.len() });
    }
    let total: usize = axes.iter().product();
    let step_m = resolution.magnitude_step;
    let step_a = resolution.angle_step_deg.to_radians();

    let evaluate = |mut code: usize, best: &mut Option<(f64, OperatingPoint)>| {
        let mut m = [1.0; 3];
        let mut v = [Complex64::default(); 3];
        for k in 0..n {
            m[k] = mags[k][code % axes[k]];
            code /= axes[k];
        }
        for k in 0..n {
            let th = if k == reference { 0.0 } else { angles[code % axes[n + k]] };
            code /= axes[n + k];
            v[k] = Complex64::from_polar(m[k], th);
        }
        let mut i = [Complex64::default(); 3];
        for k in 0..n {
            for j in 0..n {
                i[k] += y[k][j] * v[j];
            }
        }
        let mut gen = [Complex64::default(); 3];
        let mut tol = [Complex64::default(); 3];
        for k in 0..n {
            let s = v[k] * i[k].conj();
            gen[k] = s + load[k];
            // Half-cell first-order change of the injection.
            let mut t = Complex64::default();
            for j in 0..n {
                let dv_m = v[j] / m[j];
                let dv_a = Complex64::i() * v[j];
                let mut ds_m = v[k] * (y[k][j] * dv_m).conj();
                let mut ds_a = v[k] * (y[k][j] * dv_a).conj();
                if j == k {
                    ds_m += dv_m * i[k].conj();
                    ds_a += dv_a * i[k].conj();
                }
                t.re += ds_m.re.abs() * step_m;
                t.im += ds_m.im.abs() * step_m;
                if j != reference {
                    t.re += ds_a.re.abs() * step_a;
                    t.im += ds_a.im.abs() * step_a;
                }
            }
            tol[k] = t * 0.5;
        }
        let vs = &v[..n];
        if !problem
            .flows
            .iter()
            .all(|f| Complex64::new(f.real.evaluate(vs), f.reactive.evaluate(vs)).norm() <= f.limit)
        {
            return;
        }
        let mut alpha = [0.0; 3];
        for (p_res, q_res, inj) in &dispatches {
            let mut feasible = true;
            for k in 0..n {
                let g = limits[k];
                let x = gen[k] - inj[k];
                if x.re < g.pmin - tol[k].re
                    || x.re > g.pmax + tol[k].re
                    || x.im < g.qmin - tol[k].im
                    || x.im > g.qmax + tol[k].im
                {
                    feasible = false;
                    break;
                }
                alpha[k] = x.re.clamp(g.pmin, g.pmax);
            }
            if !feasible {
                continue;
            }
            let cost = problem.evaluate_cost(&alpha[..n], p_res, q_res).total;
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                *best = Some((cost, OperatingPoint { v: vs.to_vec(), p_res: p_res.clone(), q_res: q_res.clone() }));
            }
        }
    };

    let best = (0..total)
        .into_par_iter()
        .fold(|| None, |mut best, code| {
            evaluate(code, &mut best);
            best
        })
        .reduce(
            || None,
            |a, b| match (a, b) {
                (Some(x), Some(y)) => Some(if y.0 < x.0 { y } else { x }),
                (x, None) => x,
                (None, y) => y,
            },
        );
    let evaluated = total * dispatches.len();
    Ok(best.map(|(cost, point)| GridOptimum { cost, point, evaluated }))
}

fn cartesian(sets: &[Vec<(f64, f64)>]) -> Vec<Vec<(f64, f64)>> {
    let mut out: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
    for set in sets {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                set.iter().map(move |&x| {
                    let mut next = prefix.clone();
                    next.push(x);
                    next
                })
            })
            .collect();
    }
    out
}

pub fn report_to_json(report: &SolveReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn report_from_json(text: &str) -> Result<SolveReport> {
    Ok(serde_json::from_str(text)?)
}

/// Voltage profile as CSV: `bus,phase,magnitude,angle_deg`.
pub fn voltage_csv(report: &SolveReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &report.voltages {
        w.serialize(e)?;
    }
    csv_string(w)
}

#[derive(Serialize)]
struct SlackRow<'a> {
    rank: usize,
    constraint: &'a str,
    slack: f64,
}

/// Ranked diagnosis slacks as CSV; empty when the run was not a diagnosis.
pub fn slack_csv(report: &SolveReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, s) in report.slacks.iter().flatten().enumerate() {
        w.serialize(SlackRow { rank: i + 1, constraint: &s.name, slack: s.slack })?;
    }
    csv_string(w)
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| OpfError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{flat_voltage, Bus, BusPhase, CMatrix, GenLimits, Line};
    use crate::problem::{assemble, CostModel, GenCost};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_bus(load: Complex64) -> OpfProblem {
        let g = GenLimits { pmin: 0.0, pmax: 5.0, qmin: -5.0, qmax: 5.0 };
        let bus = |id, load, gen, r| Bus {
            id,
            phases: vec![BusPhase { phase: Phase::A, load, vmin: 0.95, vmax: 1.05, gen, shunt: c(0.0, 0.0) }],
            is_reference: r,
        };
        let mut line = Line::new(1, 2, vec![Phase::A], CMatrix::from_element(1, 1, c(0.01, 0.1)));
        line.shunt_admittance = CMatrix::from_element(1, 1, c(0.0, 0.02));
        line.flow_limit = Some(vec![3.0]);
        let net = NetworkModel::new(
            vec![bus(1, c(0.0, 0.0), Some(g), true), bus(2, load, None, false)],
            vec![line],
            vec![],
            100.0,
        )
        .unwrap();
        let cost = CostModel {
            generation: vec![GenCost { bus: 1, phase: Phase::A, quadratic: 0.0, linear: 1.0 }],
            ..CostModel::default()
        };
        assemble(net, cost).unwrap()
    }

    #[test]
    fn no_load_flat_profile_recovers_zero_generation() {
        let p = two_bus(c(0.0, 0.0));
        let point = OperatingPoint { v: vec![c(1.0, 0.0); 2], p_res: vec![], q_res: vec![] };
        let g = recover_generation(&p, &point).unwrap();
        // Only the line charging remains.
        assert_abs_diff_eq!(g[0].re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1].re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0].im, -0.01, epsilon = 1e-15);
    }

    #[test]
    fn unserved_load_shows_in_mismatch() {
        let p = two_bus(c(0.8, 0.2));
        let point = OperatingPoint { v: flat_voltage(&p.net), p_res: vec![], q_res: vec![] };
        let s = evaluate_residuals(&p, &point).unwrap();
        let lower = s
            .residuals
            .iter()
            .find(|r| r.id.to_string() == "bus2.a:active-balance-upper")
            .unwrap();
        assert_abs_diff_eq!(lower.value, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(s.max_mismatch_mva, 100.0 * (0.8f64.hypot(0.2 - 0.01)), epsilon = 1e-9);
    }

    #[test]
    fn raw_residuals_match_form_residuals() {
        let p = two_bus(c(0.8, 0.2));
        let point = OperatingPoint {
            v: vec![c(1.02, 0.0), Complex64::from_polar(0.97, -0.08)],
            p_res: vec![],
            q_res: vec![],
        };
        let raw = independent_residuals(&p.net, &point).unwrap();
        let formed = p.constraint_residuals(&point);
        assert_eq!(raw.len(), formed.len());
        for (a, b) in raw.iter().zip(&formed) {
            assert_eq!(a.id, b.id);
            assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
        }
    }

    #[test]
    fn no_load_grid_optimum_is_zero() {
        let p = two_bus(c(0.0, 0.0));
        let resolution = GridSpec { magnitude_step: 0.05, angle_step_deg: 1.0, angle_window_deg: 2.0, res_points: 2 };
        let best = brute_force_opf(&p, &resolution).unwrap().unwrap();
        assert!(best.cost.abs() <= 1e-3, "{}", best.cost);
    }

    #[test]
    fn reports_round_trip_through_validation() {
        let p = two_bus(c(0.8, 0.2));
        let opts = SolverOptions::default();
        let report = solve("two-bus", &p, &opts).unwrap();
        assert_eq!(report.status, RunStatus::Feasible);
        let text = serde_json::to_string(&report).unwrap();
        let back: SolveReport = serde_json::from_str(&text).unwrap();
        let check = validate_report(&p, &back).unwrap();
        assert!(check.ok, "{check:?}");
        assert_abs_diff_eq!(report.voltages[0].angle_deg, 0.0, epsilon = 1e-12);
        let warm = warm_start_from_report(&p, &back).unwrap();
        assert!(matches!(warm, InitialPoint::Warm(_)));
    }
}
