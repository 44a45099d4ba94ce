mod common;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use fpp_opf::analysis::{
    independent_residuals, report_from_json, report_point, report_to_json, solve, validate_report,
    RunStatus,
};
use fpp_opf::driver::{run_diagnosis, warm_start, Mode, SolverOptions, Stage, ZERO_SLACK};
use fpp_opf::error::OpfError;
use fpp_opf::problem::assemble;

fn fpp_iterations(trace: &[fpp_opf::driver::IterationRecord]) -> usize {
    trace.iter().filter(|r| r.stage == Stage::Fpp).count()
}

#[test]
fn warm_start_after_load_change_needs_fewer_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for file in ["wb5.m", "case14.m"] {
        let (case, problem) = load_case(file);
        let base = solve(file, &problem, &SolverOptions::default()).unwrap();
        assert_eq!(base.status, RunStatus::Feasible);
        let previous = report_point(&problem, &base).unwrap().v;

        let mut net = case.net.clone();
        for bus in &mut net.buses {
            for p in &mut bus.phases {
                p.load *= 1.0 + rng.gen_range(-0.05..0.05);
            }
        }
        let perturbed = assemble(net, case.cost.clone()).unwrap();
        let cold = solve(file, &perturbed, &SolverOptions::default()).unwrap();
        let opts = SolverOptions { initial: warm_start(&perturbed, &previous).unwrap(), ..SolverOptions::default() };
        let warm = solve(file, &perturbed, &opts).unwrap();
        assert_eq!(warm.status, RunStatus::Feasible);
        assert!(
            fpp_iterations(&warm.trace) < fpp_iterations(&cold.trace),
            "{file}: warm {} vs cold {}",
            fpp_iterations(&warm.trace),
            fpp_iterations(&cold.trace)
        );
    }
}

#[test]
fn warm_start_rejects_wrong_length() {
    let (_, problem) = load_case("wb5.m");
    let err = warm_start(&problem, &[Complex64::new(1.0, 0.0); 3]).unwrap_err();
    assert!(matches!(err, OpfError::DimensionMismatch { expected: 5, found: 3 }));
}

#[test]
fn raw_residuals_agree_with_forms() {
    for file in ["wb5.m", "case14.m", "case9mod_v94.m", "ieee37_synthetic.json"] {
        let (_, problem) = load_case(file);
        let report = solve(file, &problem, &SolverOptions::default()).unwrap();
        let point = report_point(&problem, &report).unwrap();
        let raw = independent_residuals(&problem.net, &point).unwrap();
        let formed = problem.constraint_residuals(&point);
        assert_eq!(raw.len(), formed.len());
        for (a, b) in raw.iter().zip(&formed) {
            assert_eq!(a.id, b.id);
            assert!((a.value - b.value).abs() <= 1e-9, "{file} {:?}: {} vs {}", a.id, a.value, b.value);
        }
    }
}

#[test]
fn reports_survive_json_and_validate() {
    let (_, problem) = load_case("case9mod_v94.m");
    let report = solve("case9mod_v94", &problem, &SolverOptions::default()).unwrap();
    let back = report_from_json(&report_to_json(&report).unwrap()).unwrap();
    assert_eq!(back.status, report.status);
    assert_eq!(back.voltages, report.voltages);
    let check = validate_report(&problem, &back).unwrap();
    assert!(check.ok, "{check:?}");

    let mut tampered = back.clone();
    tampered.cost.total *= 1.01;
    assert!(!validate_report(&problem, &tampered).unwrap().ok);
}

#[test]
fn infeasible_case_is_diagnosed_not_solved() {
    let (_, problem) = load_case("wb5_q70.m");
    let solved = solve("wb5_q70", &problem, &SolverOptions::default()).unwrap();
    assert_eq!(solved.status, RunStatus::NotConverged);
    assert_eq!(solved.status.exit_code(), 3);

    let opts = SolverOptions { mode: Mode::Diagnose, ..SolverOptions::default() };
    let diagnosed = solve("wb5_q70", &problem, &opts).unwrap();
    assert_eq!(diagnosed.status, RunStatus::DiagnosedInfeasible);
    let slacks = diagnosed.slacks.unwrap();
    assert!(slacks[0].slack > ZERO_SLACK);
    assert!(slacks.windows(2).all(|w| w[0].slack >= w[1].slack));
}

#[test]
fn feasible_cases_diagnose_with_zero_slacks() {
    let opts = SolverOptions { mode: Mode::Diagnose, ..SolverOptions::default() };
    for file in ["wb5.m", "case9mod_v94.m"] {
        let (_, problem) = load_case(file);
        let d = run_diagnosis(&problem, &opts).unwrap();
        assert!(d.ranked[0].slack <= ZERO_SLACK, "{file}: {}", d.ranked[0].slack);
        assert!(d.feasible_point.is_some());
    }
}

#[test]
fn reference_phase_sits_at_its_nominal_angle() {
    let (_, problem) = load_case("ieee37_synthetic.json");
    let report = solve("ieee37", &problem, &SolverOptions::default()).unwrap();
    let reference = problem.net.reference_bus().id;
    let a = report.voltages.iter().find(|e| e.bus == reference).unwrap();
    assert!(a.angle_deg.abs() < 1e-9);
}
