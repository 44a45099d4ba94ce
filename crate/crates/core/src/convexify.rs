//! Convex inner approximations of the QCQP around a point `z`.
//!
//! Each nonconvex record `σ·vᴴAv + aux + c ≤ 0` is restricted by keeping the
//! PSD part of `σA` and linearizing its NSD part `N` at `z`:
//! `vᴴPv + 2Re{(Nz)ᴴv} − zᴴNz + aux + c ≤ slack`. Because the dropped term
//! `(v−z)ᴴN(v−z)` is nonpositive, the surrogate bounds the original from
//! above and touches it at `v = z`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::conic::{lift_linear, lift_projection, AffineExpr, ConeConstraint, ConicProgram};
use crate::error::{OpfError, Result};
use crate::problem::{
    AuxValues, AuxVar, ConstraintId, ConstraintRecord, FormRef, OperatingPoint, OpfProblem,
};
use crate::quadratics::{Factor, HermitianSplit};

/// Feasibility tolerance required of the SCA approximation point.
pub const SCA_ENTRY_TOL: f64 = 1e-7;

/// Relative eigenvalue below which a direction counts as free.
const NULL_SPACE_CUTOFF: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubproblemKind {
    Fpp,
    Sca,
    Diagnosis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlackAttachment {
    None,
    Shared,
    Dedicated(usize),
}

#[derive(Clone, Debug)]
pub struct SurrogateConstraint {
    pub id: ConstraintId,
    /// `vᴴPv = Σ |rᴴv|²` over these factors.
    pub factors: Vec<Factor>,
    /// `w` in the linear term `2Re{wᴴv}`.
    pub linear: Vec<(usize, Complex64)>,
    pub aux: Vec<(AuxVar, f64)>,
    pub constant: f64,
    pub slack: SlackAttachment,
}

impl SurrogateConstraint {
    /// Left side at `v`, excluding the slack.
    pub fn lhs(&self, v: &[Complex64], aux: &AuxValues) -> f64 {
        self.voltage_part(v) + self.aux.iter().map(|&(a, c)| c * aux.get(a)).sum::<f64>()
    }

    /// Left side without the auxiliary terms.
    fn voltage_part(&self, v: &[Complex64]) -> f64 {
        let quad: f64 = self.factors.iter().map(|f| f.project(v).norm_sqr()).sum();
        let lin: f64 = self.linear.iter().map(|&(g, w)| (w.conj() * v[g]).re).sum();
        quad + 2.0 * lin + self.constant
    }
}

/// Convex restriction of `record` at `z`.
pub fn build_surrogate(
    record: &ConstraintRecord,
    split: &HermitianSplit,
    z: &[Complex64],
    slack: SlackAttachment,
) -> Result<SurrogateConstraint> {
    if let Some(&m) = split.plus.support().last() {
        if m >= z.len() {
            return Err(OpfError::DimensionMismatch { expected: m + 1, found: z.len() });
        }
    }
    let (factors, concave) = if record.sign > 0.0 {
        (&split.plus_factors, split.minus.scaled(record.sign))
    } else {
        (&split.minus_factors, split.plus.scaled(record.sign))
    };
    let scale = record.sign.abs();
    let factors = factors
        .iter()
        .map(|f| Factor {
            support: f.support.clone(),
            coeffs: f.coeffs.iter().map(|c| c * scale.sqrt()).collect(),
        })
        .collect();
    let linear: Vec<(usize, Complex64)> = if concave.is_zero() {
        Vec::new()
    } else {
        concave.apply(z)
    };
    let zn: f64 = linear.iter().map(|&(g, w)| (z[g].conj() * w).re).sum();
    Ok(SurrogateConstraint {
        id: record.id,
        factors,
        linear,
        aux: record.aux.clone(),
        constant: record.constant - zn,
        slack,
    })
}

/// Positions of every variable group inside the real decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub n_res: usize,
    pub n_flow: usize,
    pub n_slack: usize,
    pub n_epi: usize,
}

impl Layout {
    pub fn re(&self, k: usize) -> usize {
        k
    }
    pub fn im(&self, k: usize) -> usize {
        self.n + k
    }
    pub fn p_res(&self, u: usize) -> usize {
        2 * self.n + u
    }
    pub fn q_res(&self, u: usize) -> usize {
        2 * self.n + self.n_res + u
    }
    pub fn alpha(&self, k: usize) -> usize {
        2 * self.n + 2 * self.n_res + k
    }
    pub fn flow_p(&self, f: usize) -> usize {
        3 * self.n + 2 * self.n_res + f
    }
    pub fn flow_q(&self, f: usize) -> usize {
        3 * self.n + 2 * self.n_res + self.n_flow + f
    }
    pub fn slack(&self, i: usize) -> usize {
        3 * self.n + 2 * self.n_res + 2 * self.n_flow + i
    }
    pub fn epi(&self, i: usize) -> usize {
        self.slack(self.n_slack) + i
    }
    pub fn num_vars(&self) -> usize {
        self.epi(self.n_epi)
    }

    pub fn aux(&self, a: AuxVar) -> usize {
        match a {
            AuxVar::ResP(u) => self.p_res(u),
            AuxVar::ResQ(u) => self.q_res(u),
            AuxVar::Alpha(k) => self.alpha(k),
            AuxVar::FlowP(f) => self.flow_p(f),
            AuxVar::FlowQ(f) => self.flow_q(f),
        }
    }

    /// The voltage variables hold the step `δ = v − z` from the
    /// approximation point.
    pub fn delta(&self, x: &[f64]) -> Vec<Complex64> {
        (0..self.n).map(|k| Complex64::new(x[self.re(k)], x[self.im(k)])).collect()
    }

    pub fn aux_values(&self, x: &[f64]) -> AuxValues {
        AuxValues {
            p_res: (0..self.n_res).map(|u| x[self.p_res(u)]).collect(),
            q_res: (0..self.n_res).map(|u| x[self.q_res(u)]).collect(),
            alpha: (0..self.n).map(|k| x[self.alpha(k)]).collect(),
            flow_p: (0..self.n_flow).map(|f| x[self.flow_p(f)]).collect(),
            flow_q: (0..self.n_flow).map(|f| x[self.flow_q(f)]).collect(),
        }
    }

    pub fn slacks(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_slack).map(|i| x[self.slack(i)]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Subproblem {
    pub kind: SubproblemKind,
    pub program: ConicProgram,
    pub layout: Layout,
    pub surrogates: Vec<SurrogateConstraint>,
    /// Orthonormal directions `u` along which `v` is held at `z` (SCA only).
    pub fixed_directions: Vec<Vec<Complex64>>,
    pub anchor: Vec<Complex64>,
}

impl Subproblem {
    pub fn voltage(&self, x: &[f64]) -> Vec<Complex64> {
        self.anchor.iter().zip(self.layout.delta(x)).map(|(z, d)| z + d).collect()
    }

    /// Decodes `x`, removing any drift of `v` along the fixed directions.
    pub fn operating_point(&self, x: &[f64]) -> OperatingPoint {
        let aux = self.layout.aux_values(x);
        let mut v = self.voltage(x);
        for u in &self.fixed_directions {
            let drift: Complex64 = u.iter().zip(v.iter().zip(&self.anchor)).map(|(a, (b, c))| a.conj() * (b - c)).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= drift * ui;
            }
        }
        OperatingPoint { v, p_res: aux.p_res, q_res: aux.q_res }
    }

    /// Voltages and auxiliaries of `x`, with the auxiliaries pushed back into
    /// their hard convex sets (RES regions, flow disks, `α ≤ P̄^G`).
    pub fn repaired(&self, problem: &OpfProblem, x: &[f64]) -> (Vec<Complex64>, AuxValues) {
        let mut aux = self.layout.aux_values(x);
        repair_aux(problem, &mut aux);
        (self.voltage(x), aux)
    }

    /// Surrogate left sides at `(v, aux)`, i.e. the slack each one needs.
    pub fn surrogate_values(&self, v: &[Complex64], aux: &AuxValues) -> Vec<f64> {
        self.surrogates.iter().map(|s| s.lhs(v, aux)).collect()
    }
}

/// Moves auxiliaries onto their hard sets. `α` is raised to `P̄^G`, which
/// only loosens the epigraph records.
pub fn repair_aux(problem: &OpfProblem, aux: &mut AuxValues) {
    for (k, a) in aux.alpha.iter_mut().enumerate() {
        *a = problem.net.bus_phase(k).gen_limits().pmax;
    }
    for (u, unit) in problem.net.res_units.iter().enumerate() {
        let p = aux.p_res[u].clamp(0.0, unit.available_power);
        let qmax = unit.max_angle.tan() * p;
        let q = aux.q_res[u].clamp(-qmax, qmax);
        let mag = p.hypot(q);
        let scale = if mag > unit.inverter_capacity { unit.inverter_capacity / mag } else { 1.0 };
        aux.p_res[u] = p * scale;
        aux.q_res[u] = q * scale;
    }
    for (f, flow) in problem.flows.iter().enumerate() {
        let mag = aux.flow_p[f].hypot(aux.flow_q[f]);
        if mag > flow.limit {
            aux.flow_p[f] *= flow.limit / mag;
            aux.flow_q[f] *= flow.limit / mag;
        }
    }
}

/// Cone form of `s` in the step `δ = v − z`. The constant becomes the
/// surrogate value at `z` and the linear part its gradient, so the solver never
/// handles the large cancelling terms of `vᴴPv`.
fn encode_surrogate(s: &SurrogateConstraint, layout: &Layout, z: &[Complex64]) -> ConeConstraint {
    let n = layout.n;
    let mut gradient: Vec<(usize, Complex64)> = s.linear.clone();
    for f in &s.factors {
        let at_z = f.project(z);
        gradient.extend(f.support.iter().zip(&f.coeffs).map(|(&g, r)| (g, at_z * r)));
    }
    let mut terms = lift_linear(&gradient, n);
    terms.extend(s.aux.iter().map(|&(a, c)| (layout.aux(a), c)));
    match s.slack {
        SlackAttachment::None => {}
        SlackAttachment::Shared => terms.push((layout.slack(0), -1.0)),
        SlackAttachment::Dedicated(i) => terms.push((layout.slack(i), -1.0)),
    }
    let lin = AffineExpr::new(terms, s.voltage_part(z));
    if s.factors.is_empty() {
        return ConeConstraint::NonPositive(lin);
    }
    let tail = s
        .factors
        .iter()
        .flat_map(|f| {
            let (re, im) = lift_projection(&f.support, &f.coeffs, n);
            [re, im]
        })
        .collect();
    ConeConstraint::RotatedSecondOrder { u: lin.scaled(-1.0), w: AffineExpr::constant(0.5), tail }
}

/// Variables, bounds and constraints common to every subproblem: the RES
/// regions, `α ≤ P̄^G` and the flow disks.
fn base_program(problem: &OpfProblem, layout: &Layout) -> ConicProgram {
    let mut p = ConicProgram::new(layout.num_vars());
    for k in 0..layout.n {
        p.upper[layout.alpha(k)] = problem.net.bus_phase(k).gen_limits().pmax;
    }
    for (u, unit) in problem.net.res_units.iter().enumerate() {
        let (pi, qi) = (layout.p_res(u), layout.q_res(u));
        p.lower[pi] = 0.0;
        p.upper[pi] = unit.available_power;
        let t = unit.max_angle.tan();
        p.push(ConeConstraint::NonPositive(AffineExpr::new(vec![(qi, 1.0), (pi, -t)], 0.0)));
        p.push(ConeConstraint::NonPositive(AffineExpr::new(vec![(qi, -1.0), (pi, -t)], 0.0)));
        p.push(ConeConstraint::SecondOrder {
            head: AffineExpr::constant(unit.inverter_capacity),
            tail: vec![AffineExpr::var(pi), AffineExpr::var(qi)],
        });
    }
    for (f, flow) in problem.flows.iter().enumerate() {
        p.push(ConeConstraint::SecondOrder {
            head: AffineExpr::constant(flow.limit),
            tail: vec![AffineExpr::var(layout.flow_p(f)), AffineExpr::var(layout.flow_q(f))],
        });
    }
    for i in 0..layout.n_slack {
        p.lower[layout.slack(i)] = 0.0;
    }
    p
}

fn check_dim(problem: &OpfProblem, z: &[Complex64]) -> Result<()> {
    if z.len() != problem.dim() {
        return Err(OpfError::DimensionMismatch { expected: problem.dim(), found: z.len() });
    }
    Ok(())
}

fn surrogates(
    problem: &OpfProblem,
    z: &[Complex64],
    slack: impl Fn(usize) -> SlackAttachment,
) -> Result<Vec<SurrogateConstraint>> {
    problem
        .constraints
        .iter()
        .enumerate()
        .map(|(i, rec)| build_surrogate(rec, problem.split(rec.form), z, slack(i)))
        .collect()
}

fn layout(problem: &OpfProblem, n_slack: usize, n_epi: usize) -> Layout {
    Layout {
        n: problem.dim(),
        n_res: problem.num_res(),
        n_flow: problem.num_flows(),
        n_slack,
        n_epi,
    }
}

/// Minimize one slack shared by every surrogate.
pub fn build_fpp_subproblem(problem: &OpfProblem, z: &[Complex64]) -> Result<Subproblem> {
    check_dim(problem, z)?;
    let layout = layout(problem, 1, 0);
    let mut program = base_program(problem, &layout);
    let surrogates = surrogates(problem, z, |_| SlackAttachment::Shared)?;
    for s in &surrogates {
        program.push(encode_surrogate(s, &layout, z));
    }
    program.objective[layout.slack(0)] = 1.0;
    Ok(Subproblem {
        kind: SubproblemKind::Fpp,
        program,
        layout,
        surrogates,
        fixed_directions: Vec::new(),
        anchor: z.to_vec(),
    })
}

/// Minimize the norm of one slack per surrogate.
pub fn build_diagnosis_subproblem(problem: &OpfProblem, z: &[Complex64]) -> Result<Subproblem> {
    check_dim(problem, z)?;
    let m = problem.constraints.len();
    let layout = layout(problem, m, 1);
    let mut program = base_program(problem, &layout);
    let surrogates = surrogates(problem, z, SlackAttachment::Dedicated)?;
    for s in &surrogates {
        program.push(encode_surrogate(s, &layout, z));
    }
    // `t ≥ ‖s‖₂` has the same minimizers as `‖s‖₂²` and keeps the objective
    // on the scale of the slacks, which the backend resolves far better.
    program.push(ConeConstraint::SecondOrder {
        head: AffineExpr::var(layout.epi(0)),
        tail: (0..m).map(|i| AffineExpr::var(layout.slack(i))).collect(),
    });
    program.objective[layout.epi(0)] = 1.0;
    Ok(Subproblem {
        kind: SubproblemKind::Diagnosis,
        program,
        layout,
        surrogates,
        fixed_directions: Vec::new(),
        anchor: z.to_vec(),
    })
}

/// Auxiliary values implied by an operating point: generation and line
/// flows read off the forms, clipped to their hard sets.
pub fn implied_aux(problem: &OpfProblem, z: &OperatingPoint) -> AuxValues {
    let res = problem.res_per_bus_phase(&z.p_res, &z.q_res);
    let alpha = problem
        .forms
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let bp = problem.net.bus_phase(k);
            (f.real_power.evaluate(&z.v) + bp.load.re - res[k].re).min(bp.gen_limits().pmax)
        })
        .collect();
    let mut aux = AuxValues {
        p_res: z.p_res.clone(),
        q_res: z.q_res.clone(),
        alpha,
        flow_p: problem.flows.iter().map(|f| f.real.evaluate(&z.v)).collect(),
        flow_q: problem.flows.iter().map(|f| f.reactive.evaluate(&z.v)).collect(),
    };
    let alpha = aux.alpha.clone();
    repair_aux(problem, &mut aux);
    aux.alpha = alpha;
    aux
}

/// Records whose upper and lower surrogates together force
/// `(v−z)ᴴ|A|(v−z) ≤ 0`: balances with equal bounds, equal voltage bounds and
/// every flow link (its auxiliary is free).
fn pinned_records(problem: &OpfProblem) -> Vec<bool> {
    problem
        .constraints
        .iter()
        .map(|rec| match rec.form {
            FormRef::BusReal(k) => {
                let g = problem.net.bus_phase(k).gen_limits();
                g.pmin == g.pmax
            }
            FormRef::BusReactive(k) => {
                let g = problem.net.bus_phase(k).gen_limits();
                g.qmin == g.qmax
            }
            FormRef::Magnitude(k) => {
                let bp = problem.net.bus_phase(k);
                bp.vmin == bp.vmax
            }
            FormRef::FlowReal(_) | FormRef::FlowReactive(_) => true,
        })
        .collect()
}

/// Equality rows `uᴴδ = 0` spanning the joint range of `|A|` over the
/// pinned forms. On that set every pinned surrogate is constant in `v`, which
/// is exactly what the two-sided surrogates allow, and the rows stay well
/// conditioned where the pair of cones would have an empty interior.
fn null_space_rows(
    problem: &OpfProblem,
    pinned: &[bool],
    layout: &Layout,
) -> (Vec<ConeConstraint>, Vec<Vec<Complex64>>) {
    let n = problem.dim();
    let mut forms: Vec<FormRef> = problem
        .constraints
        .iter()
        .zip(pinned)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r.form)
        .collect();
    forms.dedup();
    if forms.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let mut gram = DMatrix::<Complex64>::zeros(n, n);
    for f in forms {
        let split = problem.split(f);
        gram += split.plus.to_dense(n) - split.minus.to_dense(n);
    }
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let all: Vec<usize> = (0..n).collect();
    let mut rows = Vec::new();
    let mut basis = Vec::new();
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= NULL_SPACE_CUTOFF * top {
            continue;
        }
        let u: Vec<Complex64> = eig.eigenvectors.column(i).iter().copied().collect();
        let (re, im) = lift_projection(&all, &u, layout.n);
        rows.push(ConeConstraint::Zero(re));
        rows.push(ConeConstraint::Zero(im));
        basis.push(u);
    }
    (rows, basis)
}

/// Minimize cost over the slack-free inner approximation at a feasible `z`.
pub fn build_sca_subproblem(problem: &OpfProblem, z: &OperatingPoint) -> Result<Subproblem> {
    check_dim(problem, &z.v)?;
    let violation = problem.max_violation(z);
    if !(violation <= SCA_ENTRY_TOL) {
        return Err(OpfError::InfeasibleStart(violation));
    }

    // One epigraph per strictly convex cost term.
    let mut quad_terms: Vec<(f64, AffineExpr)> = Vec::new();
    let mut linear: Vec<(usize, f64)> = Vec::new();
    let mut constant = problem.cost.constant;
    let lay0 = layout(problem, 0, 0);
    for k in 0..problem.dim() {
        let (b2, b1) = problem.gen_cost(k);
        if b2 > 0.0 {
            quad_terms.push((b2, AffineExpr::var(lay0.alpha(k))));
        }
        linear.push((lay0.alpha(k), b1));
    }
    for (u, unit) in problem.net.res_units.iter().enumerate() {
        let c = problem.res_cost(u);
        let pi = lay0.p_res(u);
        if c.curtailment_quadratic > 0.0 {
            let cut = AffineExpr::new(vec![(pi, -1.0)], unit.available_power);
            quad_terms.push((c.curtailment_quadratic, cut));
        }
        linear.push((pi, -c.curtailment_linear));
        constant += c.curtailment_linear * unit.available_power;
        if c.reactive_quadratic > 0.0 {
            quad_terms.push((c.reactive_quadratic, AffineExpr::var(lay0.q_res(u))));
        }
        linear.push((lay0.q_res(u), c.reactive_linear));
    }

    let layout = layout(problem, 0, quad_terms.len());
    let mut program = base_program(problem, &layout);
    let aux_z = implied_aux(problem, z);
    let mut surrogates = surrogates(problem, &z.v, |_| SlackAttachment::None)?;
    // Absorb the residual violation of z so that z stays feasible.
    for s in &mut surrogates {
        s.constant -= s.lhs(&z.v, &aux_z).max(0.0);
    }
    let pinned = pinned_records(problem);
    let (rows, fixed_directions) = null_space_rows(problem, &pinned, &layout);
    program.constraints.extend(rows);
    for (s, &pin) in surrogates.iter().zip(&pinned) {
        if pin {
            let terms = s.aux.iter().map(|&(a, c)| (layout.aux(a), c)).collect();
            program.push(ConeConstraint::NonPositive(AffineExpr::new(terms, s.voltage_part(&z.v))));
        } else {
            program.push(encode_surrogate(s, &layout, &z.v));
        }
    }
    for (i, (coef, expr)) in quad_terms.into_iter().enumerate() {
        program.push(ConeConstraint::RotatedSecondOrder {
            u: AffineExpr::var(layout.epi(i)),
            w: AffineExpr::constant(0.5),
            tail: vec![expr.scaled(coef.sqrt())],
        });
        program.objective[layout.epi(i)] = 1.0;
    }
    for (i, c) in linear {
        program.objective[i] += c;
    }
    program.objective_constant = constant;
    Ok(Subproblem {
        kind: SubproblemKind::Sca,
        program,
        layout,
        surrogates,
        fixed_directions,
        anchor: z.v.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve_conic, ConicStatus, DEFAULT_TOL};
    use crate::network::{flat_voltage, Bus, BusPhase, CMatrix, GenLimits, Line, NetworkModel, Phase};
    use crate::problem::{assemble, CostModel, FormRef};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_bus(load: Complex64) -> OpfProblem {
        let g = GenLimits { pmin: 0.0, pmax: 5.0, qmin: -5.0, qmax: 5.0 };
        let bus = |id, load, gen, r| Bus {
            id,
            phases: vec![BusPhase {
                phase: Phase::A,
                load,
                vmin: 0.9,
                vmax: 1.1,
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
        assemble(net, CostModel::default()).unwrap()
    }

    #[test]
    fn surrogate_is_tangent_and_upper_bound() {
        let p = two_bus(c(0.5, 0.1));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rnd = |rng: &mut ChaCha8Rng| -> Vec<Complex64> {
            (0..2).map(|_| c(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2))).collect()
        };
        for rec in &p.constraints {
            for _ in 0..20 {
                let z = rnd(&mut rng);
                let v = rnd(&mut rng);
                let s = build_surrogate(rec, p.split(rec.form), &z, SlackAttachment::None).unwrap();
                let aux = AuxValues { alpha: vec![0.3, -0.2], ..AuxValues::default() };
                let orig = |x: &[Complex64]| p.record_value(rec, x, &aux);
                assert_abs_diff_eq!(s.lhs(&z, &aux), orig(&z), epsilon = 1e-10);
                assert!(s.lhs(&v, &aux) >= orig(&v) - 1e-10);
            }
        }
    }

    #[test]
    fn voltage_lower_surrogate_is_linear() {
        let p = two_bus(c(0.0, 0.0));
        let rec = p
            .constraints
            .iter()
            .find(|r| r.id.kind == crate::problem::ConstraintKind::VoltageLower)
            .unwrap();
        assert_eq!(rec.form, FormRef::Magnitude(0));
        let s = build_surrogate(rec, p.split(rec.form), &[c(1.0, 0.0); 2], SlackAttachment::None)
            .unwrap();
        assert!(s.factors.is_empty());
        assert_eq!(s.linear.len(), 1);
    }

    #[test]
    fn fpp_on_feasible_flat_start_has_zero_slack() {
        let p = two_bus(c(0.0, 0.0));
        let sub = build_fpp_subproblem(&p, &flat_voltage(&p.net)).unwrap();
        let sol = solve_conic(&sub.program, DEFAULT_TOL).unwrap();
        assert_eq!(sol.status, ConicStatus::Optimal);
        assert!(sol.objective.abs() <= 1e-8);
    }

    #[test]
    fn fpp_slack_is_positive_when_load_is_unserved() {
        let p = two_bus(c(0.8, 0.2));
        let sub = build_fpp_subproblem(&p, &flat_voltage(&p.net)).unwrap();
        let sol = solve_conic(&sub.program, DEFAULT_TOL).unwrap();
        assert_eq!(sol.status, ConicStatus::Optimal);
        assert!(sol.objective > 1e-3);
        // The returned point satisfies every surrogate up to the slack.
        let v = sub.voltage(&sol.x);
        let aux = sub.layout.aux_values(&sol.x);
        let s = sol.x[sub.layout.slack(0)];
        for sur in &sub.surrogates {
            assert!(sur.lhs(&v, &aux) <= s + 1e-8);
        }
    }

    #[test]
    fn sca_rejects_infeasible_start() {
        let p = two_bus(c(0.8, 0.2));
        let z = OperatingPoint { v: flat_voltage(&p.net), p_res: vec![], q_res: vec![] };
        assert!(matches!(build_sca_subproblem(&p, &z), Err(OpfError::InfeasibleStart(_))));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = two_bus(c(0.0, 0.0));
        assert!(matches!(
            build_fpp_subproblem(&p, &[c(1.0, 0.0)]),
            Err(OpfError::DimensionMismatch { .. })
        ));
    }
}
