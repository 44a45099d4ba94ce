//! Real-valued conic programs and the solver contract.
//!
//! A [`ConicProgram`] minimizes `cᵀx + c₀` over affine constraints of four
//! shapes: `e(x) = 0`, `e(x) ≤ 0`, the second-order cone
//! `h(x) ≥ ‖t(x)‖` and the rotated cone `2u(x)w(x) ≥ ‖t(x)‖², u, w ≥ 0`,
//! plus per-variable bounds. [`solve_conic`] hands the program to Clarabel
//! and re-checks the returned point against the stored data.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OpfError, Result};
use crate::quadratics::HermitianForm;

pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        AffineExpr { terms, constant }
    }

    pub fn var(i: usize) -> Self {
        AffineExpr::new(vec![(i, 1.0)], 0.0)
    }

    pub fn constant(c: f64) -> Self {
        AffineExpr::new(Vec::new(), c)
    }

    pub fn plus(mut self, i: usize, coeff: f64) -> Self {
        self.terms.push((i, coeff));
        self
    }

    pub fn scaled(&self, factor: f64) -> Self {
        AffineExpr {
            terms: self.terms.iter().map(|&(i, c)| (i, c * factor)).collect(),
            constant: self.constant * factor,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }

    fn max_index(&self) -> Option<usize> {
        self.terms.iter().map(|&(i, _)| i).max()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConeConstraint {
    Zero(AffineExpr),
    NonPositive(AffineExpr),
    /// `head ≥ ‖tail‖₂`.
    SecondOrder { head: AffineExpr, tail: Vec<AffineExpr> },
    /// `2·u·w ≥ ‖tail‖₂²` with `u, w ≥ 0`.
    RotatedSecondOrder {
        u: AffineExpr,
        w: AffineExpr,
        tail: Vec<AffineExpr>,
    },
}

impl ConeConstraint {
    /// Nonnegative violation of the constraint at `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        match self {
            ConeConstraint::Zero(e) => e.eval(x).abs(),
            ConeConstraint::NonPositive(e) => e.eval(x).max(0.0),
            ConeConstraint::SecondOrder { head, tail } => {
                let norm = tail.iter().map(|t| t.eval(x).powi(2)).sum::<f64>().sqrt();
                (norm - head.eval(x)).max(0.0)
            }
            ConeConstraint::RotatedSecondOrder { u, w, tail } => {
                let (u, w) = (u.eval(x), w.eval(x));
                let sq: f64 = tail.iter().map(|t| t.eval(x).powi(2)).sum();
                let a = (u + w) / std::f64::consts::SQRT_2;
                let b = (u - w) / std::f64::consts::SQRT_2;
                ((b * b + sq).sqrt() - a).max(0.0).max(-u).max(-w)
            }
        }
    }

    fn exprs(&self) -> Vec<&AffineExpr> {
        match self {
            ConeConstraint::Zero(e) | ConeConstraint::NonPositive(e) => vec![e],
            ConeConstraint::SecondOrder { head, tail } => {
                std::iter::once(head).chain(tail.iter()).collect()
            }
            ConeConstraint::RotatedSecondOrder { u, w, tail } => {
                [u, w].into_iter().chain(tail.iter()).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub objective_constant: f64,
    pub constraints: Vec<ConeConstraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        ConicProgram {
            num_vars,
            objective: vec![0.0; num_vars],
            objective_constant: 0.0,
            constraints: Vec::new(),
            lower: vec![f64::NEG_INFINITY; num_vars],
            upper: vec![f64::INFINITY; num_vars],
        }
    }

    pub fn push(&mut self, c: ConeConstraint) {
        self.constraints.push(c);
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + self.objective_constant
    }

    /// Largest violation over all constraints and bounds.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = (0..self.num_vars)
            .map(|i| (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0))
            .fold(0.0f64, f64::max);
        self.constraints
            .iter()
            .map(|c| c.violation(x))
            .fold(bounds, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars;
        if self.objective.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(OpfError::DimensionMismatch {
                expected: n,
                found: self.objective.len(),
            });
        }
        for c in &self.constraints {
            for e in c.exprs() {
                if let Some(m) = e.max_index() {
                    if m >= n {
                        return Err(OpfError::Conic(format!(
                            "constraint references variable {m} of {n}"
                        )));
                    }
                }
                if !e.constant.is_finite() || e.terms.iter().any(|t| !t.1.is_finite()) {
                    return Err(OpfError::Conic("non-finite constraint data".into()));
                }
            }
        }
        if (0..n).any(|i| self.lower[i] > self.upper[i]) {
            return Err(OpfError::Conic("variable bounds are inverted".into()));
        }
        Ok(())
    }

    /// Plain-text canonical form.
    ///
    /// ```text
    /// conic-program 1
    /// vars <n>
    /// objective <c0> <nnz>      followed by "<index> <value>" lines
    /// bounds <count>            followed by "<index> <lower> <upper>" lines
    /// <kind> <rows>             per constraint, kind ∈ zero|nonpos|soc|rsoc
    /// row <constant> <nnz>      followed by "<index> <value>" lines
    /// ```
    pub fn write_text(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "conic-program 1")?;
        writeln!(out, "vars {}", self.num_vars)?;
        let obj: Vec<_> = self.objective.iter().enumerate().filter(|(_, c)| **c != 0.0).collect();
        writeln!(out, "objective {:e} {}", self.objective_constant, obj.len())?;
        for (i, c) in obj {
            writeln!(out, "{i} {c:e}")?;
        }
        let bounded: Vec<usize> = (0..self.num_vars)
            .filter(|&i| self.lower[i].is_finite() || self.upper[i].is_finite())
            .collect();
        writeln!(out, "bounds {}", bounded.len())?;
        for i in bounded {
            writeln!(out, "{i} {:e} {:e}", self.lower[i], self.upper[i])?;
        }
        for c in &self.constraints {
            let kind = match c {
                ConeConstraint::Zero(_) => "zero",
                ConeConstraint::NonPositive(_) => "nonpos",
                ConeConstraint::SecondOrder { .. } => "soc",
                ConeConstraint::RotatedSecondOrder { .. } => "rsoc",
            };
            let rows = c.exprs();
            writeln!(out, "{kind} {}", rows.len())?;
            for e in rows {
                writeln!(out, "row {:e} {}", e.constant, e.terms.len())?;
                for (i, v) in &e.terms {
                    writeln!(out, "{i} {v:e}")?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConicStatus {
    Optimal,
    /// The backend converged but the re-checked residual exceeds the tolerance.
    Inaccurate,
    MaxIter,
    Infeasible,
    NumericalFailure,
}

impl fmt::Display for ConicStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConicStatus::Optimal => "optimal",
            ConicStatus::Inaccurate => "inaccurate",
            ConicStatus::MaxIter => "max-iter",
            ConicStatus::Infeasible => "infeasible",
            ConicStatus::NumericalFailure => "numerical-failure",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub duality_gap: f64,
    pub status: ConicStatus,
    pub iterations: u32,
    pub backend_status: String,
}

/// Stacks `[Re v; Im v]`.
pub fn lift_vector(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|c| c.re).chain(v.iter().map(|c| c.im)).collect()
}

pub fn unlift_vector(x: &[f64], n: usize) -> Vec<Complex64> {
    (0..n).map(|k| Complex64::new(x[k], x[n + k])).collect()
}

/// Real symmetric lift `[[Re A, −Im A], [Im A, Re A]]` of a Hermitian form,
/// as `(row, col, value)` triplets over `2n` real variables.
pub fn lift_hermitian(form: &HermitianForm, n: usize) -> Vec<(usize, usize, f64)> {
    let s = form.support();
    let b = form.block();
    let mut out = Vec::new();
    for (r, &gr) in s.iter().enumerate() {
        for (c, &gc) in s.iter().enumerate() {
            let a = b[(r, c)];
            if a.re != 0.0 {
                out.push((gr, gc, a.re));
                out.push((n + gr, n + gc, a.re));
            }
            if a.im != 0.0 {
                out.push((gr, n + gc, -a.im));
                out.push((n + gr, gc, a.im));
            }
        }
    }
    out
}

/// Coefficients of `2·Re{wᴴv}` in `x = [Re v; Im v]`.
pub fn lift_linear(w: &[(usize, Complex64)], n: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(2 * w.len());
    for &(g, c) in w {
        if c.re != 0.0 {
            out.push((g, 2.0 * c.re));
        }
        if c.im != 0.0 {
            out.push((n + g, 2.0 * c.im));
        }
    }
    out
}

/// Real and imaginary parts of `rᴴv` as affine expressions in `x`.
pub fn lift_projection(support: &[usize], coeffs: &[Complex64], n: usize) -> (AffineExpr, AffineExpr) {
    let mut re = Vec::new();
    let mut im = Vec::new();
    for (&g, r) in support.iter().zip(coeffs) {
        // conj(r)·v = (a − jb)(x + jy) = (ax + by) + j(ay − bx)
        if r.re != 0.0 {
            re.push((g, r.re));
            im.push((n + g, r.re));
        }
        if r.im != 0.0 {
            re.push((n + g, r.im));
            im.push((g, -r.im));
        }
    }
    (AffineExpr::new(re, 0.0), AffineExpr::new(im, 0.0))
}

struct Rows {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    fn push(&mut self, e: &AffineExpr, sign: f64) {
        let r = self.b.len();
        for &(i, c) in &e.terms {
            if c != 0.0 {
                self.rows.push(r);
                self.cols.push(i);
                self.vals.push(sign * c);
            }
        }
        self.b.push(-sign * e.constant);
    }
}

/// Solves `p` with Clarabel at accuracy `tol`.
///
/// The returned status is `Optimal` only when the backend converged and the
/// independently re-evaluated primal residual is at most `tol`.
pub fn solve_conic(p: &ConicProgram, tol: f64) -> Result<ConicSolution> {
    p.validate()?;
    let n = p.num_vars;
    let mut rows = Rows { rows: Vec::new(), cols: Vec::new(), vals: Vec::new(), b: Vec::new() };
    let mut cones = Vec::new();

    // Rows of Ax + s = b. For e(x) in a cone: s = e(x), so A = −a, b = c.
    // For e(x) ≤ 0 use s = −e(x) ≥ 0, so A = a, b = −c.
    let zeros: Vec<&AffineExpr> = p
        .constraints
        .iter()
        .filter_map(|c| match c {
            ConeConstraint::Zero(e) => Some(e),
            _ => None,
        })
        .collect();
    for e in &zeros {
        rows.push(e, 1.0);
    }
    if !zeros.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(zeros.len()));
    }

    let mut nonneg = 0;
    for c in &p.constraints {
        if let ConeConstraint::NonPositive(e) = c {
            rows.push(e, 1.0);
            nonneg += 1;
        }
    }
    for i in 0..n {
        if p.lower[i].is_finite() {
            rows.push(&AffineExpr::new(vec![(i, -1.0)], p.lower[i]), 1.0);
            nonneg += 1;
        }
        if p.upper[i].is_finite() {
            rows.push(&AffineExpr::new(vec![(i, 1.0)], -p.upper[i]), 1.0);
            nonneg += 1;
        }
    }
    if nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(nonneg));
    }

    let half_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for c in &p.constraints {
        match c {
            ConeConstraint::SecondOrder { head, tail } => {
                rows.push(head, -1.0);
                for t in tail {
                    rows.push(t, -1.0);
                }
                cones.push(SupportedConeT::SecondOrderConeT(1 + tail.len()));
            }
            ConeConstraint::RotatedSecondOrder { u, w, tail } => {
                let mut sum = u.scaled(half_sqrt2);
                sum.terms.extend(w.scaled(half_sqrt2).terms);
                sum.constant += w.constant * half_sqrt2;
                let mut diff = u.scaled(half_sqrt2);
                diff.terms.extend(w.scaled(-half_sqrt2).terms);
                diff.constant -= w.constant * half_sqrt2;
                rows.push(&sum, -1.0);
                rows.push(&diff, -1.0);
                for t in tail {
                    rows.push(t, -1.0);
                }
                cones.push(SupportedConeT::SecondOrderConeT(2 + tail.len()));
            }
            _ => {}
        }
    }

    let m = rows.b.len();
    let a = CscMatrix::new_from_triplets(m, n, rows.rows, rows.cols, rows.vals);
    let pmat = CscMatrix::<f64>::zeros((n, n));

    // Interior-point accuracy saturates near 1e-9 on these programs; asking
    // for more can end in a numerical error, so looser targets are retried
    // and the best re-checked point is kept.
    let mut best: Option<ConicSolution> = None;
    for target in [0.1 * tol, tol, 10.0 * tol] {
        let sol = clarabel_attempt(p, &pmat, &a, &rows.b, &cones, tol, target)?;
        if sol.status == ConicStatus::Optimal {
            return Ok(sol);
        }
        let better = match &best {
            None => true,
            Some(b) => rank(&sol) < rank(b),
        };
        if better {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one attempt"))
}

fn rank(sol: &ConicSolution) -> (u8, f64) {
    let class = match sol.status {
        ConicStatus::Optimal => 0,
        ConicStatus::Inaccurate => 1,
        ConicStatus::Infeasible => 2,
        ConicStatus::MaxIter => 3,
        ConicStatus::NumericalFailure => 4,
    };
    let residual = if sol.primal_residual.is_nan() { f64::INFINITY } else { sol.primal_residual };
    (class, residual)
}

fn clarabel_attempt(
    p: &ConicProgram,
    pmat: &CscMatrix<f64>,
    a: &CscMatrix<f64>,
    b: &[f64],
    cones: &[SupportedConeT<f64>],
    tol: f64,
    target: f64,
) -> Result<ConicSolution> {
    let settings = DefaultSettings {
        verbose: false,
        max_iter: 400,
        tol_feas: target,
        tol_gap_abs: target,
        tol_gap_rel: target,
        tol_ktratio: 1e-7,
        reduced_tol_feas: 10.0 * target,
        reduced_tol_gap_abs: 10.0 * target,
        reduced_tol_gap_rel: 10.0 * target,
        presolve_enable: false,
        ..DefaultSettings::default()
    };
    let started = Instant::now();
    let mut solver = DefaultSolver::new(pmat, &p.objective, a, b, cones, settings)
        .map_err(|e| OpfError::Conic(e.to_string()))?;
    solver.solve();
    let sol = &solver.solution;
    let x = sol.x.clone();
    let primal_residual = if x.iter().all(|v| v.is_finite()) {
        p.max_violation(&x)
    } else {
        f64::INFINITY
    };
    log::trace!(
        "clarabel {:?} at target {target:.0e}: {} iterations, residual {primal_residual:.2e}, {:.1} ms",
        sol.status,
        sol.iterations,
        started.elapsed().as_secs_f64() * 1e3
    );
    let objective = p.objective_value(&x);
    let duality_gap = (sol.obj_val - sol.obj_val_dual).abs();
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved | SolverStatus::InsufficientProgress
            if primal_residual <= tol && duality_gap <= tol * objective.abs().max(1.0) =>
        {
            ConicStatus::Optimal
        }
        // A numerical error usually ends a run whose last iterate is close;
        // the caller re-checks that iterate before using it.
        SolverStatus::Solved
        | SolverStatus::AlmostSolved
        | SolverStatus::InsufficientProgress
        | SolverStatus::NumericalError
            if primal_residual.is_finite() =>
        {
            ConicStatus::Inaccurate
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            ConicStatus::Infeasible
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => ConicStatus::MaxIter,
        _ => ConicStatus::NumericalFailure,
    };
    Ok(ConicSolution {
        x,
        objective,
        primal_residual,
        duality_gap,
        status,
        iterations: sol.iterations,
        backend_status: format!("{:?}", sol.status),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::CMatrix;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_program() {
        let mut p = ConicProgram::new(1);
        p.objective[0] = 1.0;
        p.lower[0] = 0.0;
        p.push(ConeConstraint::NonPositive(AffineExpr::new(vec![(0, -1.0)], 3.0)));
        let s = solve_conic(&p, DEFAULT_TOL).unwrap();
        assert_eq!(s.status, ConicStatus::Optimal);
        assert_abs_diff_eq!(s.x[0], 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.objective, p.objective_value(&s.x), epsilon = 1e-12);
    }

    #[test]
    fn unit_disk() {
        let mut p = ConicProgram::new(2);
        p.objective[0] = 1.0;
        p.push(ConeConstraint::SecondOrder {
            head: AffineExpr::constant(1.0),
            tail: vec![AffineExpr::var(0), AffineExpr::var(1)],
        });
        let s = solve_conic(&p, DEFAULT_TOL).unwrap();
        assert_eq!(s.status, ConicStatus::Optimal);
        assert_abs_diff_eq!(s.x[0], -1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.x[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn rotated_cone_epigraph() {
        // min t s.t. t ≥ (x − 2)², encoded as 2·t·½ ≥ (x − 2)².
        let mut p = ConicProgram::new(2);
        p.objective[0] = 1.0;
        p.push(ConeConstraint::RotatedSecondOrder {
            u: AffineExpr::var(0),
            w: AffineExpr::constant(0.5),
            tail: vec![AffineExpr::new(vec![(1, 1.0)], -2.0)],
        });
        p.push(ConeConstraint::NonPositive(AffineExpr::new(vec![(1, 1.0)], -1.0)));
        let s = solve_conic(&p, DEFAULT_TOL).unwrap();
        assert_eq!(s.status, ConicStatus::Optimal);
        assert_abs_diff_eq!(s.x[1], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.objective, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn infeasible_program_is_not_optimal() {
        let mut p = ConicProgram::new(1);
        p.lower[0] = 1.0;
        p.upper[0] = 2.0;
        p.push(ConeConstraint::Zero(AffineExpr::new(vec![(0, 1.0)], -5.0)));
        let s = solve_conic(&p, DEFAULT_TOL).unwrap();
        assert_ne!(s.status, ConicStatus::Optimal);
    }

    #[test]
    fn malformed_program_is_rejected() {
        let mut p = ConicProgram::new(1);
        p.push(ConeConstraint::Zero(AffineExpr::var(3)));
        assert!(solve_conic(&p, DEFAULT_TOL).is_err());
    }

    #[test]
    fn identity_and_selector_lifts() {
        let n = 3;
        let id = HermitianForm::new(vec![0, 1, 2], CMatrix::identity(n, n), "I").unwrap();
        let t = lift_hermitian(&id, n);
        assert_eq!(t.len(), 2 * n);
        assert!(t.iter().all(|&(r, c, v)| r == c && v == 1.0));
        let sel = HermitianForm::new(vec![1], CMatrix::identity(1, 1), "M").unwrap();
        let v = vec![Complex64::new(0.3, -0.4); n];
        let x = lift_vector(&v);
        let q: f64 = lift_hermitian(&sel, n).iter().map(|&(r, c, a)| a * x[r] * x[c]).sum();
        assert_abs_diff_eq!(q, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn lifted_forms_match_complex_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        for _ in 0..100 {
            let g = CMatrix::from_fn(n, n, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let a = (&g + g.adjoint()).map(|c| c * 0.5);
            let form = HermitianForm::new((0..n).collect(), a, "A").unwrap();
            let v: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let x = lift_vector(&v);
            let q: f64 = lift_hermitian(&form, n).iter().map(|&(r, c, a)| a * x[r] * x[c]).sum();
            assert!((q - form.evaluate(&v)).abs() <= 1e-12);

            let w: Vec<(usize, Complex64)> = form.apply(&v);
            let lin: f64 = lift_linear(&w, n).iter().map(|&(i, c)| c * x[i]).sum();
            let direct: f64 = 2.0 * w.iter().map(|&(g, c)| (c.conj() * v[g]).re).sum::<f64>();
            assert!((lin - direct).abs() <= 1e-12);

            let (re, im) = lift_projection(form.support(), &v, n);
            let proj: Complex64 = v.iter().map(|c| c.conj() * c).sum();
            assert!((re.eval(&x) - proj.re).abs() <= 1e-12);
            assert!((im.eval(&x) - proj.im).abs() <= 1e-12);
        }
    }

    #[test]
    fn text_dump_has_header_and_rows() {
        let mut p = ConicProgram::new(2);
        p.objective[1] = 1.0;
        p.lower[1] = 0.0;
        p.push(ConeConstraint::NonPositive(AffineExpr::new(vec![(0, 1.0)], -1.0)));
        let mut buf = Vec::new();
        p.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("conic-program 1\nvars 2\n"));
        assert!(text.contains("nonpos 1\nrow -1e0 1\n0 1e0\n"));
    }
}
