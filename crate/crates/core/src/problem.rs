//! The nonconvex QCQP: constraint registry, cost model and RES regions.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra_sparse::CsrMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OpfError, Result};
use crate::network::{build_admittance, NetworkModel, Phase, ResUnit};
use crate::quadratics::{
    build_flow_matrices, build_injection_matrices, eigen_split, BusPhaseForms, FlowForms,
    HermitianForm, HermitianSplit, LineEnd,
};

/// Quadratic-plus-linear generation cost on `α` at one bus-phase, in per-unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenCost {
    pub bus: usize,
    pub phase: Phase,
    pub quadratic: f64,
    pub linear: f64,
}

/// Curtailment and reactive-support cost of one RES unit, in per-unit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResCost {
    pub unit: usize,
    #[serde(default)]
    pub curtailment_quadratic: f64,
    #[serde(default)]
    pub curtailment_linear: f64,
    #[serde(default)]
    pub reactive_quadratic: f64,
    #[serde(default)]
    pub reactive_linear: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(default)]
    pub generation: Vec<GenCost>,
    #[serde(default)]
    pub res: Vec<ResCost>,
    /// Fixed cost added to every dispatch (e.g. no-load generator cost).
    #[serde(default)]
    pub constant: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub generation: f64,
    pub curtailment: f64,
    pub reactive_support: f64,
    pub constant: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    GenEpigraph,
    ActiveBalanceUpper,
    ActiveBalanceLower,
    ReactiveBalanceUpper,
    ReactiveBalanceLower,
    VoltageUpper,
    VoltageLower,
    FlowPLinkUpper,
    FlowPLinkLower,
    FlowQLinkUpper,
    FlowQLinkLower,
    FlowLimit,
    ResRegion,
}

impl ConstraintKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::GenEpigraph => "gen-epigraph",
            ConstraintKind::ActiveBalanceUpper => "active-balance-upper",
            ConstraintKind::ActiveBalanceLower => "active-balance-lower",
            ConstraintKind::ReactiveBalanceUpper => "reactive-balance-upper",
            ConstraintKind::ReactiveBalanceLower => "reactive-balance-lower",
            ConstraintKind::VoltageUpper => "voltage-upper",
            ConstraintKind::VoltageLower => "voltage-lower",
            ConstraintKind::FlowPLinkUpper => "flow-p-link-upper",
            ConstraintKind::FlowPLinkLower => "flow-p-link-lower",
            ConstraintKind::FlowQLinkUpper => "flow-q-link-upper",
            ConstraintKind::FlowQLinkLower => "flow-q-link-lower",
            ConstraintKind::FlowLimit => "flow-limit",
            ConstraintKind::ResRegion => "res-region",
        }
    }

    /// Whether the constraint bounds a power balance (a "demand" constraint).
    pub fn is_balance(self) -> bool {
        matches!(
            self,
            ConstraintKind::GenEpigraph
                | ConstraintKind::ActiveBalanceUpper
                | ConstraintKind::ActiveBalanceLower
                | ConstraintKind::ReactiveBalanceUpper
                | ConstraintKind::ReactiveBalanceLower
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "at", rename_all = "kebab-case")]
pub enum Location {
    BusPhase { bus: usize, phase: Phase },
    LineEnd { line: usize, end: LineEnd, phase: Phase },
    Res { unit: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConstraintId {
    pub location: Location,
    pub kind: ConstraintKind,
}

impl ConstraintId {
    pub fn bus_phase(bus: usize, phase: Phase, kind: ConstraintKind) -> Self {
        ConstraintId {
            location: Location::BusPhase { bus, phase },
            kind,
        }
    }
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Location::BusPhase { bus, phase } => write!(f, "bus{bus}.{phase}:")?,
            Location::LineEnd { line, end, phase } => {
                write!(f, "line{line}.{}.{phase}:", end.as_str())?
            }
            Location::Res { unit } => write!(f, "res{unit}:")?,
        }
        f.write_str(self.kind.as_str())
    }
}

/// Which cached Hermitian form a constraint is built on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormRef {
    BusReal(usize),
    BusReactive(usize),
    Magnitude(usize),
    FlowReal(usize),
    FlowReactive(usize),
}

/// Scalar decision variables other than the voltages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AuxVar {
    ResP(usize),
    ResQ(usize),
    Alpha(usize),
    FlowP(usize),
    FlowQ(usize),
}

/// `sign · vᴴAv + Σ cᵢ auxᵢ + constant ≤ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintRecord {
    pub id: ConstraintId,
    pub form: FormRef,
    pub sign: f64,
    pub aux: Vec<(AuxVar, f64)>,
    pub constant: f64,
}

/// Values of all non-voltage decision variables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxValues {
    pub p_res: Vec<f64>,
    pub q_res: Vec<f64>,
    pub alpha: Vec<f64>,
    pub flow_p: Vec<f64>,
    pub flow_q: Vec<f64>,
}

impl AuxValues {
    pub fn get(&self, var: AuxVar) -> f64 {
        match var {
            AuxVar::ResP(i) => self.p_res[i],
            AuxVar::ResQ(i) => self.q_res[i],
            AuxVar::Alpha(i) => self.alpha[i],
            AuxVar::FlowP(i) => self.flow_p[i],
            AuxVar::FlowQ(i) => self.flow_q[i],
        }
    }
}

/// A voltage profile together with the RES dispatch.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingPoint {
    pub v: Vec<Complex64>,
    pub p_res: Vec<f64>,
    pub q_res: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub id: ConstraintId,
    /// Positive values are violations, in per-unit.
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct OpfProblem {
    pub net: NetworkModel,
    pub admittance: CsrMatrix<Complex64>,
    pub forms: Vec<BusPhaseForms>,
    pub flows: Vec<FlowForms>,
    /// Splits of (real, reactive, magnitude) forms per bus-phase.
    pub splits: Vec<[HermitianSplit; 3]>,
    /// Splits of (real, reactive) forms per monitored line-end phase.
    pub flow_splits: Vec<[HermitianSplit; 2]>,
    pub cost: CostModel,
    pub constraints: Vec<ConstraintRecord>,
    gen_cost: Vec<(f64, f64)>,
    res_cost: Vec<ResCost>,
}

impl OpfProblem {
    pub fn dim(&self) -> usize {
        self.net.total_dim()
    }

    pub fn num_res(&self) -> usize {
        self.net.res_units.len()
    }

    pub fn num_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn form(&self, r: FormRef) -> &HermitianForm {
        match r {
            FormRef::BusReal(k) => &self.forms[k].real_power,
            FormRef::BusReactive(k) => &self.forms[k].reactive_power,
            FormRef::Magnitude(k) => &self.forms[k].magnitude,
            FormRef::FlowReal(f) => &self.flows[f].real,
            FormRef::FlowReactive(f) => &self.flows[f].reactive,
        }
    }

    pub fn split(&self, r: FormRef) -> &HermitianSplit {
        match r {
            FormRef::BusReal(k) => &self.splits[k][0],
            FormRef::BusReactive(k) => &self.splits[k][1],
            FormRef::Magnitude(k) => &self.splits[k][2],
            FormRef::FlowReal(f) => &self.flow_splits[f][0],
            FormRef::FlowReactive(f) => &self.flow_splits[f][1],
        }
    }

    /// `(b₂, b₁)` on `α` at stacked index `k`.
    pub fn gen_cost(&self, k: usize) -> (f64, f64) {
        self.gen_cost[k]
    }

    pub fn res_cost(&self, unit: usize) -> &ResCost {
        &self.res_cost[unit]
    }

    /// Left side of a registered constraint (≤ 0 when satisfied).
    pub fn record_value(&self, rec: &ConstraintRecord, v: &[Complex64], aux: &AuxValues) -> f64 {
        rec.sign * self.form(rec.form).evaluate(v)
            + rec.aux.iter().map(|&(a, c)| c * aux.get(a)).sum::<f64>()
            + rec.constant
    }

    /// Net injections `(vᴴY_kv, vᴴỸ_kv)` at every bus-phase.
    pub fn injections(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.forms
            .iter()
            .map(|f| Complex64::new(f.real_power.evaluate(v), f.reactive_power.evaluate(v)))
            .collect()
    }

    /// RES output summed per bus-phase.
    pub fn res_per_bus_phase(&self, p_res: &[f64], q_res: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.dim()];
        for (u, unit) in self.net.res_units.iter().enumerate() {
            let k = self.net.index().index(unit.bus, unit.phase).expect("validated unit");
            out[k] += Complex64::new(p_res[u], q_res[u]);
        }
        out
    }

    /// Signed violations of every original OPF constraint at `point`.
    ///
    /// The generation epigraph is replaced by the plain active-power upper
    /// bound and flow links by the direct apparent-power limit.
    pub fn constraint_residuals(&self, point: &OperatingPoint) -> Vec<Residual> {
        let v = &point.v;
        let inj = self.injections(v);
        let res = self.res_per_bus_phase(&point.p_res, &point.q_res);
        let mut out = Vec::new();
        for (k, (bus, phase)) in self.net.index().iter() {
            let bp = self.net.bus_phase(k);
            let g = bp.gen_limits();
            let p = inj[k].re - res[k].re + bp.load.re;
            let q = inj[k].im - res[k].im + bp.load.im;
            let mag2 = v[k].norm_sqr();
            let id = |kind| ConstraintId::bus_phase(bus, phase, kind);
            out.push(Residual { id: id(ConstraintKind::ActiveBalanceUpper), value: p - g.pmax });
            out.push(Residual { id: id(ConstraintKind::ActiveBalanceLower), value: g.pmin - p });
            out.push(Residual { id: id(ConstraintKind::ReactiveBalanceUpper), value: q - g.qmax });
            out.push(Residual { id: id(ConstraintKind::ReactiveBalanceLower), value: g.qmin - q });
            out.push(Residual { id: id(ConstraintKind::VoltageUpper), value: mag2 - bp.vmax * bp.vmax });
            out.push(Residual { id: id(ConstraintKind::VoltageLower), value: bp.vmin * bp.vmin - mag2 });
        }
        for f in &self.flows {
            let s = Complex64::new(f.real.evaluate(v), f.reactive.evaluate(v));
            out.push(Residual {
                id: ConstraintId {
                    location: Location::LineEnd { line: f.line, end: f.end, phase: f.phase },
                    kind: ConstraintKind::FlowLimit,
                },
                value: s.norm() - f.limit,
            });
        }
        for (u, unit) in self.net.res_units.iter().enumerate() {
            out.push(Residual {
                id: ConstraintId {
                    location: Location::Res { unit: u },
                    kind: ConstraintKind::ResRegion,
                },
                value: res_region_violation(unit, point.p_res[u], point.q_res[u]),
            });
        }
        out
    }

    pub fn max_violation(&self, point: &OperatingPoint) -> f64 {
        self.constraint_residuals(point)
            .iter()
            .fold(0.0f64, |m, r| m.max(r.value))
    }

    /// Cost of a dispatch: `α` per bus-phase and RES set-points.
    pub fn evaluate_cost(&self, alpha: &[f64], p_res: &[f64], q_res: &[f64]) -> CostBreakdown {
        let generation: f64 = alpha
            .iter()
            .zip(&self.gen_cost)
            .map(|(&a, &(b2, b1))| b2 * a * a + b1 * a)
            .sum();
        let mut curtailment = 0.0;
        let mut reactive_support = 0.0;
        for (u, unit) in self.net.res_units.iter().enumerate() {
            let c = &self.res_cost[u];
            let cut = unit.available_power - p_res[u];
            curtailment += c.curtailment_quadratic * cut * cut + c.curtailment_linear * cut;
            reactive_support += c.reactive_quadratic * q_res[u] * q_res[u] + c.reactive_linear * q_res[u];
        }
        let constant = self.cost.constant;
        CostBreakdown {
            generation,
            curtailment,
            reactive_support,
            constant,
            total: generation + curtailment + reactive_support + constant,
        }
    }

    /// Active generation implied by the balance equation at every bus-phase.
    pub fn generation_from_balance(&self, point: &OperatingPoint) -> Vec<Complex64> {
        let inj = self.injections(&point.v);
        let res = self.res_per_bus_phase(&point.p_res, &point.q_res);
        (0..self.dim())
            .map(|k| inj[k] - res[k] + self.net.bus_phase(k).load)
            .collect()
    }

    /// Cost at an operating point with `α` set to the recovered generation.
    pub fn cost_at(&self, point: &OperatingPoint) -> CostBreakdown {
        let alpha: Vec<f64> = self.generation_from_balance(point).iter().map(|s| s.re).collect();
        self.evaluate_cost(&alpha, &point.p_res, &point.q_res)
    }
}

/// Membership in the RES operating region.
pub fn res_region_contains(unit: &ResUnit, p: f64, q: f64) -> bool {
    0.0 <= p
        && p <= unit.available_power
        && p * p + q * q <= unit.inverter_capacity * unit.inverter_capacity
        && q.abs() <= unit.max_angle.tan() * p
}

/// Largest violation among the defining inequalities of the RES region.
pub fn res_region_violation(unit: &ResUnit, p: f64, q: f64) -> f64 {
    [
        -p,
        p - unit.available_power,
        (p * p + q * q).sqrt() - unit.inverter_capacity,
        q.abs() - unit.max_angle.tan() * p,
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max)
}

fn validate_cost(net: &NetworkModel, cost: &CostModel) -> Result<(Vec<(f64, f64)>, Vec<ResCost>)> {
    let n = net.total_dim();
    let mut gen_cost = vec![(0.0, 0.0); n];
    let mut seen = BTreeSet::new();
    for c in &cost.generation {
        let k = net.index().index(c.bus, c.phase).ok_or_else(|| {
            OpfError::InvalidCost(format!("bus {} phase {} is not declared", c.bus, c.phase))
        })?;
        if net.bus_phase(k).gen.is_none() {
            return Err(OpfError::InvalidCost(format!(
                "bus {} phase {} has no generator",
                c.bus, c.phase
            )));
        }
        if !seen.insert(k) {
            return Err(OpfError::InvalidCost(format!(
                "duplicate generation cost for bus {} phase {}",
                c.bus, c.phase
            )));
        }
        if !(c.quadratic >= 0.0) || !c.linear.is_finite() {
            return Err(OpfError::InvalidCost(format!(
                "generation cost at bus {} phase {} is not convex",
                c.bus, c.phase
            )));
        }
        gen_cost[k] = (c.quadratic, c.linear);
    }
    let mut res_cost: Vec<ResCost> = (0..net.res_units.len())
        .map(|unit| ResCost { unit, ..ResCost::default() })
        .collect();
    let mut seen = BTreeSet::new();
    for c in &cost.res {
        if c.unit >= net.res_units.len() {
            return Err(OpfError::InvalidCost(format!("RES unit {} is not declared", c.unit)));
        }
        if !seen.insert(c.unit) {
            return Err(OpfError::InvalidCost(format!("duplicate cost for RES unit {}", c.unit)));
        }
        if !(c.curtailment_quadratic >= 0.0 && c.reactive_quadratic >= 0.0)
            || !c.curtailment_linear.is_finite()
            || !c.reactive_linear.is_finite()
        {
            return Err(OpfError::InvalidCost(format!("cost of RES unit {} is not convex", c.unit)));
        }
        res_cost[c.unit] = c.clone();
    }
    if !cost.constant.is_finite() {
        return Err(OpfError::InvalidCost("constant cost is not finite".into()));
    }
    Ok((gen_cost, res_cost))
}

/// Builds every constraint record, form and split of the QCQP.
///
/// Per bus-phase the records are, in order: the generation epigraph (which
/// also carries the active-power upper bound through `α ≤ P̄^G`), the active
/// lower bound, both reactive bounds and both voltage bounds. Flow-limited
/// lines add two link pairs per monitored end-phase.
pub fn assemble(net: NetworkModel, cost: CostModel) -> Result<OpfProblem> {
    let (gen_cost, res_cost) = validate_cost(&net, &cost)?;
    let admittance = build_admittance(&net)?;
    let forms = build_injection_matrices(&admittance, net.index());
    let mut flows = Vec::new();
    for l in 0..net.lines.len() {
        for end in [LineEnd::From, LineEnd::To] {
            if let Some(f) = build_flow_matrices(&net, l, end)? {
                flows.extend(f);
            }
        }
    }
    let splits = forms
        .par_iter()
        .map(|f| {
            Ok([
                eigen_split(&f.real_power)?,
                eigen_split(&f.reactive_power)?,
                eigen_split(&f.magnitude)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let flow_splits = flows
        .par_iter()
        .map(|f| Ok([eigen_split(&f.real)?, eigen_split(&f.reactive)?]))
        .collect::<Result<Vec<_>>>()?;

    let mut constraints = Vec::new();
    for (k, (bus, phase)) in net.index().iter() {
        let bp = net.bus_phase(k);
        let g = bp.gen_limits();
        let units: Vec<usize> = net.res_units_at(k).map(|(u, _)| u).collect();
        let id = |kind| ConstraintId::bus_phase(bus, phase, kind);
        let res_p = |c: f64| units.iter().map(|&u| (AuxVar::ResP(u), c)).collect::<Vec<_>>();
        let res_q = |c: f64| units.iter().map(|&u| (AuxVar::ResQ(u), c)).collect::<Vec<_>>();

        let mut epi_aux = res_p(-1.0);
        epi_aux.push((AuxVar::Alpha(k), -1.0));
        constraints.push(ConstraintRecord {
            id: id(ConstraintKind::GenEpigraph),
            form: FormRef::BusReal(k),
            sign: 1.0,
            aux: epi_aux,
            constant: bp.load.re,
        });
        constraints.push(ConstraintRecord {
            id: id(ConstraintKind::ActiveBalanceLower),
            form: FormRef::BusReal(k),
            sign: -1.0,
            aux: res_p(1.0),
            constant: g.pmin - bp.load.re,
        });
        constraints.push(ConstraintRecord {
            id: id(ConstraintKind::ReactiveBalanceUpper),
            form: FormRef::BusReactive(k),
            sign: 1.0,
            aux: res_q(-1.0),
            constant: bp.load.im - g.qmax,
        });
        constraints.push(ConstraintRecord {
            id: id(ConstraintKind::ReactiveBalanceLower),
            form: FormRef::BusReactive(k),
            sign: -1.0,
            aux: res_q(1.0),
            constant: g.qmin - bp.load.im,
        });
        constraints.push(ConstraintRecord {
            id: id(ConstraintKind::VoltageUpper),
            form: FormRef::Magnitude(k),
            sign: 1.0,
            aux: Vec::new(),
            constant: -bp.vmax * bp.vmax,
        });
        constraints.push(ConstraintRecord {
            id: id(ConstraintKind::VoltageLower),
            form: FormRef::Magnitude(k),
            sign: -1.0,
            aux: Vec::new(),
            constant: bp.vmin * bp.vmin,
        });
    }
    for (fi, f) in flows.iter().enumerate() {
        let location = Location::LineEnd { line: f.line, end: f.end, phase: f.phase };
        for (kind, form, sign, aux) in [
            (ConstraintKind::FlowPLinkUpper, FormRef::FlowReal(fi), 1.0, AuxVar::FlowP(fi)),
            (ConstraintKind::FlowPLinkLower, FormRef::FlowReal(fi), -1.0, AuxVar::FlowP(fi)),
            (ConstraintKind::FlowQLinkUpper, FormRef::FlowReactive(fi), 1.0, AuxVar::FlowQ(fi)),
            (ConstraintKind::FlowQLinkLower, FormRef::FlowReactive(fi), -1.0, AuxVar::FlowQ(fi)),
        ] {
            constraints.push(ConstraintRecord {
                id: ConstraintId { location, kind },
                form,
                sign,
                aux: vec![(aux, -sign)],
                constant: 0.0,
            });
        }
    }

    Ok(OpfProblem {
        net,
        admittance,
        forms,
        flows,
        splits,
        flow_splits,
        cost,
        constraints,
        gen_cost,
        res_cost,
    })
}
