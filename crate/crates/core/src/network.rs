//! Multi-phase network model, the stacked phasor index map and the bus
//! admittance matrix.
//!
//! All electrical quantities are per-unit on [`NetworkModel::base_mva`].
//! Buses may carry any non-empty subset of the phases `a`, `b`, `c`; missing
//! phases shrink the corresponding blocks of every matrix built from the model.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OpfError, Result};

pub type CMatrix = DMatrix<Complex64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    /// Angle of the balanced reference phasor, in radians.
    pub fn nominal_angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * PI / 3.0,
            Phase::C => 2.0 * PI / 3.0,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }

    pub fn from_letter(c: char) -> Option<Phase> {
        match c.to_ascii_lowercase() {
            'a' | '1' => Some(Phase::A),
            'b' | '2' => Some(Phase::B),
            'c' | '3' => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Active/reactive generation limits of a conventional unit on one phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLimits {
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
}

impl GenLimits {
    pub const ZERO: GenLimits = GenLimits {
        pmin: 0.0,
        pmax: 0.0,
        qmin: 0.0,
        qmax: 0.0,
    };
}

/// Per-phase attachment data of a bus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusPhase {
    pub phase: Phase,
    /// Constant-power load `P + jQ`.
    pub load: Complex64,
    pub vmin: f64,
    pub vmax: f64,
    /// `None` when no conventional generator is attached (limits read as zero).
    pub gen: Option<GenLimits>,
    /// Shunt admittance to ground, `G + jB`.
    #[serde(default)]
    pub shunt: Complex64,
}

impl BusPhase {
    pub fn gen_limits(&self) -> GenLimits {
        self.gen.unwrap_or(GenLimits::ZERO)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub phases: Vec<BusPhase>,
    #[serde(default)]
    pub is_reference: bool,
}

impl Bus {
    pub fn phase(&self, phase: Phase) -> Option<&BusPhase> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn phase_set(&self) -> BTreeSet<Phase> {
        self.phases.iter().map(|p| p.phase).collect()
    }

    pub fn has_generator(&self) -> bool {
        self.phases.iter().any(|p| p.gen.is_some())
    }
}

/// Renewable unit with controllable active and reactive output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResUnit {
    pub bus: usize,
    pub phase: Phase,
    pub available_power: f64,
    pub inverter_capacity: f64,
    /// Largest admissible power-factor angle, in radians.
    pub max_angle: f64,
}

impl ResUnit {
    pub fn from_min_power_factor(
        bus: usize,
        phase: Phase,
        available_power: f64,
        inverter_capacity: f64,
        min_pf: f64,
    ) -> ResUnit {
        ResUnit {
            bus,
            phase,
            available_power,
            inverter_capacity,
            max_angle: min_pf.acos(),
        }
    }

    pub fn min_power_factor(&self) -> f64 {
        self.max_angle.cos()
    }
}

/// π-equivalent line between two buses.
#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub phases: Vec<Phase>,
    pub series_impedance: CMatrix,
    /// Total shunt admittance; half of it is placed at each end.
    pub shunt_admittance: CMatrix,
    /// Off-nominal turns ratio on the `from` side (1.0 for plain lines).
    pub tap: f64,
    /// Apparent-power limit per phase, enforced at both line ends.
    pub flow_limit: Option<Vec<f64>>,
}

/// The four blocks mapping end voltages to end currents of one line:
/// `i_from = ff v_from + ft v_to`, `i_to = tf v_from + tt v_to`.
#[derive(Clone, Debug)]
pub struct BranchAdmittance {
    pub ff: CMatrix,
    pub ft: CMatrix,
    pub tf: CMatrix,
    pub tt: CMatrix,
}

impl Line {
    pub fn new(from: usize, to: usize, phases: Vec<Phase>, series_impedance: CMatrix) -> Line {
        let n = phases.len();
        Line {
            from,
            to,
            phases,
            series_impedance,
            shunt_admittance: CMatrix::zeros(n, n),
            tap: 1.0,
            flow_limit: None,
        }
    }

    /// Series admittance `Z⁻¹`, or `None` when the impedance is singular.
    pub fn series_admittance(&self) -> Option<CMatrix> {
        let z = &self.series_impedance;
        let scale = z.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if scale == 0.0 || !scale.is_finite() {
            return None;
        }
        let inv = z.clone().try_inverse()?;
        // Reject numerically singular impedances as well.
        let check = (z * &inv - CMatrix::identity(z.nrows(), z.ncols()))
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        if check.is_finite() && check < 1e-8 {
            Some(inv)
        } else {
            None
        }
    }

    pub fn branch_admittance(&self, index: usize) -> Result<BranchAdmittance> {
        let y = self.series_admittance().ok_or(OpfError::SingularImpedance {
            index,
            from: self.from,
            to: self.to,
        })?;
        let half_shunt = self.shunt_admittance.map(|c| c * 0.5);
        let t = self.tap;
        let tt = &y + &half_shunt;
        Ok(BranchAdmittance {
            ff: tt.map(|c| c / (t * t)),
            ft: y.map(|c| -c / t),
            tf: y.map(|c| -c / t),
            tt,
        })
    }
}

/// Ordered map between `(bus, phase)` pairs and positions of the stacked
/// phasor vector. Bus-major in declaration order, phases in `a, b, c` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseIndexMap {
    entries: Vec<(usize, Phase)>,
    lookup: HashMap<(usize, Phase), usize>,
}

impl PhaseIndexMap {
    pub fn from_buses(buses: &[Bus]) -> PhaseIndexMap {
        let mut entries = Vec::new();
        for bus in buses {
            let mut phases: Vec<Phase> = bus.phases.iter().map(|p| p.phase).collect();
            phases.sort();
            entries.extend(phases.into_iter().map(|p| (bus.id, p)));
        }
        let lookup = entries.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        PhaseIndexMap { entries, lookup }
    }

    pub fn total_dim(&self) -> usize {
        self.entries.len()
    }

    pub fn index(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.lookup.get(&(bus, phase)).copied()
    }

    pub fn entry(&self, index: usize) -> (usize, Phase) {
        self.entries[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, (usize, Phase))> + '_ {
        self.entries.iter().copied().enumerate()
    }

    /// Indices of `phases` at `bus`, in the given phase order.
    pub fn indices(&self, bus: usize, phases: &[Phase]) -> Option<Vec<usize>> {
        phases.iter().map(|&p| self.index(bus, p)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub res_units: Vec<ResUnit>,
    pub base_mva: f64,
    index: PhaseIndexMap,
    bus_pos: HashMap<usize, usize>,
}

impl NetworkModel {
    /// Validates the network invariants and builds the index map.
    pub fn new(
        mut buses: Vec<Bus>,
        lines: Vec<Line>,
        res_units: Vec<ResUnit>,
        base_mva: f64,
    ) -> Result<NetworkModel> {
        let invalid = |msg: String| Err(OpfError::InvalidNetwork(msg));

        if buses.is_empty() {
            return invalid("network has no buses".into());
        }
        if !(base_mva > 0.0 && base_mva.is_finite()) {
            return invalid(format!("base power must be positive, got {base_mva}"));
        }
        for bus in &mut buses {
            bus.phases.sort_by_key(|p| p.phase);
        }

        let mut bus_pos = HashMap::new();
        for (i, bus) in buses.iter().enumerate() {
            if bus_pos.insert(bus.id, i).is_some() {
                return invalid(format!("duplicate bus id {}", bus.id));
            }
            if bus.phases.is_empty() {
                return invalid(format!("bus {} has no phases", bus.id));
            }
            if bus.phase_set().len() != bus.phases.len() {
                return invalid(format!("bus {} declares a phase twice", bus.id));
            }
            for p in &bus.phases {
                if !(p.vmin > 0.0 && p.vmin <= p.vmax) {
                    return invalid(format!(
                        "bus {} phase {}: voltage bounds must satisfy 0 < vmin <= vmax (got {}, {})",
                        bus.id, p.phase, p.vmin, p.vmax
                    ));
                }
                if let Some(g) = p.gen {
                    if g.pmin > g.pmax || g.qmin > g.qmax {
                        return invalid(format!(
                            "bus {} phase {}: generator bounds are inverted",
                            bus.id, p.phase
                        ));
                    }
                }
            }
        }
        let refs = buses.iter().filter(|b| b.is_reference).count();
        if refs != 1 {
            return invalid(format!("expected exactly one reference bus, found {refs}"));
        }

        for (i, line) in lines.iter().enumerate() {
            let (Some(&f), Some(&t)) = (bus_pos.get(&line.from), bus_pos.get(&line.to)) else {
                return invalid(format!(
                    "line {i} ({} -> {}) references an unknown bus",
                    line.from, line.to
                ));
            };
            if line.from == line.to {
                return invalid(format!("line {i} is a self loop at bus {}", line.from));
            }
            let n = line.phases.len();
            let set: BTreeSet<Phase> = line.phases.iter().copied().collect();
            if n == 0 || set.len() != n {
                return invalid(format!("line {i} has an empty or repeated phase list"));
            }
            for (end, pos) in [(line.from, f), (line.to, t)] {
                if !set.is_subset(&buses[pos].phase_set()) {
                    return invalid(format!(
                        "line {i} phases are not a subset of bus {end} phases"
                    ));
                }
            }
            let dims_ok = line.series_impedance.shape() == (n, n)
                && line.shunt_admittance.shape() == (n, n)
                && line.flow_limit.as_ref().is_none_or(|l| l.len() == n);
            if !dims_ok {
                return invalid(format!("line {i} matrix dimensions do not match its {n} phases"));
            }
            if !(line.tap > 0.0 && line.tap.is_finite()) {
                return invalid(format!("line {i} has a non-positive tap ratio"));
            }
            if line.series_admittance().is_none() {
                return Err(OpfError::SingularImpedance {
                    index: i,
                    from: line.from,
                    to: line.to,
                });
            }
        }

        for (i, unit) in res_units.iter().enumerate() {
            let Some(&pos) = bus_pos.get(&unit.bus) else {
                return invalid(format!("RES unit {i} references unknown bus {}", unit.bus));
            };
            if buses[pos].phase(unit.phase).is_none() {
                return invalid(format!(
                    "RES unit {i} sits on phase {} which bus {} does not have",
                    unit.phase, unit.bus
                ));
            }
            if unit.available_power < 0.0 || unit.inverter_capacity < 0.0 {
                return invalid(format!("RES unit {i} has negative ratings"));
            }
            if !(unit.max_angle > 0.0 && unit.max_angle < PI / 2.0) {
                return invalid(format!(
                    "RES unit {i}: power-factor angle must lie in (0, pi/2)"
                ));
            }
        }

        // Connectivity over declared buses.
        let mut adj = vec![Vec::new(); buses.len()];
        for line in &lines {
            let (f, t) = (bus_pos[&line.from], bus_pos[&line.to]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; buses.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(b) = queue.pop_front() {
            for &n in &adj[b] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        if let Some(pos) = seen.iter().position(|s| !s) {
            return invalid(format!("bus {} is not connected to the network", buses[pos].id));
        }

        let index = PhaseIndexMap::from_buses(&buses);
        Ok(NetworkModel {
            buses,
            lines,
            res_units,
            base_mva,
            index,
            bus_pos,
        })
    }

    pub fn index(&self) -> &PhaseIndexMap {
        &self.index
    }

    pub fn total_dim(&self) -> usize {
        self.index.total_dim()
    }

    pub fn bus(&self, id: usize) -> Option<&Bus> {
        self.bus_pos.get(&id).map(|&i| &self.buses[i])
    }

    pub fn reference_bus(&self) -> &Bus {
        self.buses
            .iter()
            .find(|b| b.is_reference)
            .expect("validated network has a reference bus")
    }

    /// Data of the `(bus, phase)` entry at position `index` of the stacked vector.
    pub fn bus_phase(&self, index: usize) -> &BusPhase {
        let (bus, phase) = self.index.entry(index);
        self.bus(bus)
            .and_then(|b| b.phase(phase))
            .expect("index map entries always resolve")
    }

    pub fn res_units_at(&self, index: usize) -> impl Iterator<Item = (usize, &ResUnit)> + '_ {
        let (bus, phase) = self.index.entry(index);
        self.res_units
            .iter()
            .enumerate()
            .filter(move |(_, u)| u.bus == bus && u.phase == phase)
    }

    pub fn is_single_phase(&self) -> bool {
        self.buses.iter().all(|b| b.phases.len() == 1)
    }
}

/// Bus admittance matrix `Y` with `i = Y v`.
///
/// Each line contributes its π-model blocks; with unit taps the off-diagonal
/// block is `-Z⁻¹` and each diagonal block accumulates `Z⁻¹ + Ȳ/2`. Bus shunts
/// are added on the diagonal. The result is complex symmetric.
pub fn build_admittance(net: &NetworkModel) -> Result<CsrMatrix<Complex64>> {
    let n = net.total_dim();
    let mut coo = CooMatrix::new(n, n);
    let index = net.index();

    for (i, line) in net.lines.iter().enumerate() {
        let blocks = line.branch_admittance(i)?;
        let fi = index.indices(line.from, &line.phases).expect("validated");
        let ti = index.indices(line.to, &line.phases).expect("validated");
        for (block, rows, cols) in [
            (&blocks.ff, &fi, &fi),
            (&blocks.ft, &fi, &ti),
            (&blocks.tf, &ti, &fi),
            (&blocks.tt, &ti, &ti),
        ] {
            for (a, &r) in rows.iter().enumerate() {
                for (b, &c) in cols.iter().enumerate() {
                    let val = block[(a, b)];
                    if val != Complex64::new(0.0, 0.0) {
                        coo.push(r, c, val);
                    }
                }
            }
        }
    }
    for k in 0..n {
        let shunt = net.bus_phase(k).shunt;
        if shunt != Complex64::new(0.0, 0.0) {
            coo.push(k, k, shunt);
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// Unit-magnitude voltages at the balanced nominal angle of each phase.
pub fn flat_voltage(net: &NetworkModel) -> Vec<Complex64> {
    net.index()
        .iter()
        .map(|(_, (_, phase))| Complex64::from_polar(1.0, phase.nominal_angle()))
        .collect()
}

pub fn csr_mul(y: &CsrMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    y.row_iter()
        .map(|row| {
            row.col_indices()
                .iter()
                .zip(row.values())
                .map(|(&c, &val)| val * v[c])
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    pub(crate) fn single_phase_bus(id: usize, load: Complex64, reference: bool) -> Bus {
        Bus {
            id,
            phases: vec![BusPhase {
                phase: Phase::A,
                load,
                vmin: 0.9,
                vmax: 1.1,
                gen: None,
                shunt: Complex64::default(),
            }],
            is_reference: reference,
        }
    }

    fn two_bus(z: Complex64) -> NetworkModel {
        let buses = vec![
            single_phase_bus(1, c(0.0, 0.0), true),
            single_phase_bus(2, c(0.0, 0.0), false),
        ];
        let line = Line::new(1, 2, vec![Phase::A], CMatrix::from_element(1, 1, z));
        NetworkModel::new(buses, vec![line], vec![], 100.0).unwrap()
    }

    #[test]
    fn two_bus_admittance() {
        let net = two_bus(c(0.0, 0.1));
        let y = build_admittance(&net).unwrap();
        let dense = nalgebra_sparse::convert::serial::convert_csr_dense(&y);
        let expected = [[c(0.0, -10.0), c(0.0, 10.0)], [c(0.0, 10.0), c(0.0, -10.0)]];
        for r in 0..2 {
            for k in 0..2 {
                assert_abs_diff_eq!(dense[(r, k)].re, expected[r][k].re, epsilon = 1e-12);
                assert_abs_diff_eq!(dense[(r, k)].im, expected[r][k].im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_bus_without_lines_gives_zero_matrix() {
        let net = NetworkModel::new(
            vec![single_phase_bus(0, c(0.0, 0.0), true)],
            vec![],
            vec![],
            1.0,
        )
        .unwrap();
        let y = build_admittance(&net).unwrap();
        assert_eq!(y.nrows(), 1);
        assert!(y.values().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn singular_impedance_is_rejected_with_line_index() {
        let buses = vec![
            single_phase_bus(1, c(0.0, 0.0), true),
            single_phase_bus(2, c(0.0, 0.0), false),
        ];
        let line = Line::new(1, 2, vec![Phase::A], CMatrix::from_element(1, 1, c(0.0, 0.0)));
        match NetworkModel::new(buses, vec![line], vec![], 100.0) {
            Err(OpfError::SingularImpedance { index, from, to }) => {
                assert_eq!((index, from, to), (0, 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flat_profile_angles() {
        let bus = Bus {
            id: 0,
            phases: Phase::ALL
                .iter()
                .map(|&p| BusPhase {
                    phase: p,
                    load: Complex64::default(),
                    vmin: 0.95,
                    vmax: 1.05,
                    gen: None,
                    shunt: Complex64::default(),
                })
                .collect(),
            is_reference: true,
        };
        let net = NetworkModel::new(vec![bus], vec![], vec![], 1.0).unwrap();
        let v = flat_voltage(&net);
        let expected = [0.0f64, -120.0, 120.0];
        for (x, deg) in v.iter().zip(expected) {
            assert_abs_diff_eq!(x.norm(), 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(x.arg().to_degrees(), deg, epsilon = 1e-12);
        }
        assert_eq!(flat_voltage(&two_bus(c(0.0, 0.1))), vec![c(1.0, 0.0); 2]);
    }

    #[test]
    fn validation_catches_bad_networks() {
        let mk = |refs: [bool; 2]| {
            vec![
                single_phase_bus(1, c(0.0, 0.0), refs[0]),
                single_phase_bus(2, c(0.0, 0.0), refs[1]),
            ]
        };
        let line = || Line::new(1, 2, vec![Phase::A], CMatrix::from_element(1, 1, c(0.01, 0.1)));
        assert!(NetworkModel::new(mk([false, false]), vec![line()], vec![], 1.0).is_err());
        assert!(NetworkModel::new(mk([true, true]), vec![line()], vec![], 1.0).is_err());
        // disconnected
        assert!(NetworkModel::new(mk([true, false]), vec![], vec![], 1.0).is_err());
        // line on a phase the bus lacks
        let mut bad = line();
        bad.phases = vec![Phase::B];
        assert!(NetworkModel::new(mk([true, false]), vec![bad], vec![], 1.0).is_err());
        // inverted voltage bounds
        let mut buses = mk([true, false]);
        buses[1].phases[0].vmin = 1.2;
        assert!(NetworkModel::new(buses, vec![line()], vec![], 1.0).is_err());
    }

    #[test]
    fn index_map_round_trips() {
        let net = two_bus(c(0.01, 0.1));
        let map = net.index();
        for (i, (bus, phase)) in map.iter() {
            assert_eq!(map.index(bus, phase), Some(i));
        }
        assert_eq!(map.total_dim(), 2);
    }
}
