#![allow(dead_code)]

use std::path::PathBuf;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use fpp_opf::case::{parse_case, Case};
use fpp_opf::network::{Bus, BusPhase, CMatrix, GenLimits, Line, NetworkModel, Phase};
use fpp_opf::problem::{assemble, CostModel, GenCost, OpfProblem};

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn case_path(file: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("cases").join(file)
}

pub fn load_case(file: &str) -> (Case, OpfProblem) {
    let case = parse_case(case_path(file)).expect("bundled case parses");
    let problem = assemble(case.net.clone(), case.cost.clone()).expect("bundled case assembles");
    (case, problem)
}

fn single_phase_bus(id: usize, load: Complex64, vmin: f64, vmax: f64, gen: Option<GenLimits>) -> Bus {
    Bus {
        id,
        phases: vec![BusPhase { phase: Phase::A, load, vmin, vmax, gen, shunt: c(0.0, 0.0) }],
        is_reference: id == 1,
    }
}

fn linear_cost(buses: &[usize], price: f64) -> CostModel {
    CostModel {
        generation: buses
            .iter()
            .map(|&bus| GenCost { bus, phase: Phase::A, quadratic: 0.0, linear: price })
            .collect(),
        ..CostModel::default()
    }
}

/// Generator at bus 1 feeding `load` at bus 2 over `z`.
pub fn two_bus(load: Complex64, z: Complex64, vmin: f64, vmax: f64, flow_limit: Option<f64>) -> OpfProblem {
    let g = GenLimits { pmin: 0.0, pmax: 5.0, qmin: -5.0, qmax: 5.0 };
    let mut line = Line::new(1, 2, vec![Phase::A], CMatrix::from_element(1, 1, z));
    line.flow_limit = flow_limit.map(|l| vec![l]);
    let net = NetworkModel::new(
        vec![single_phase_bus(1, c(0.0, 0.0), vmin, vmax, Some(g)), single_phase_bus(2, load, vmin, vmax, None)],
        vec![line],
        vec![],
        100.0,
    )
    .unwrap();
    assemble(net, linear_cost(&[1], 1.0)).unwrap()
}

/// The 2-bus oracle case: load 0.8 + 0.2j p.u. over 0.01 + 0.1j.
pub fn oracle_two_bus() -> OpfProblem {
    two_bus(c(0.8, 0.2), c(0.01, 0.1), 0.95, 1.05, None)
}

/// Load well above the line rating with tight voltage limits.
pub fn tiny_infeasible() -> OpfProblem {
    two_bus(c(1.5, 0.3), c(0.01, 0.1), 0.98, 1.02, Some(1.0))
}

/// Random connected single-phase network with 2 to 4 buses, a generator
/// at bus 1 and sometimes one more.
pub fn random_network(rng: &mut ChaCha8Rng) -> OpfProblem {
    let n = rng.gen_range(2..=4);
    let second_gen = n > 2 && rng.gen_bool(0.5);
    let mut buses = Vec::new();
    let mut gens = vec![1];
    for id in 1..=n {
        let gen = if id == 1 {
            Some(GenLimits { pmin: 0.0, pmax: 4.0, qmin: -3.0, qmax: 3.0 })
        } else if id == n && second_gen {
            gens.push(id);
            Some(GenLimits { pmin: 0.0, pmax: rng.gen_range(0.2..1.0), qmin: -0.5, qmax: 0.5 })
        } else {
            None
        };
        let load = if id == 1 {
            c(0.0, 0.0)
        } else {
            c(rng.gen_range(0.05..0.6), rng.gen_range(0.0..0.2))
        };
        buses.push(single_phase_bus(id, load, 0.94, 1.06, gen));
    }
    let mut lines = Vec::new();
    for id in 2..=n {
        let from = rng.gen_range(1..id);
        let z = c(rng.gen_range(0.005..0.03), rng.gen_range(0.04..0.15));
        lines.push(Line::new(from, id, vec![Phase::A], CMatrix::from_element(1, 1, z)));
    }
    if n > 2 && rng.gen_bool(0.5) {
        let z = c(rng.gen_range(0.005..0.03), rng.gen_range(0.04..0.15));
        lines.push(Line::new(1, n, vec![Phase::A], CMatrix::from_element(1, 1, z)));
    }
    let net = NetworkModel::new(buses, lines, vec![], 100.0).unwrap();
    let mut cost = linear_cost(&gens, 1.0);
    for (i, g) in cost.generation.iter_mut().enumerate() {
        g.quadratic = 0.5 + i as f64;
        g.linear = 1.0 + 2.0 * i as f64;
    }
    assemble(net, cost).unwrap()
}

/// Random Hermitian matrix with entries of unit scale.
pub fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
    let mut a = CMatrix::zeros(n, n);
    for r in 0..n {
        a[(r, r)] = c(rng.gen_range(-1.0..1.0), 0.0);
        for col in r + 1..n {
            let x = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            a[(r, col)] = x;
            a[(col, r)] = x.conj();
        }
    }
    a
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n).map(|_| c(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5))).collect()
}
