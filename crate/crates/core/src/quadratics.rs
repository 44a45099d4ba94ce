//! Hermitian quadratic forms: bus injection forms, line-flow forms and the
//! PSD/NSD eigen-split used to build convex surrogates.
//!
//! Every form touches only a handful of entries of the stacked phasor vector
//! (a bus and its neighbours), so a form is stored as a sorted support set plus
//! a dense Hermitian block over that support.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use nalgebra_sparse::CsrMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OpfError, Result};
use crate::network::{CMatrix, NetworkModel, Phase, PhaseIndexMap};

const HERMITIAN_TOL: f64 = 1e-12;

/// Sparse Hermitian matrix `A` acting as the quadratic form `vᴴAv`.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianForm {
    support: Vec<usize>,
    block: CMatrix,
    pub label: String,
}

impl HermitianForm {
    /// `support` must be strictly increasing and match the block dimension.
    pub fn new(support: Vec<usize>, block: CMatrix, label: impl Into<String>) -> Result<Self> {
        if block.nrows() != support.len() || block.ncols() != support.len() {
            return Err(OpfError::DimensionMismatch {
                expected: support.len(),
                found: block.nrows(),
            });
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OpfError::InvalidNetwork(
                "form support must be strictly increasing".into(),
            ));
        }
        let asym = max_asymmetry(&block);
        let scale = block.iter().map(|c| c.norm()).fold(1.0, f64::max);
        if asym > HERMITIAN_TOL * scale {
            return Err(OpfError::NotHermitian(asym));
        }
        Ok(HermitianForm {
            support,
            block,
            label: label.into(),
        })
    }

    /// Builds a form from a dense matrix, restricting it to the rows/columns
    /// that carry nonzeros.
    pub fn from_dense(a: &CMatrix, label: impl Into<String>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(OpfError::DimensionMismatch {
                expected: n,
                found: a.ncols(),
            });
        }
        let support: Vec<usize> = (0..n)
            .filter(|&i| (0..n).any(|j| a[(i, j)].norm() != 0.0 || a[(j, i)].norm() != 0.0))
            .collect();
        let block = CMatrix::from_fn(support.len(), support.len(), |r, c| {
            a[(support[r], support[c])]
        });
        HermitianForm::new(support, block, label)
    }

    fn from_entries(entries: BTreeMap<(usize, usize), Complex64>, label: String) -> Self {
        let mut support: Vec<usize> = entries.keys().flat_map(|&(r, c)| [r, c]).collect();
        support.sort_unstable();
        support.dedup();
        let pos = |g: usize| support.binary_search(&g).expect("support covers entries");
        let mut block = CMatrix::zeros(support.len(), support.len());
        for (&(r, c), &val) in &entries {
            block[(pos(r), pos(c))] += val;
        }
        HermitianForm {
            support,
            block,
            label,
        }
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn block(&self) -> &CMatrix {
        &self.block
    }

    pub fn is_zero(&self) -> bool {
        self.block.iter().all(|c| c.norm() == 0.0)
    }

    /// `vᴴAv` including its (numerically zero) imaginary part.
    pub fn evaluate_complex(&self, v: &[Complex64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (r, &gr) in self.support.iter().enumerate() {
            let mut row = Complex64::new(0.0, 0.0);
            for (c, &gc) in self.support.iter().enumerate() {
                row += self.block[(r, c)] * v[gc];
            }
            acc += v[gr].conj() * row;
        }
        acc
    }

    pub fn evaluate(&self, v: &[Complex64]) -> f64 {
        self.evaluate_complex(v).re
    }

    /// `Re{zᴴAv}`.
    pub fn bilinear(&self, z: &[Complex64], v: &[Complex64]) -> f64 {
        self.apply(z)
            .iter()
            .map(|&(g, w)| (w.conj() * v[g]).re)
            .sum()
    }

    /// `(Av)` restricted to the support, as `(global index, value)` pairs.
    pub fn apply(&self, v: &[Complex64]) -> Vec<(usize, Complex64)> {
        self.support
            .iter()
            .enumerate()
            .map(|(r, &g)| {
                let val = self
                    .support
                    .iter()
                    .enumerate()
                    .map(|(c, &gc)| self.block[(r, c)] * v[gc])
                    .sum();
                (g, val)
            })
            .collect()
    }

    pub fn to_dense(&self, n: usize) -> CMatrix {
        let mut out = CMatrix::zeros(n, n);
        for (r, &gr) in self.support.iter().enumerate() {
            for (c, &gc) in self.support.iter().enumerate() {
                out[(gr, gc)] = self.block[(r, c)];
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> HermitianForm {
        HermitianForm {
            support: self.support.clone(),
            block: self.block.map(|c| c * factor),
            label: self.label.clone(),
        }
    }
}

fn max_asymmetry(a: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..a.nrows() {
        for c in r..a.ncols() {
            worst = worst.max((a[(r, c)] - a[(c, r)].conj()).norm());
        }
    }
    worst
}

/// A rank-one term `r rᴴ` of a PSD factorization, on the form's support.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub support: Vec<usize>,
    pub coeffs: Vec<Complex64>,
}

impl Factor {
    /// `rᴴv`.
    pub fn project(&self, v: &[Complex64]) -> Complex64 {
        self.support
            .iter()
            .zip(&self.coeffs)
            .map(|(&g, r)| r.conj() * v[g])
            .sum()
    }
}

/// `A = A⁺ + A⁻` with `A⁺ ⪰ 0`, `A⁻ ⪯ 0`.
///
/// Along with the two parts the split keeps factorizations
/// `A⁺ = Σ rᵢrᵢᴴ` and `-A⁻ = Σ qⱼqⱼᴴ` for second-order-cone encoding.
#[derive(Clone, Debug)]
pub struct HermitianSplit {
    pub plus: HermitianForm,
    pub minus: HermitianForm,
    pub plus_factors: Vec<Factor>,
    pub minus_factors: Vec<Factor>,
}

impl HermitianSplit {
    pub fn eigenvalues_of(form: &HermitianForm) -> Vec<f64> {
        if form.block.nrows() == 0 {
            return Vec::new();
        }
        SymmetricEigen::new(form.block.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect()
    }
}

/// Eigen-decomposes `A = UΛUᴴ` and splits the spectrum by sign.
pub fn eigen_split(a: &HermitianForm) -> Result<HermitianSplit> {
    let asym = max_asymmetry(&a.block);
    let scale = a.block.iter().map(|c| c.norm()).fold(1.0, f64::max);
    if asym > HERMITIAN_TOL * scale {
        return Err(OpfError::NotHermitian(asym));
    }
    let n = a.block.nrows();
    let mut plus = CMatrix::zeros(n, n);
    let mut minus = CMatrix::zeros(n, n);
    let mut plus_factors = Vec::new();
    let mut minus_factors = Vec::new();

    if n > 0 {
        // Symmetrize exactly before decomposing.
        let sym = (&a.block + a.block.adjoint()).map(|c| c * 0.5);
        let eig = SymmetricEigen::new(sym);
        let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        let cutoff = 1e-14 * max_abs.max(1.0);
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda.abs() <= cutoff {
                continue;
            }
            let u = eig.eigenvectors.column(k);
            let outer = u * u.adjoint();
            let root = lambda.abs().sqrt();
            let factor = Factor {
                support: a.support.clone(),
                coeffs: u.iter().map(|c| c * root).collect(),
            };
            if lambda > 0.0 {
                plus += outer.map(|c| c * lambda);
                plus_factors.push(factor);
            } else {
                minus += outer.map(|c| c * lambda);
                minus_factors.push(factor);
            }
        }
    }
    // Remove rounding asymmetry from the outer products.
    let herm = |m: CMatrix| (&m + m.adjoint()).map(|c| c * 0.5);
    Ok(HermitianSplit {
        plus: HermitianForm {
            support: a.support.clone(),
            block: herm(plus),
            label: format!("{}+", a.label),
        },
        minus: HermitianForm {
            support: a.support.clone(),
            block: herm(minus),
            label: format!("{}-", a.label),
        },
        plus_factors,
        minus_factors,
    })
}

/// Builds the forms `Re{v_k (g·v)*}` and `Im{v_k (g·v)*}` for a current
/// `i_k = g·v` given as a sparse row `g`.
fn power_forms(k: usize, row: &[(usize, Complex64)], label: &str) -> (HermitianForm, HermitianForm) {
    let half = Complex64::new(0.5, 0.0);
    let half_j = Complex64::new(0.0, 0.5);
    let mut real = BTreeMap::new();
    let mut reactive = BTreeMap::new();
    for &(j, y) in row {
        *real.entry((k, j)).or_insert(Complex64::default()) += half * y;
        *real.entry((j, k)).or_insert(Complex64::default()) += half * y.conj();
        *reactive.entry((k, j)).or_insert(Complex64::default()) += half_j * y;
        *reactive.entry((j, k)).or_insert(Complex64::default()) -= half_j * y.conj();
    }
    (
        HermitianForm::from_entries(real, format!("P[{label}]")),
        HermitianForm::from_entries(reactive, format!("Q[{label}]")),
    )
}

/// Forms attached to one `(bus, phase)` entry.
#[derive(Clone, Debug)]
pub struct BusPhaseForms {
    /// `Y_{k,φ}`: `vᴴ Y_{k,φ} v = Re{v_{k,φ} i_{k,φ}*}`.
    pub real_power: HermitianForm,
    /// `Ỹ_{k,φ}`: `vᴴ Ỹ_{k,φ} v = Im{v_{k,φ} i_{k,φ}*}`.
    pub reactive_power: HermitianForm,
    /// `M_{k,φ} = e eᵀ`: `vᴴ M v = |v_{k,φ}|²`.
    pub magnitude: HermitianForm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineEnd {
    From,
    To,
}

impl LineEnd {
    pub fn as_str(self) -> &'static str {
        match self {
            LineEnd::From => "from",
            LineEnd::To => "to",
        }
    }
}

/// Apparent-power flow forms for one phase of one line end.
#[derive(Clone, Debug)]
pub struct FlowForms {
    pub line: usize,
    pub end: LineEnd,
    pub phase: Phase,
    pub limit: f64,
    pub real: HermitianForm,
    pub reactive: HermitianForm,
}

#[derive(Clone, Debug)]
pub struct InjectionMatrices {
    pub bus_phase: Vec<BusPhaseForms>,
    pub flows: Vec<FlowForms>,
}

pub fn build_injection_matrices(
    y: &CsrMatrix<Complex64>,
    index: &PhaseIndexMap,
) -> Vec<BusPhaseForms> {
    (0..index.total_dim())
        .map(|k| {
            let (bus, phase) = index.entry(k);
            let label = format!("{bus}.{phase}");
            let row = y.row(k);
            let entries: Vec<(usize, Complex64)> = row
                .col_indices()
                .iter()
                .copied()
                .zip(row.values().iter().copied())
                .collect();
            let (real_power, reactive_power) = power_forms(k, &entries, &label);
            let magnitude = HermitianForm {
                support: vec![k],
                block: CMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
                label: format!("M[{label}]"),
            };
            BusPhaseForms {
                real_power,
                reactive_power,
                magnitude,
            }
        })
        .collect()
}

/// Flow forms at `end` of line `line_index`, one per line phase.
///
/// Returns `Ok(None)` when the line carries no flow limit.
pub fn build_flow_matrices(
    net: &NetworkModel,
    line_index: usize,
    end: LineEnd,
) -> Result<Option<Vec<FlowForms>>> {
    let line = &net.lines[line_index];
    let Some(limits) = &line.flow_limit else {
        return Ok(None);
    };
    let index = net.index();
    let blocks = line.branch_admittance(line_index)?;
    let fi = index.indices(line.from, &line.phases).expect("validated line");
    let ti = index.indices(line.to, &line.phases).expect("validated line");
    let (own, self_block, other_block, other) = match end {
        LineEnd::From => (&fi, &blocks.ff, &blocks.ft, &ti),
        LineEnd::To => (&ti, &blocks.tt, &blocks.tf, &fi),
    };
    let forms = line
        .phases
        .iter()
        .enumerate()
        .map(|(a, &phase)| {
            let mut row: Vec<(usize, Complex64)> = Vec::new();
            for b in 0..line.phases.len() {
                row.push((own[b], self_block[(a, b)]));
                row.push((other[b], other_block[(a, b)]));
            }
            let label = format!("line{line_index}.{}.{phase}", end.as_str());
            let (real, reactive) = power_forms(own[a], &row, &label);
            FlowForms {
                line: line_index,
                end,
                phase,
                limit: limits[a],
                real,
                reactive,
            }
        })
        .collect();
    Ok(Some(forms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_admittance, csr_mul, Bus, BusPhase, Line};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_bus_net(limit: Option<f64>) -> NetworkModel {
        let bus = |id, r| Bus {
            id,
            phases: vec![BusPhase {
                phase: Phase::A,
                load: Complex64::default(),
                vmin: 0.9,
                vmax: 1.1,
                gen: None,
                shunt: Complex64::default(),
            }],
            is_reference: r,
        };
        let mut line = Line::new(1, 2, vec![Phase::A], CMatrix::from_element(1, 1, c(0.0, 0.1)));
        line.flow_limit = limit.map(|l| vec![l]);
        NetworkModel::new(vec![bus(1, true), bus(2, false)], vec![line], vec![], 100.0).unwrap()
    }

    #[test]
    fn two_bus_real_power_form() {
        let net = two_bus_net(None);
        let y = build_admittance(&net).unwrap();
        let forms = build_injection_matrices(&y, net.index());
        let dense = forms[0].real_power.to_dense(2);
        let expected = [[c(0.0, 0.0), c(0.0, 5.0)], [c(0.0, -5.0), c(0.0, 0.0)]];
        for r in 0..2 {
            for k in 0..2 {
                assert_abs_diff_eq!((dense[(r, k)] - expected[r][k]).norm(), 0.0, epsilon = 1e-12);
            }
        }
        let m = forms[1].magnitude.to_dense(2);
        assert_eq!(m[(1, 1)], c(1.0, 0.0));
        assert_eq!(m.iter().filter(|x| x.norm() != 0.0).count(), 1);
    }

    #[test]
    fn flow_forms_on_two_bus_line() {
        let net = two_bus_net(Some(2.0));
        let flows = build_flow_matrices(&net, 0, LineEnd::From).unwrap().unwrap();
        assert_eq!(flows.len(), 1);
        let f = &flows[0];
        let v_equal = [c(1.0, 0.0), c(1.0, 0.0)];
        assert_abs_diff_eq!(f.real.evaluate(&v_equal), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.reactive.evaluate(&v_equal), 0.0, epsilon = 1e-14);

        // sin δ = 0.1 across a 0.1 p.u. reactance carries 1 p.u.
        let delta = -(0.1f64).asin();
        let v = [c(1.0, 0.0), Complex64::from_polar(1.0, delta)];
        let oracle = (v[0] * (c(0.0, -10.0) * (v[0] - v[1])).conj()).re;
        assert_abs_diff_eq!(oracle, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.real.evaluate(&v), oracle, epsilon = 1e-12);

        assert!(build_flow_matrices(&two_bus_net(None), 0, LineEnd::From)
            .unwrap()
            .is_none());
    }

    #[test]
    fn injection_forms_match_current_oracle() {
        let net = two_bus_net(None);
        let y = build_admittance(&net).unwrap();
        let forms = build_injection_matrices(&y, net.index());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v: Vec<Complex64> = (0..2)
                .map(|_| c(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)))
                .collect();
            let i = csr_mul(&y, &v);
            for k in 0..2 {
                let s = v[k] * i[k].conj();
                let p = forms[k].real_power.evaluate_complex(&v);
                let q = forms[k].reactive_power.evaluate_complex(&v);
                assert_abs_diff_eq!(p.re, s.re, epsilon = 1e-12);
                assert_abs_diff_eq!(q.re, s.im, epsilon = 1e-12);
                assert!(p.im.abs() <= 1e-12 && q.im.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn split_of_psd_and_signature_matrices() {
        let m = HermitianForm::new(vec![3], CMatrix::from_element(1, 1, c(1.0, 0.0)), "M").unwrap();
        let s = eigen_split(&m).unwrap();
        assert_eq!(s.plus.block(), m.block());
        assert!(s.minus.is_zero());

        let d = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0, 0.0), c(-1.0, 0.0)]));
        let form = HermitianForm::new(vec![0, 1], d, "D").unwrap();
        let s = eigen_split(&form).unwrap();
        let p = s.plus.to_dense(2);
        let n = s.minus.to_dense(2);
        assert_abs_diff_eq!(p[(0, 0)].re, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p[(1, 1)].re, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(n[(1, 1)].re, -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(n[(0, 0)].re, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn split_rejects_non_hermitian() {
        let mut a = CMatrix::zeros(2, 2);
        a[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(
            HermitianForm::new(vec![0, 1], a, "bad"),
            Err(OpfError::NotHermitian(_))
        ));
    }

    #[test]
    fn split_is_idempotent_on_its_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let g = CMatrix::from_fn(n, n, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let a = (&g + g.adjoint()).map(|x| x * 0.5);
        let form = HermitianForm::new((0..n).collect(), a, "A").unwrap();
        let s = eigen_split(&form).unwrap();
        let again = eigen_split(&s.plus).unwrap();
        assert!(again.minus.block().iter().all(|x| x.norm() <= 1e-10));
        let again = eigen_split(&s.minus).unwrap();
        assert!(again.plus.block().iter().all(|x| x.norm() <= 1e-10));
    }

    #[test]
    fn factors_reproduce_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4;
        let g = CMatrix::from_fn(n, n, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let a = (&g + g.adjoint()).map(|x| x * 0.5);
        let form = HermitianForm::new(vec![1, 2, 5, 7], a, "A").unwrap();
        let s = eigen_split(&form).unwrap();
        let v: Vec<Complex64> = (0..8).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let plus: f64 = s.plus_factors.iter().map(|f| f.project(&v).norm_sqr()).sum();
        let minus: f64 = s.minus_factors.iter().map(|f| f.project(&v).norm_sqr()).sum();
        assert_abs_diff_eq!(plus, s.plus.evaluate(&v), epsilon = 1e-12);
        assert_abs_diff_eq!(-minus, s.minus.evaluate(&v), epsilon = 1e-12);
    }
}
