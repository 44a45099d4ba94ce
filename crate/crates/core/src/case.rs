//! Case files: a MATPOWER-compatible subset for single-phase transmission
//! cases and a JSON schema for multi-phase networks.
//!
//! Both formats are converted to per-unit at ingest. MATPOWER powers are in
//! MW/MVAr; JSON powers are in the unit named by `power_unit`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OpfError, Result};
use crate::network::{Bus, BusPhase, CMatrix, GenLimits, Line, NetworkModel, Phase, ResUnit};
use crate::problem::{CostModel, GenCost, ResCost};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerUnit {
    #[default]
    #[serde(rename = "MW")]
    Mw,
    #[serde(rename = "kW")]
    Kw,
    #[serde(rename = "pu")]
    PerUnit,
}

impl PowerUnit {
    /// Size of one per-unit of power in this unit.
    pub fn per_unit(self, base_mva: f64) -> f64 {
        match self {
            PowerUnit::Mw => base_mva,
            PowerUnit::Kw => base_mva * 1e3,
            PowerUnit::PerUnit => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PowerUnit::Mw => "MW",
            PowerUnit::Kw => "kW",
            PowerUnit::PerUnit => "pu",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Case {
    pub name: String,
    pub net: NetworkModel,
    pub cost: CostModel,
    /// Unit used when reporting powers.
    pub power_unit: PowerUnit,
}

pub fn parse_case(path: impl AsRef<Path>) -> Result<Case> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("case").to_string();
    match path.extension().and_then(|e| e.to_str()) {
        Some("m") => parse_matpower(&text, &display, &stem),
        Some("json") => parse_json(&text, &display),
        _ => Err(OpfError::parse(display, "unknown case format (expected .m or .json)")),
    }
}

// ---------------------------------------------------------------------------
// MATPOWER subset

struct Matrix {
    rows: Vec<(usize, Vec<f64>)>,
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '\'' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_number(tok: &str) -> Option<f64> {
    match tok {
        "Inf" | "inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}

fn push_rows(body: &str, m: &mut Matrix, lineno: usize, name: &str, path: &str) -> Result<()> {
    for chunk in body.split(';') {
        let toks: Vec<&str> = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        if toks.is_empty() {
            continue;
        }
        let vals = toks
            .iter()
            .map(|t| parse_number(t))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| OpfError::parse(path, format!("line {lineno}: non-numeric entry in mpc.{name}")))?;
        m.rows.push((lineno, vals));
    }
    Ok(())
}

type Scanned = (BTreeMap<String, f64>, BTreeMap<String, Matrix>);

fn scan_matpower(text: &str, path: &str) -> Result<Scanned> {
    let mut scalars = BTreeMap::new();
    let mut matrices = BTreeMap::new();
    // Matrix being read: name, rows so far, first line.
    let mut open: Option<(String, Matrix, usize)> = None;
    let mut in_cell = false;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if in_cell {
            in_cell = !line.contains('}');
            continue;
        }
        if open.is_none() {
            let Some((name, value)) = line.strip_prefix("mpc.").and_then(|r| r.split_once('=')) else {
                continue;
            };
            let (name, value) = (name.trim().to_string(), value.trim());
            if let Some(body) = value.strip_prefix('[') {
                open = Some((name, Matrix { rows: Vec::new() }, lineno));
                line = body;
            } else {
                if value.starts_with('{') {
                    in_cell = !value.contains('}');
                } else if let Some(v) = parse_number(value.trim_end_matches(';').trim()) {
                    scalars.insert(name, v);
                }
                continue;
            }
        }
        let (name, mut m, start) = open.take().expect("matrix is open");
        let (body, closed) = match line.find(']') {
            Some(k) => (&line[..k], true),
            None => (line, false),
        };
        push_rows(body, &mut m, lineno, &name, path)?;
        if closed {
            matrices.insert(name, m);
        } else {
            open = Some((name, m, start));
        }
    }
    if let Some((name, _, start)) = open {
        return Err(OpfError::parse(path, format!("line {start}: mpc.{name} is not closed with ']'")));
    }
    Ok((scalars, matrices))
}

fn need_cols(path: &str, what: &str, row: &(usize, Vec<f64>), n: usize) -> Result<()> {
    if row.1.len() < n {
        return Err(OpfError::parse(
            path,
            format!("line {}: {what} row has {} columns, expected at least {n}", row.0, row.1.len()),
        ));
    }
    Ok(())
}

pub fn parse_matpower(text: &str, path: &str, name: &str) -> Result<Case> {
    let (scalars, matrices) = scan_matpower(text, path)?;
    if matrices.contains_key("dcline") {
        return Err(OpfError::Unsupported("DC lines (mpc.dcline)".into()));
    }
    let base = *scalars
        .get("baseMVA")
        .ok_or_else(|| OpfError::parse(path, "missing mpc.baseMVA"))?;
    let get = |k: &str| {
        matrices
            .get(k)
            .ok_or_else(|| OpfError::parse(path, format!("missing mpc.{k}")))
    };
    let bus_m = get("bus")?;
    let gen_m = get("gen")?;
    let branch_m = get("branch")?;
    let gencost_m = matrices.get("gencost");

    let mut buses = Vec::new();
    let mut pos = BTreeMap::new();
    for row in &bus_m.rows {
        need_cols(path, "bus", row, 13)?;
        let r = &row.1;
        let id = r[0] as usize;
        if r[0] < 0.0 || r[0].fract() != 0.0 {
            return Err(OpfError::parse(path, format!("line {}: invalid bus number {}", row.0, r[0])));
        }
        let kind = r[1] as i64;
        if kind == 4 {
            return Err(OpfError::Unsupported(format!("isolated bus {id}")));
        }
        pos.insert(id, buses.len());
        buses.push(Bus {
            id,
            phases: vec![BusPhase {
                phase: Phase::A,
                load: Complex64::new(r[2], r[3]) / base,
                vmin: r[12],
                vmax: r[11],
                gen: None,
                shunt: Complex64::new(r[4], r[5]) / base,
            }],
            is_reference: kind == 3,
        });
    }

    let mut costs = Vec::new();
    let mut constant = 0.0;
    for (g, row) in gen_m.rows.iter().enumerate() {
        need_cols(path, "gen", row, 10)?;
        let r = &row.1;
        if r[7] <= 0.0 {
            continue;
        }
        let id = r[0] as usize;
        let &bi = pos
            .get(&id)
            .ok_or_else(|| OpfError::parse(path, format!("line {}: generator at unknown bus {id}", row.0)))?;
        let bp = &mut buses[bi].phases[0];
        if bp.gen.is_some() {
            return Err(OpfError::Unsupported(format!("several generators at bus {id}")));
        }
        bp.gen = Some(GenLimits {
            pmin: r[9] / base,
            pmax: r[8] / base,
            qmin: r[4] / base,
            qmax: r[3] / base,
        });
        if let Some(gc) = gencost_m {
            let crow = gc.rows.get(g).ok_or_else(|| {
                OpfError::parse(path, format!("mpc.gencost has no row for generator {}", g + 1))
            })?;
            need_cols(path, "gencost", crow, 4)?;
            let c = &crow.1;
            if c[0] as i64 != 2 {
                return Err(OpfError::Unsupported(format!(
                    "gencost model {} (only polynomial model 2)",
                    c[0]
                )));
            }
            let ncoef = c[3] as usize;
            need_cols(path, "gencost", crow, 4 + ncoef)?;
            if ncoef > 3 {
                return Err(OpfError::Unsupported(format!(
                    "polynomial cost of degree {} at generator {}",
                    ncoef - 1,
                    g + 1
                )));
            }
            let coefs = &c[4..4 + ncoef];
            let coef = |power: usize| {
                if power < ncoef { coefs[ncoef - 1 - power] } else { 0.0 }
            };
            constant += coef(0);
            costs.push(GenCost {
                bus: id,
                phase: Phase::A,
                quadratic: coef(2) * base * base,
                linear: coef(1) * base,
            });
        }
    }

    let mut lines = Vec::new();
    for row in &branch_m.rows {
        need_cols(path, "branch", row, 11)?;
        let r = &row.1;
        if r[10] <= 0.0 {
            continue;
        }
        if r[9] != 0.0 {
            return Err(OpfError::Unsupported(format!(
                "phase-shifting transformer on branch {}-{}",
                r[0], r[1]
            )));
        }
        let mut line = Line::new(
            r[0] as usize,
            r[1] as usize,
            vec![Phase::A],
            CMatrix::from_element(1, 1, Complex64::new(r[2], r[3])),
        );
        line.shunt_admittance = CMatrix::from_element(1, 1, Complex64::new(0.0, r[4]));
        line.tap = if r[8] == 0.0 { 1.0 } else { r[8] };
        if r[5] > 0.0 {
            line.flow_limit = Some(vec![r[5] / base]);
        }
        lines.push(line);
    }

    let net = NetworkModel::new(buses, lines, Vec::new(), base)?;
    Ok(Case {
        name: name.to_string(),
        net,
        cost: CostModel { generation: costs, res: Vec::new(), constant },
        power_unit: PowerUnit::Mw,
    })
}

/// Writes a single-phase case in MATPOWER form.
pub fn write_matpower(case: &Case) -> Result<String> {
    let net = &case.net;
    if !net.is_single_phase() || !net.res_units.is_empty() || !case.cost.res.is_empty() {
        return Err(OpfError::Unsupported(
            "only single-phase cases without RES units can be written as MATPOWER".into(),
        ));
    }
    let base = net.base_mva;
    let mut out = String::new();
    let fname: String = case
        .name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    writeln!(out, "function mpc = {fname}").ok();
    writeln!(out, "mpc.version = '2';").ok();
    writeln!(out, "mpc.baseMVA = {base};").ok();
    writeln!(out, "\n%% bus data\nmpc.bus = [").ok();
    for b in &net.buses {
        let p = &b.phases[0];
        let kind = if b.is_reference { 3 } else if p.gen.is_some() { 2 } else { 1 };
        writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t1\t0\t0\t1\t{}\t{};",
            b.id,
            kind,
            p.load.re * base,
            p.load.im * base,
            p.shunt.re * base,
            p.shunt.im * base,
            p.vmax,
            p.vmin
        )
        .ok();
    }
    writeln!(out, "];\n\n%% generator data\nmpc.gen = [").ok();
    let mut gens = Vec::new();
    for b in &net.buses {
        if let Some(g) = b.phases[0].gen {
            gens.push(b.id);
            writeln!(
                out,
                "\t{}\t0\t0\t{}\t{}\t1\t{}\t1\t{}\t{};",
                b.id,
                g.qmax * base,
                g.qmin * base,
                base,
                g.pmax * base,
                g.pmin * base
            )
            .ok();
        }
    }
    writeln!(out, "];\n\n%% branch data\nmpc.branch = [").ok();
    for l in &net.lines {
        let z = l.series_impedance[(0, 0)];
        let b = l.shunt_admittance[(0, 0)];
        if b.re != 0.0 {
            return Err(OpfError::Unsupported("conductive line charging in MATPOWER output".into()));
        }
        let rate = l.flow_limit.as_ref().map_or(0.0, |s| s[0] * base);
        let ratio = if l.tap == 1.0 { 0.0 } else { l.tap };
        writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{rate}\t{rate}\t{rate}\t{ratio}\t0\t1\t-360\t360;",
            l.from, l.to, z.re, z.im, b.im
        )
        .ok();
    }
    writeln!(out, "];\n\n%% generator cost data\nmpc.gencost = [").ok();
    let per_gen = case.cost.constant / gens.len().max(1) as f64;
    for id in &gens {
        let c = case.cost.generation.iter().find(|c| c.bus == *id);
        let (q, l) = c.map_or((0.0, 0.0), |c| (c.quadratic / (base * base), c.linear / base));
        writeln!(out, "\t2\t0\t0\t3\t{q}\t{l}\t{per_gen};").ok();
    }
    writeln!(out, "];").ok();
    Ok(out)
}

// ---------------------------------------------------------------------------
// JSON schema

type Pair = [f64; 2];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonGen {
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonBusPhase {
    pub phase: Phase,
    #[serde(default)]
    pub load: Pair,
    pub vmin: f64,
    pub vmax: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<JsonGen>,
    #[serde(default, skip_serializing_if = "is_zero_pair")]
    pub shunt: Pair,
}

fn is_zero_pair(p: &Pair) -> bool {
    p[0] == 0.0 && p[1] == 0.0
}

fn is_one(t: &f64) -> bool {
    *t == 1.0
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonBus {
    pub id: usize,
    #[serde(default)]
    pub reference: bool,
    pub phases: Vec<JsonBusPhase>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonLine {
    pub from: usize,
    pub to: usize,
    pub phases: Vec<Phase>,
    /// Series impedance in per-unit, row-major `[re, im]` entries.
    pub z: Vec<Vec<Pair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_shunt: Option<Vec<Vec<Pair>>>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub tap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonRes {
    pub bus: usize,
    pub phase: Phase,
    pub p_avail: f64,
    pub s_max: f64,
    pub min_pf: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonGenCost {
    pub bus: usize,
    pub phase: Phase,
    #[serde(default)]
    pub b2: f64,
    #[serde(default)]
    pub b1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonResCost {
    pub unit: usize,
    #[serde(default)]
    pub c2: f64,
    #[serde(default)]
    pub c1: f64,
    #[serde(default)]
    pub d2: f64,
    #[serde(default)]
    pub d1: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonCosts {
    #[serde(default)]
    pub generation: Vec<JsonGenCost>,
    #[serde(default)]
    pub res: Vec<JsonResCost>,
    #[serde(default)]
    pub constant: f64,
}

/// On-disk multi-phase case. Powers are in `power_unit`, impedances and
/// admittances in per-unit, voltages in per-unit.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonCase {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub base_mva: f64,
    #[serde(default)]
    pub power_unit: PowerUnit,
    pub buses: Vec<JsonBus>,
    #[serde(default)]
    pub lines: Vec<JsonLine>,
    #[serde(default)]
    pub res_units: Vec<JsonRes>,
    #[serde(default)]
    pub costs: JsonCosts,
}

fn matrix_from_pairs(rows: &[Vec<Pair>], n: usize, what: &str) -> Result<CMatrix> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(OpfError::InvalidNetwork(format!("{what} must be {n}x{n}")));
    }
    Ok(CMatrix::from_fn(n, n, |r, c| Complex64::new(rows[r][c][0], rows[r][c][1])))
}

fn pairs_from_matrix(m: &CMatrix) -> Vec<Vec<Pair>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| [m[(r, c)].re, m[(r, c)].im]).collect())
        .collect()
}

impl JsonCase {
    pub fn into_case(self) -> Result<Case> {
        if !(self.base_mva > 0.0) {
            return Err(OpfError::InvalidNetwork("base_mva must be positive".into()));
        }
        let s = self.power_unit.per_unit(self.base_mva);
        let buses = self
            .buses
            .iter()
            .map(|b| Bus {
                id: b.id,
                is_reference: b.reference,
                phases: b
                    .phases
                    .iter()
                    .map(|p| BusPhase {
                        phase: p.phase,
                        load: Complex64::new(p.load[0], p.load[1]) / s,
                        vmin: p.vmin,
                        vmax: p.vmax,
                        gen: p.gen.as_ref().map(|g| GenLimits {
                            pmin: g.pmin / s,
                            pmax: g.pmax / s,
                            qmin: g.qmin / s,
                            qmax: g.qmax / s,
                        }),
                        shunt: Complex64::new(p.shunt[0], p.shunt[1]),
                    })
                    .collect(),
            })
            .collect();
        let lines = self
            .lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let n = l.phases.len();
                let what = format!("lines[{i}].z");
                let mut line = Line::new(l.from, l.to, l.phases.clone(), matrix_from_pairs(&l.z, n, &what)?);
                if let Some(y) = &l.y_shunt {
                    line.shunt_admittance = matrix_from_pairs(y, n, &format!("lines[{i}].y_shunt"))?;
                }
                line.tap = l.tap;
                line.flow_limit = l.s_max.as_ref().map(|v| v.iter().map(|x| x / s).collect());
                Ok(line)
            })
            .collect::<Result<Vec<_>>>()?;
        let res_units = self
            .res_units
            .iter()
            .map(|u| {
                if !(u.min_pf > 0.0 && u.min_pf < 1.0) {
                    return Err(OpfError::InvalidNetwork(format!(
                        "RES unit at bus {} has min_pf {} outside (0, 1)",
                        u.bus, u.min_pf
                    )));
                }
                Ok(ResUnit::from_min_power_factor(u.bus, u.phase, u.p_avail / s, u.s_max / s, u.min_pf))
            })
            .collect::<Result<Vec<_>>>()?;
        let net = NetworkModel::new(buses, lines, res_units, self.base_mva)?;
        let cost = CostModel {
            generation: self
                .costs
                .generation
                .iter()
                .map(|c| GenCost { bus: c.bus, phase: c.phase, quadratic: c.b2 * s * s, linear: c.b1 * s })
                .collect(),
            res: self
                .costs
                .res
                .iter()
                .map(|c| ResCost {
                    unit: c.unit,
                    curtailment_quadratic: c.c2 * s * s,
                    curtailment_linear: c.c1 * s,
                    reactive_quadratic: c.d2 * s * s,
                    reactive_linear: c.d1 * s,
                })
                .collect(),
            constant: self.costs.constant,
        };
        Ok(Case { name: self.name, net, cost, power_unit: self.power_unit })
    }

    pub fn from_case(case: &Case) -> JsonCase {
        let net = &case.net;
        let s = case.power_unit.per_unit(net.base_mva);
        let r = |x: f64| {
            // Undo the per-unit division without accumulating noise.
            let y = x * s;
            let rounded = (y * 1e9).round() / 1e9;
            if (rounded - y).abs() <= 1e-9 * y.abs().max(1.0) { rounded } else { y }
        };
        JsonCase {
            name: case.name.clone(),
            description: None,
            base_mva: net.base_mva,
            power_unit: case.power_unit,
            buses: net
                .buses
                .iter()
                .map(|b| JsonBus {
                    id: b.id,
                    reference: b.is_reference,
                    phases: b
                        .phases
                        .iter()
                        .map(|p| JsonBusPhase {
                            phase: p.phase,
                            load: [r(p.load.re), r(p.load.im)],
                            vmin: p.vmin,
                            vmax: p.vmax,
                            gen: p.gen.map(|g| JsonGen {
                                pmin: r(g.pmin),
                                pmax: r(g.pmax),
                                qmin: r(g.qmin),
                                qmax: r(g.qmax),
                            }),
                            shunt: [p.shunt.re, p.shunt.im],
                        })
                        .collect(),
                })
                .collect(),
            lines: net
                .lines
                .iter()
                .map(|l| JsonLine {
                    from: l.from,
                    to: l.to,
                    phases: l.phases.clone(),
                    z: pairs_from_matrix(&l.series_impedance),
                    y_shunt: l
                        .shunt_admittance
                        .iter()
                        .any(|c| c.norm() != 0.0)
                        .then(|| pairs_from_matrix(&l.shunt_admittance)),
                    tap: l.tap,
                    s_max: l.flow_limit.as_ref().map(|v| v.iter().map(|&x| r(x)).collect()),
                })
                .collect(),
            res_units: net
                .res_units
                .iter()
                .map(|u| JsonRes {
                    bus: u.bus,
                    phase: u.phase,
                    p_avail: r(u.available_power),
                    s_max: r(u.inverter_capacity),
                    min_pf: (u.min_power_factor() * 1e12).round() / 1e12,
                })
                .collect(),
            costs: JsonCosts {
                generation: case
                    .cost
                    .generation
                    .iter()
                    .map(|c| JsonGenCost {
                        bus: c.bus,
                        phase: c.phase,
                        b2: c.quadratic / (s * s),
                        b1: c.linear / s,
                    })
                    .collect(),
                res: case
                    .cost
                    .res
                    .iter()
                    .map(|c| JsonResCost {
                        unit: c.unit,
                        c2: c.curtailment_quadratic / (s * s),
                        c1: c.curtailment_linear / s,
                        d2: c.reactive_quadratic / (s * s),
                        d1: c.reactive_linear / s,
                    })
                    .collect(),
                constant: case.cost.constant,
            },
        }
    }
}

pub fn parse_json(text: &str, path: &str) -> Result<Case> {
    let json: JsonCase =
        serde_json::from_str(text).map_err(|e| OpfError::parse(path, e.to_string()))?;
    json.into_case()
}

pub fn write_json(case: &Case) -> Result<String> {
    Ok(serde_json::to_string_pretty(&JsonCase::from_case(case))?)
}
