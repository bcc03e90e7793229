//! Power-system case data: parsing, validation, topology edits and network
//! matrices.
//!
//! Buses are addressed internally by their position in [`NetworkCase::buses`];
//! external bus numbers only appear in the file formats and in reports.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("missing section `{0}`")]
    MissingSection(&'static str),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("case has no slack bus")]
    NoSlackBus,
    #[error("case has more than one slack bus ({0} found)")]
    MultipleSlackBuses(usize),
    #[error("duplicate bus id {0}")]
    DuplicateBusId(u32),
    #[error("{what} references unknown bus {bus}")]
    UnknownBus { what: &'static str, bus: u32 },
    #[error("branch {0} connects a bus to itself")]
    SelfLoop(usize),
    #[error("branch {0} has zero series impedance")]
    ZeroImpedance(usize),
    #[error("bus {0} has a non-positive voltage magnitude")]
    BadVoltage(u32),
    #[error("branch {0} has a non-positive tap ratio")]
    BadTap(usize),
    #[error("branch index {index} out of range (case has {count} branches)")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("branch {0} is already out of service")]
    AlreadyOut(usize),
    #[error("invalid case JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

impl BusKind {
    fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            1 if code == 1.0 => Some(BusKind::PQ),
            2 if code == 2.0 => Some(BusKind::PV),
            3 if code == 3.0 => Some(BusKind::Slack),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            BusKind::PQ => 1,
            BusKind::PV => 2,
            BusKind::Slack => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    /// Active load, MW.
    pub pd: f64,
    /// Reactive load, MVAr.
    pub qd: f64,
    /// Shunt conductance, MW consumed at 1 pu.
    pub gs: f64,
    /// Shunt susceptance, MVAr injected at 1 pu.
    pub bs: f64,
    pub vm: f64,
    /// Voltage angle in degrees.
    pub va: f64,
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub pg: f64,
    pub qg: f64,
    pub vg: f64,
    pub status: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    /// Off-nominal turns ratio; 1.0 for lines.
    pub tap: f64,
    pub status: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub gens: Vec<Generator>,
    pub branches: Vec<Branch>,
}

/// Binary bus adjacency over in-service branches, zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionMatrix {
    n: usize,
    c: Vec<u8>,
}

impl ConnectionMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.c[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).map(|j| self.get(i, j) as usize).sum()
    }

    /// Unordered connected pairs `(i, j)` with `i < j`, row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.get(i, j) == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn ones(&self) -> usize {
        self.c.iter().map(|&v| v as usize).sum()
    }
}

impl NetworkCase {
    /// Builds a case and checks all structural invariants.
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        gens: Vec<Generator>,
        branches: Vec<Branch>,
    ) -> Result<Self, CaseError> {
        let case = NetworkCase {
            name: name.into(),
            base_mva,
            buses,
            gens,
            branches,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<(), CaseError> {
        let mut seen = HashMap::new();
        for (k, bus) in self.buses.iter().enumerate() {
            if seen.insert(bus.id, k).is_some() {
                return Err(CaseError::DuplicateBusId(bus.id));
            }
            if !(bus.vm > 0.0) {
                return Err(CaseError::BadVoltage(bus.id));
            }
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        match slacks {
            0 => return Err(CaseError::NoSlackBus),
            1 => {}
            n => return Err(CaseError::MultipleSlackBuses(n)),
        }
        for g in &self.gens {
            if !seen.contains_key(&g.bus) {
                return Err(CaseError::UnknownBus {
                    what: "generator",
                    bus: g.bus,
                });
            }
        }
        for (k, br) in self.branches.iter().enumerate() {
            for bus in [br.from, br.to] {
                if !seen.contains_key(&bus) {
                    return Err(CaseError::UnknownBus { what: "branch", bus });
                }
            }
            if br.from == br.to {
                return Err(CaseError::SelfLoop(k));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(CaseError::ZeroImpedance(k));
            }
            if !(br.tap > 0.0) {
                return Err(CaseError::BadTap(k));
            }
        }
        Ok(())
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// External bus id to internal index.
    pub fn index_map(&self) -> HashMap<u32, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(k, b)| (b.id, k))
            .collect()
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Internal endpoint indices of every branch, in branch order.
    pub fn branch_ends(&self) -> Vec<(usize, usize)> {
        let idx = self.index_map();
        self.branches
            .iter()
            .map(|br| (idx[&br.from], idx[&br.to]))
            .collect()
    }

    pub fn in_service_count(&self) -> usize {
        self.branches.iter().filter(|b| b.status).count()
    }

    pub fn from_json(text: &str) -> Result<Self, CaseError> {
        let case: NetworkCase =
            serde_json::from_str(text).map_err(|e| CaseError::Json(e.to_string()))?;
        case.validate()?;
        Ok(case)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }

    /// Renders the case as MATPOWER text. Columns this crate does not model
    /// are written with neutral defaults.
    pub fn to_matpower(&self) -> String {
        let mut s = String::new();
        let name = if self.name.is_empty() {
            "case"
        } else {
            &self.name
        };
        let _ = writeln!(s, "function mpc = {name}");
        let _ = writeln!(s, "mpc.version = '2';");
        let _ = writeln!(s, "mpc.baseMVA = {:?};", self.base_mva);
        let _ = writeln!(s, "mpc.bus = [");
        for b in &self.buses {
            let _ = writeln!(
                s,
                "\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t1\t{:?}\t{:?}\t{:?}\t1\t1.1\t0.9;",
                b.id,
                b.kind.code(),
                b.pd,
                b.qd,
                b.gs,
                b.bs,
                b.vm,
                b.va,
                b.base_kv
            );
        }
        let _ = writeln!(s, "];");
        let _ = writeln!(s, "mpc.gen = [");
        for g in &self.gens {
            let _ = writeln!(
                s,
                "\t{}\t{:?}\t{:?}\t9999\t-9999\t{:?}\t{:?}\t{}\t9999\t0;",
                g.bus,
                g.pg,
                g.qg,
                g.vg,
                self.base_mva,
                u8::from(g.status)
            );
        }
        let _ = writeln!(s, "];");
        let _ = writeln!(s, "mpc.branch = [");
        for br in &self.branches {
            let _ = writeln!(
                s,
                "\t{}\t{}\t{:?}\t{:?}\t{:?}\t0\t0\t0\t{:?}\t0\t{}\t-360\t360;",
                br.from,
                br.to,
                br.r,
                br.x,
                br.b_charging,
                br.tap,
                u8::from(br.status)
            );
        }
        let _ = writeln!(s, "];");
        s
    }
}

/// Rows of a `mpc.<name> = [ ... ];` block with their source line numbers.
fn matrix_section(text: &str, name: &'static str) -> Result<Vec<(usize, Vec<f64>)>, CaseError> {
    let lines: Vec<&str> = text.lines().collect();
    let header = format!("mpc.{name}");
    let start = lines
        .iter()
        .position(|l| {
            let code = strip_comment(l);
            let t = code.trim_start();
            t.strip_prefix(&header)
                .map(|rest| rest.trim_start().starts_with('='))
                .unwrap_or(false)
        })
        .ok_or(CaseError::MissingSection(name))?;

    let mut rows = Vec::new();
    let mut closed = false;
    for (offset, raw) in lines[start..].iter().enumerate() {
        let line_no = start + offset + 1;
        let mut code = strip_comment(raw);
        if offset == 0 {
            code = match code.find('[') {
                Some(p) => &code[p + 1..],
                None => {
                    return Err(CaseError::MalformedRow {
                        line: line_no,
                        reason: format!("expected `[` after mpc.{name} ="),
                    })
                }
            };
        }
        let (body, end) = match code.find(']') {
            Some(p) => (&code[..p], true),
            None => (code, false),
        };
        for chunk in body.split(';') {
            let chunk = chunk.trim();
            if chunk.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for tok in chunk.split(|c: char| c.is_whitespace() || c == ',') {
                if tok.is_empty() {
                    continue;
                }
                let v: f64 = tok.parse().map_err(|_| CaseError::MalformedRow {
                    line: line_no,
                    reason: format!("`{tok}` is not a number"),
                })?;
                row.push(v);
            }
            rows.push((line_no, row));
        }
        if end {
            closed = true;
            break;
        }
    }
    if !closed {
        return Err(CaseError::MalformedRow {
            line: lines.len(),
            reason: format!("unterminated mpc.{name} matrix"),
        });
    }
    Ok(rows)
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(p) => &line[..p],
        None => line,
    }
}

fn scalar(text: &str, name: &'static str) -> Result<f64, CaseError> {
    let header = format!("mpc.{name}");
    for (k, raw) in text.lines().enumerate() {
        let code = strip_comment(raw).trim();
        if let Some(rest) = code.strip_prefix(&header) {
            let rest = rest.trim_start();
            if let Some(val) = rest.strip_prefix('=') {
                let val = val.trim().trim_end_matches(';').trim();
                return val.parse().map_err(|_| CaseError::MalformedRow {
                    line: k + 1,
                    reason: format!("`{val}` is not a number"),
                });
            }
        }
    }
    Err(CaseError::MissingSection(name))
}

fn need(row: &[f64], cols: usize, line: usize, what: &str) -> Result<(), CaseError> {
    if row.len() < cols {
        return Err(CaseError::MalformedRow {
            line,
            reason: format!("{what} row has {} columns, need at least {cols}", row.len()),
        });
    }
    Ok(())
}

fn as_id(v: f64, line: usize) -> Result<u32, CaseError> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(CaseError::MalformedRow {
            line,
            reason: format!("`{v}` is not a bus number"),
        })
    }
}

/// Parses MATPOWER case text (`mpc.baseMVA`, `mpc.bus`, `mpc.gen`,
/// `mpc.branch`). Trailing columns beyond the ones used are ignored.
pub fn parse_matpower_case(text: &str) -> Result<NetworkCase, CaseError> {
    let name = text
        .lines()
        .map(strip_comment)
        .find_map(|l| {
            let t = l.trim();
            t.strip_prefix("function")
                .and_then(|rest| rest.split('=').nth(1))
                .map(|n| n.trim().to_string())
        })
        .unwrap_or_default();

    let base_mva = scalar(text, "baseMVA")?;
    let bus_rows = matrix_section(text, "bus")?;
    let gen_rows = matrix_section(text, "gen")?;
    let branch_rows = matrix_section(text, "branch")?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    for (line, row) in &bus_rows {
        need(row, 10, *line, "bus")?;
        let kind = BusKind::from_code(row[1]).ok_or_else(|| CaseError::MalformedRow {
            line: *line,
            reason: format!("unsupported bus type {}", row[1]),
        })?;
        buses.push(Bus {
            id: as_id(row[0], *line)?,
            kind,
            pd: row[2],
            qd: row[3],
            gs: row[4],
            bs: row[5],
            vm: row[7],
            va: row[8],
            base_kv: row[9],
        });
    }

    let mut gens = Vec::with_capacity(gen_rows.len());
    for (line, row) in &gen_rows {
        need(row, 8, *line, "gen")?;
        gens.push(Generator {
            bus: as_id(row[0], *line)?,
            pg: row[1],
            qg: row[2],
            vg: row[5],
            status: row[7] > 0.0,
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (line, row) in &branch_rows {
        need(row, 11, *line, "branch")?;
        branches.push(Branch {
            from: as_id(row[0], *line)?,
            to: as_id(row[1], *line)?,
            r: row[2],
            x: row[3],
            b_charging: row[4],
            tap: if row[8] == 0.0 { 1.0 } else { row[8] },
            status: row[10] > 0.0,
        });
    }

    NetworkCase::new(name, base_mva, buses, gens, branches)
}

/// Bus admittance matrix in per unit (π-model lines, fixed taps, shunts).
pub fn build_ybus(case: &NetworkCase) -> DMatrix<Complex64> {
    let n = case.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for ((f, t), br) in case.branch_ends().into_iter().zip(&case.branches) {
        if !br.status {
            continue;
        }
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let half_b = Complex64::new(0.0, br.b_charging / 2.0);
        let tap = br.tap;
        y[(f, f)] += (ys + half_b) / (tap * tap);
        y[(t, t)] += ys + half_b;
        y[(f, t)] -= ys / tap;
        y[(t, f)] -= ys / tap;
    }
    for (k, bus) in case.buses.iter().enumerate() {
        y[(k, k)] += Complex64::new(bus.gs, bus.bs) / case.base_mva;
    }
    y
}

pub fn connection_matrix(case: &NetworkCase) -> ConnectionMatrix {
    let n = case.n_buses();
    let mut c = vec![0u8; n * n];
    for ((f, t), br) in case.branch_ends().into_iter().zip(&case.branches) {
        if br.status {
            c[f * n + t] = 1;
            c[t * n + f] = 1;
        }
    }
    ConnectionMatrix { n, c }
}

/// Returns a copy of `case` with branch `branch_index` switched out.
pub fn apply_outage(case: &NetworkCase, branch_index: usize) -> Result<NetworkCase, CaseError> {
    let count = case.branches.len();
    let br = case
        .branches
        .get(branch_index)
        .ok_or(CaseError::IndexOutOfRange {
            index: branch_index,
            count,
        })?;
    if !br.status {
        return Err(CaseError::AlreadyOut(branch_index));
    }
    let mut out = case.clone();
    out.branches[branch_index].status = false;
    Ok(out)
}

pub fn is_connected(case: &NetworkCase) -> bool {
    let n = case.n_buses();
    if n == 0 {
        return true;
    }
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for ((f, t), br) in case.branch_ends().into_iter().zip(&case.branches) {
        if br.status {
            adj.entry(f).or_default().push(t);
            adj.entry(t).or_default().push(f);
        }
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut reached = 1;
    while let Some(u) = queue.pop_front() {
        for &v in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
            if !seen[v] {
                seen[v] = true;
                reached += 1;
                queue.push_back(v);
            }
        }
    }
    reached == n
}
