//! MATPOWER case files (`.m`, format version 2).
//!
//! Only `baseMVA`, `bus`, `gen` and `branch` are read. Cost data and cell
//! arrays such as `bus_name` are skipped. Generators are aggregated per bus;
//! out-of-service generators are dropped, and a PV bus left without any is
//! demoted to PQ.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, warn};
use thiserror::Error;
use vdkflow_core::grid::BusGen;
use vdkflow_core::{Branch, Bus, BusKind, GridError, Network};

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("case file has no `mpc.{0}` block")]
    MissingBlock(&'static str),
    #[error("malformed row {row} of `mpc.{block}`: {reason}")]
    MalformedRow {
        block: &'static str,
        row: usize,
        reason: String,
    },
    #[error("malformed value for `mpc.{0}`")]
    MalformedScalar(&'static str),
    #[error("unterminated `mpc.{0}` block")]
    Unterminated(String),
    #[error("bus {0} has unsupported type {1}")]
    UnsupportedBusType(u32, i64),
    #[error("generator references unknown bus {0}")]
    UnknownGenBus(u32),
    #[error(transparent)]
    Grid(#[from] GridError),
}

enum Value {
    Scalar(String),
    Matrix(Vec<Vec<String>>),
}

fn strip_comment(line: &str) -> &str {
    // `%` never appears inside the numeric blocks we read; quoted names in
    // cell arrays are skipped wholesale
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn split_assignments(text: &str) -> Result<BTreeMap<String, Value>, CaseError> {
    let mut out = BTreeMap::new();
    let mut lines = text.lines().map(strip_comment);
    while let Some(line) = lines.next() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix("mpc.") else { continue };
        let Some((name, rhs)) = rest.split_once('=') else { continue };
        let name = name.trim().to_string();
        let rhs = rhs.trim();
        let (open, close) = match rhs.chars().next() {
            Some('[') => ('[', ']'),
            Some('{') => ('{', '}'),
            _ => {
                out.insert(name, Value::Scalar(rhs.trim_end_matches(';').trim().to_string()));
                continue;
            }
        };
        let mut body = String::from(&rhs[1..]);
        while !body.contains(close) {
            let next = lines.next().ok_or_else(|| CaseError::Unterminated(name.clone()))?;
            body.push('\n');
            body.push_str(next);
        }
        let body = &body[..body.find(close).expect("checked above")];
        if open == '{' {
            debug!("skipping cell array mpc.{name}");
            continue;
        }
        let rows = body
            .split([';', '\n'])
            .map(|r| {
                r.split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .filter(|r| !r.is_empty())
            .collect();
        out.insert(name, Value::Matrix(rows));
    }
    Ok(out)
}

fn number(tok: &str) -> Option<f64> {
    match tok {
        "Inf" | "inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => tok.parse().ok(),
    }
}

fn parse_rows(
    blocks: &BTreeMap<String, Value>,
    block: &'static str,
    min_cols: usize,
) -> Result<Vec<Vec<f64>>, CaseError> {
    let Some(Value::Matrix(rows)) = blocks.get(block) else {
        return Err(CaseError::MissingBlock(block));
    };
    rows.iter()
        .enumerate()
        .map(|(k, r)| {
            if r.len() < min_cols {
                return Err(CaseError::MalformedRow {
                    block,
                    row: k + 1,
                    reason: format!("expected at least {min_cols} columns, found {}", r.len()),
                });
            }
            r.iter()
                .map(|t| {
                    number(t).ok_or_else(|| CaseError::MalformedRow {
                        block,
                        row: k + 1,
                        reason: format!("`{t}` is not a number"),
                    })
                })
                .collect()
        })
        .collect()
}

fn bus_id(v: f64, block: &'static str, row: usize) -> Result<u32, CaseError> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(CaseError::MalformedRow {
            block,
            row,
            reason: format!("`{v}` is not a bus number"),
        })
    }
}

pub fn parse_matpower(text: &str) -> Result<Network, CaseError> {
    let blocks = split_assignments(text)?;
    for name in blocks.keys() {
        if !matches!(name.as_str(), "version" | "baseMVA" | "bus" | "gen" | "branch" | "gencost") {
            debug!("ignoring mpc.{name}");
        }
    }
    if blocks.contains_key("gencost") {
        debug!("ignoring mpc.gencost");
    }
    let base_mva = match blocks.get("baseMVA") {
        Some(Value::Scalar(s)) => s.parse::<f64>().map_err(|_| CaseError::MalformedScalar("baseMVA"))?,
        Some(_) => return Err(CaseError::MalformedScalar("baseMVA")),
        None => return Err(CaseError::MissingBlock("baseMVA")),
    };
    if let Some(Value::Scalar(v)) = blocks.get("version") {
        if v.trim_matches('\'') != "2" {
            warn!("case format version {v}; reading as version 2");
        }
    }

    let bus_rows = parse_rows(&blocks, "bus", 13)?;
    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut index = BTreeMap::new();
    for (k, r) in bus_rows.iter().enumerate() {
        let id = bus_id(r[0], "bus", k + 1)?;
        let kind = match r[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            t => return Err(CaseError::UnsupportedBusType(id, t)),
        };
        index.insert(id, buses.len());
        buses.push(Bus {
            id,
            kind,
            base_p_load: r[2],
            base_q_load: r[3],
            shunt_g: r[4],
            shunt_b: r[5],
            base_v_mag: r[7],
            base_v_ang: r[8],
            gen: None,
        });
    }

    let gen_rows = match blocks.get("gen") {
        Some(_) => parse_rows(&blocks, "gen", 8)?,
        None => Vec::new(),
    };
    for (k, r) in gen_rows.iter().enumerate() {
        let id = bus_id(r[0], "gen", k + 1)?;
        let &b = index.get(&id).ok_or(CaseError::UnknownGenBus(id))?;
        if r[7] <= 0.0 {
            debug!("generator {} at bus {id} is out of service", k + 1);
            continue;
        }
        let (pg, qg, qmax, qmin, vg) = (r[1], r[2], r[3], r[4], r[5]);
        match &mut buses[b].gen {
            Some(g) => {
                g.p_mw += pg;
                g.q_mvar += qg;
                g.q_max += qmax;
                g.q_min += qmin;
            }
            slot @ None => {
                *slot = Some(BusGen {
                    p_mw: pg,
                    q_mvar: qg,
                    q_min: qmin,
                    q_max: qmax,
                    v_set: vg,
                })
            }
        }
    }
    for bus in &mut buses {
        match (bus.kind, bus.gen.is_some()) {
            (BusKind::Pv, false) => {
                warn!("PV bus {} has no in-service generator; treating it as PQ", bus.id);
                bus.kind = BusKind::Pq;
            }
            (BusKind::Pq, true) => return Err(GridError::GeneratorOnPqBus(bus.id).into()),
            _ => {}
        }
    }

    let branch_rows = parse_rows(&blocks, "branch", 11)?;
    let mut branches = Vec::with_capacity(branch_rows.len());
    for (k, r) in branch_rows.iter().enumerate() {
        let from_id = bus_id(r[0], "branch", k + 1)?;
        let to_id = bus_id(r[1], "branch", k + 1)?;
        let from = *index.get(&from_id).ok_or(GridError::UnknownBus(from_id))?;
        let to = *index.get(&to_id).ok_or(GridError::UnknownBus(to_id))?;
        branches.push(Branch {
            from,
            to,
            r: r[2],
            x: r[3],
            b_charging: r[4],
            tap_ratio: if r[8] == 0.0 { 1.0 } else { r[8] },
            phase_shift: r[9],
            in_service: r[10] > 0.0,
        });
    }
    Ok(Network::new(base_mva, buses, branches)?)
}

pub fn load_case(path: &Path) -> Result<Network, CaseError> {
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_matpower(&text)
}

fn num(v: f64) -> String {
    if v == f64::INFINITY {
        "Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else {
        format!("{v}")
    }
}

/// Canonical MATPOWER text: one generator row per generator bus, unit
/// taps written as 0. Parsing the output reproduces `net` exactly.
pub fn write_matpower(net: &Network, name: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = {name}");
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {};", num(net.base_mva));
    let _ = writeln!(s, "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin");
    let _ = writeln!(s, "mpc.bus = [");
    for b in &net.buses {
        let t = match b.kind {
            BusKind::Pq => 1,
            BusKind::Pv => 2,
            BusKind::Slack => 3,
        };
        let _ = writeln!(
            s,
            "\t{}\t{t}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t0\t1\t1.1\t0.9;",
            b.id,
            num(b.base_p_load),
            num(b.base_q_load),
            num(b.shunt_g),
            num(b.shunt_b),
            num(b.base_v_mag),
            num(b.base_v_ang)
        );
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin");
    let _ = writeln!(s, "mpc.gen = [");
    for b in &net.buses {
        if let Some(g) = &b.gen {
            let _ = writeln!(
                s,
                "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t1\tInf\t-Inf;",
                b.id,
                num(g.p_mw),
                num(g.q_mvar),
                num(g.q_max),
                num(g.q_min),
                num(g.v_set),
                num(net.base_mva)
            );
        }
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax");
    let _ = writeln!(s, "mpc.branch = [");
    for br in &net.branches {
        let ratio = if br.tap_ratio == 1.0 { 0.0 } else { br.tap_ratio };
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t{}\t{}\t-360\t360;",
            net.buses[br.from].id,
            net.buses[br.to].id,
            num(br.r),
            num(br.x),
            num(br.b_charging),
            num(ratio),
            num(br.phase_shift),
            u8::from(br.in_service)
        );
    }
    let _ = writeln!(s, "];");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "
function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	0	1	1.1	0.9;
	2	2	10	5	0	0	1	1.0	0	0	1	1.1	0.9;
	3	1	20	-4	1	2	1	1.0	0	0	1	1.1	0.9;
	4	2	5	0	0	0	1	1.0	0	0	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	Inf	-Inf	1.0	100	1	0	0;
	2	10	2	20	-20	1.02	100	1	0	0;
	2	15	1	10	-5	1.02	100	1	0	0;
	4	0	0	10	-10	1.0	100	0	0	0;
];
mpc.branch = [
	1	2	0.01	0.1	0.02	0	0	0	0	0	1	-360	360;
	2	3	0.02	0.2	0	0	0	0	0.98	1.5	1	-360	360;
	3	4	0.02	0.2	0	0	0	0	0	0	1	-360	360;
	1	3	0.02	0.2	0	0	0	0	0	0	0	-360	360;
];
mpc.gencost = [
	2	0	0	3	0	1	0;
];
mpc.bus_name = {
	'A % not a comment';
};
";

    #[test]
    fn parses_and_aggregates_generators() {
        let net = parse_matpower(TINY).unwrap();
        assert_eq!(net.n_buses(), 4);
        let g = net.buses[1].gen.as_ref().unwrap();
        assert_eq!((g.p_mw, g.q_mvar, g.q_max, g.q_min), (25.0, 3.0, 30.0, -25.0));
        assert_eq!(g.v_set, 1.02);
        // out-of-service generator demotes bus 4
        assert_eq!(net.buses[3].kind, BusKind::Pq);
        assert!(net.buses[3].gen.is_none());
        assert_eq!(net.branches[0].tap_ratio, 1.0);
        assert_eq!(net.branches[1].tap_ratio, 0.98);
        assert!(!net.branches[3].in_service);
        assert_eq!(net.adjacency[0], vec![1]);
    }

    #[test]
    fn round_trip_is_exact() {
        let net = parse_matpower(TINY).unwrap();
        let again = parse_matpower(&write_matpower(&net, "tiny")).unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_matpower("mpc.baseMVA = 100;"), Err(CaseError::MissingBlock("bus"))));
        let bad = TINY.replace("\t3\t1\t20\t-4", "\t3\t1\tx\t-4");
        assert!(matches!(parse_matpower(&bad), Err(CaseError::MalformedRow { block: "bus", row: 3, .. })));
        let short = TINY.replace("1\t2\t0.01\t0.1\t0.02\t0\t0\t0\t0\t0\t1\t-360\t360;", "1\t2\t0.01;");
        assert!(matches!(parse_matpower(&short), Err(CaseError::MalformedRow { block: "branch", .. })));
        let iso = TINY.replace("\t3\t1\t20", "\t3\t4\t20");
        assert!(matches!(parse_matpower(&iso), Err(CaseError::UnsupportedBusType(3, 4))));
    }
}
