//! CSV trace and JSON summary writers.
//!
//! Column layout: `t`, then one block per follower, then one block per
//! leader, then one block per follower pair `(i, j)` with `i < j` in
//! lexicographic order. Indices in column names are 1-based.

use std::io::{self, Write};

use nalgebra::DVector;

use crate::sim::{RunSummary, TraceRecord};

const FOLLOWER_VECTORS: &[&str] = &[
    "x", "zeta", "uc", "ghat", "ur", "ubar", "u", "du", "eps", "ec", "do", "xi", "ga", "gol",
];

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Header row for `n` followers, `m` leaders, state dimension `n_x` and input dimension `n_u`.
pub fn csv_header(n: usize, m: usize, n_x: usize, n_u: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for i in 1..=n {
        for name in FOLLOWER_VECTORS {
            let dim = if matches!(*name, "uc" | "ghat" | "ur" | "ubar" | "u" | "du" | "ga") {
                n_u
            } else {
                n_x
            };
            cols.extend((1..=dim).map(|k| format!("f{i}_{name}{k}")));
        }
        cols.push(format!("f{i}_theta"));
        cols.push(format!("f{i}_rho"));
    }
    for r in 1..=m {
        cols.extend((1..=n_x).map(|k| format!("l{r}_x{k}")));
    }
    for i in 1..=n {
        for j in i + 1..=n {
            cols.push(format!("p{i}_{j}_d"));
            cols.push(format!("p{i}_{j}_h"));
            cols.push(format!("p{i}_{j}_active"));
        }
    }
    cols
}

fn push_vec(row: &mut Vec<String>, v: &DVector<f64>) {
    row.extend(v.iter().map(|&x| fmt(x)));
}

pub fn csv_row(rec: &TraceRecord) -> Vec<String> {
    let n_x = rec.agents.first().map_or(0, |a| a.x.len());
    let mut row = vec![fmt(rec.t)];
    for (i, a) in rec.agents.iter().enumerate() {
        let block = i * n_x..(i + 1) * n_x;
        let ec = rec.e_c.rows(block.start, n_x).into_owned();
        let d_o = rec.delta_o.rows(block.start, n_x).into_owned();
        for v in [
            &a.x,
            &a.zeta,
            &a.u_c,
            &a.gamma_hat,
            &a.u_r,
            &a.u_bar,
            &a.u,
            &a.delta_u,
            &a.eps,
            &ec,
            &d_o,
            &a.xi,
            &a.gamma_a,
            &a.gamma_ol,
        ] {
            push_vec(&mut row, v);
        }
        row.push(fmt(a.theta));
        row.push(fmt(a.rho_hat));
    }
    for l in &rec.leaders {
        push_vec(&mut row, l);
    }
    let mut pairs: Vec<_> = rec.pairs.iter().collect();
    pairs.sort_by_key(|p| (p.i, p.j));
    for p in pairs {
        row.push(fmt(p.distance));
        row.push(fmt(p.h));
        row.push(u8::from(p.active).to_string());
    }
    row
}

/// Writes the full trace. Fails on an empty trace since the layout cannot be inferred.
pub fn write_csv<W: Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    let Some(first) = records.first() else {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty trace"));
    };
    let n_x = first.agents.first().map_or(0, |a| a.x.len());
    let n_u = first.agents.first().map_or(0, |a| a.u.len());
    let header = csv_header(first.agents.len(), first.leaders.len(), n_x, n_u);
    writeln!(out, "{}", header.join(","))?;
    for rec in records {
        let row = csv_row(rec);
        debug_assert_eq!(row.len(), header.len());
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}

pub fn write_summary<W: Write>(mut out: W, summary: &RunSummary) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut out, summary)?;
    writeln!(out)
}
