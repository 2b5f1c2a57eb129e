//! Fixed-width accuracy tables (one row per mode, one column per held-out
//! domain, then the average) and their structured twin.

use serde::{Deserialize, Serialize};

use sre_core::trainer::Mode;
use sre_core::{Error, Result};

use crate::lodo::LodoReport;

const FIRST: usize = 8;
const CELL: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub mode: Mode,
    /// Percent, in `domains` order.
    pub per_domain: Vec<f64>,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub domains: Vec<String>,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub rows: Vec<Row>,
}

pub fn table(report: &LodoReport) -> Result<Table> {
    if report.runs.is_empty() {
        return Err(Error::Input("empty report".into()));
    }
    let domains: Vec<String> = report
        .domains
        .iter()
        .filter(|d| report.runs.iter().any(|r| &r.held_out == *d))
        .cloned()
        .collect();
    let mut rows = Vec::new();
    for &mode in &report.modes {
        let per: Option<Vec<f64>> = domains
            .iter()
            .map(|d| report.accuracy(mode, d).map(|a| 100.0 * a))
            .collect();
        let Some(per_domain) = per else { continue };
        let average = per_domain.iter().sum::<f64>() / per_domain.len() as f64;
        rows.push(Row {
            mode,
            per_domain,
            average,
        });
    }
    Ok(Table {
        domains,
        seeds: report.seeds.clone(),
        config_digest: report.config_digest.clone(),
        rows,
    })
}

/// Plain-text rendering with two decimals per cell.
pub fn render_text(t: &Table) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<FIRST$}", "Method"));
    for d in &t.domains {
        out.push_str(&format!("{:>CELL$}", truncate(d)));
    }
    out.push_str(&format!("{:>CELL$}\n", "Avg"));
    out.push_str(&"-".repeat(FIRST + CELL * (t.domains.len() + 1)));
    out.push('\n');
    for r in &t.rows {
        out.push_str(&format!("{:<FIRST$}", r.mode.label()));
        for v in &r.per_domain {
            out.push_str(&format!("{v:>CELL$.2}"));
        }
        out.push_str(&format!("{:>CELL$.2}\n", r.average));
    }
    let seeds: Vec<String> = t.seeds.iter().map(|s| s.to_string()).collect();
    out.push_str(&format!("seeds: {}\n", seeds.join(",")));
    out.push_str(&format!("config: {}\n", t.config_digest));
    out
}

pub fn render_json(t: &Table) -> String {
    let mut s = serde_json::to_string_pretty(t).expect("plain data");
    s.push('\n');
    s
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(CELL - 1) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
