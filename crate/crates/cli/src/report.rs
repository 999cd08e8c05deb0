//! Summaries of replay metrics CSVs.

use std::fmt::Write as _;

use actstore_core::trace::METRICS_CSV_HEADER;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub iter: u64,
    pub mem_used: u64,
    pub capacity: u64,
    pub budget: u64,
    pub ratio: f64,
    pub evictions: u64,
    pub shrinks: u64,
    pub time_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<Row>,
}

/// Parses a metrics CSV; columns may appear in any order, extra columns are
/// ignored.
pub fn summarize(text: &str) -> CliResult<Summary> {
    if text.trim().is_empty() {
        return Ok(Summary { rows: Vec::new() });
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut idx = Vec::new();
    for col in METRICS_CSV_HEADER.split(',') {
        let i = headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| CliError::Schema(format!("missing column `{col}`")))?;
        idx.push(i);
    }
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Schema(e.to_string()))?;
        let field = |k: usize| -> CliResult<&str> {
            rec.get(idx[k])
                .map(str::trim)
                .ok_or_else(|| CliError::Schema(format!("row {}: too few fields", n + 1)))
        };
        let int = |k: usize| -> CliResult<u64> {
            let f = field(k)?;
            f.parse()
                .map_err(|_| CliError::Schema(format!("row {}: `{f}` is not an integer", n + 1)))
        };
        let float = |k: usize| -> CliResult<f64> {
            let f = field(k)?;
            f.parse()
                .map_err(|_| CliError::Schema(format!("row {}: `{f}` is not a number", n + 1)))
        };
        rows.push(Row {
            iter: int(0)?,
            mem_used: int(1)?,
            capacity: int(2)?,
            budget: int(3)?,
            ratio: float(4)?,
            evictions: int(5)?,
            shrinks: int(6)?,
            time_used: float(7)?,
        });
    }
    Ok(Summary { rows })
}

const MIB: f64 = 1024.0 * 1024.0;

impl Summary {
    /// Mean of the finite per-iteration ratios.
    pub fn compression_ratio(&self) -> Option<f64> {
        let finite: Vec<f64> = self.rows.iter().map(|r| r.ratio).filter(|r| r.is_finite()).collect();
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
    }

    pub fn render(&self) -> String {
        if self.rows.is_empty() {
            return "no iterations\n".into();
        }
        let n = self.rows.len();
        let peak = self.rows.iter().map(|r| r.mem_used).max().unwrap_or(0);
        let peak_cap = self.rows.iter().map(|r| r.capacity).max().unwrap_or(0);
        let over = self.rows.iter().filter(|r| r.mem_used > r.budget).count();
        let evictions: u64 = self.rows.iter().map(|r| r.evictions).sum();
        let shrinks: u64 = self.rows.iter().map(|r| r.shrinks).sum();
        let time = self.rows.iter().map(|r| r.time_used).sum::<f64>() / n as f64;
        let mut out = String::new();
        let _ = writeln!(out, "iterations: {n}");
        match self.compression_ratio() {
            Some(r) => {
                let _ = writeln!(out, "compression_ratio: {r:.2}");
            }
            None => {
                let _ = writeln!(out, "compression_ratio: inf");
            }
        }
        let _ = writeln!(out, "peak_mem_used: {peak} ({:.2} MiB)", peak as f64 / MIB);
        let _ = writeln!(out, "peak_capacity: {peak_cap} ({:.2} MiB)", peak_cap as f64 / MIB);
        let _ = writeln!(out, "iterations_over_budget: {over}");
        let _ = writeln!(out, "evictions: {evictions} ({:.2}/iter)", evictions as f64 / n as f64);
        let _ = writeln!(out, "shrinks: {shrinks} ({:.2}/iter)", shrinks as f64 / n as f64);
        let _ = writeln!(out, "mean_time_used: {time:.4}");
        out
    }

    pub fn plot_csv(&self) -> String {
        let mut out = String::from("iter,mem_used_mib,budget_mib,capacity_mib,ratio\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{}",
                r.iter,
                r.mem_used as f64 / MIB,
                r.budget as f64 / MIB,
                r.capacity as f64 / MIB,
                r.ratio
            );
        }
        out
    }
}
