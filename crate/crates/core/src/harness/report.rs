//! Comparison table and plot-data export for a finished run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

use super::config::Method;
use super::experiment::{cell_dir, read_results, CellMetrics, ResultRow};
use super::tensor::RawTensor;

pub const MISSING: &str = "—";
const METRIC_NAMES: [&str; 4] = ["Decay PSNR", "Decay VIF", "T1-Map PSNR", "T1-Map VIF"];

/// Seed-averaged metrics keyed by `(method, finetuned, shots)`; cells that
/// failed on every seed are absent.
pub fn aggregate(rows: &[ResultRow]) -> BTreeMap<(Method, bool, usize), CellMetrics> {
    let mut sums: BTreeMap<(Method, bool, usize), (CellMetrics, usize)> = BTreeMap::new();
    for r in rows {
        let Ok(m) = &r.outcome else { continue };
        let e = sums
            .entry((r.method, r.finetuned, r.shots))
            .or_insert((CellMetrics { decay_psnr_db: 0.0, decay_vif: 0.0, map_psnr_db: 0.0, map_vif: 0.0 }, 0));
        e.0.decay_psnr_db += m.decay_psnr_db;
        e.0.decay_vif += m.decay_vif;
        e.0.map_psnr_db += m.map_psnr_db;
        e.0.map_vif += m.map_vif;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, n))| {
            let n = n as f64;
            let m = CellMetrics {
                decay_psnr_db: s.decay_psnr_db / n,
                decay_vif: s.decay_vif / n,
                map_psnr_db: s.map_psnr_db / n,
                map_vif: s.map_vif / n,
            };
            (k, m)
        })
        .collect()
}

/// Renders the aligned table: one row per method (and finetuned variant),
/// and for each shot count the decay metrics followed by the map metrics.
pub fn format_table(rows: &[ResultRow]) -> String {
    let agg = aggregate(rows);
    let shots: BTreeSet<usize> = rows.iter().map(|r| r.shots).collect();
    let labels: BTreeSet<(Method, bool)> = rows.iter().map(|r| (r.method, r.finetuned)).collect();

    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut head1 = vec![String::new()];
    let mut head2 = vec!["Method".to_string()];
    for s in &shots {
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            head1.push(if k == 0 { format!("{s} shots") } else { String::new() });
            head2.push(name.to_string());
        }
    }
    grid.push(head1);
    grid.push(head2);
    for &(method, ft) in &labels {
        let mut line = vec![if ft { format!("{method} (finetuned)") } else { method.to_string() }];
        for &s in &shots {
            match agg.get(&(method, ft, s)) {
                Some(m) => line.extend([
                    format!("{:.2}", m.decay_psnr_db),
                    format!("{:.4}", m.decay_vif),
                    format!("{:.2}", m.map_psnr_db),
                    format!("{:.4}", m.map_vif),
                ]),
                None => line.extend(std::iter::repeat_n(MISSING.to_string(), 4)),
            }
        }
        grid.push(line);
    }

    let cols = grid[1].len();
    let widths: Vec<usize> = (0..cols).map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &grid {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let pad = widths[c] - v.chars().count();
                if c == 0 {
                    format!("{v}{}", " ".repeat(pad))
                } else {
                    format!("{}{v}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// Writes `report/table.txt` and plot data (final trajectories and T1 maps
/// of the first evaluation sample) under `run_dir`, returning the table.
/// A directory without results yields a table with headers only.
pub fn write_report(run_dir: &Path) -> Result<String> {
    let results = run_dir.join("results.csv");
    let rows = if results.exists() { read_results(&results)? } else { Vec::new() };
    let table = format_table(&rows);
    let report = run_dir.join("report");
    fs::create_dir_all(&report)?;
    fs::write(report.join("table.txt"), &table)?;

    let cells: BTreeSet<(u64, Method, usize)> = rows.iter().map(|r| (r.seed, r.method, r.shots)).collect();
    for (seed, method, shots) in cells {
        let dir = cell_dir(run_dir, seed, method, shots);
        let tag = format!("{method}_{shots}_seed{seed}");
        let traj = dir.join("trajectory_final.csv");
        if traj.exists() {
            fs::copy(&traj, report.join(format!("trajectory_{tag}.csv")))?;
        }
        let map = dir.join("sample_0_t1.t1pt");
        let oracle = run_dir.join(format!("seed_{seed}")).join("oracle").join("sample_0_t1.t1pt");
        if map.exists() && oracle.exists() {
            let map = RawTensor::read(&map)?;
            let reference = RawTensor::read(&oracle)?.to_f64()?;
            let values = map.to_f64()?;
            let width = map.dims.get(1).copied().unwrap_or(1) as usize;
            let mut csv = String::from("row,col,t1,oracle_t1\n");
            for (p, (v, r)) in values.iter().zip(&reference).enumerate() {
                let _ = writeln!(csv, "{},{},{v},{r}", p / width, p % width);
            }
            fs::write(report.join(format!("map_{tag}.csv")), csv)?;
        }
    }
    Ok(table)
}
