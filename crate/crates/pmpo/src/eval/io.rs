//! Report serialization: CSV, aligned text tables, and binary graymaps.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{EvalReport, SweepTable};

/// CSV form of a base/new report: one metric per row, then per-class rows.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "base,{}", report.base);
    let _ = writeln!(out, "new,{}", report.new);
    let _ = writeln!(out, "harmonic,{}", report.harmonic);
    let _ = writeln!(out, "fingerprint,{}", report.fingerprint);
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "seeds,{}", seeds.join(" "));
    for (name, acc) in &report.per_class {
        let _ = writeln!(out, "class:{name},{acc}");
    }
    out
}

/// Human-readable aligned table of a base/new report.
pub fn report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "", "Base", "New", "H");
    let _ = writeln!(
        out,
        "{:<10} {:>8.2} {:>8.2} {:>8.2}",
        "accuracy", report.base, report.new, report.harmonic
    );
    let _ = writeln!(out, "fingerprint {}  seeds {:?}", report.fingerprint, report.seeds);
    if !report.per_class.is_empty() {
        let width = report
            .per_class
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(0);
        let _ = writeln!(out, "per-class:");
        for (name, acc) in &report.per_class {
            let _ = writeln!(out, "  {name:<width$} {acc:>7.2}");
        }
    }
    out
}

/// CSV form of an ablation sweep: one row per grid value.
pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out =
        String::from("axis,value,seeds,base_mean,base_std,new_mean,new_std,h_mean,h_std\n");
    let seeds: Vec<String> = table.seeds.iter().map(u64::to_string).collect();
    let seeds = seeds.join(" ");
    for cell in &table.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            table.axis,
            cell.value,
            seeds,
            cell.base.mean,
            cell.base.std,
            cell.new.mean,
            cell.new.std,
            cell.harmonic.mean,
            cell.harmonic.std
        );
    }
    out
}

/// Human-readable aligned table of an ablation sweep (mean ± std).
pub fn sweep_text(table: &SweepTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "axis {} over seeds {:?}",
        table.axis, table.seeds
    );
    let width = table
        .cells
        .iter()
        .map(|c| c.value.len())
        .max()
        .unwrap_or(5)
        .max(table.axis.len());
    let _ = writeln!(
        out,
        "{:<width$} {:>14} {:>14} {:>14}",
        table.axis, "Base", "New", "H"
    );
    for cell in &table.cells {
        let _ = writeln!(
            out,
            "{:<width$} {:>7.2} ±{:>5.2} {:>7.2} ±{:>5.2} {:>7.2} ±{:>5.2}",
            cell.value,
            cell.base.mean,
            cell.base.std,
            cell.new.mean,
            cell.new.std,
            cell.harmonic.mean,
            cell.harmonic.std
        );
    }
    out
}

/// Write grayscale values in [0, 1] as a binary (P5) portable graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Config("graymap needs positive dimensions".into()));
    }
    if values.len() != width * height {
        return Err(Error::Dimension(format!(
            "graymap {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(
        values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}
