//! Report rendering: a machine-readable JSON dump, a one-row summary
//! table, per-seed accuracy matrices as CSV, and a metadata file that
//! keeps the timestamps out of the deterministic outputs.

use super::{ExperimentReport, HarnessError};
use std::path::Path;
use std::time::{Duration, SystemTime};

/// The full report as pretty JSON. Identical configs give identical text.
pub fn report_json(report: &ExperimentReport) -> Result<String, HarnessError> {
    serde_json::to_string_pretty(report)
        .map_err(|e| HarnessError::Config(format!("report serialization: {e}")))
}

fn fmt_cell(v: f64) -> String {
    format!("{v:.4}")
}

/// A fixed-width summary table with one row per experiment.
pub fn report_txt(report: &ExperimentReport) -> String {
    let audit = report.audit.as_ref();
    let dash = "-".to_string();
    let cols: Vec<(&str, String)> = vec![
        ("strategy", report.config.strategy.name().to_string()),
        ("seeds", report.per_seed.len().to_string()),
        ("ACC", format!("{}±{}", fmt_cell(report.acc_mean), fmt_cell(report.acc_sd))),
        ("FM", format!("{}±{}", fmt_cell(report.fm_mean), fmt_cell(report.fm_sd))),
        (
            "IJSD",
            audit
                .map(|a| format!("{}±{}", fmt_cell(a.ijsd_mean), fmt_cell(a.ijsd_sd)))
                .unwrap_or_else(|| dash.clone()),
        ),
        (
            "AJSD",
            audit
                .map(|a| format!("{}±{}", fmt_cell(a.ajsd_mean), fmt_cell(a.ajsd_sd)))
                .unwrap_or_else(|| dash.clone()),
        ),
        ("JS-ratio", audit.map(|a| fmt_cell(a.js_ratio)).unwrap_or_else(|| dash.clone())),
        ("IRR", audit.map(|a| fmt_cell(a.irr)).unwrap_or(dash)),
    ];
    let widths: Vec<usize> =
        cols.iter().map(|(h, v)| h.chars().count().max(v.chars().count())).collect();
    let mut header = String::new();
    let mut row = String::new();
    for (i, (h, v)) in cols.iter().enumerate() {
        if i > 0 {
            header.push_str("  ");
            row.push_str("  ");
        }
        header.push_str(&format!("{:<w$}", h, w = widths[i]));
        row.push_str(&format!("{:<w$}", v, w = widths[i]));
    }
    let mut out = format!("{header}\n{row}\n");
    let violations: usize = report.per_seed.iter().map(|s| s.eq8_violations).sum();
    out.push_str(&format!("\nmemory-loss violations across seeds: {violations}\n"));
    for seed_out in &report.per_seed {
        for f in &seed_out.forgets {
            out.push_str(&format!(
                "seed {} request {} forget task {}: accuracy {:.4} -> {:.4}\n",
                seed_out.seed, f.request_index, f.task, f.acc_before, f.acc_after
            ));
        }
    }
    out
}

/// Writes report.json, report.txt, and one accuracy-matrix CSV per seed.
pub fn write_report_files(report: &ExperimentReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report_json(report)?)?;
    std::fs::write(dir.join("report.txt"), report_txt(report))?;
    for seed_out in &report.per_seed {
        let path = dir.join(format!("accmatrix_seed{}.csv", seed_out.seed));
        std::fs::write(path, seed_out.matrix.to_csv())?;
    }
    Ok(())
}

/// Writes metadata.json: version, wall-clock start and end, duration.
/// Separate from the report so reruns of the same config produce
/// byte-identical report files.
pub fn write_metadata(
    dir: &Path,
    started: SystemTime,
    elapsed: Duration,
) -> Result<(), HarnessError> {
    let meta = serde_json::json!({
        "crate_version": env!("CARGO_PKG_VERSION"),
        "started_unix_secs": super::unix_seconds(started),
        "finished_unix_secs": super::unix_seconds(started + elapsed),
        "duration_secs": elapsed.as_secs_f64(),
    });
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)
            .map_err(|e| HarnessError::Config(format!("metadata serialization: {e}")))?,
    )?;
    Ok(())
}
