//! Method comparison: runs each requested method on the same problem and
//! renders one summary row per method.

use std::path::Path;

use malm::{Error, Method, RunReport, RunStatus};

use crate::config::RunConfig;
use crate::output::load_problem;

pub const COMPARE_HEADER: &str =
    "method,status,outer_iterations,inner_iterations,evaluations,norm_c,residual_norm,f_value";

struct CompareRow {
    method: Method,
    report: RunReport,
}

fn f_final(report: &RunReport) -> f64 {
    report
        .outer_trace
        .last()
        .map(|r| r.f_value)
        .unwrap_or(f64::NAN)
}

fn csv_row(row: &CompareRow) -> String {
    let r = &row.report;
    format!(
        "{},{},{},{},{},{},{},{}",
        row.method,
        r.status.as_str(),
        r.outer_trace.len(),
        r.total_inner_iterations,
        r.evals.total(),
        r.final_norm_c,
        r.final_residual_norm,
        f_final(r),
    )
}

/// Runs the comparison; returns whether every member solved.
pub fn run_compare(config: &RunConfig) -> Result<bool, Error> {
    let entry = load_problem(&config.problem, config.seed)?;

    // Validate every member before running any of them.
    let mut members = Vec::new();
    for &method in &config.compare_methods {
        let cfg = config.member_config(method);
        cfg.validate()?;
        members.push(cfg);
    }

    let mut rows = Vec::new();
    for cfg in &members {
        let report = malm::run(&entry.problem, cfg)?;
        rows.push(CompareRow {
            method: cfg.method,
            report,
        });
    }

    println!(
        "{:<8} {:>8} {:>7} {:>7} {:>8} {:>12} {:>12} {:>14}",
        "method", "status", "outer", "inner", "evals", "norm_c", "residual", "f"
    );
    for row in &rows {
        let r = &row.report;
        println!(
            "{:<8} {:>8} {:>7} {:>7} {:>8} {:>12.3e} {:>12.3e} {:>14.6e}",
            row.method.as_str(),
            r.status.as_str(),
            r.outer_trace.len(),
            r.total_inner_iterations,
            r.evals.total(),
            r.final_norm_c,
            r.final_residual_norm,
            f_final(r),
        );
    }

    let default_path = Path::new("compare.csv");
    let path = config.trace_path.as_deref().unwrap_or(default_path);
    let mut out = String::new();
    out.push_str(COMPARE_HEADER);
    out.push('\n');
    for row in &rows {
        out.push_str(&csv_row(row));
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))?;

    Ok(rows.iter().all(|r| r.report.status == RunStatus::Solved))
}
