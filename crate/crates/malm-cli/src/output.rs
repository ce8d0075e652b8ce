//! Single-run execution, trace file writing and the terminal summary.

use std::io::Write;
use std::path::Path;

use malm::{builtin_problem, random_quadratic, CatalogEntry, Error, RunReport, RunStatus};

use crate::config::RunConfig;

/// Loads a catalog problem; `RANDQP` honors the configured seed.
pub fn load_problem(name: &str, seed: u64) -> Result<CatalogEntry, Error> {
    if name == "RANDQP" && seed != 0 {
        return Ok(CatalogEntry {
            problem: random_quadratic(4, 2, seed),
            merit_solution: None,
            constrained_solution: None,
        });
    }
    builtin_problem(name)
}

pub const TRACE_HEADER: &str =
    "k,method,omega_tilde,inner_iterations,norm_c,acceptance_metric,residual_norm,f_value,branch,cumulative_evaluations";

/// Writes the per-outer-iteration trace as CSV, one row per outer iteration.
pub fn write_trace(path: &Path, report: &RunReport) -> Result<(), Error> {
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for row in &report.outer_trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.k,
            report.method,
            row.omega_tilde,
            row.inner_iterations,
            row.norm_c,
            row.acceptance_metric,
            row.residual_norm,
            row.f_value,
            row.branch.as_str(),
            row.cumulative_evaluations,
        ));
    }
    std::fs::write(path, out)
        .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))
}

fn format_vector<'a>(v: impl IntoIterator<Item = &'a f64>) -> String {
    let parts: Vec<String> = v.into_iter().map(|x| format!("{x:.9}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn print_summary(report: &RunReport) {
    println!("status: {}", report.status.as_str());
    println!("x_final: {}", format_vector(report.x_final.iter()));
    println!("lambda_final: {}", format_vector(report.lambda_final.iter()));
    println!("norm_c: {:.3e}", report.final_norm_c);
    println!("residual_norm: {:.3e}", report.final_residual_norm);
    println!(
        "outer_iterations: {}  inner_iterations: {}  evaluations: {}",
        report.outer_trace.len(),
        report.total_inner_iterations,
        report.evals.total()
    );
}

/// Runs a single configured solve; returns whether it solved.
pub fn run_single(config: &RunConfig) -> Result<bool, Error> {
    let entry = load_problem(&config.problem, config.seed)?;
    let report = malm::run(&entry.problem, &config.solver)?;

    let default_path = Path::new("trace.csv");
    let path = config
        .trace_path
        .as_deref()
        .unwrap_or(default_path);
    write_trace(path, &report)?;

    if config.verbose {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        writeln!(lock, "{TRACE_HEADER}").ok();
        for row in &report.outer_trace {
            writeln!(
                lock,
                "{},{},{},{},{},{},{},{},{},{}",
                row.k,
                report.method,
                row.omega_tilde,
                row.inner_iterations,
                row.norm_c,
                row.acceptance_metric,
                row.residual_norm,
                row.f_value,
                row.branch.as_str(),
                row.cumulative_evaluations,
            )
            .ok();
        }
    }

    print_summary(&report);
    Ok(report.status == RunStatus::Solved)
}
