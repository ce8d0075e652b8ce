//! Run configuration: defaults, overridden by a `key = value` config file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::Parser;
use malm::{Error, Method, SolverConfig};

#[derive(Parser, Debug, Default)]
#[command(
    name = "malm",
    about = "Penalty, ALM and modified-ALM solvers for equality-constrained and quadratic-penalty problems",
    disable_version_flag = true
)]
struct Cli {
    /// Solver: penalty, alm or malm.
    #[arg(long)]
    method: Option<String>,
    /// Catalog problem name (e.g. QUAD1, ROSEN-CIRCLE, LSQ-OVER, RANDQP).
    #[arg(long)]
    problem: Option<String>,
    /// Merit parameter omega.
    #[arg(long)]
    omega: Option<f64>,
    /// Initial penalty parameter.
    #[arg(long = "omega-tilde-init")]
    omega_tilde_init: Option<f64>,
    /// Penalty shrink factor in (0,1).
    #[arg(long = "theta-omega")]
    theta_omega: Option<f64>,
    /// Acceptance decrease factor in (0,1).
    #[arg(long = "theta-lambda")]
    theta_lambda: Option<f64>,
    /// Merit weight nu.
    #[arg(long)]
    nu: Option<f64>,
    /// Outer (and inner) tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long = "max-outer")]
    max_outer: Option<usize>,
    #[arg(long = "max-inner")]
    max_inner: Option<usize>,
    /// Disable the optional penalty-parameter increase on accepted updates.
    #[arg(long = "no-omega-increase")]
    no_omega_increase: bool,
    /// Trace output path (CSV). Defaults to trace.csv (compare.csv when
    /// comparing).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Seed for the random problem family.
    #[arg(long)]
    seed: Option<u64>,
    /// Config file with `key = value` lines mirroring the flag names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Method to include in a comparison run; repeat or comma-separate to
    /// name at least two.
    #[arg(long)]
    compare: Vec<String>,
}

/// Values parsed from a config file. Same precedence slot for every field:
/// below flags, above defaults.
#[derive(Debug, Default)]
struct FileValues {
    method: Option<String>,
    problem: Option<String>,
    omega: Option<f64>,
    omega_tilde_init: Option<f64>,
    theta_omega: Option<f64>,
    theta_lambda: Option<f64>,
    nu: Option<f64>,
    tol: Option<f64>,
    max_outer: Option<usize>,
    max_inner: Option<usize>,
    no_omega_increase: Option<bool>,
    trace: Option<PathBuf>,
    seed: Option<u64>,
    compare: Vec<String>,
    verbose: Option<bool>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("unparsable value `{value}` for `{key}`")))
}

fn parse_file(path: &Path) -> Result<FileValues, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut out = FileValues::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "config line {} is not `key = value`: `{raw}`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "method" => out.method = Some(value.to_string()),
            "problem" => out.problem = Some(value.to_string()),
            "omega" => out.omega = Some(parse_value(key, value)?),
            "omega-tilde-init" => out.omega_tilde_init = Some(parse_value(key, value)?),
            "theta-omega" => out.theta_omega = Some(parse_value(key, value)?),
            "theta-lambda" => out.theta_lambda = Some(parse_value(key, value)?),
            "nu" => out.nu = Some(parse_value(key, value)?),
            "tol" => out.tol = Some(parse_value(key, value)?),
            "max-outer" => out.max_outer = Some(parse_value(key, value)?),
            "max-inner" => out.max_inner = Some(parse_value(key, value)?),
            "no-omega-increase" => out.no_omega_increase = Some(parse_value(key, value)?),
            "trace" => out.trace = Some(PathBuf::from(value)),
            "seed" => out.seed = Some(parse_value(key, value)?),
            "compare" => out
                .compare
                .extend(value.split(',').map(|s| s.trim().to_string())),
            "verbose" => out.verbose = Some(parse_value(key, value)?),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown config key `{other}` on line {}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub problem: String,
    pub trace_path: Option<PathBuf>,
    pub seed: u64,
    pub compare_methods: Vec<Method>,
    pub verbose: bool,
}

impl RunConfig {
    /// Parses argv plus an optional config file. Flags win over file values,
    /// which win over defaults.
    pub fn from_args(args: &[String]) -> Result<RunConfig, Error> {
        let cli = match Cli::try_parse_from(args) {
            Ok(cli) => cli,
            Err(err)
                if err.kind() == ErrorKind::DisplayHelp
                    || err.kind() == ErrorKind::DisplayVersion =>
            {
                // Help output is not a usage error.
                print!("{err}");
                std::process::exit(0);
            }
            Err(err) => {
                return Err(Error::InvalidConfig(err.to_string()));
            }
        };

        let file = match &cli.config {
            Some(path) => parse_file(path)?,
            None => FileValues::default(),
        };

        let mut compare_methods = Vec::new();
        let compare_raw: Vec<String> = if cli.compare.is_empty() {
            file.compare.clone()
        } else {
            cli.compare
                .iter()
                .flat_map(|s| s.split(','))
                .map(|s| s.trim().to_string())
                .collect()
        };
        for name in &compare_raw {
            compare_methods.push(name.parse::<Method>()?);
        }
        if compare_raw.len() == 1 {
            return Err(Error::InvalidConfig(
                "--compare needs at least two methods".into(),
            ));
        }

        let method_name = cli
            .method
            .or(file.method)
            .unwrap_or_else(|| "malm".to_string());
        let method: Method = method_name.parse()?;
        let method = if compare_methods.is_empty() {
            method
        } else {
            compare_methods[0]
        };

        let mut solver = SolverConfig::new(method);
        if let Some(v) = file.omega {
            solver.omega = v;
        }
        if let Some(v) = file.omega_tilde_init {
            solver.omega_tilde_init = v;
        }
        if let Some(v) = file.theta_omega {
            solver.theta_omega = v;
        }
        if let Some(v) = file.theta_lambda {
            solver.theta_lambda = v;
        }
        if let Some(v) = file.nu {
            solver.nu = v;
        }
        if let Some(v) = file.tol {
            solver.tol = v;
            solver.inner_tol = v;
        }
        if let Some(v) = file.max_outer {
            solver.max_outer = v;
        }
        if let Some(v) = file.max_inner {
            solver.max_inner = v;
        }
        if file.no_omega_increase == Some(true) {
            solver.allow_omega_increase = false;
        }

        if let Some(v) = cli.omega {
            solver.omega = v;
        }
        if let Some(v) = cli.omega_tilde_init {
            solver.omega_tilde_init = v;
        }
        if let Some(v) = cli.theta_omega {
            solver.theta_omega = v;
        }
        if let Some(v) = cli.theta_lambda {
            solver.theta_lambda = v;
        }
        if let Some(v) = cli.nu {
            solver.nu = v;
        }
        if let Some(v) = cli.tol {
            solver.tol = v;
            solver.inner_tol = v;
        }
        if let Some(v) = cli.max_outer {
            solver.max_outer = v;
        }
        if let Some(v) = cli.max_inner {
            solver.max_inner = v;
        }
        if cli.no_omega_increase {
            solver.allow_omega_increase = false;
        }

        // Reject invalid combinations before any solve.
        if compare_methods.is_empty() {
            solver.validate()?;
        }

        let problem = cli
            .problem
            .or(file.problem)
            .ok_or_else(|| Error::InvalidConfig("missing required `--problem NAME`".into()))?;

        Ok(RunConfig {
            solver,
            problem,
            trace_path: cli.trace.or(file.trace),
            seed: cli.seed.or(file.seed).unwrap_or(0),
            compare_methods,
            verbose: file.verbose.unwrap_or(false),
        })
    }

    /// Solver config for one comparison member.
    pub fn member_config(&self, method: Method) -> SolverConfig {
        let mut cfg = self.solver.clone();
        cfg.method = method;
        cfg
    }
}
