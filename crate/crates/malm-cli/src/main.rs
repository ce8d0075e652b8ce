use std::process::ExitCode;

mod compare;
mod config;
mod output;

use config::RunConfig;

// Exit codes: 0 solved, 1 solver failure, 2 usage error.
fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let config = match RunConfig::from_args(&args) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    match run_main(&config) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn run_main(config: &RunConfig) -> Result<bool, malm::Error> {
    if config.compare_methods.len() >= 2 {
        compare::run_compare(config)
    } else {
        output::run_single(config)
    }
}
