use std::process::ExitCode;

use clap::Parser;
use edgeplane_cli::{exit_for, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDGEPLANE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(exit) => ExitCode::from(exit.code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_for(&e).code())
        }
    }
}
