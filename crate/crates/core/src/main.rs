use std::process::ExitCode;

use clap::Parser;
use fastmel::cli::{execute, Cli, SEED_ENV};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let seed = std::env::var(SEED_ENV).ok();
    match execute(&cli, seed.as_deref()) {
        Ok(summary) => {
            print!("{summary}");
            if !summary.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("fastmel: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
