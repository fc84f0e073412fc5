use std::process::ExitCode;

use clap::Parser;
use hero_cli::{run, tune_allocator, Cli};

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
