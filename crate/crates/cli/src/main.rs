use std::process::ExitCode;

use clap::Parser;
use covae_cli::commands::{run, split_overrides, Cli};

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    let mut stdout = std::io::stdout().lock();
    match run(cli, &overrides, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
