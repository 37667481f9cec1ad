//! Binary entry point: parse flags, dispatch the configured experiment, and
//! map errors to the documented exit codes (2 config, 3 numerical).

use clap::Parser;
use fif::cli::{run, CliArgs};

fn main() {
    let args = CliArgs::parse();
    if let Err(e) = run(&args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
