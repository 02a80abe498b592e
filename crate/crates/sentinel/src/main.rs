use std::sync::Arc;

use clap::Parser;
use sentinel::backends::UreqTransport;
use sentinel::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut stdout = std::io::stdout().lock();
    if let Err(e) = run(cli, Arc::new(UreqTransport), &mut stdout) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
