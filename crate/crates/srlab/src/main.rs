use clap::Parser;

use srlab::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        // one line, machine-parsable
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
