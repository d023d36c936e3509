use std::io::Write;

use clap::Parser;

fn main() {
    let cli = tbn_cli::Cli::parse();
    if let Err(e) = tbn_cli::run(cli) {
        let _ = std::io::stdout().flush();
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
