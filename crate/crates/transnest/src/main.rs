use clap::Parser;
use transnest::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = cli::execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
