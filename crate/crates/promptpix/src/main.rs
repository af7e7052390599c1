use clap::Parser;
use promptpix::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    if let Err(e) = cli::run(&args) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
