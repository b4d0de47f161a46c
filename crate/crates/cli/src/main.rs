use clap::Parser;
use conductor_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("conductor: {e}");
        std::process::exit(e.exit_code());
    }
}
