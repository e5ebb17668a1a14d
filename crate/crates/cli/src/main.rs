use clap::Parser;
use groupmuon_cli::{init_logging, run, Cli};

fn main() {
    init_logging();
    let cli = Cli::parse();
    let code = run(&cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
