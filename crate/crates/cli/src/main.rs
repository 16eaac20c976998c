use clap::Parser;

fn main() {
    let cli = lowrank_cli::Cli::parse();
    if let Err(e) = lowrank_cli::run(cli) {
        eprintln!("lowrank: {e}");
        std::process::exit(e.exit_code());
    }
}
