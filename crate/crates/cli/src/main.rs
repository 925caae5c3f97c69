use clap::Parser;

fn main() {
    let cli = optima_cli::Cli::parse();
    if let Err(e) = optima_cli::run(cli) {
        eprintln!("optima: {e}");
        std::process::exit(e.exit_code());
    }
}
