use clap::Parser;

fn main() {
    let cli = sapa_cli::cli::Cli::parse();
    if let Err(e) = sapa_cli::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
