use clap::Parser;

fn main() {
    let cli = csl_cli::Cli::parse();
    if let Err(e) = csl_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
