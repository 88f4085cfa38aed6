use clap::Parser;

fn main() {
    let cli = ttl_cli::Cli::parse();
    if let Err(e) = ttl_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
