use clap::Parser;

fn main() {
    let cli = andkit::cli::Cli::parse();
    if let Err(e) = andkit::cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
