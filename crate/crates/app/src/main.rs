use clap::Parser;

fn main() {
    let cli = pathsearch::cli::Cli::parse();
    if let Err(e) = pathsearch::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
