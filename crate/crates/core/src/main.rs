use clap::Parser;

fn main() {
    let cli = newscap::cli::Cli::parse();
    std::process::exit(newscap::cli::run(cli));
}
