use clap::Parser;

fn main() {
    let cli = crossclr::cli::Cli::parse();
    std::process::exit(crossclr::cli::run(cli));
}
