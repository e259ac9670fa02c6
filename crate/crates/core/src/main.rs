use clap::Parser;

fn main() {
    let cli = ccq::cli::Cli::parse();
    std::process::exit(ccq::cli::run(cli));
}
