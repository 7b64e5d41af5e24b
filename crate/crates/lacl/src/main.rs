use clap::Parser;

fn main() {
    let cli = lacl::cli::Cli::parse();
    std::process::exit(lacl::cli::run(cli));
}
