use clap::Parser;

fn main() {
    let args = crofton::cli::Args::parse();
    std::process::exit(crofton::cli::run(&args));
}
