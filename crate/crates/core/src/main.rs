use clap::Parser;

fn main() {
    let cli = bolusopt::cli::Cli::parse();
    std::process::exit(bolusopt::cli::run(cli));
}
