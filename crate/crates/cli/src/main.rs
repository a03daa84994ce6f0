use clap::Parser;
use interattr_cli::args::Cli;
use interattr_cli::{commands, ErrorBody};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli) {
        eprintln!("{}", serde_json::to_string(&ErrorBody::from(&e)).expect("error body serialises"));
        std::process::exit(1);
    }
}
