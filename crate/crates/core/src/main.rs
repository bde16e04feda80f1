use clap::Parser;
use scs_lab::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => println!("{msg}"),
        Err(e) => {
            eprintln!("scs-lab: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
