use clap::Parser;
use digan_core::cli::{exit_code, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIGAN_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = run(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    std::process::exit(exit_code(&result));
}
