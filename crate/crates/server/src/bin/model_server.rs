use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use modelserve_server::{Args, Server};
use signal_hook::consts::{SIGINT, SIGTERM};
use signal_hook::iterator::Signals;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = match Args::parse().into_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("model_server: {e}");
            return ExitCode::from(2);
        }
    };
    let mut signals = match Signals::new([SIGINT, SIGTERM]) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("model_server: installing signal handlers: {e}");
            return ExitCode::FAILURE;
        }
    };
    let server = match Server::start(config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("model_server: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!("listening on {}", server.addr());

    if let Some(sig) = signals.forever().next() {
        log::info!("signal {sig}: shutting down");
    }
    if server.shutdown(Duration::from_secs(30)) {
        ExitCode::SUCCESS
    } else {
        log::warn!("some versions did not unload before the deadline");
        ExitCode::FAILURE
    }
}
