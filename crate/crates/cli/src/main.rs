use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use csalign_cli::{run, thread_cap, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = thread_cap(std::env::var("CSALIGN_THREADS").ok().as_deref()).and_then(|threads| run(&cli, threads));
    let mut stdout = std::io::stdout().lock();
    match result {
        Ok(text) => {
            let _ = stdout.write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(err) => {
            let _ = stdout.write_all(err.stdout.as_bytes());
            let _ = stdout.flush();
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}
