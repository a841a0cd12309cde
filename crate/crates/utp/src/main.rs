use std::process::ExitCode;

use clap::Parser;
use utp::cli::{execute, Cli};
use utp::Error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv = std::env::args().collect();
    let stdout = std::io::stdout();
    match execute(cli, argv, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line: `error[<kind>]: <message>`
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
