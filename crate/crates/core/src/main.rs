use std::process::ExitCode;

use clap::Parser;
use nvgslac::cli::{exit_code, run, thread_cap, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = thread_cap().and_then(|cap| {
        if let Some(n) = cap {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| nvgslac::error::Error::Internal(e.to_string()))?;
        }
        run(cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
