//! External driver protocol over the simulator: `heapsieve-driver <trace>`.
//! The profile comes from `HEAPSIEVE_PROFILE` (default `ideal`).

use std::process::ExitCode;

use heapsieve::alloc::profiles;
use heapsieve::driver::{DriverProgram, Markers};
use heapsieve::harness::{exit, run_protocol};

fn main() -> ExitCode {
    let Some(path) = std::env::args_os().nth(1) else {
        eprintln!("usage: heapsieve-driver <trace>");
        return ExitCode::from(exit::PARSE as u8);
    };
    let profile = std::env::var("HEAPSIEVE_PROFILE").unwrap_or_else(|_| "ideal".into());
    let config = match profiles::load(&profile) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit::PARSE as u8);
        }
    };
    let program = match std::fs::read_to_string(&path)
        .map_err(|e| e.to_string())
        .and_then(|t| DriverProgram::parse_with(&t, Markers::Optional).map_err(|e| e.to_string()))
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit::PARSE as u8);
        }
    };
    match run_protocol(&program, &config) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit::EXEC as u8)
        }
    }
}
