//! Command-line plumbing: driver protocol output, benchmark orchestration
//! and rendering.

pub mod bench;
pub mod render;

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::alloc::AllocatorConfig;
use crate::driver::{execute, DriverProgram, ExecError, Execution};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit codes shared by the command-line tools.
pub mod exit {
    pub const SOLVED: i32 = 0;
    pub const PARSE: i32 = 2;
    pub const EXEC: i32 = 3;
    pub const UNSOLVED: i32 = 4;
}

/// Driver protocol output: the distance or `none`, then one
/// `CHECK <x> <y> <measured>` line per check whose records were captured.
pub fn protocol_output(execution: &Execution) -> String {
    let mut out = match execution.result.distance {
        Some(d) => format!("{d}\n"),
        None => "none\n".to_string(),
    };
    for c in &execution.checks {
        if let Some(m) = c.measured {
            writeln!(out, "CHECK {} {} {}", c.x, c.y, m).unwrap();
        }
    }
    out
}

/// Parse and execute a trace, returning the driver protocol output.
pub fn run_protocol(
    program: &DriverProgram,
    config: &AllocatorConfig,
) -> Result<String, ExecError> {
    execute(program, config).map(|e| protocol_output(&e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
}

pub fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::Markers;

    #[test]
    fn protocol_lines() {
        let p = DriverProgram::parse("<malloc 32 a>\n<fst 16>\n<snd 16>\n").unwrap();
        assert_eq!(
            run_protocol(&p, &AllocatorConfig::ideal()).unwrap(),
            "-16\n"
        );
        let p = DriverProgram::parse_with(
            "#X-RECORD 0 x\n<malloc 32 a>\n#X-RECORD 0 y\n<malloc 16 b>\n#X-RECORD 0 z\n#X-CHECK y x 32\n#X-CHECK z x 0\n",
            Markers::Optional,
        )
        .unwrap();
        assert_eq!(
            run_protocol(&p, &AllocatorConfig::ideal()).unwrap(),
            "none\nCHECK y x 32\n"
        );
    }

    #[test]
    fn digests_are_hex() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
