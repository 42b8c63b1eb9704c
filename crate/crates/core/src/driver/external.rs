use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use thiserror::Error;
use wait_timeout::ChildExt;

use super::DriverProgram;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// What an external driver reported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalOutput {
    /// `None` when the driver printed `none` (no fst/snd pair in the program).
    pub distance: Option<i64>,
    /// `(x, y, measured)` from `CHECK` lines.
    pub checks: Vec<(String, String, i64)>,
}

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("writing the directive file: {0}")]
    Io(#[from] std::io::Error),
    #[error("spawning {path}: {source}")]
    Spawn {
        path: String,
        source: std::io::Error,
    },
    #[error("driver exited with {status}: {stderr}")]
    Exit { status: String, stderr: String },
    #[error("unparsable driver output: {0}")]
    Output(String),
    #[error("driver timed out after {0:?}")]
    Timeout(Duration),
}

fn drain(mut r: impl Read + Send + 'static) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Parse the driver's standard output.
pub fn parse_output(stdout: &str) -> Result<ExternalOutput, ExternalError> {
    let mut lines = stdout.lines();
    let first = lines
        .next()
        .ok_or_else(|| ExternalError::Output("empty output".into()))?
        .trim();
    let distance = if first == "none" {
        None
    } else {
        Some(
            first
                .parse::<i64>()
                .map_err(|_| ExternalError::Output(format!("first line `{first}`")))?,
        )
    };
    let mut checks = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["CHECK", x, y, d] => {
                let d = d
                    .parse::<i64>()
                    .map_err(|_| ExternalError::Output(format!("check line `{line}`")))?;
                checks.push((x.to_string(), y.to_string(), d));
            }
            _ => {}
        }
    }
    Ok(ExternalOutput { distance, checks })
}

/// Run `program` through the executable at `driver`, which receives the
/// path of a file holding the serialized program as its only argument.
pub fn run_external(
    driver: &Path,
    program: &DriverProgram,
    timeout: Duration,
) -> Result<ExternalOutput, ExternalError> {
    let mut file = tempfile::Builder::new()
        .prefix("heapsieve-")
        .suffix(".trace")
        .tempfile()?;
    file.write_all(program.serialize().as_bytes())?;
    file.flush()?;

    let mut child = Command::new(driver)
        .arg(file.path())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| ExternalError::Spawn {
            path: driver.display().to_string(),
            source,
        })?;
    let out = drain(child.stdout.take().expect("piped stdout"));
    let err = drain(child.stderr.take().expect("piped stderr"));
    let status = match child.wait_timeout(timeout)? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ExternalError::Timeout(timeout));
        }
    };
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    if !status.success() {
        return Err(ExternalError::Exit {
            status: status.to_string(),
            stderr: stderr.trim().to_string(),
        });
    }
    parse_output(&stdout)
}
