use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

/// Everything needed to re-run a command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub argv: Vec<String>,
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub threads: usize,
    pub deterministic: bool,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_ms: u128,
    pub elapsed_seconds: f64,
    pub status: String,
}

pub struct Recorder {
    started: Instant,
    started_unix_ms: u128,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Self {
        Self {
            started: Instant::now(),
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            inputs,
            outputs,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        self,
        argv: Vec<String>,
        command: String,
        config: Value,
        seed: u64,
        threads: usize,
        deterministic: bool,
        status: String,
    ) -> RunManifest {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            argv,
            command,
            config,
            seed,
            threads,
            deterministic,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_ms: self.started_unix_ms,
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            status,
        }
    }
}

/// `<first output>.manifest.json`, or `moe-spatial.manifest.json` in the
/// working directory for commands that only print.
pub fn default_path(outputs: &[PathBuf]) -> PathBuf {
    match outputs.first() {
        Some(p) => {
            let mut s = p.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        None => PathBuf::from("moe-spatial.manifest.json"),
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, manifest: &RunManifest) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut f, manifest)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
