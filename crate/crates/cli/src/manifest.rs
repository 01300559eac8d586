use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tmtsc_core::{Error, Result};

pub const VERSION: &str = env!("TMTSC_VERSION");

/// Record of one command invocation. Timestamps and timings live here and
/// nowhere else, so the other outputs of a rerun are byte-identical.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub timings: serde_json::Map<String, serde_json::Value>,
}

pub struct Run {
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    pub fn start(command: &str) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            manifest: RunManifest {
                command: command.into(),
                version: VERSION.into(),
                config: serde_json::Value::Null,
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix,
                timings: Default::default(),
            },
            start: Instant::now(),
        }
    }

    pub fn config(&mut self, config: &impl Serialize) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn timing(&mut self, name: &str, seconds: f64) {
        self.manifest.timings.insert(name.into(), seconds.into());
    }

    /// Writes the manifest last, through a temporary file and a rename.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.timing("total_seconds", self.start.elapsed().as_secs_f64());
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        std::fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| io(path, e))
    }
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `<dir>/run_manifest.json` for directory outputs, `<file>.manifest.json`
/// next to a file output.
pub fn manifest_for_dir(dir: &Path) -> PathBuf {
    dir.join("run_manifest.json")
}

pub fn manifest_for_file(file: &Path) -> PathBuf {
    let mut p = file.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}
