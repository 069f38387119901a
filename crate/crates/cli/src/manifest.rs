//! Run manifests and atomic file writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    /// Canonical config text, when the command took a config.
    pub config: Option<String>,
    pub status: String,
    /// Set when the command stopped early; artifacts may be incomplete.
    pub partial: bool,
    pub error: Option<String>,
    pub duration_secs: f64,
    pub artifacts: BTreeMap<String, String>,
    pub stream_hash: Option<String>,
    pub tokens: u64,
    pub summary: BTreeMap<String, serde_json::Value>,
}

pub fn build_id() -> String {
    format!(
        "saewb {} ({})",
        env!("CARGO_PKG_VERSION"),
        option_env!("SAEWB_GIT_REV").unwrap_or("unversioned")
    )
}

impl RunManifest {
    pub fn new(command: &str, config: Option<String>) -> Self {
        Self {
            command: command.into(),
            build: build_id(),
            config,
            status: "running".into(),
            partial: false,
            error: None,
            duration_secs: 0.0,
            artifacts: BTreeMap::new(),
            stream_hash: None,
            tokens: 0,
            summary: BTreeMap::new(),
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.into(), path.display().to_string());
    }

    pub fn finish(&mut self, started: Instant, error: Option<String>) {
        self.duration_secs = started.elapsed().as_secs_f64();
        self.partial = error.is_some();
        self.status = if error.is_some() { "failed" } else { "complete" }.into();
        self.error = error;
    }

    /// `manifest.json` for runs, `<command>_manifest.json` otherwise, so
    /// auxiliary commands can share a run directory.
    pub fn file_name(command: &str) -> String {
        if command == "run" {
            MANIFEST_FILE.to_string()
        } else {
            format!("{}_{MANIFEST_FILE}", command.replace('-', "_"))
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn read(dir: &Path, command: &str) -> std::io::Result<Self> {
        let text = fs::read_to_string(dir.join(Self::file_name(command)))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("run", Some("seed = 1\n".into()));
        m.artifact("sae", Path::new("x/sae.saew"));
        m.finish(Instant::now(), None);
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path(), "run").unwrap(), m);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from(MANIFEST_FILE)]);
    }
}
