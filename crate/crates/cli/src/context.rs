//! Run context and manifests.
//!
//! Commands read and write files only through [`Ctx`], which hashes every
//! file it touches and refuses to overwrite an input. The resulting
//! [`RunManifest`] holds the resolved arguments, so a run can be repeated
//! from it alone.

use std::fs;
use std::path::{Path, PathBuf};

use qplan_nn::checkpoint::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const MANIFEST_FORMAT: &str = "qplan-manifest/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to audit and repeat one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    /// Resolved arguments (flags over config file), with absolute paths.
    pub config: Value,
    pub seed: u64,
    pub jobs: usize,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Hashes of the checkpoints read or written, a subset of inputs and outputs.
    pub checkpoints: Vec<FileRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdout_sha256: Option<String>,
    /// Headline metrics of the run.
    #[serde(default)]
    pub summary: Map<String, Value>,
    pub started_unix_ms: u128,
    pub wall_clock_secs: f64,
}

/// Makes `p` absolute against the working directory, without touching the file system.
pub fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

#[derive(Debug, Default)]
pub struct Ctx {
    pub seed: u64,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    checkpoints: Vec<FileRecord>,
    /// Declared input paths, guarded even before they are read.
    guarded: Vec<PathBuf>,
    stdout: String,
    summary: Map<String, Value>,
}

impl Ctx {
    pub fn new(seed: u64, guarded: Vec<PathBuf>) -> Self {
        Self {
            seed,
            guarded,
            ..Self::default()
        }
    }

    fn record_input(&mut self, path: &Path, bytes: &[u8], checkpoint: bool) {
        let rec = FileRecord {
            path: absolute(path),
            sha256: sha256_hex(bytes),
        };
        if checkpoint && !self.checkpoints.contains(&rec) {
            self.checkpoints.push(rec.clone());
        }
        if !self.inputs.contains(&rec) {
            self.inputs.push(rec);
        }
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.record_input(path, &bytes, false);
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = self.read(path)?;
        String::from_utf8(bytes).map_err(|_| CliError::data(format!("{}: not UTF-8", path.display())))
    }

    pub fn read_checkpoint(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        self.record_input(path, &bytes, true);
        Ok(bytes)
    }

    pub(crate) fn check_writable(&self, path: &Path) -> Result<PathBuf, CliError> {
        let abs = absolute(path);
        let clash = self
            .guarded
            .iter()
            .chain(self.inputs.iter().map(|r| &r.path))
            .any(|p| abs == *p || abs.starts_with(p));
        if clash {
            return Err(CliError::usage(format!("refusing to overwrite input {}", path.display())));
        }
        Ok(abs)
    }

    fn write_inner(&mut self, path: &Path, bytes: &[u8], checkpoint: bool) -> Result<(), CliError> {
        let abs = self.check_writable(path)?;
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&abs, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let rec = FileRecord {
            path: abs,
            sha256: sha256_hex(bytes),
        };
        self.outputs.retain(|r| r.path != rec.path);
        if checkpoint {
            self.checkpoints.retain(|r| r.path != rec.path);
            self.checkpoints.push(rec.clone());
        }
        self.outputs.push(rec);
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        self.write_inner(path, bytes.as_ref(), false)
    }

    pub fn write_checkpoint(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        self.write_inner(path, bytes, true)
    }

    /// Appends a line to the command's standard output.
    pub fn println(&mut self, line: impl AsRef<str>) {
        self.stdout.push_str(line.as_ref());
        self.stdout.push('\n');
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.to_owned(), serde_json::to_value(value).expect("summary value serializes"));
    }

    pub fn stdout(&self) -> &str {
        &self.stdout
    }

    pub fn outputs(&self) -> &[FileRecord] {
        &self.outputs
    }

    pub fn into_manifest(self, command: &str, config: Value, jobs: usize, started_unix_ms: u128, wall_clock_secs: f64) -> (RunManifest, String) {
        let stdout_sha256 = (!self.stdout.is_empty()).then(|| sha256_hex(self.stdout.as_bytes()));
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            config,
            seed: self.seed,
            jobs,
            inputs: self.inputs,
            outputs: self.outputs,
            checkpoints: self.checkpoints,
            stdout_sha256,
            summary: self.summary,
            started_unix_ms,
            wall_clock_secs,
        };
        (manifest, self.stdout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_cannot_be_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "x").unwrap();
        let mut ctx = Ctx::new(0, vec![]);
        assert_eq!(ctx.read_text(&input).unwrap(), "x");
        assert!(matches!(ctx.write(&input, "y"), Err(CliError::Usage(_))));
        assert_eq!(fs::read_to_string(&input).unwrap(), "x");

        let declared = dir.path().join("later");
        let mut ctx = Ctx::new(0, vec![declared.clone()]);
        assert!(ctx.write(&declared.join("f"), "y").is_err());
        ctx.write(&dir.path().join("out/f"), "y").unwrap();
        assert_eq!(ctx.outputs().len(), 1);
        assert_eq!(ctx.outputs()[0].sha256, sha256_hex(b"y"));
    }

    #[test]
    fn missing_inputs_map_to_their_error_kind() {
        let mut ctx = Ctx::new(0, vec![]);
        assert_eq!(ctx.read(Path::new("/nonexistent/x")).unwrap_err().exit_code(), 2);
        assert_eq!(ctx.read_checkpoint(Path::new("/nonexistent/x")).unwrap_err().exit_code(), 3);
    }
}
