use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use raketab_core::raking::RakingError;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NON_CONVERGENCE: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { kind: "input", code: EXIT_INPUT, message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "exit_code": self.code, "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::input(e.to_string())
            }
        }
    )*};
}

input_error!(
    std::io::Error,
    serde_json::Error,
    raketab_core::TableError,
    raketab_core::BisgError,
    raketab_core::CalibError,
    raketab_core::MetricsError,
    raketab_core::IngestError,
    raketab_core::SynthError
);

impl From<RakingError> for CliError {
    fn from(e: RakingError) -> Self {
        match e {
            RakingError::NonConvergence { .. } => Self { kind: "non_convergence", code: EXIT_NON_CONVERGENCE, message: e.to_string() },
            other => CliError::input(other.to_string()),
        }
    }
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    flags: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    notes: BTreeMap<String, Value>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One subcommand invocation: tracks inputs and outputs and writes the
/// manifest last.
pub struct Run {
    out_dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, out_dir: &Path, flags: &impl Serialize) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            manifest: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                flags: serde_json::to_value(flags)?,
                seed: None,
                iterations: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                notes: BTreeMap::new(),
            },
        })
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn iterations(&mut self, n: usize) {
        self.manifest.iterations = Some(n);
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<(), CliError> {
        self.manifest.notes.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Renders `name` in memory, then moves it into place atomically.
    pub fn write<E>(&mut self, name: &str, render: impl FnOnce(&mut Vec<u8>) -> Result<(), E>) -> Result<(), CliError>
    where
        CliError: From<E>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.manifest.outputs.push(FileDigest { path: name.to_string(), sha256: sha256_hex(&buf) });
        persist(&self.out_dir, name, &buf)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        self.write(name, |buf| -> Result<(), CliError> {
            serde_json::to_writer_pretty(&mut *buf, value)?;
            buf.push(b'\n');
            Ok(())
        })
    }

    pub fn finish(self) -> Result<(), CliError> {
        let mut buf = serde_json::to_vec_pretty(&self.manifest)?;
        buf.push(b'\n');
        persist(&self.out_dir, "manifest.json", &buf)
    }
}

fn persist(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| CliError::input(format!("cannot write {name}: {}", e.error)))?;
    Ok(())
}
