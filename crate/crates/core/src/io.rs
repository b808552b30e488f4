//! Artifact plumbing: provenance headers, line-delimited records, hashing.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CODE_VERSION: &str = concat!("a2d-core/", env!("CARGO_PKG_VERSION"));

/// Embedded in every emitted artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub code_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, master_seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            master_seed,
            code_version: CODE_VERSION.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ProvenanceLine {
    provenance: Provenance,
}

pub fn write_provenance<W: Write>(mut w: W, p: &Provenance) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, &ProvenanceLine { provenance: p.clone() })?;
    w.write_all(b"\n")
}

pub fn is_provenance_line(line: &str) -> bool {
    line.trim_start().starts_with("{\"provenance\"")
}

/// Reads the provenance header of a line-delimited file, if any.
pub fn read_provenance(path: &Path) -> Result<Option<Provenance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    if !is_provenance_line(&first) {
        return Ok(None);
    }
    let line: ProvenanceLine = serde_json::from_str(&first).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })?;
    Ok(Some(line.provenance))
}

/// Append-only line-delimited record stream.
pub struct JsonlWriter {
    inner: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    /// Creates (truncating) `path` and writes the provenance header.
    pub fn create(path: &Path, provenance: &Provenance) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            inner: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        write_provenance(&mut w.inner, provenance).map_err(|e| Error::io(path, e))?;
        Ok(w)
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let path = &self.path;
        serde_json::to_writer(&mut self.inner, record).map_err(|e| Error::io(path, e.into()))?;
        self.inner.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        // one flush per record keeps the stream readable after a crash
        self.inner.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || is_provenance_line(&line) {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
