//! Append-only completion ledger.
//!
//! Line 1 is a header carrying the config fingerprint; every following line
//! is one finished job. A torn final line (the process died mid-write) is cut
//! off on open, so appends always start on a clean line boundary.

use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{InferenceError, RephraseResult};

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    path: PathBuf,
    file: File,
}

impl Checkpoint {
    /// Opens or creates the ledger and returns the records already in it.
    pub fn open(path: &Path, fingerprint: &str) -> Result<(Self, Vec<RephraseResult>), InferenceError> {
        let io = |e: std::io::Error| InferenceError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let existing = match fs::read(path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(e)),
        };

        let complete_len = existing
            .iter()
            .rposition(|&b| b == b'\n')
            .map_or(0, |i| i + 1);
        let mut records = Vec::new();
        let mut has_header = false;
        for (i, line) in existing[..complete_len]
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .enumerate()
        {
            let parse_err = |e: serde_json::Error| InferenceError::Checkpoint {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            };
            if i == 0 {
                let header: Header = serde_json::from_slice(line).map_err(parse_err)?;
                if header.fingerprint != fingerprint {
                    return Err(InferenceError::FingerprintMismatch {
                        path: path.to_path_buf(),
                        expected: fingerprint.to_string(),
                        found: header.fingerprint,
                    });
                }
                has_header = true;
            } else {
                records.push(serde_json::from_slice(line).map_err(parse_err)?);
            }
        }

        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(io)?;
        if complete_len < existing.len() {
            log::warn!(
                "{}: dropping {} bytes of a torn final record",
                path.display(),
                existing.len() - complete_len
            );
        }
        file.set_len(complete_len as u64).map_err(io)?;
        let mut checkpoint = Checkpoint {
            path: path.to_path_buf(),
            file,
        };
        checkpoint
            .file
            .seek(SeekFrom::End(0))
            .map_err(io)?;
        if !has_header {
            checkpoint.write_line(&Header {
                fingerprint: fingerprint.to_string(),
            })?;
        }
        Ok((checkpoint, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &RephraseResult) -> Result<(), InferenceError> {
        self.write_line(record)
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<(), InferenceError> {
        let mut line = serde_json::to_vec(value).expect("checkpoint records serialize");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| InferenceError::Checkpoint {
                path: self.path.clone(),
                message: e.to_string(),
            })
    }
}
