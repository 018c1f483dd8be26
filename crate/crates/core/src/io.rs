//! Newline-delimited JSON streams and atomic file writes.

use crate::measurement::{Anchor, RangeMeasurement};
use crate::sim::{AnchorSet, SimError};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Anchors {
        path: PathBuf,
        #[source]
        source: SimError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_jsonl(BufReader::new(file), path)
}

pub fn parse_jsonl<T: DeserializeOwned>(
    reader: impl BufRead,
    path: &Path,
) -> Result<Vec<T>, IoError> {
    Ok(parse_numbered(reader, path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

fn parse_numbered<T: DeserializeOwned>(
    reader: impl BufRead,
    path: &Path,
) -> Result<Vec<(usize, T)>, IoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

/// Range stream; timestamps must increase strictly.
pub fn read_ranges(path: &Path) -> Result<Vec<RangeMeasurement>, IoError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let ranges: Vec<(usize, RangeMeasurement)> = parse_numbered(BufReader::new(file), path)?;
    for w in ranges.windows(2) {
        if !(w[1].1.t > w[0].1.t) {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: w[1].0,
                message: format!("timestamp {} does not follow {}", w[1].1.t, w[0].1.t),
            });
        }
    }
    Ok(ranges.into_iter().map(|(_, r)| r).collect())
}

pub fn read_anchors(path: &Path) -> Result<AnchorSet, IoError> {
    let anchors: Vec<Anchor> = read_jsonl(path)?;
    AnchorSet::new(anchors).map_err(|source| IoError::Anchors {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    buf
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    write_atomic(path, &to_jsonl(records))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
