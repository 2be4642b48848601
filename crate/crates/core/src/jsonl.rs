//! Line-delimited JSON helpers shared by every file format in the crate.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parse every non-blank line of `reader` as a `T`, returning `(line_number, T)`.
pub fn read_records<T: DeserializeOwned>(
    reader: impl Read,
    origin: &str,
) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Malformed {
            path: origin.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: origin.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, record));
    }
    Ok(out)
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file, &path.display().to_string())
}

pub fn to_string<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Write records to `path` atomically (temp file + rename).
pub fn write_file<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    write_atomic(path, to_string(records)?.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Append one record per line and flush.
pub fn append<T: Serialize>(file: &mut fs::File, records: &[T]) -> Result<()> {
    let text = to_string(records)?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| Error::io("<append>", e))
}

/// Read an append-only log written by [`append`]. A final line without its
/// newline is the trace of an interrupted write: it is cut from the file so
/// later appends start on a clean line. A missing file reads as empty.
pub fn read_log<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let keep = match bytes.last() {
        None | Some(b'\n') => bytes.len(),
        Some(_) => bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1),
    };
    if keep < bytes.len() {
        log::warn!("{}: dropping torn final line", path.display());
        let f = fs::OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    }
    read_records(&bytes[..keep], &path.display().to_string())
}

/// Open `path` for appending, creating it and its parent directories.
pub fn open_append(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}
