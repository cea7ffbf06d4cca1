//! Persisted run-directory formats.
//!
//! Vectors are stored as a flat little-endian `f64` file (`<stem>.f64`) next
//! to a text header (`<stem>.hdr`) of `key=value` lines.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Ordered `key=value` header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format {
            what: "header",
            location: format!("key {key}"),
            message: "missing".into(),
        })
    }

    pub fn parse_usize(&self, key: &str) -> Result<usize> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Format {
            what: "header",
            location: format!("key {key}"),
            message: format!("expected an unsigned integer, got {raw:?}"),
        })
    }

    pub fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Format {
                    what: "header",
                    location: format!("key {key}"),
                    message: format!("bad list entry {s:?}"),
                })
            })
            .collect()
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = Header::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "header",
                location: format!("line {}", n + 1),
                message: format!("expected key=value, got {line:?}"),
            })?;
            header.set(k.trim(), v.trim());
        }
        Ok(header)
    }
}

pub fn list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn stem_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f64"), stem.with_extension("hdr"))
}

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            what: "f64 vector",
            location: format!("{} byte {}", path.display(), bytes.len() - bytes.len() % 8),
            message: "length is not a multiple of 8".into(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.f64` and `<stem>.hdr`; `count` is appended to the header.
pub fn write_vector(stem: &Path, header: &Header, values: &[f64]) -> Result<()> {
    let (data, hdr) = stem_paths(stem);
    let header = header.clone().with("count", values.len());
    write_f64(&data, values)?;
    write_text(&hdr, &header.render())
}

/// Reads a vector written by [`write_vector`], checking its `count`.
pub fn read_vector(stem: &Path) -> Result<(Header, Vec<f64>)> {
    let (data, hdr) = stem_paths(stem);
    let header = Header::parse(&read_text(&hdr)?)?;
    let values = read_f64(&data)?;
    let count = header.parse_usize("count")?;
    if count != values.len() {
        return Err(Error::Format {
            what: "f64 vector",
            location: data.display().to_string(),
            message: format!("header count {count} but file holds {}", values.len()),
        });
    }
    Ok((header, values))
}

/// Formats a float for CSV/plain-text output with round-trip precision.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("theta");
        let header = Header::new().with("kind", "params").with("round", 3);
        write_vector(&stem, &header, &[1.5, -2.0, 1e-300]).unwrap();
        let (h, v) = read_vector(&stem).unwrap();
        assert_eq!(v, vec![1.5, -2.0, 1e-300]);
        assert_eq!(h.get("round"), Some("3"));
        assert_eq!(h.parse_usize("count").unwrap(), 3);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f64");
        std::fs::write(&path, [0u8; 12]).unwrap();
        let err = read_f64(&path).unwrap_err().to_string();
        assert!(err.contains("byte 8"), "{err}");
    }

    #[test]
    fn header_rejects_garbage_line() {
        assert!(Header::parse("a=1\nnonsense\n").is_err());
    }
}
