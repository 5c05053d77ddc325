//! Line-delimited JSON manifests: one record per line, UTF-8, struct field
//! order. Optional fields are omitted rather than written as `null`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::model::{GeneratedSample, SourcePair, Validate, ValidationError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Validation {
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl ManifestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Parse { line, .. } | Self::Validation { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Parse records from text, ignoring blank lines. Line numbers are 1-based.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|source| ManifestError::Parse { line: i + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let file = File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| ManifestError::Parse { line: i + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_validated<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line).map_err(|source| ManifestError::Parse { line: i + 1, source })?;
        record
            .validate()
            .map_err(|source| ManifestError::Validation { line: i + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String, ManifestError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), ManifestError> {
    let io_err = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Append one record as a single write so concurrent appenders never interleave.
pub fn append_jsonl<T: Serialize>(file: &mut File, record: &T) -> Result<(), ManifestError> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    file.write_all(&line)
        .and_then(|_| file.flush())
        .map_err(|source| ManifestError::Io {
            path: PathBuf::from("<append>"),
            source,
        })
}

pub fn load_manifest(path: &Path) -> Result<Vec<GeneratedSample>, ManifestError> {
    read_validated(path)
}

pub fn save_manifest(samples: &[GeneratedSample], path: &Path) -> Result<(), ManifestError> {
    write_jsonl(path, samples)
}

pub fn load_pairs(path: &Path) -> Result<Vec<SourcePair>, ManifestError> {
    read_validated(path)
}

pub fn save_pairs(pairs: &[SourcePair], path: &Path) -> Result<(), ManifestError> {
    write_jsonl(path, pairs)
}

/// Directory that relative paths inside the manifest at `manifest` refer to.
pub fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Express `target` relative to `base` when both are absolute or both are
/// relative; otherwise return `target` unchanged.
pub fn relative_to(target: &Path, base: &Path) -> PathBuf {
    if target.is_absolute() != base.is_absolute() {
        return target.to_path_buf();
    }
    let t: Vec<Component> = target.components().filter(|c| *c != Component::CurDir).collect();
    let b: Vec<Component> = base.components().filter(|c| *c != Component::CurDir).collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if b[common..].iter().any(|c| *c == Component::ParentDir) {
        return target.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

/// Re-anchor a relative path written against `from` so it is valid from `to`.
pub fn rebase(path: &Path, from: &Path, to: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    let absolute_from = absolutize(from);
    let absolute_to = absolutize(to);
    relative_to(&absolute_from.join(path), &absolute_to)
}

fn absolutize(p: &Path) -> PathBuf {
    let p = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().unwrap_or_default().join(p)
    };
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        assert_eq!(relative_to(Path::new("/a/b/c.png"), Path::new("/a")), PathBuf::from("b/c.png"));
        assert_eq!(relative_to(Path::new("/a/b/c.png"), Path::new("/a/d")), PathBuf::from("../b/c.png"));
        assert_eq!(rebase(Path::new("images/x.png"), Path::new("/r/gen"), Path::new("/r/filt")), PathBuf::from("../gen/images/x.png"));
        assert_eq!(rebase(Path::new("images/x.png"), Path::new("/r/gen"), Path::new("/r/gen")), PathBuf::from("images/x.png"));
    }

    #[test]
    fn blank_lines_skipped_and_numbered() {
        let text = "{\"a\":1}\n\n{\"a\":\n";
        let err = parse_jsonl::<serde_json::Value>(text).unwrap_err();
        assert_eq!(err.line(), Some(3));
    }
}
