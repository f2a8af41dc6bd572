//! Tab-separated manifests: `path<TAB>label[<TAB>x0,y0,x1,y1]...`.
//!
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::localizer::BBox;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    /// Ground-truth boxes; empty when unannotated or tumor-free.
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory that relative entry paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn has_boxes(&self) -> bool {
        self.entries.iter().any(|e| !e.boxes.is_empty())
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| ManifestError::Parse { line: i + 1, msg };
        let mut fields = line.split('\t');
        let path = fields.next().filter(|p| !p.is_empty()).ok_or_else(|| err("missing path".into()))?;
        let label = fields.next().ok_or_else(|| err("missing label".into()))?;
        let label: usize = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got '{other}'"))),
        };
        let boxes = fields.map(|f| f.parse::<BBox>().map_err(&err)).collect::<Result<Vec<_>, _>>()?;
        if label == 0 && !boxes.is_empty() {
            return Err(err("label-0 entry carries boxes".into()));
        }
        out.push(ManifestEntry {
            path: PathBuf::from(path),
            label,
            boxes,
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.path.to_string_lossy());
        out.push('\t');
        out.push_str(&e.label.to_string());
        for b in &e.boxes {
            out.push('\t');
            out.push_str(&b.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Manifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries: parse_manifest(&text)?,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), ManifestError> {
    crate::io::write_atomic(path, format_manifest(entries).as_bytes()).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let entries = vec![
            ManifestEntry {
                path: "train/00000.pgm".into(),
                label: 0,
                boxes: vec![],
            },
            ManifestEntry {
                path: "loc/00001.pgm".into(),
                label: 1,
                boxes: vec![BBox::new(1, 2, 9, 7).unwrap(), BBox::new(0, 0, 1, 1).unwrap()],
            },
        ];
        assert_eq!(parse_manifest(&format_manifest(&entries)).unwrap(), entries);
        assert!(parse_manifest("").unwrap().is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_manifest("a.pgm\t0\nb.pgm\t2\n").unwrap_err();
        assert!(matches!(e, ManifestError::Parse { line: 2, .. }), "{e}");
        assert!(parse_manifest("a.pgm\n").is_err());
        assert!(parse_manifest("a.pgm\t1\t1,2,3\n").is_err());
        assert!(parse_manifest("a.pgm\t0\t1,1,2,2\n").is_err());
        assert!(parse_manifest("\t1\n").is_err());
    }
}
