use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub lang: String,
    pub feat_path: PathBuf,
    pub text: String,
    pub num_frames: usize,
}

/// Reads a line-delimited JSON manifest. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.into(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Invalid(e.to_string()))?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Resolves a record's feature path relative to the manifest's directory.
pub fn resolve_feat_path(manifest: &Path, record: &UtteranceRecord) -> PathBuf {
    if record.feat_path.is_absolute() {
        record.feat_path.clone()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(&record.feat_path)
    }
}
