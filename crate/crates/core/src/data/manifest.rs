//! Dataset manifest: a versioned, line-oriented CSV document.
//!
//! ```text
//! # schema_version=1
//! path,split,label
//! images/n_0000.png,normal,0
//! images/u_0000.png,unlabeled,1
//! images/t_0000.png,test,1
//! ```
//!
//! `path` is relative to the manifest's directory. `label` is required for `test` rows, must be
//! `0` or empty for `normal` rows, and on `unlabeled` rows is hidden ground truth used only to
//! mix the unlabeled set at a requested anomaly ratio.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Normal,
    Unlabeled,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Normal => "normal",
            SplitKind::Unlabeled => "unlabeled",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub split: SplitKind,
    /// 0 normal, 1 abnormal.
    pub label: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
struct Row {
    path: String,
    split: String,
    #[serde(default)]
    label: Option<String>,
}

fn parse_header(line: &str) -> Option<u32> {
    let body = line.trim().strip_prefix('#')?.trim();
    let (key, value) = body.split_once(['=', ':'])?;
    (key.trim() == "schema_version").then(|| value.trim().parse().ok())?
}

/// Parse and validate manifest text. Entry paths resolve against `base_dir`.
pub fn parse_manifest(source: &str, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
    let mut lines = source.lines().enumerate().skip_while(|(_, l)| l.trim().is_empty());
    let (header_idx, header) = lines.next().ok_or(Error::Parse { line: 1, message: "empty manifest".into() })?;
    let version = parse_header(header).ok_or_else(|| Error::Parse {
        line: header_idx + 1,
        message: format!("expected `# schema_version=N` header, found {header:?}"),
    })?;
    if version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Parse { line: header_idx + 1, message: format!("unsupported schema_version {version}") });
    }
    let body_offset = header_idx + 1;
    let body: String = source.lines().skip(body_offset).map(|l| format!("{l}\n")).collect();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(body.as_bytes());

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.deserialize::<Row>() {
        let row = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize) + body_offset,
            message: e.to_string(),
        })?;
        let split = match row.split.as_str() {
            "normal" => SplitKind::Normal,
            "unlabeled" => SplitKind::Unlabeled,
            "test" => SplitKind::Test,
            other => return Err(Error::validation(format!("entry {}: unknown split {other:?}", row.path))),
        };
        let label = match row.label.as_deref().map(str::trim) {
            None | Some("") => None,
            Some("0") => Some(0),
            Some("1") => Some(1),
            Some(other) => {
                return Err(Error::validation(format!("entry {}: label must be 0 or 1, got {other:?}", row.path)))
            }
        };
        let entry = ManifestEntry { path: row.path, split, label };
        validate_entry(&entry)?;
        if !seen.insert(entry.path.clone()) {
            return Err(Error::validation(format!("duplicate path {}", entry.path)));
        }
        entries.push(entry);
    }
    Ok(Manifest { entries, base_dir: base_dir.into() })
}

fn validate_entry(e: &ManifestEntry) -> Result<()> {
    if e.path.is_empty() {
        return Err(Error::validation("entry with empty path"));
    }
    match (e.split, e.label) {
        (SplitKind::Test, None) => Err(Error::validation(format!("test entry {} has no label", e.path))),
        (SplitKind::Normal, Some(1)) => Err(Error::validation(format!("normal entry {} is labeled abnormal", e.path))),
        _ => Ok(()),
    }
}

impl Manifest {
    /// Read a manifest file; entry paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        parse_manifest(&text, base)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# schema_version={MANIFEST_SCHEMA_VERSION}\npath,split,label\n");
        for e in &self.entries {
            let label = e.label.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", e.path, e.split.as_str(), label);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
