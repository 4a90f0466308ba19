//! Dataset listings and the tab-separated manifest format.
//!
//! One record per line: `path  subject_id  group  task  session_index  sr_score`,
//! `#` starts a comment, `NA` marks a missing group, task or score. Relative
//! paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::record::{Group, ScanRecord, Task};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_HEADER: &str = "# path\tsubject_id\tgroup\ttask\tsession_index\tsr_score";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    records: Vec<ScanRecord>,
    checksum: String,
}

impl DatasetIndex {
    pub fn new(records: Vec<ScanRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            let key = (r.subject_id.clone(), r.session_index, r.task);
            if !seen.insert(key) {
                return Err(Error::Validation(format!(
                    "duplicate record: subject {} session {} task {}",
                    r.subject_id,
                    r.session_index,
                    r.task.map_or("NA".to_string(), |t| t.to_string())
                )));
            }
        }
        let checksum = checksum_of(&records);
        Ok(Self { records, checksum })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new()).expect("no duplicates in empty index")
    }

    pub fn records(&self) -> &[ScanRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Hex SHA-256 over the canonical listing.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Sub-index of the given record ids, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let recs = ids
            .iter()
            .map(|&i| {
                self.records
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Size(format!("record id {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(recs)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let bad = |msg: String| Error::Format(format!("manifest line {}: {msg}", lineno + 1));
            if fields.len() != 6 {
                return Err(bad(format!("expected 6 tab-separated fields, got {}", fields.len())));
            }
            let path = PathBuf::from(fields[0]);
            let path = if path.is_absolute() { path } else { base_dir.join(path) };
            let na = |s: &str| s == "NA" || s.is_empty();
            let group = if na(fields[2]) { None } else { Some(fields[2].parse::<Group>()?) };
            let task = if na(fields[3]) { None } else { Some(fields[3].parse::<Task>()?) };
            let session_index = fields[4]
                .parse::<u32>()
                .map_err(|e| bad(format!("session_index {:?}: {e}", fields[4])))?;
            let score = if na(fields[5]) {
                None
            } else {
                Some(
                    fields[5]
                        .parse::<f64>()
                        .map_err(|e| bad(format!("sr_score {:?}: {e}", fields[5])))?,
                )
            };
            let mut rec = ScanRecord::unlabeled(path, fields[1], session_index);
            rec.group = group;
            rec.task = task;
            rec.set_sr_score(score).map_err(|e| bad(e.to_string()))?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).at(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Render as manifest text, writing paths relative to `base_dir` when possible.
    pub fn to_manifest(&self, base_dir: &Path) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let p = r.path.strip_prefix(base_dir).unwrap_or(&r.path);
            render_line(&mut out, r, p);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_manifest(base)).at(path)
    }
}

fn render_line(out: &mut String, r: &ScanRecord, path: &Path) {
    let opt = |o: Option<String>| o.unwrap_or_else(|| "NA".into());
    let _ = writeln!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}",
        path.display(),
        r.subject_id,
        opt(r.group.map(|g| g.to_string())),
        opt(r.task.map(|t| t.to_string())),
        r.session_index,
        opt(r.sr_score().map(|s| s.to_string())),
    );
}

fn checksum_of(records: &[ScanRecord]) -> String {
    let mut text = String::new();
    for r in records {
        render_line(&mut text, r, &r.path);
    }
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
