//! Append-only record log. Each line is `<sha256 hex>\t<json>`; the digest
//! covers the JSON text. A torn final line (crash mid-write) is cut off on
//! open, while damage anywhere else is reported.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HumanError;

/// A stored verdict. `borderline_used` marks score 3; `overrun` marks
/// submissions later than the time limit plus grace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pair_id: String,
    pub annotator_id: String,
    pub score: u8,
    pub elapsed_s: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub borderline_used: bool,
    pub overrun: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoredEvent {
    Claim { annotator_id: String, subset: String, timestamp: u64 },
    Annotation(AnnotationRecord),
    Skip { pair_id: String, annotator_id: String, elapsed_s: f64, timestamp: u64 },
}

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub struct RecordStore {
    path: PathBuf,
    file: File,
}

impl RecordStore {
    /// Opens or creates the log and returns the intact events.
    pub fn open(path: &Path) -> Result<(Self, Vec<StoredEvent>), HumanError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(path)?.read_to_end(&mut bytes)?;
        }
        let mut events = Vec::new();
        let mut good_len = 0;
        let mut offset = 0;
        let mut line_no = 0;
        while offset < bytes.len() {
            line_no += 1;
            let end = bytes[offset..].iter().position(|&b| b == b'\n').map(|i| offset + i);
            let parsed = end.and_then(|e| parse_line(&bytes[offset..e]));
            match (end, parsed) {
                (Some(e), Some(ev)) => {
                    events.push(ev);
                    offset = e + 1;
                    good_len = offset;
                }
                // Only the last line may be damaged.
                (Some(e), None) if e + 1 < bytes.len() => {
                    return Err(HumanError::CorruptStore { path: path.to_path_buf(), line: line_no });
                }
                _ => break,
            }
        }
        if good_len < bytes.len() {
            let f = OpenOptions::new().write(true).open(path)?;
            f.set_len(good_len as u64)?;
            f.sync_all()?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((RecordStore { path: path.to_path_buf(), file }, events))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one event and flushes it to disk before returning.
    pub fn append(&mut self, event: &StoredEvent) -> Result<(), HumanError> {
        let json = serde_json::to_string(event).expect("events serialize");
        let line = format!("{}\t{}\n", digest(&json), json);
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

fn parse_line(line: &[u8]) -> Option<StoredEvent> {
    let text = std::str::from_utf8(line).ok()?;
    let (sum, json) = text.split_once('\t')?;
    if digest(json) != sum {
        return None;
    }
    serde_json::from_str(json).ok()
}
