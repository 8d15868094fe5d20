use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, PromptTag};

/// One line of `transcript.ndjson`.
///
/// Hand-authored transcripts may omit `request_hash`; such records are
/// replayed in file order per tag (and per task, when set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub tag: PromptTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default)]
    pub system: String,
    #[serde(default)]
    pub user: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<String>,
}

impl TranscriptRecord {
    pub fn from_exchange(request: &ChatRequest, response: &str) -> Self {
        TranscriptRecord {
            tag: request.tag,
            request_hash: Some(request.request_hash()),
            task: request.task.clone(),
            system: request.system_prompt.clone(),
            user: request.user_prompt.clone(),
            response: response.to_string(),
            ts: Some(chrono::Utc::now().to_rfc3339()),
        }
    }

    /// Hand-authored record matched by order rather than hash.
    pub fn scripted(tag: PromptTag, task: Option<&str>, response: impl Into<String>) -> Self {
        TranscriptRecord {
            tag,
            request_hash: None,
            task: task.map(str::to_string),
            system: String::new(),
            user: String::new(),
            response: response.into(),
            ts: None,
        }
    }
}

/// Serialized append-only writer.
#[derive(Debug)]
pub struct TranscriptWriter {
    file: Mutex<File>,
}

impl TranscriptWriter {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TranscriptWriter {
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, record: &TranscriptRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut f = self.file.lock().expect("transcript lock");
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}
