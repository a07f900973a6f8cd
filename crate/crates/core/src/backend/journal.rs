//! Append-only JSONL journal of remote requests, and replay from it.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::http::{RawResponse, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One attempt of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub backend: String,
    pub url: String,
    /// The request body exactly as sent (UTF-8 JSON text).
    pub request: String,
    pub response: JournalResponse,
    pub timestamp_ms: u64,
    pub attempt: u32,
}

impl JournalRecord {
    pub fn new(
        backend: &str,
        url: &str,
        body: &[u8],
        result: &Result<RawResponse, TransportError>,
        attempt: u32,
    ) -> Self {
        let response = match result {
            Ok(r) => JournalResponse {
                status: Some(r.status),
                body: Some(r.body.clone()),
                error: None,
            },
            Err(TransportError::Retryable(m)) => JournalResponse {
                status: None,
                body: None,
                error: Some(m.clone()),
            },
            Err(TransportError::Fatal(e)) => JournalResponse {
                status: None,
                body: None,
                error: Some(e.to_string()),
            },
        };
        Self {
            backend: backend.to_string(),
            url: url.to_string(),
            request: String::from_utf8_lossy(body).into_owned(),
            response,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            attempt,
        }
    }

    /// The request body as structured JSON.
    pub fn request_json(&self) -> Option<Value> {
        serde_json::from_str(&self.request).ok()
    }
}

pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &JournalRecord) {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let mut f = self.file.lock().expect("journal poisoned");
        // A lost journal line must not fail the request it describes.
        if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
            log::error!("failed to append to journal {}: {e}", self.path.display());
        }
    }

    pub fn read(path: impl AsRef<Path>) -> std::io::Result<Vec<JournalRecord>> {
        let reader = BufReader::new(File::open(path.as_ref())?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.as_ref().display(), i + 1),
                )
            })?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// Responses keyed by (backend, url, exact request body).
///
/// A successful response wins over failed attempts of the same request; among
/// equals the latest record wins.
#[derive(Debug, Default)]
pub struct ReplayIndex {
    entries: HashMap<(String, String, String), RawResponse>,
}

impl ReplayIndex {
    pub fn from_records(records: &[JournalRecord]) -> Self {
        let mut entries: HashMap<(String, String, String), RawResponse> = HashMap::new();
        for rec in records {
            let (Some(status), Some(body)) = (rec.response.status, rec.response.body.clone()) else {
                continue;
            };
            let key = (rec.backend.clone(), rec.url.clone(), rec.request.clone());
            let success = (200..300).contains(&status);
            let replace = match entries.get(&key) {
                Some(prev) => success || !(200..300).contains(&prev.status),
                None => true,
            };
            if replace {
                entries.insert(key, RawResponse { status, body });
            }
        }
        Self { entries }
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::from_records(&Journal::read(path)?))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, backend: &str, url: &str, body: &[u8]) -> Option<RawResponse> {
        let body = std::str::from_utf8(body).ok()?;
        self.entries
            .get(&(backend.to_string(), url.to_string(), body.to_string()))
            .cloned()
    }
}
