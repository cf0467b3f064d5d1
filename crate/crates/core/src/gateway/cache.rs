//! Persistent completion cache: an append-only JSONL log keyed by content hash.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::template::Decoding;
use crate::io::sha256_hex;

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    model: String,
    response: String,
}

/// Hash of (model id, rendered prompt, decoding parameters).
pub fn cache_key(model: &str, prompt: &str, decoding: &Decoding) -> String {
    let material = serde_json::json!([model, prompt, decoding]);
    sha256_hex(material.to_string().as_bytes())
}

pub struct CompletionCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<File>>,
}

impl CompletionCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (or creates) the log at `path`, loading existing entries. A torn
    /// final line from an interrupted run is ignored.
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(entry) => {
                        entries.insert(entry.key, entry.response);
                    }
                    Err(e) if !line.trim().is_empty() => {
                        log::warn!("{}: skipping unreadable cache line: {e}", path.display())
                    }
                    Err(_) => {}
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().expect("cache lock poisoned").get(key).cloned()
    }

    pub fn put(&self, key: &str, model: &str, response: &str) -> io::Result<()> {
        // single writer: the log line and the map insert happen under one lock
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        if let Some(file) = writer.as_mut() {
            let line = CacheLine {
                key: key.to_string(),
                model: model.to_string(),
                response: response.to_string(),
            };
            let mut bytes = serde_json::to_vec(&line).map_err(io::Error::other)?;
            bytes.push(b'\n');
            file.write_all(&bytes)?;
            file.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(key.to_string(), response.to_string());
        Ok(())
    }
}
