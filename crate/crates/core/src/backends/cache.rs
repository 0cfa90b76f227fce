//! Append-only response journal.
//!
//! The file is JSON lines. Line one is the header
//! `{"format":"lvlm-fairness-cache","version":1}`; every further line is one
//! [`CacheEntry`]. Entries are never rewritten, so a cache can be shared by
//! many readers while one writer appends. A torn final line (interrupted
//! write) is skipped on load.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CACHE_FORMAT: &str = "lvlm-fairness-cache";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a response cache (bad header)")]
    BadHeader { path: PathBuf },
    #[error("{path}: corrupt entry on line {line}")]
    Corrupt { path: PathBuf, line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend_id: String,
    pub model_name: String,
    pub image_digest: String,
    pub prompt_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    #[serde(flatten)]
    pub key: CacheKey,
    pub image_id: String,
    pub text: String,
    pub timestamp: u64,
    pub latency_ms: u64,
    pub attempts: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    /// A cache that lives only for this process.
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    /// Open (or create) a journal file and load its entries.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let io = |source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = HashMap::new();
        let content = match std::fs::read_to_string(path) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let exists = !content.is_empty();
        let mut valid_len = content.len();
        if exists {
            let lines: Vec<&str> = content.split_inclusive('\n').collect();
            let header: Option<Header> = serde_json::from_str(lines[0].trim_end()).ok();
            match header {
                Some(h) if h.format == CACHE_FORMAT && h.version == CACHE_VERSION => {}
                _ => {
                    return Err(CacheError::BadHeader {
                        path: path.to_path_buf(),
                    })
                }
            }
            let last = lines.len() - 1;
            let mut offset = lines[0].len();
            for (index, line) in lines.iter().enumerate().skip(1) {
                let parsed = serde_json::from_str::<CacheEntry>(line.trim_end());
                match parsed {
                    Ok(entry) if line.ends_with('\n') => {
                        entries.entry(entry.key.clone()).or_insert(entry);
                    }
                    _ if line.trim().is_empty() => {}
                    _ if index == last => valid_len = offset,
                    _ => {
                        return Err(CacheError::Corrupt {
                            path: path.to_path_buf(),
                            line: index + 1,
                        })
                    }
                }
                offset += line.len();
            }
        }
        if valid_len < content.len() {
            OpenOptions::new()
                .write(true)
                .open(path)
                .and_then(|f| f.set_len(valid_len as u64))
                .map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if !exists {
            let header = serde_json::to_string(&Header {
                format: CACHE_FORMAT.into(),
                version: CACHE_VERSION,
            })
            .expect("header serializes");
            writeln!(file, "{header}").map_err(io)?;
            file.flush().map_err(io)?;
        }
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    /// Record an entry. The first entry for a key wins; later inserts of the
    /// same key are ignored.
    pub fn insert(&self, entry: CacheEntry) -> Result<(), CacheError> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        {
            let mut entries = self.entries.write().expect("cache lock");
            if entries.contains_key(&entry.key) {
                return Ok(());
            }
            entries.insert(entry.key.clone(), entry.clone());
        }
        if let (Some(file), Some(path)) = (writer.as_mut(), self.path.as_ref()) {
            let line = serde_json::to_string(&entry).expect("entry serializes");
            let io = |source| CacheError::Io {
                path: path.clone(),
                source,
            };
            writeln!(file, "{line}").map_err(io)?;
            file.flush().map_err(io)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(prompt: &str, text: &str) -> CacheEntry {
        CacheEntry {
            key: CacheKey {
                backend_id: "b".into(),
                model_name: "m".into(),
                image_digest: "img".into(),
                prompt_digest: prompt.into(),
            },
            image_id: "i".into(),
            text: text.into(),
            timestamp: 1,
            latency_ms: 2,
            attempts: 1,
        }
    }

    #[test]
    fn journal_persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = ResponseCache::open(&path).unwrap();
            cache.insert(entry("p1", "  A. Yes\n")).unwrap();
            cache.insert(entry("p1", "ignored")).unwrap();
            cache.insert(entry("p2", "B. No")).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"format\":\"lvlm-fairness-cache\",\"version\":1}"));

        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get(&entry("p1", "").key).unwrap().text, "  A. Yes\n");
    }

    #[test]
    fn torn_tail_is_skipped_but_middle_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ResponseCache::open(&path).unwrap();
        cache.insert(entry("p1", "x")).unwrap();
        drop(cache);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"backend_id\":\"b\",\"mod").unwrap();
        drop(f);
        let reopened = ResponseCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        reopened.insert(entry("p3", "y")).unwrap();
        drop(reopened);
        assert_eq!(ResponseCache::open(&path).unwrap().len(), 2);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(
            &bad,
            "{\"format\":\"lvlm-fairness-cache\",\"version\":1}\nnot json\n{}\n",
        )
        .unwrap();
        assert!(matches!(
            ResponseCache::open(&bad),
            Err(CacheError::Corrupt { line: 2, .. })
        ));

        let foreign = dir.path().join("foreign.jsonl");
        std::fs::write(&foreign, "hello\n").unwrap();
        assert!(matches!(
            ResponseCache::open(&foreign),
            Err(CacheError::BadHeader { .. })
        ));
    }
}
