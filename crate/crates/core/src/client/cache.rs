//! Content-addressed completion cache: `<root>/<first-2-hex>/<digest>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, TokenLogprob, Usage};
use crate::jsonl::{self, JsonlError};

/// What is stored for one request: the request itself and the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub request: CompletionRequest,
    pub response: CachedResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_logprob: Option<f64>,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        let shard = digest.get(..2).unwrap_or("__");
        self.root.join(shard).join(format!("{digest}.json"))
    }

    /// Unreadable or corrupt entries count as misses.
    pub fn get(&self, digest: &str) -> Option<CacheEntry> {
        let path = self.path_for(digest);
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.digest == digest => Some(entry),
            Ok(_) => {
                log::warn!("cache entry {} has a mismatched digest", path.display());
                None
            }
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<(), JsonlError> {
        jsonl::write_json(&self.path_for(&entry.digest), entry)
    }

    /// Number of stored entries.
    pub fn len(&self) -> usize {
        let Ok(shards) = fs::read_dir(&self.root) else {
            return 0;
        };
        shards
            .flatten()
            .filter_map(|s| fs::read_dir(s.path()).ok())
            .flat_map(|files| files.flatten())
            .filter(|f| f.path().extension().is_some_and(|e| e == "json"))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
