use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::request::{ModelRequest, ModelResponse};
use crate::error::{Error, Result};
use crate::io::{append_jsonl, read_jsonl};

pub const CASSETTE_MODE_ENV: &str = "AUTOLIBRA_CASSETTE_MODE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    /// Serve hits from the cassette, call the endpoint on a miss and append.
    Record,
    /// Serve only from the cassette; a miss is an error.
    Replay,
    /// Call the endpoint; no cassette.
    #[default]
    Live,
}

impl CassetteMode {
    pub fn from_env() -> Result<Option<CassetteMode>> {
        match std::env::var(CASSETTE_MODE_ENV) {
            Ok(v) if !v.trim().is_empty() => v.parse().map(Some),
            _ => Ok(None),
        }
    }
}

impl FromStr for CassetteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "record" => Ok(CassetteMode::Record),
            "replay" => Ok(CassetteMode::Replay),
            "live" => Ok(CassetteMode::Live),
            other => Err(Error::InvalidArgument(format!(
                "cassette mode must be record, replay or live, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for CassetteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CassetteMode::Record => "record",
            CassetteMode::Replay => "replay",
            CassetteMode::Live => "live",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub request: ModelRequest,
    pub response: ModelResponse,
}

/// Append-only request/response log.
///
/// Entries present at open time form an immutable index; entries recorded
/// during this session go through a single mutex-guarded writer. The first
/// entry for a digest wins.
pub struct Cassette {
    path: PathBuf,
    loaded: HashMap<String, ModelResponse>,
    recorded: Mutex<HashMap<String, ModelResponse>>,
}

impl Cassette {
    pub fn open(path: &Path) -> Result<Self> {
        let mut loaded = HashMap::new();
        if path.exists() {
            for (_, entry) in read_jsonl::<CassetteEntry>(path)? {
                loaded.entry(entry.digest).or_insert(entry.response);
            }
        }
        Ok(Cassette {
            path: path.to_path_buf(),
            loaded,
            recorded: Mutex::new(HashMap::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.loaded.len() + self.recorded.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lookup in the index loaded at open time only.
    pub fn lookup_loaded(&self, digest: &str) -> Option<&ModelResponse> {
        self.loaded.get(digest)
    }

    pub fn lookup(&self, digest: &str) -> Option<ModelResponse> {
        if let Some(r) = self.loaded.get(digest) {
            return Some(r.clone());
        }
        self.recorded
            .lock()
            .ok()
            .and_then(|m| m.get(digest).cloned())
    }

    pub fn append(&self, request: &ModelRequest, response: &ModelResponse) -> Result<()> {
        let digest = request.digest();
        let mut recorded = self
            .recorded
            .lock()
            .map_err(|_| Error::Config("cassette writer poisoned".into()))?;
        if self.loaded.contains_key(&digest) || recorded.contains_key(&digest) {
            return Ok(());
        }
        append_jsonl(
            &self.path,
            &CassetteEntry {
                digest: digest.clone(),
                request: request.clone(),
                response: response.clone(),
            },
        )?;
        recorded.insert(digest, response.clone());
        Ok(())
    }
}
