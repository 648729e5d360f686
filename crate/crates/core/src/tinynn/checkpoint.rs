//! Versioned JSON checkpoint container.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "psmsel-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub payload: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

pub fn to_json<T: Serialize>(kind: &str, payload: &T) -> Result<String> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    serde_json::to_string(&ck).map_err(|e| Error::json(kind, e))
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let header: Header = serde_json::from_str(text).map_err(|e| Error::json(kind, e))?;
    if header.format != CHECKPOINT_FORMAT || header.kind != kind {
        return Err(Error::InvalidInput(format!(
            "expected {CHECKPOINT_FORMAT}/{kind}, found {}/{}",
            header.format, header.kind
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            what: format!("{kind} checkpoint"),
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    let ck: Checkpoint<T> = serde_json::from_str(text).map_err(|e| Error::json(kind, e))?;
    Ok(ck.payload)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = to_json(kind, payload)?;
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(kind, &text)
}
