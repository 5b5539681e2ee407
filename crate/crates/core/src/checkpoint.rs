//! Versioned JSON checkpoints shared by the score network and the VAE.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub body: T,
}

pub fn to_json<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        body,
    };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Header {
        schema_version: u32,
        kind: String,
    }
    let header: Header = serde_json::from_str(text)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a '{kind}' checkpoint, found '{}'",
            header.kind
        )));
    }
    let env: Envelope<T> = serde_json::from_str(text)?;
    Ok(env.body)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    std::fs::write(path, to_json(kind, body)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    from_json(kind, &std::fs::read_to_string(path)?)
}
