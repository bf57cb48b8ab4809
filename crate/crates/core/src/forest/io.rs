//! Versioned forest serialization: JSON for inspection, a compact binary
//! encoding (magic, version, postcard body) for size.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CausalForest, RegressionForest};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JLFOREST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    forest: T,
}

fn to_json<T: Serialize>(kind: &str, forest: &T) -> Result<String> {
    let env = Envelope { format: kind.to_string(), version: FORMAT_VERSION, forest };
    Ok(serde_json::to_string(&env)?)
}

fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != kind {
        return Err(Error::Data(format!("expected a `{kind}` document, found `{}`", env.format)));
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported forest format version {}", env.version)));
    }
    Ok(env.forest)
}

fn to_bytes<T: Serialize>(kind: u8, forest: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    let body = postcard::to_stdvec(forest).map_err(|e| Error::Data(format!("forest encoding failed: {e}")))?;
    out.extend_from_slice(&body);
    Ok(out)
}

fn from_bytes<T: DeserializeOwned>(kind: u8, bytes: &[u8]) -> Result<T> {
    let header = MAGIC.len() + 5;
    if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Data("not a binary forest file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported forest format version {version}")));
    }
    if bytes[12] != kind {
        return Err(Error::Data("binary forest holds a different forest kind".into()));
    }
    postcard::from_bytes(&bytes[header..]).map_err(|e| Error::Data(format!("corrupt forest file: {e}")))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

macro_rules! forest_io {
    ($ty:ty, $name:literal, $kind:literal) => {
        impl $ty {
            pub fn to_json(&self) -> Result<String> {
                to_json($name, self)
            }

            pub fn from_json(text: &str) -> Result<Self> {
                from_json($name, text)
            }

            pub fn to_bytes(&self) -> Result<Vec<u8>> {
                to_bytes($kind, self)
            }

            pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
                from_bytes($kind, bytes)
            }

            /// Write JSON when the extension is `.json`, binary otherwise.
            pub fn save(&self, path: &Path) -> Result<()> {
                let data = if is_json(path) { self.to_json()?.into_bytes() } else { self.to_bytes()? };
                std::fs::write(path, data).map_err(|e| Error::io(path, e))
            }

            pub fn load(path: &Path) -> Result<Self> {
                let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                if data.starts_with(MAGIC) {
                    Self::from_bytes(&data)
                } else {
                    let text =
                        String::from_utf8(data).map_err(|_| Error::Data("forest file is not UTF-8 JSON".into()))?;
                    Self::from_json(&text)
                }
            }
        }
    };
}

forest_io!(CausalForest, "causal-forest", 1);
forest_io!(RegressionForest, "regression-forest", 2);
