//! Token corpora: byte-level text or little-endian `u32` token files.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    /// UTF-8 text, one token per byte (vocabulary 256).
    Text,
    /// Pre-tokenized little-endian `u32` stream.
    U32,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(CorpusFormat::Text),
            "u32" | "tokens" => Ok(CorpusFormat::U32),
            _ => Err(Error::Parse(format!(
                "unknown corpus format {s:?}; expected text or u32"
            ))),
        }
    }
}

pub fn text_tokens(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn decode_u32_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(4) {
        let pos = (bytes.len() - bytes.len() % 4) as u64;
        return Err(Error::format(pos, "token file length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_u32_tokens(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
}

/// Optional `<file>.json` written next to a token file by the exporter.
/// Fields other than the token count are ignored.
#[derive(Clone, Debug, Deserialize)]
pub struct TokenSidecar {
    #[serde(alias = "num_tokens", alias = "token_count")]
    pub count: u64,
}

pub fn token_sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Reads a token file, checking its length against the sidecar if one exists.
pub fn read_u32_tokens(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let tokens = decode_u32_tokens(&std::fs::read(path)?)?;
    let sidecar = token_sidecar_path(path);
    if sidecar.is_file() {
        let meta: TokenSidecar = serde_json::from_slice(&std::fs::read(&sidecar)?)?;
        if meta.count != tokens.len() as u64 {
            return Err(Error::Input(format!(
                "{} holds {} tokens but {} records {}",
                path.display(),
                tokens.len(),
                sidecar.display(),
                meta.count
            )));
        }
    }
    Ok(tokens)
}

pub fn write_u32_tokens(tokens: &[u32], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_u32_tokens(tokens))
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<u32>> {
    match format {
        CorpusFormat::Text => Ok(text_tokens(&std::fs::read_to_string(path)?)),
        CorpusFormat::U32 => read_u32_tokens(path),
    }
}
