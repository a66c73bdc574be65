//! 256-bit key files: 64 hex characters on one line.

use std::fs;
use std::io;
use std::path::Path;

use rand::RngCore;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KeyFileError {
    #[error("key file {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("key file {path}: expected 64 hex characters")]
    Format { path: String },
}

pub fn parse_hex_key(text: &str) -> Option<[u8; 32]> {
    let text = text.trim_end_matches(['\n', '\r']);
    if text.len() != 64 {
        return None;
    }
    let mut key = [0u8; 32];
    hex::decode_to_slice(text, &mut key).ok()?;
    Some(key)
}

pub fn read_key_file(path: impl AsRef<Path>) -> Result<[u8; 32], KeyFileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| KeyFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_hex_key(&text).ok_or_else(|| KeyFileError::Format {
        path: path.display().to_string(),
    })
}

/// Writes a fresh random key. Refuses to overwrite an existing file.
pub fn generate_key_file(path: impl AsRef<Path>) -> Result<[u8; 32], KeyFileError> {
    let path = path.as_ref();
    let mut key = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut key);
    let io_err = |source| KeyFileError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(io_err)?;
    io::Write::write_all(&mut file, format!("{}\n", hex::encode(key)).as_bytes()).map_err(io_err)?;
    Ok(key)
}
