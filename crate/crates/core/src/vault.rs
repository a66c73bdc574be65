//! Encrypted record store for the data tier.
//!
//! Records are sealed with ChaCha20-Poly1305 (96-bit nonce, 128-bit tag)
//! under a [`VaultKey`] that never leaves the business tier. The store file
//! is an append-only sequence of frames:
//!
//! ```text
//! [u32 frame_len][u16 key_len][record_key][key_id: 8][nonce: 12][tag: 16][ciphertext]
//! ```
//!
//! Integers are big-endian and `frame_len` counts the bytes after itself.
//! The record key is bound to the ciphertext as associated data, so a frame
//! renamed or moved to another key fails authentication. An in-memory index
//! of the latest frame per key is rebuilt on open.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const KEY_ID_LEN: usize = 8;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
const HEADER_FIXED: usize = 2 + KEY_ID_LEN + NONCE_LEN + TAG_LEN;

#[derive(Clone, PartialEq, Eq)]
pub struct VaultKey {
    key_bytes: [u8; 32],
    key_id: [u8; KEY_ID_LEN],
}

impl std::fmt::Debug for VaultKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VaultKey")
            .field("key_id", &hex::encode(self.key_id))
            .finish_non_exhaustive()
    }
}

impl VaultKey {
    pub fn from_bytes(key_bytes: [u8; 32]) -> Self {
        let digest = Sha256::digest(key_bytes);
        let mut key_id = [0u8; KEY_ID_LEN];
        key_id.copy_from_slice(&digest[..KEY_ID_LEN]);
        Self { key_bytes, key_id }
    }

    pub fn generate() -> Self {
        let mut k = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut k);
        Self::from_bytes(k)
    }

    pub fn key_id(&self) -> [u8; KEY_ID_LEN] {
        self.key_id
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.key_bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedRecord {
    pub record_key: String,
    pub key_id: [u8; KEY_ID_LEN],
    pub nonce: [u8; NONCE_LEN],
    pub tag: [u8; TAG_LEN],
    pub ciphertext: Vec<u8>,
}

impl EncryptedRecord {
    pub fn to_frame(&self) -> Vec<u8> {
        let key = self.record_key.as_bytes();
        let body_len = HEADER_FIXED + key.len() + self.ciphertext.len();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_be_bytes());
        out.extend_from_slice(&(key.len() as u16).to_be_bytes());
        out.extend_from_slice(key);
        out.extend_from_slice(&self.key_id);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&self.ciphertext);
        out
    }
}

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("record not found")]
    NotFound,
    #[error("record failed authentication")]
    TamperedRecord,
    #[error("record sealed under a different key")]
    WrongKey,
    #[error("record key too long")]
    KeyTooLong,
    #[error("vault store: {0}")]
    Io(#[from] io::Error),
}

/// A frame as read from disk, not yet authenticated.
#[derive(Debug, Clone)]
struct Frame {
    record_key: Vec<u8>,
    key_id: [u8; KEY_ID_LEN],
    nonce: [u8; NONCE_LEN],
    tag: [u8; TAG_LEN],
    ciphertext: Vec<u8>,
}

impl Frame {
    fn parse(body: &[u8]) -> Option<Self> {
        if body.len() < HEADER_FIXED {
            return None;
        }
        let key_len = u16::from_be_bytes([body[0], body[1]]) as usize;
        let rest = &body[2..];
        if rest.len() < key_len + KEY_ID_LEN + NONCE_LEN + TAG_LEN {
            return None;
        }
        let (record_key, rest) = rest.split_at(key_len);
        let (key_id, rest) = rest.split_at(KEY_ID_LEN);
        let (nonce, rest) = rest.split_at(NONCE_LEN);
        let (tag, ciphertext) = rest.split_at(TAG_LEN);
        Some(Self {
            record_key: record_key.to_vec(),
            key_id: key_id.try_into().ok()?,
            nonce: nonce.try_into().ok()?,
            tag: tag.try_into().ok()?,
            ciphertext: ciphertext.to_vec(),
        })
    }

    fn header_contains(&self, key_id: &[u8; KEY_ID_LEN]) -> bool {
        let mut header = self.record_key.clone();
        header.extend_from_slice(&self.key_id);
        header.extend_from_slice(&self.nonce);
        header.extend_from_slice(&self.tag);
        header.extend_from_slice(&self.ciphertext[..self.ciphertext.len().min(KEY_ID_LEN)]);
        header.windows(KEY_ID_LEN).any(|w| w == key_id)
    }

    fn open(&self, key: &VaultKey) -> Option<Vec<u8>> {
        let mut sealed = self.ciphertext.clone();
        sealed.extend_from_slice(&self.tag);
        key.cipher()
            .decrypt(
                Nonce::from_slice(&self.nonce),
                Payload {
                    msg: &sealed,
                    aad: &self.record_key,
                },
            )
            .ok()
    }
}

#[derive(Default)]
struct Index {
    frames: Vec<Frame>,
    /// Latest frame per record key.
    latest: HashMap<Vec<u8>, usize>,
    /// Bytes after the last well-formed frame could not be parsed.
    damaged_tail: bool,
    /// Frames checked against a key during a miss sweep: (frame, key_id).
    swept: BTreeSet<(usize, [u8; KEY_ID_LEN])>,
}

impl Index {
    fn push(&mut self, frame: Frame) {
        self.latest.insert(frame.record_key.clone(), self.frames.len());
        self.frames.push(frame);
    }
}

/// Append-only encrypted record store.
pub struct Vault {
    path: Option<PathBuf>,
    writer: Mutex<Option<File>>,
    index: RwLock<Index>,
}

impl std::fmt::Debug for Vault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vault")
            .field("path", &self.path)
            .field("frames", &self.index.read().frames.len())
            .finish()
    }
}

impl Vault {
    /// Store kept only in memory, for tests and the evaluation harness.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            writer: Mutex::new(None),
            index: RwLock::new(Index::default()),
        }
    }

    /// Opens (creating if needed) a store file and rebuilds the index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, VaultError> {
        let path = path.as_ref().to_path_buf();
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut bytes)?;
        }
        let mut index = Index::default();
        let mut pos = 0;
        while pos < bytes.len() {
            let Some(len_bytes) = bytes.get(pos..pos + 4) else {
                index.damaged_tail = true;
                break;
            };
            let len = u32::from_be_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
            let Some(frame) = bytes.get(pos + 4..pos + 4 + len).and_then(Frame::parse) else {
                index.damaged_tail = true;
                break;
            };
            index.push(frame);
            pos += 4 + len;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            writer: Mutex::new(Some(file)),
            index: RwLock::new(index),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.index.read().latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seals and appends `plaintext` under `record_key`, replacing any
    /// earlier value.
    pub fn put(&self, record_key: &str, plaintext: &[u8], key: &VaultKey) -> Result<EncryptedRecord, VaultError> {
        if record_key.len() > u16::MAX as usize {
            return Err(VaultError::KeyTooLong);
        }
        let mut nonce = [0u8; NONCE_LEN];
        rand::rngs::OsRng.fill_bytes(&mut nonce);
        let sealed = key
            .cipher()
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: record_key.as_bytes(),
                },
            )
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        let (ciphertext, tag) = sealed.split_at(sealed.len() - TAG_LEN);
        let record = EncryptedRecord {
            record_key: record_key.to_string(),
            key_id: key.key_id(),
            nonce,
            tag: tag.try_into().expect("16-byte tag"),
            ciphertext: ciphertext.to_vec(),
        };

        let mut writer = self.writer.lock();
        if let Some(file) = writer.as_mut() {
            file.write_all(&record.to_frame())?;
            file.flush()?;
        }
        self.index.write().push(Frame {
            record_key: record.record_key.clone().into_bytes(),
            key_id: record.key_id,
            nonce: record.nonce,
            tag: record.tag,
            ciphertext: record.ciphertext.clone(),
        });
        Ok(record)
    }

    pub fn get(&self, record_key: &str, key: &VaultKey) -> Result<Vec<u8>, VaultError> {
        let found = {
            let index = self.index.read();
            index
                .latest
                .get(record_key.as_bytes())
                .map(|&i| index.frames[i].clone())
        };
        match found {
            Some(frame) => {
                if let Some(plain) = frame.open(key) {
                    if frame.key_id == key.key_id() {
                        return Ok(plain);
                    }
                    // Authentic data with a rewritten key id.
                    return Err(VaultError::TamperedRecord);
                }
                if frame.key_id != key.key_id() {
                    Err(VaultError::WrongKey)
                } else {
                    Err(VaultError::TamperedRecord)
                }
            }
            None if self.sweep_finds_damage(key) => Err(VaultError::TamperedRecord),
            None => Err(VaultError::NotFound),
        }
    }

    /// On a miss, checks whether the record could be hiding in a damaged
    /// region of the log: an unparseable tail, or a frame that no longer
    /// authenticates under `key` (for example because its name was altered).
    fn sweep_finds_damage(&self, key: &VaultKey) -> bool {
        let mut index = self.index.write();
        if index.damaged_tail {
            return true;
        }
        let kid = key.key_id();
        let mut damaged = false;
        for i in 0..index.frames.len() {
            if index.swept.contains(&(i, kid)) {
                continue;
            }
            let frame = &index.frames[i];
            let opens = frame.open(key).is_some();
            let suspect = if frame.key_id == kid {
                !opens
            } else {
                // A shifted length field leaves the real key id elsewhere
                // in the header.
                opens || frame.header_contains(&kid)
            };
            if suspect {
                damaged = true;
                break;
            }
            index.swept.insert((i, kid));
        }
        damaged
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_round_trip_in_memory() {
        let v = Vault::in_memory();
        let k = VaultKey::from_bytes([1; 32]);
        v.put("acct:1", b"100", &k).unwrap();
        assert_eq!(v.get("acct:1", &k).unwrap(), b"100");
        v.put("acct:1", b"250", &k).unwrap();
        assert_eq!(v.get("acct:1", &k).unwrap(), b"250");
        assert!(matches!(v.get("acct:2", &k), Err(VaultError::NotFound)));
    }

    #[test]
    fn identical_plaintexts_get_fresh_nonces() {
        let v = Vault::in_memory();
        let k = VaultKey::from_bytes([1; 32]);
        let a = v.put("x", b"same", &k).unwrap();
        let b = v.put("x", b"same", &k).unwrap();
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.ciphertext, b.ciphertext);
    }

    #[test]
    fn wrong_key_detected() {
        let v = Vault::in_memory();
        v.put("x", b"secret", &VaultKey::from_bytes([1; 32])).unwrap();
        assert!(matches!(
            v.get("x", &VaultKey::from_bytes([2; 32])),
            Err(VaultError::WrongKey)
        ));
    }

    #[test]
    fn reopen_rebuilds_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tier2.log");
        let k = VaultKey::from_bytes([5; 32]);
        {
            let v = Vault::open(&path).unwrap();
            v.put("a", b"one", &k).unwrap();
            v.put("b", b"two", &k).unwrap();
            v.put("a", b"three", &k).unwrap();
        }
        let v = Vault::open(&path).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.get("a", &k).unwrap(), b"three");
        assert_eq!(v.get("b", &k).unwrap(), b"two");
    }

    #[test]
    fn frame_layout() {
        let rec = EncryptedRecord {
            record_key: "ab".into(),
            key_id: [1; 8],
            nonce: [2; 12],
            tag: [3; 16],
            ciphertext: vec![4, 5],
        };
        let f = rec.to_frame();
        assert_eq!(&f[..4], &(2u32 + 2 + 8 + 12 + 16 + 2).to_be_bytes());
        assert_eq!(&f[4..6], &[0, 2]);
        assert_eq!(&f[6..8], b"ab");
        assert_eq!(&f[8..16], &[1; 8]);
        assert_eq!(&f[16..28], &[2; 12]);
        assert_eq!(&f[28..44], &[3; 16]);
        assert_eq!(&f[44..], &[4, 5]);
    }

    #[test]
    fn key_never_written_to_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tier2.log");
        let bytes = [0xA5u8; 32];
        let k = VaultKey::from_bytes(bytes);
        Vault::open(&path).unwrap().put("a", b"payload", &k).unwrap();
        let file = std::fs::read(&path).unwrap();
        assert!(!file.windows(32).any(|w| w == bytes));
    }
}
