use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use pbkdf2::pbkdf2_hmac;
use sha2::Sha256;
use thiserror::Error;

pub(crate) const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrincipalKind {
    User,
    Service,
}

impl PrincipalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrincipalKind::User => "user",
            PrincipalKind::Service => "service",
        }
    }
}

impl fmt::Display for PrincipalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrincipalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(PrincipalKind::User),
            "service" => Ok(PrincipalKind::Service),
            other => Err(format!("unknown principal kind {other:?}")),
        }
    }
}

/// Enrolled principal. The secret is kept only as a salted PBKDF2 hash.
#[derive(Clone, PartialEq, Eq)]
pub struct Principal {
    pub id: String,
    pub kind: PrincipalKind,
    pub enabled: bool,
    rounds: u32,
    salt: [u8; SALT_LEN],
    secret_hash: [u8; HASH_LEN],
}

impl fmt::Debug for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Principal")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("enabled", &self.enabled)
            .finish_non_exhaustive()
    }
}

fn hash_secret(secret: &str, salt: &[u8; SALT_LEN], rounds: u32) -> [u8; HASH_LEN] {
    let mut out = [0u8; HASH_LEN];
    pbkdf2_hmac::<Sha256>(secret.as_bytes(), salt, rounds.max(1), &mut out);
    out
}

impl Principal {
    pub(crate) fn enroll(id: &str, secret: &str, kind: PrincipalKind, salt: [u8; SALT_LEN], rounds: u32) -> Self {
        Self {
            id: id.to_string(),
            kind,
            enabled: true,
            rounds,
            salt,
            secret_hash: hash_secret(secret, &salt, rounds),
        }
    }

    pub(crate) fn dummy(rounds: u32) -> Self {
        Self::enroll("-", "-", PrincipalKind::User, [0; SALT_LEN], rounds)
    }

    pub fn verify_secret(&self, secret: &str) -> bool {
        let candidate = hash_secret(secret, &self.salt, self.rounds);
        candidate
            .iter()
            .zip(self.secret_hash.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }

    /// One line of the principals file:
    /// `id\tkind\tenabled\trounds\tsalt_hex\thash_hex`.
    pub fn to_record(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.kind,
            u8::from(self.enabled),
            self.rounds,
            hex::encode(self.salt),
            hex::encode(self.secret_hash)
        )
    }

    pub fn from_record(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, kind, enabled, rounds, salt, hash] = fields[..] else {
            return Err(format!("expected 6 fields, found {}", fields.len()));
        };
        if !super::valid_name(id) {
            return Err(format!("invalid id {id:?}"));
        }
        let mut salt_bytes = [0u8; SALT_LEN];
        hex::decode_to_slice(salt, &mut salt_bytes).map_err(|_| "bad salt".to_string())?;
        let mut hash_bytes = [0u8; HASH_LEN];
        hex::decode_to_slice(hash, &mut hash_bytes).map_err(|_| "bad hash".to_string())?;
        Ok(Self {
            id: id.to_string(),
            kind: kind.parse()?,
            enabled: match enabled {
                "1" => true,
                "0" => false,
                other => return Err(format!("bad enabled flag {other:?}")),
            },
            rounds: rounds.parse().map_err(|_| format!("bad rounds {rounds:?}"))?,
            salt: salt_bytes,
            secret_hash: hash_bytes,
        })
    }
}

#[derive(Debug, Error)]
pub enum PrincipalStoreError {
    #[error("principals file: {0}")]
    Io(#[from] io::Error),
    #[error("principals file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("principals file: {0}")]
    Invalid(String),
}

pub(crate) fn read_store(path: &Path) -> Result<Vec<Principal>, PrincipalStoreError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| Principal::from_record(l).map_err(|reason| PrincipalStoreError::Parse { line: i + 1, reason }))
        .collect()
}

pub(crate) fn write_store(path: &Path, principals: &[Principal]) -> Result<(), PrincipalStoreError> {
    let mut text = String::from("# id\tkind\tenabled\trounds\tsalt\thash\n");
    for p in principals {
        text.push_str(&p.to_record());
        text.push('\n');
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
