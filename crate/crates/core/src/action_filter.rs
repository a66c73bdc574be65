//! Allow-list of `(service, action)` pairs. Anything unlisted is refused.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{Layer, Request, Verdict};

/// Message shown to clients for refused actions. Deliberately says nothing
/// about which actions exist.
pub const REFUSAL_MESSAGE: &str = "request refused";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("registry line {line}: expected \"<service> <action>\", found {text:?}")]
pub struct RegistryParseError {
    pub line: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActionRegistry {
    entries: BTreeSet<(String, String)>,
    version: String,
}

impl ActionRegistry {
    pub fn from_entries<S: AsRef<str>>(pairs: impl IntoIterator<Item = (S, S)>) -> Self {
        let entries = pairs
            .into_iter()
            .map(|(s, a)| (s.as_ref().to_ascii_lowercase(), a.as_ref().to_ascii_lowercase()))
            .collect();
        let mut reg = Self {
            entries,
            version: String::new(),
        };
        let mut h = Sha256::new();
        for (s, a) in &reg.entries {
            h.update(s.as_bytes());
            h.update(b" ");
            h.update(a.as_bytes());
            h.update(b"\n");
        }
        reg.version = hex::encode(&h.finalize()[..8]);
        reg
    }

    pub fn contains(&self, service: &str, action: &str) -> bool {
        self.entries
            .contains(&(service.to_ascii_lowercase(), action.to_ascii_lowercase()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(s, a)| (s.as_str(), a.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

/// Parses `service action` lines; `#` starts a comment line.
pub fn load_registry(text: &str) -> Result<ActionRegistry, RegistryParseError> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        match (tokens.next(), tokens.next(), tokens.next()) {
            (Some(s), Some(a), None) => pairs.push((s, a)),
            _ => {
                return Err(RegistryParseError {
                    line: i + 1,
                    text: line.to_string(),
                })
            }
        }
    }
    Ok(ActionRegistry::from_entries(pairs))
}

pub fn check_action(req: &Request, reg: &ActionRegistry) -> Verdict {
    if reg.contains(&req.service, &req.action) {
        Verdict::allow(Layer::ActionFilter, "registered")
    } else {
        Verdict::deny(Layer::ActionFilter, "unknown-action", REFUSAL_MESSAGE)
    }
}

/// Registry shipped with the mock business services.
pub const STARTER_REGISTRY: &str = include_str!("../assets/actions.reg");
