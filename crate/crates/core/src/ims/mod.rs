//! Identity management service.
//!
//! Enrolls principals, issues [`AuthCertificate`]s after a successful login,
//! and validates certificates presented with requests. Validation rejects
//! forged or tampered certificates (tag mismatch), expired ones, and reuse of
//! single-use certificates (nonce ledger).

mod certificate;
mod principal;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use parking_lot::{Mutex, RwLock};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::domain::ThreatKind;

pub use certificate::{AuthCertificate, Undecodable, NONCE_LEN, TAG_LEN};
pub use principal::{Principal, PrincipalKind, PrincipalStoreError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImsError {
    #[error("principal {0:?} already registered")]
    DuplicateId(String),
    #[error("secret shorter than {0} characters")]
    WeakSecret(usize),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("authentication failed")]
    AuthFailed,
    #[error("principal disabled")]
    Disabled,
    #[error("ttl must be between 1 ms and {max} ms")]
    InvalidTtl { max: u64 },
    #[error("certificate forged or tampered")]
    Forged,
    #[error("certificate expired")]
    Expired,
    #[error("single-use certificate replayed")]
    Replayed,
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("unknown principal {0:?}")]
    UnknownPrincipal(String),
}

impl ImsError {
    /// Threat kind to audit when this error rejects a presented certificate.
    pub fn threat_kind(&self) -> Option<ThreatKind> {
        match self {
            ImsError::Forged => Some(ThreatKind::Forgery),
            ImsError::Replayed => Some(ThreatKind::Replay),
            ImsError::Expired => Some(ThreatKind::Expired),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImsConfig {
    pub min_secret_len: usize,
    /// PBKDF2 iterations for newly enrolled secrets.
    pub hash_rounds: u32,
    pub max_ttl_ms: u64,
    pub service_ttl_ms: u64,
}

impl Default for ImsConfig {
    fn default() -> Self {
        Self {
            min_secret_len: 8,
            hash_rounds: 10_000,
            max_ttl_ms: 24 * 3_600_000,
            service_ttl_ms: 300_000,
        }
    }
}

impl ImsConfig {
    /// Ledger entries are dropped once this long has passed since issuance;
    /// every certificate is expired by then.
    pub fn purge_horizon_ms(&self) -> u64 {
        self.max_ttl_ms + 60_000
    }
}

/// What a valid certificate proves about its bearer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    pub subject: String,
    pub scope: BTreeSet<String>,
    pub kind: Option<PrincipalKind>,
}

#[derive(Debug, Clone, Copy)]
struct NonceEntry {
    issued_at: u64,
}

#[derive(Debug, Default)]
struct NonceLedger {
    issued: HashMap<[u8; NONCE_LEN], NonceEntry>,
    consumed: HashSet<[u8; NONCE_LEN]>,
}

impl NonceLedger {
    fn purge(&mut self, now: u64, horizon: u64) -> usize {
        let before = self.issued.len();
        let consumed = &mut self.consumed;
        self.issued.retain(|nonce, e| {
            let keep = now.saturating_sub(e.issued_at) < horizon;
            if !keep {
                consumed.remove(nonce);
            }
            keep
        });
        before - self.issued.len()
    }
}

/// Approved caller→callee link with the certificate the caller presents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceGrant {
    pub caller: String,
    pub callee: String,
    pub certificate: AuthCertificate,
}

pub(crate) fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

pub struct Ims {
    key: [u8; 32],
    config: ImsConfig,
    principals: RwLock<BTreeMap<String, Principal>>,
    ledger: Mutex<NonceLedger>,
    grants: RwLock<HashMap<(String, String), ServiceGrant>>,
    rng: Mutex<ChaCha20Rng>,
}

impl std::fmt::Debug for Ims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ims")
            .field("principals", &self.principals.read().len())
            .field("outstanding_nonces", &self.ledger.lock().issued.len())
            .finish_non_exhaustive()
    }
}

impl Ims {
    pub fn new(signing_key: [u8; 32], config: ImsConfig) -> Self {
        Self::with_rng(signing_key, config, ChaCha20Rng::from_entropy())
    }

    /// Deterministic nonces and salts, for reproducible test corpora.
    pub fn with_seed(signing_key: [u8; 32], config: ImsConfig, seed: u64) -> Self {
        Self::with_rng(signing_key, config, ChaCha20Rng::seed_from_u64(seed))
    }

    fn with_rng(key: [u8; 32], config: ImsConfig, rng: ChaCha20Rng) -> Self {
        Self {
            key,
            config,
            principals: RwLock::new(BTreeMap::new()),
            ledger: Mutex::new(NonceLedger::default()),
            grants: RwLock::new(HashMap::new()),
            rng: Mutex::new(rng),
        }
    }

    pub fn config(&self) -> &ImsConfig {
        &self.config
    }

    pub fn register_principal(
        &self,
        id: &str,
        secret: &str,
        kind: PrincipalKind,
    ) -> Result<Principal, ImsError> {
        if !valid_name(id) {
            return Err(ImsError::InvalidName(id.to_string()));
        }
        if secret.chars().count() < self.config.min_secret_len.max(1) {
            return Err(ImsError::WeakSecret(self.config.min_secret_len.max(1)));
        }
        let mut salt = [0u8; principal::SALT_LEN];
        self.rng.lock().fill_bytes(&mut salt);
        let principal = Principal::enroll(id, secret, kind, salt, self.config.hash_rounds);
        let mut principals = self.principals.write();
        if principals.contains_key(id) {
            return Err(ImsError::DuplicateId(id.to_string()));
        }
        principals.insert(id.to_string(), principal.clone());
        Ok(principal)
    }

    pub fn set_enabled(&self, id: &str, enabled: bool) -> Result<(), ImsError> {
        let mut principals = self.principals.write();
        let p = principals
            .get_mut(id)
            .ok_or_else(|| ImsError::UnknownPrincipal(id.to_string()))?;
        p.enabled = enabled;
        Ok(())
    }

    pub fn principal(&self, id: &str) -> Option<Principal> {
        self.principals.read().get(id).cloned()
    }

    pub fn principals(&self) -> Vec<Principal> {
        self.principals.read().values().cloned().collect()
    }

    /// Adds already-enrolled records, e.g. from a principals file.
    pub fn import_principals(&self, records: impl IntoIterator<Item = Principal>) -> Result<(), ImsError> {
        let mut principals = self.principals.write();
        for p in records {
            if principals.contains_key(&p.id) {
                return Err(ImsError::DuplicateId(p.id));
            }
            principals.insert(p.id.clone(), p);
        }
        Ok(())
    }

    /// Replaces the whole principal table, e.g. on configuration reload.
    pub fn replace_principals(&self, records: impl IntoIterator<Item = Principal>) -> Result<(), ImsError> {
        let mut fresh = BTreeMap::new();
        for p in records {
            if fresh.contains_key(&p.id) {
                return Err(ImsError::DuplicateId(p.id));
            }
            fresh.insert(p.id.clone(), p);
        }
        *self.principals.write() = fresh;
        Ok(())
    }

    pub fn read_principals(path: impl AsRef<Path>) -> Result<Vec<Principal>, PrincipalStoreError> {
        principal::read_store(path.as_ref())
    }

    pub fn load_principals(&self, path: impl AsRef<Path>) -> Result<(), PrincipalStoreError> {
        let records = principal::read_store(path.as_ref())?;
        self.import_principals(records)
            .map_err(|e| PrincipalStoreError::Invalid(e.to_string()))
    }

    pub fn save_principals(&self, path: impl AsRef<Path>) -> Result<(), PrincipalStoreError> {
        principal::write_store(path.as_ref(), &self.principals())
    }

    fn authenticate(&self, id: &str, secret: &str) -> Result<Principal, ImsError> {
        let found = self.principals.read().get(id).cloned();
        match found {
            Some(p) if p.verify_secret(secret) => {
                if p.enabled {
                    Ok(p)
                } else {
                    Err(ImsError::Disabled)
                }
            }
            Some(_) => Err(ImsError::AuthFailed),
            None => {
                // Same work as a real check so unknown ids are not faster.
                Principal::dummy(self.config.hash_rounds).verify_secret(secret);
                Err(ImsError::AuthFailed)
            }
        }
    }

    fn mint(
        &self,
        subject: &str,
        scope: BTreeSet<String>,
        now: u64,
        ttl_ms: u64,
        single_use: bool,
    ) -> Result<AuthCertificate, ImsError> {
        if ttl_ms == 0 || ttl_ms > self.config.max_ttl_ms {
            return Err(ImsError::InvalidTtl {
                max: self.config.max_ttl_ms,
            });
        }
        if let Some(bad) = scope.iter().find(|s| !valid_name(s)) {
            return Err(ImsError::InvalidName(bad.clone()));
        }
        let mut ledger = self.ledger.lock();
        let nonce = loop {
            let mut nonce = [0u8; NONCE_LEN];
            self.rng.lock().fill_bytes(&mut nonce);
            if !ledger.issued.contains_key(&nonce) {
                break nonce;
            }
        };
        let mut cert = AuthCertificate {
            subject: subject.to_string(),
            scope,
            issued_at: now,
            expires_at: now + ttl_ms,
            nonce,
            single_use,
            tag: [0; TAG_LEN],
        };
        cert.tag = cert.compute_tag(&self.key);
        ledger.issued.insert(nonce, NonceEntry { issued_at: now });
        Ok(cert)
    }

    pub fn issue_certificate(
        &self,
        id: &str,
        secret: &str,
        scope: BTreeSet<String>,
        now: u64,
        ttl_ms: u64,
        single_use: bool,
    ) -> Result<AuthCertificate, ImsError> {
        let principal = self.authenticate(id, secret)?;
        self.mint(&principal.id, scope, now, ttl_ms, single_use)
    }

    fn check(&self, encoded: &[u8], now: u64, consume: bool) -> Result<Identity, ImsError> {
        let cert = AuthCertificate::decode(encoded).map_err(|_| ImsError::Forged)?;
        if !cert.tag_verifies(&self.key) {
            return Err(ImsError::Forged);
        }
        if now >= cert.expires_at {
            return Err(ImsError::Expired);
        }
        {
            let mut ledger = self.ledger.lock();
            if !ledger.issued.contains_key(&cert.nonce) {
                // Purged from the ledger, which only happens after expiry.
                return Err(ImsError::Expired);
            }
            if cert.single_use {
                if ledger.consumed.contains(&cert.nonce) {
                    return Err(ImsError::Replayed);
                }
                if consume {
                    ledger.consumed.insert(cert.nonce);
                }
            }
        }
        let kind = self.principals.read().get(&cert.subject).map(|p| p.kind);
        Ok(Identity {
            subject: cert.subject,
            scope: cert.scope,
            kind,
        })
    }

    /// Validates a presented certificate, consuming it if it is single-use.
    pub fn validate_certificate(&self, encoded: &[u8], now: u64) -> Result<Identity, ImsError> {
        self.check(encoded, now, true)
    }

    /// Same checks as [`Ims::validate_certificate`] without consuming anything.
    pub fn inspect_certificate(&self, encoded: &[u8], now: u64) -> Result<Identity, ImsError> {
        self.check(encoded, now, false)
    }

    /// Drops ledger entries older than the purge horizon.
    pub fn purge(&self, now: u64) -> usize {
        self.ledger.lock().purge(now, self.config.purge_horizon_ms())
    }

    pub fn outstanding_nonces(&self) -> usize {
        self.ledger.lock().issued.len()
    }

    fn require_service(&self, name: &str) -> Result<(), ImsError> {
        match self.principals.read().get(name) {
            Some(p) if p.kind == PrincipalKind::Service && p.enabled => Ok(()),
            _ => Err(ImsError::UnknownService(name.to_string())),
        }
    }

    /// Approves `caller` to call `callee` and issues the caller's certificate.
    pub fn grant_service_link(&self, caller: &str, callee: &str, now: u64) -> Result<ServiceGrant, ImsError> {
        self.require_service(caller)?;
        self.require_service(callee)?;
        let certificate = self.mint(
            caller,
            BTreeSet::from([callee.to_string()]),
            now,
            self.config.service_ttl_ms,
            false,
        )?;
        let grant = ServiceGrant {
            caller: caller.to_string(),
            callee: callee.to_string(),
            certificate,
        };
        self.grants
            .write()
            .insert((caller.to_string(), callee.to_string()), grant.clone());
        Ok(grant)
    }

    pub fn has_grant(&self, caller: &str, callee: &str) -> bool {
        self.grants
            .read()
            .contains_key(&(caller.to_string(), callee.to_string()))
    }

    pub fn revoke_grant(&self, caller: &str, callee: &str) -> bool {
        self.grants
            .write()
            .remove(&(caller.to_string(), callee.to_string()))
            .is_some()
    }

    /// Callee-side check of a service-to-service call.
    pub fn verify_service_call(&self, encoded: &[u8], callee: &str, now: u64) -> Result<Identity, ImsError> {
        let identity = self.validate_certificate(encoded, now)?;
        if identity.kind != Some(PrincipalKind::Service)
            || !identity.scope.contains(callee)
            || !self.has_grant(&identity.subject, callee)
        {
            return Err(ImsError::AuthFailed);
        }
        Ok(identity)
    }
}
