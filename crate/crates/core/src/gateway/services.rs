use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::domain::{percent_decode, Request, ThreatKind};
use crate::ids_breaker::Breaker;
use crate::vault::{Vault, VaultError, VaultKey};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceError {
    NotFound,
    BadInput(String),
    TierIsolated,
    TamperedRecord,
    Failed(String),
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServiceError::NotFound => f.write_str("not found"),
            ServiceError::BadInput(m) => write!(f, "bad input: {m}"),
            ServiceError::TierIsolated => f.write_str("data tier isolated"),
            ServiceError::TamperedRecord => f.write_str("stored record failed authentication"),
            ServiceError::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

/// Data-tier access handed to handlers. Every operation goes through the
/// breaker; security events are collected and audited after the handler
/// returns.
pub(crate) struct Tier2<'a> {
    pub(crate) breaker: &'a Breaker,
    pub(crate) vault: &'a Vault,
    pub(crate) key: &'a VaultKey,
    pub(crate) events: RefCell<Vec<(ThreatKind, String)>>,
    pub(crate) refused: RefCell<bool>,
}

impl<'a> Tier2<'a> {
    pub(crate) fn new(breaker: &'a Breaker, vault: &'a Vault, key: &'a VaultKey) -> Self {
        Self {
            breaker,
            vault,
            key,
            events: RefCell::new(Vec::new()),
            refused: RefCell::new(false),
        }
    }

    fn map(&self, record_key: &str, e: VaultError) -> ServiceError {
        match e {
            VaultError::NotFound => ServiceError::NotFound,
            VaultError::TamperedRecord => {
                self.events
                    .borrow_mut()
                    .push((ThreatKind::TamperedRecord, format!("record {record_key:?}")));
                ServiceError::TamperedRecord
            }
            other => ServiceError::Failed(other.to_string()),
        }
    }

    fn isolated(&self) -> ServiceError {
        *self.refused.borrow_mut() = true;
        ServiceError::TierIsolated
    }

    fn load(&self, record_key: &str) -> Result<Vec<u8>, ServiceError> {
        match self.breaker.guard(|| self.vault.get(record_key, self.key)) {
            Err(_) => Err(self.isolated()),
            Ok(r) => r.map_err(|e| self.map(record_key, e)),
        }
    }

    fn store(&self, record_key: &str, value: &[u8]) -> Result<(), ServiceError> {
        match self.breaker.guard(|| self.vault.put(record_key, value, self.key)) {
            Err(_) => Err(self.isolated()),
            Ok(r) => r.map(|_| ()).map_err(|e| self.map(record_key, e)),
        }
    }
}

/// What a business handler sees of a request that passed every layer.
pub struct ServiceCall<'a> {
    pub request: &'a Request,
    pub subject: &'a str,
    pub now: u64,
    pub(crate) tier2: &'a Tier2<'a>,
}

impl ServiceCall<'_> {
    /// First value of `key` in the query, then in a form-encoded body.
    pub fn param(&self, key: &str) -> Option<String> {
        if let Some(v) = self.request.query_value(key) {
            return Some(v.to_string());
        }
        let body = std::str::from_utf8(&self.request.body).ok()?;
        body.split('&').find_map(|pair| {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            let k = percent_decode(k, true).ok()?;
            if k != key.as_bytes() {
                return None;
            }
            String::from_utf8(percent_decode(v, true).ok()?).ok()
        })
    }

    pub fn require(&self, key: &str) -> Result<String, ServiceError> {
        self.param(key)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| ServiceError::BadInput(format!("missing {key}")))
    }

    /// Reads a record from the data tier.
    pub fn load(&self, record_key: &str) -> Result<Vec<u8>, ServiceError> {
        self.tier2.load(record_key)
    }

    /// Writes a record to the data tier.
    pub fn store(&self, record_key: &str, value: &[u8]) -> Result<(), ServiceError> {
        self.tier2.store(record_key, value)
    }
}

pub type Handler = Arc<dyn Fn(&str, &ServiceCall<'_>) -> Result<String, ServiceError> + Send + Sync>;

/// A business service reachable only through the gateway pipeline.
#[derive(Clone)]
pub struct ServiceComponent {
    name: String,
    actions: BTreeSet<String>,
    handler: Handler,
}

impl fmt::Debug for ServiceComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceComponent")
            .field("name", &self.name)
            .field("actions", &self.actions)
            .finish_non_exhaustive()
    }
}

impl ServiceComponent {
    /// `handler` receives the action name and the call.
    pub fn new<S: AsRef<str>>(
        name: &str,
        actions: impl IntoIterator<Item = S>,
        handler: impl Fn(&str, &ServiceCall<'_>) -> Result<String, ServiceError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.to_ascii_lowercase(),
            actions: actions.into_iter().map(|a| a.as_ref().to_ascii_lowercase()).collect(),
            handler: Arc::new(handler),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn actions(&self) -> &BTreeSet<String> {
        &self.actions
    }

    pub fn serves(&self, action: &str) -> bool {
        self.actions.contains(action)
    }

    /// Keeps only the listed actions. Unknown names are returned as errors.
    pub fn restrict<S: AsRef<str>>(mut self, actions: impl IntoIterator<Item = S>) -> Result<Self, String> {
        let mut keep = BTreeSet::new();
        for a in actions {
            let a = a.as_ref().to_ascii_lowercase();
            if !self.actions.contains(&a) {
                return Err(a);
            }
            keep.insert(a);
        }
        self.actions = keep;
        Ok(self)
    }

    pub(crate) fn invoke(&self, action: &str, call: &ServiceCall<'_>) -> Result<String, ServiceError> {
        (self.handler)(action, call)
    }
}

const QUOTES: [(&str, &str); 4] = [
    ("ACME", "101.25"),
    ("GLOBEX", "48.10"),
    ("INITECH", "12.00"),
    ("UMBRELLA", "77.70"),
];

/// Trading information: canned quotes and a search that echoes its query.
pub fn trading() -> ServiceComponent {
    ServiceComponent::new("trading", ["list_quotes", "get_quote", "search"], |action, call| {
        match action {
            "list_quotes" => Ok(QUOTES.iter().map(|(s, p)| format!("{s} {p}\n")).collect()),
            "get_quote" => {
                let symbol = call.require("symbol")?;
                QUOTES
                    .iter()
                    .find(|(s, _)| s.eq_ignore_ascii_case(&symbol))
                    .map(|(s, p)| format!("{s} {p}\n"))
                    .ok_or(ServiceError::NotFound)
            }
            "search" => {
                let q = call.param("q").unwrap_or_default();
                let hits: Vec<&str> = QUOTES
                    .iter()
                    .map(|(s, _)| *s)
                    .filter(|s| !q.is_empty() && s.contains(&q.to_ascii_uppercase()))
                    .collect();
                Ok(format!("q={q}\nmatches={}\n", hits.join(",")))
            }
            _ => Err(ServiceError::NotFound),
        }
    })
}

/// Contract management backed by the data tier.
pub fn contracts() -> ServiceComponent {
    let next_id = Arc::new(AtomicU64::new(1));
    ServiceComponent::new("contracts", ["create_contract", "get_contract"], move |action, call| {
        match action {
            "create_contract" => {
                let party = call.require("party")?;
                let amount = call.require("amount")?;
                if !amount.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(ServiceError::BadInput("amount".into()));
                }
                let id = next_id.fetch_add(1, Ordering::Relaxed);
                let record = format!("party={party}\namount={amount}\nowner={}\n", call.subject);
                call.store(&format!("contract:{id}"), record.as_bytes())?;
                Ok(format!("contract={id}\n"))
            }
            "get_contract" => {
                let id = call.require("id")?;
                let bytes = call.load(&format!("contract:{id}"))?;
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            _ => Err(ServiceError::NotFound),
        }
    })
}

/// Banking stub: account balances kept in the data tier.
pub fn banking() -> ServiceComponent {
    let writes = Arc::new(Mutex::new(()));
    ServiceComponent::new("banking", ["get_balance", "deposit"], move |action, call| {
        let account = call.require("account")?;
        let key = format!("balance:{account}");
        let read = |call: &ServiceCall<'_>| -> Result<u64, ServiceError> {
            let bytes = call.load(&key)?;
            std::str::from_utf8(&bytes)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ServiceError::Failed("corrupt balance".into()))
        };
        match action {
            "get_balance" => Ok(format!("account={account}\nbalance={}\n", read(call)?)),
            "deposit" => {
                let amount: u64 = call
                    .require("amount")?
                    .parse()
                    .map_err(|_| ServiceError::BadInput("amount".into()))?;
                let _serialized = writes.lock();
                let current = match read(call) {
                    Err(ServiceError::NotFound) => 0,
                    other => other?,
                };
                let updated = current
                    .checked_add(amount)
                    .ok_or_else(|| ServiceError::BadInput("amount".into()))?;
                call.store(&key, updated.to_string().as_bytes())?;
                Ok(format!("account={account}\nbalance={updated}\n"))
            }
            _ => Err(ServiceError::NotFound),
        }
    })
}

/// The bundled mock components.
pub fn mock_services() -> Vec<ServiceComponent> {
    vec![trading(), contracts(), banking()]
}
