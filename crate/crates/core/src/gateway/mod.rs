//! The request pipeline.
//!
//! Layers run in a fixed order and the first denial short-circuits:
//!
//! 1. DoS guard
//! 2. canonicalization and sanitization
//! 3. certificate validation against the IMS
//! 4. rule engine
//! 5. action allow-list
//! 6. function permissions
//! 7. dispatch, with data-tier access gated by the breaker
//!
//! Business handlers are reachable only through [`Gateway::handle`] and
//! [`Gateway::handle_on`]. Every denial is audited and fed to the breaker.

pub mod config;
mod permissions;
mod services;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

use crate::action_filter::{check_action, load_registry, ActionRegistry, RegistryParseError, STARTER_REGISTRY};
use crate::domain::{
    canonicalize_request, percent_decode, AuditError, AuditLog, Layer, RawRequest, Request, RequestId, ThreatEvent,
    ThreatKind, Verdict,
};
use crate::dos_guard::{DosGuard, RateLimitConfig, RateLimitConfigError};
use crate::ids_breaker::{Breaker, DetectionPolicy, PolicyError as DetectionPolicyError, ResetError};
use crate::ims::{Identity, Ims, ImsError, PrincipalStoreError};
use crate::keyfile::{read_key_file, KeyFileError};
use crate::rules::{evaluate_with, parse_rules_named, starter_rules, EvalOptions, RuleError, RuleSet};
use crate::sanitizer::{sanitize_request, SanitizationPolicy};
use crate::vault::{Vault, VaultError, VaultKey};

pub use config::{ConfigError, GatewayConfig};
pub use permissions::{ClassDirectory, PermissionTable};
pub use services::{banking, contracts, mock_services, trading, ServiceCall, ServiceComponent, ServiceError};

use services::Tier2;

/// Path of the login endpoint that exchanges credentials for a certificate.
pub const LOGIN_PATH: &str = "/ims/login";
/// Service name of the built-in operator functions.
pub const ADMIN_SERVICE: &str = "admin";
/// Class an operator needs to edit permissions.
pub const ADMIN_CLASS: &str = "admin";

pub const MSG_RATE: &str = "too many requests";
pub const MSG_AUTH: &str = "authentication failed";
pub const MSG_REFUSED: &str = "request refused";
pub const MSG_UNAVAILABLE: &str = "service temporarily unavailable";
pub const MSG_BAD_REQUEST: &str = "bad request";
pub const MSG_INTERNAL: &str = "internal error";
pub const MSG_UPSTREAM: &str = "upstream failure";

const DEFAULT_LOGIN_TTL_MS: u64 = 300_000;

/// Which listener a request arrived on. Admin functions are only routable
/// on the loopback admin binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Public,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayResponse {
    pub status: u16,
    pub body: String,
    pub verdict: Verdict,
    /// Layers invoked for this request, in order.
    pub trace: Vec<Layer>,
    pub request_id: Option<RequestId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("operator {operator:?} may not edit permissions")]
pub struct PermissionDenied {
    pub operator: String,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("rate limit: {0}")]
    RateLimit(#[from] RateLimitConfigError),
    #[error("detection policy: {0}")]
    Detection(#[from] DetectionPolicyError),
    #[error("registered action {service}/{action} has no handler")]
    UnservedAction { service: String, action: String },
    #[error("duplicate service {0:?}")]
    DuplicateService(String),
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Key(#[from] KeyFileError),
    #[error("the IMS key and the vault key must differ")]
    SharedKey,
    #[error("principals: {0}")]
    Principals(#[from] PrincipalStoreError),
    #[error("{path}: {source}")]
    Rules { path: PathBuf, source: RuleError },
    #[error("{path}: {source}")]
    Registry { path: PathBuf, source: RegistryParseError },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("vault: {0}")]
    Vault(#[from] VaultError),
    #[error("audit log: {0}")]
    Audit(#[from] AuditError),
    #[error("service {service:?}: {message}")]
    Service { service: String, message: String },
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// A denial on its way out: verdict, client-facing response and audit data.
struct Denial {
    verdict: Box<Verdict>,
    status: u16,
    message: &'static str,
    kind: ThreatKind,
    detail: String,
}

impl Denial {
    fn new(layer: Layer, reason: &str, status: u16, message: &'static str, kind: ThreatKind, detail: String) -> Self {
        Self {
            verdict: Box::new(Verdict::deny(layer, reason, detail.clone())),
            status,
            message,
            kind,
            detail,
        }
    }

    fn internal(layer: Layer) -> Self {
        Self::new(
            layer,
            "internal-error",
            500,
            MSG_INTERNAL,
            ThreatKind::UpstreamFailure,
            format!("{} layer failed", layer.name()),
        )
    }
}

fn layer_bit(layer: Layer) -> u8 {
    1 << (layer as u8)
}

pub struct GatewayBuilder {
    ims: Arc<Ims>,
    rules: RuleSet,
    registry: ActionRegistry,
    sanitization: SanitizationPolicy,
    rate_limit: RateLimitConfig,
    detection: DetectionPolicy,
    permissions: PermissionTable,
    classes: ClassDirectory,
    services: Vec<ServiceComponent>,
    vault: Option<Vault>,
    vault_key: Option<VaultKey>,
    audit: Option<AuditLog>,
    eval: EvalOptions,
    notifier: Option<Box<dyn Write + Send>>,
}

impl GatewayBuilder {
    pub fn rules(mut self, rules: RuleSet) -> Self {
        self.rules = rules;
        self
    }

    pub fn registry(mut self, registry: ActionRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn sanitization(mut self, policy: SanitizationPolicy) -> Self {
        self.sanitization = policy;
        self
    }

    pub fn rate_limit(mut self, cfg: RateLimitConfig) -> Self {
        self.rate_limit = cfg;
        self
    }

    pub fn detection(mut self, policy: DetectionPolicy) -> Self {
        self.detection = policy;
        self
    }

    pub fn permissions(mut self, table: PermissionTable) -> Self {
        self.permissions = table;
        self
    }

    pub fn classes(mut self, classes: ClassDirectory) -> Self {
        self.classes = classes;
        self
    }

    /// Replaces the mounted services (the bundled mocks by default).
    pub fn services(mut self, services: Vec<ServiceComponent>) -> Self {
        self.services = services;
        self
    }

    pub fn service(mut self, service: ServiceComponent) -> Self {
        self.services.push(service);
        self
    }

    pub fn vault(mut self, vault: Vault, key: VaultKey) -> Self {
        self.vault = Some(vault);
        self.vault_key = Some(key);
        self
    }

    pub fn audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn eval_options(mut self, opts: EvalOptions) -> Self {
        self.eval = opts;
        self
    }

    pub fn trip_notifier(mut self, sink: impl Write + Send + 'static) -> Self {
        self.notifier = Some(Box::new(sink));
        self
    }

    pub fn build(self) -> Result<Gateway, BuildError> {
        let dos = DosGuard::new(self.rate_limit)?;
        let mut breaker = Breaker::new(self.detection)?;
        if let Some(sink) = self.notifier {
            breaker = breaker.with_notifier(sink);
        }
        let mut services = BTreeMap::new();
        for s in self.services {
            let name = s.name().to_string();
            if services.insert(name.clone(), s).is_some() {
                return Err(BuildError::DuplicateService(name));
            }
        }
        check_served(&self.registry, &services)?;
        Ok(Gateway {
            dos,
            sanitization: RwLock::new(Arc::new(self.sanitization)),
            ims: self.ims,
            rules: RwLock::new(Arc::new(self.rules)),
            eval: self.eval,
            registry: RwLock::new(Arc::new(self.registry)),
            permissions: RwLock::new(Arc::new(self.permissions)),
            classes: RwLock::new(Arc::new(self.classes)),
            services,
            breaker,
            vault: self.vault.unwrap_or_else(Vault::in_memory),
            vault_key: self.vault_key.unwrap_or_else(VaultKey::generate),
            audit: self.audit.unwrap_or_else(AuditLog::in_memory),
            audit_failures: AtomicU64::new(0),
            invocations: Default::default(),
            faults: AtomicU8::new(0),
        })
    }
}

fn check_served(registry: &ActionRegistry, services: &BTreeMap<String, ServiceComponent>) -> Result<(), BuildError> {
    for (service, action) in registry.entries() {
        if service == ADMIN_SERVICE {
            continue;
        }
        if !services.get(service).is_some_and(|s| s.serves(action)) {
            return Err(BuildError::UnservedAction {
                service: service.to_string(),
                action: action.to_string(),
            });
        }
    }
    Ok(())
}

pub struct Gateway {
    dos: DosGuard,
    sanitization: RwLock<Arc<SanitizationPolicy>>,
    ims: Arc<Ims>,
    rules: RwLock<Arc<RuleSet>>,
    eval: EvalOptions,
    registry: RwLock<Arc<ActionRegistry>>,
    permissions: RwLock<Arc<PermissionTable>>,
    classes: RwLock<Arc<ClassDirectory>>,
    services: BTreeMap<String, ServiceComponent>,
    breaker: Breaker,
    vault: Vault,
    vault_key: VaultKey,
    audit: AuditLog,
    audit_failures: AtomicU64,
    invocations: [AtomicU64; 7],
    faults: AtomicU8,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("services", &self.services.keys().collect::<Vec<_>>())
            .field("link", &self.breaker.link().state)
            .finish_non_exhaustive()
    }
}

/// Everything loaded from disk for one configuration, validated before use.
struct Loaded {
    rules: RuleSet,
    registry: ActionRegistry,
    principals: Option<Vec<crate::ims::Principal>>,
}

fn load_artifacts(cfg: &GatewayConfig) -> Result<Loaded, StartupError> {
    let rules = match &cfg.rules {
        None => starter_rules(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| StartupError::Read {
                path: path.clone(),
                source,
            })?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            parse_rules_named(&name, &text).map_err(|source| StartupError::Rules {
                path: path.clone(),
                source,
            })?
        }
    };
    let registry = match &cfg.registry {
        None => load_registry(STARTER_REGISTRY).expect("bundled registry parses"),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| StartupError::Read {
                path: path.clone(),
                source,
            })?;
            load_registry(&text).map_err(|source| StartupError::Registry {
                path: path.clone(),
                source,
            })?
        }
    };
    let principals = match &cfg.principals {
        None => None,
        Some(path) => Some(Ims::read_principals(path)?),
    };
    Ok(Loaded {
        rules,
        registry,
        principals,
    })
}

fn mounted_services(cfg: &GatewayConfig) -> Result<Vec<ServiceComponent>, StartupError> {
    let mocks: BTreeMap<String, ServiceComponent> =
        mock_services().into_iter().map(|s| (s.name().to_string(), s)).collect();
    for name in cfg.services.keys() {
        if !mocks.contains_key(name) {
            return Err(StartupError::Service {
                service: name.clone(),
                message: "no such service".into(),
            });
        }
    }
    mocks
        .into_iter()
        .map(|(name, svc)| match cfg.services.get(&name) {
            None => Ok(svc),
            Some(actions) => svc.restrict(actions).map_err(|a| StartupError::Service {
                service: name.clone(),
                message: format!("unknown action {a:?}"),
            }),
        })
        .collect()
}

impl Gateway {
    /// Builder with the starter rules and registry, the production
    /// sanitization policy, default limits, the starter permission table,
    /// the bundled mock services and an in-memory data tier.
    pub fn builder(ims: Arc<Ims>) -> GatewayBuilder {
        GatewayBuilder {
            ims,
            rules: starter_rules(),
            registry: load_registry(STARTER_REGISTRY).expect("bundled registry parses"),
            sanitization: SanitizationPolicy::production(),
            rate_limit: RateLimitConfig::default(),
            detection: DetectionPolicy::default(),
            permissions: PermissionTable::starter(),
            classes: ClassDirectory::new(),
            services: mock_services(),
            vault: None,
            vault_key: None,
            audit: None,
            eval: EvalOptions::default(),
            notifier: None,
        }
    }

    /// Loads every artifact the configuration names. Any failure aborts
    /// startup.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, StartupError> {
        let ims_key = read_key_file(&cfg.ims_key)?;
        let vault_key = read_key_file(&cfg.vault_key)?;
        if ims_key == vault_key {
            return Err(StartupError::SharedKey);
        }
        let loaded = load_artifacts(cfg)?;
        let ims = Ims::new(ims_key, cfg.ims.clone());
        if let Some(principals) = loaded.principals {
            ims.replace_principals(principals)
                .map_err(|e| PrincipalStoreError::Invalid(e.to_string()))?;
        }
        let audit = match &cfg.audit_file {
            Some(path) => AuditLog::with_file(path)?,
            None => AuditLog::in_memory(),
        };
        let mut builder = Gateway::builder(Arc::new(ims))
            .rules(loaded.rules)
            .registry(loaded.registry)
            .sanitization(cfg.sanitization.clone())
            .rate_limit(cfg.rate_limit)
            .detection(cfg.detection.clone())
            .permissions(cfg.permissions.clone())
            .classes(cfg.classes.clone())
            .services(mounted_services(cfg)?)
            .vault(Vault::open(&cfg.vault_store)?, VaultKey::from_bytes(vault_key))
            .audit(audit)
            .eval_options(EvalOptions {
                body_limit: cfg.body_limit,
            });
        if let Some(path) = &cfg.trip_notify {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| StartupError::Read {
                    path: path.clone(),
                    source,
                })?;
            builder = builder.trip_notifier(file);
        }
        Ok(builder.build()?)
    }

    /// Re-reads rules, registry, principals, permissions, classes and the
    /// sanitization policy. Everything is validated before anything is
    /// swapped in.
    pub fn reload(&self, cfg: &GatewayConfig, now: u64) -> Result<(), StartupError> {
        let loaded = load_artifacts(cfg)?;
        check_served(&loaded.registry, &self.services)?;
        if let Some(principals) = loaded.principals {
            self.ims
                .replace_principals(principals)
                .map_err(|e| PrincipalStoreError::Invalid(e.to_string()))?;
        }
        let detail = format!(
            "reload rules={} registry={}",
            loaded.rules.version(),
            loaded.registry.version()
        );
        *self.rules.write() = Arc::new(loaded.rules);
        *self.registry.write() = Arc::new(loaded.registry);
        *self.permissions.write() = Arc::new(cfg.permissions.clone());
        *self.classes.write() = Arc::new(cfg.classes.clone());
        *self.sanitization.write() = Arc::new(cfg.sanitization.clone());
        self.record(now, ThreatKind::AdminChange, "local", detail);
        Ok(())
    }

    pub fn ims(&self) -> &Ims {
        &self.ims
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn breaker(&self) -> &Breaker {
        &self.breaker
    }

    pub fn dos_guard(&self) -> &DosGuard {
        &self.dos
    }

    pub fn rules(&self) -> Arc<RuleSet> {
        self.rules.read().clone()
    }

    pub fn registry(&self) -> Arc<ActionRegistry> {
        self.registry.read().clone()
    }

    pub fn permissions(&self) -> Arc<PermissionTable> {
        self.permissions.read().clone()
    }

    pub fn sanitization(&self) -> Arc<SanitizationPolicy> {
        self.sanitization.read().clone()
    }

    pub fn services(&self) -> impl Iterator<Item = &ServiceComponent> {
        self.services.values()
    }

    pub fn replace_rules(&self, rules: RuleSet) {
        *self.rules.write() = Arc::new(rules);
    }

    pub fn replace_registry(&self, registry: ActionRegistry) -> Result<(), BuildError> {
        check_served(&registry, &self.services)?;
        *self.registry.write() = Arc::new(registry);
        Ok(())
    }

    pub fn replace_sanitization(&self, policy: SanitizationPolicy) {
        *self.sanitization.write() = Arc::new(policy);
    }

    /// Number of times `layer` has run since construction.
    pub fn invocations(&self, layer: Layer) -> u64 {
        self.invocations[layer as usize].load(Ordering::SeqCst)
    }

    pub fn invocation_counts(&self) -> [u64; 7] {
        Layer::ORDER.map(|l| self.invocations(l))
    }

    /// Audit appends whose file mirror failed (the in-memory log still has
    /// the event).
    pub fn audit_failures(&self) -> u64 {
        self.audit_failures.load(Ordering::SeqCst)
    }

    /// Makes `layer` fail internally on every request until cleared. Used to
    /// exercise the fail-closed path.
    pub fn inject_fault(&self, layer: Layer) {
        self.faults.fetch_or(layer_bit(layer), Ordering::SeqCst);
    }

    pub fn clear_faults(&self) {
        self.faults.store(0, Ordering::SeqCst);
    }

    /// Classes of `principal`: its kind (`user`/`service`) plus explicit
    /// memberships.
    pub fn classes_of(&self, principal: &str) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self
            .classes
            .read()
            .classes_of(principal)
            .map(str::to_string)
            .collect();
        if let Some(p) = self.ims.principal(principal) {
            out.insert(p.kind.as_str().to_string());
        }
        out
    }

    /// Whether `principal` may call `function` under the current table.
    pub fn permits(&self, principal: &str, function: &str) -> bool {
        let classes = self.classes_of(principal);
        self.permissions.read().allows(function, classes.iter().map(String::as_str))
    }

    /// Grants or revokes `class` on `function`. Only admins may do this.
    pub fn set_permission(
        &self,
        function: &str,
        class: &str,
        allowed: bool,
        operator: &str,
        now: u64,
    ) -> Result<PermissionTable, PermissionDenied> {
        if !self.classes_of(operator).contains(ADMIN_CLASS) {
            self.record(
                now,
                ThreatKind::PermissionDenied,
                operator,
                format!("set_permission {function} {class} refused"),
            );
            return Err(PermissionDenied {
                operator: operator.to_string(),
            });
        }
        let updated = {
            let mut guard = self.permissions.write();
            let mut table = (**guard).clone();
            table.set(function, class, allowed);
            *guard = Arc::new(table.clone());
            table
        };
        self.record(
            now,
            ThreatKind::AdminChange,
            operator,
            format!("permission {function} {class} {}", if allowed { "granted" } else { "revoked" }),
        );
        Ok(updated)
    }

    /// Reconnects the data tier on behalf of `operator`.
    pub fn reset_breaker(&self, operator: &str, now: u64) -> Result<(), ResetError> {
        let authz = |p: &str, f: &str| self.permits(p, f);
        match self.breaker.reset(now, operator, &authz) {
            Ok(_) => {
                self.record(now, ThreatKind::AdminChange, operator, "breaker reset".to_string());
                Ok(())
            }
            Err(e) => {
                if matches!(e, ResetError::PermissionDenied { .. }) {
                    self.record(now, ThreatKind::PermissionDenied, operator, "breaker reset refused".to_string());
                }
                Err(e)
            }
        }
    }

    /// Appends an event, feeds it to the breaker and audits any trip.
    fn record(&self, now: u64, kind: ThreatKind, source: &str, detail: String) -> ThreatEvent {
        let event = ThreatEvent::new(now, kind, source, detail);
        let event = self.append(event);
        if let Some(trip) = self.breaker.observe(&event, now).trip {
            self.append(trip);
        }
        event
    }

    fn append(&self, mut event: ThreatEvent) -> ThreatEvent {
        match self.audit.append(event.clone()) {
            Ok(seq) => event.seq = seq,
            Err(AuditError::Mirror { seq, .. }) => {
                event.seq = seq;
                self.audit_failures.fetch_add(1, Ordering::SeqCst);
            }
            Err(_) => {
                self.audit_failures.fetch_add(1, Ordering::SeqCst);
            }
        }
        event
    }

    /// Runs one layer: counts it, appends it to the trace and turns any
    /// internal failure into a denial.
    fn step<T>(&self, layer: Layer, trace: &mut Vec<Layer>, f: impl FnOnce() -> Result<T, Denial>) -> Result<T, Denial> {
        self.invocations[layer as usize].fetch_add(1, Ordering::SeqCst);
        trace.push(layer);
        let faulty = self.faults.load(Ordering::SeqCst) & layer_bit(layer) != 0;
        let result = catch_unwind(AssertUnwindSafe(|| {
            if faulty {
                panic!("injected fault in layer {}", layer.name());
            }
            f()
        }));
        result.unwrap_or_else(|_| Err(Denial::internal(layer)))
    }

    fn refuse(&self, denial: Denial, source: &str, now: u64, trace: Vec<Layer>, id: Option<RequestId>) -> GatewayResponse {
        self.record(now, denial.kind, source, denial.detail);
        GatewayResponse {
            status: denial.status,
            body: denial.message.to_string(),
            verdict: *denial.verdict,
            trace,
            request_id: id,
        }
    }

    /// Handles a request that arrived on the public binding.
    pub fn handle(&self, raw: &RawRequest, now: u64) -> GatewayResponse {
        self.handle_on(Binding::Public, raw, now)
    }

    pub fn handle_on(&self, binding: Binding, raw: &RawRequest, now: u64) -> GatewayResponse {
        let mut trace = Vec::with_capacity(Layer::ORDER.len());
        let source = raw.source.as_str();

        let dos = self.step(Layer::DosGuard, &mut trace, || {
            let v = self.dos.record_and_check(source, now);
            if v.is_deny() {
                let detail = format!("{}: {}", v.reason, v.detail);
                return Err(Denial {
                    verdict: Box::new(v),
                    status: 429,
                    message: MSG_RATE,
                    kind: ThreatKind::RateExceeded,
                    detail,
                });
            }
            Ok(())
        });
        if let Err(d) = dos {
            return self.refuse(d, source, now, trace, None);
        }

        if raw.path == LOGIN_PATH {
            return self.login(raw, now, trace);
        }

        let sanitized = self.step(Layer::Sanitizer, &mut trace, || {
            let mut req = canonicalize_request(raw).map_err(|e| {
                Denial::new(Layer::Sanitizer, "malformed", 400, MSG_BAD_REQUEST, ThreatKind::Malformed, e.to_string())
            })?;
            // The gateway clock is authoritative.
            req.received_at = now;
            let policy = self.sanitization();
            let (clean, removed) = sanitize_request(&req, &policy);
            Ok((clean, removed, policy.reports()))
        });
        let req = match sanitized {
            Err(d) => return self.refuse(d, source, now, trace, None),
            Ok((req, removed, report)) => {
                if report && removed > 0 {
                    self.record(
                        now,
                        ThreatKind::Sanitized,
                        source,
                        format!("{} {removed} characters removed", req.request_id),
                    );
                }
                req
            }
        };
        let id = Some(req.request_id);

        let identity = self.step(Layer::Ims, &mut trace, || self.authenticate(&req, now));
        let identity = match identity {
            Ok(i) => i,
            Err(d) => return self.refuse(d, source, now, trace, id),
        };

        let rules = self.step(Layer::RuleEngine, &mut trace, || {
            let set = self.rules();
            let result = evaluate_with(&req, &set, self.eval);
            Ok(result)
        });
        match rules {
            Err(d) => return self.refuse(d, source, now, trace, id),
            Ok(result) => {
                for logged in &result.logged {
                    // Log-only matches are recorded but not treated as attacks.
                    self.append(ThreatEvent::new(
                        now,
                        ThreatKind::RuleMatch,
                        source,
                        format!("logged rule {}: {}", logged.rule_id, logged.excerpt),
                    ));
                }
                if result.verdict.is_deny() {
                    let detail = format!(
                        "{} {}: {}",
                        req.request_id,
                        result.verdict.detail,
                        result.matched_value.unwrap_or_default()
                    );
                    let d = Denial {
                        verdict: Box::new(result.verdict),
                        status: 403,
                        message: MSG_REFUSED,
                        kind: ThreatKind::RuleMatch,
                        detail,
                    };
                    return self.refuse(d, source, now, trace, id);
                }
            }
        }

        let action = self.step(Layer::ActionFilter, &mut trace, || {
            let deny = || {
                Denial::new(
                    Layer::ActionFilter,
                    "unknown-action",
                    403,
                    MSG_REFUSED,
                    ThreatKind::UnknownAction,
                    format!("{} {}/{}", req.request_id, req.service, req.action),
                )
            };
            if req.service == ADMIN_SERVICE && binding != Binding::Admin {
                return Err(deny());
            }
            if check_action(&req, &self.registry()).is_deny() {
                return Err(deny());
            }
            Ok(())
        });
        if let Err(d) = action {
            return self.refuse(d, source, now, trace, id);
        }

        let function = format!("{}.{}", req.service, req.action);
        let permitted = self.step(Layer::Permission, &mut trace, || {
            if self.permits(&identity.subject, &function) {
                Ok(())
            } else {
                Err(Denial::new(
                    Layer::Permission,
                    "permission",
                    403,
                    MSG_REFUSED,
                    ThreatKind::PermissionDenied,
                    format!("{} {} may not call {function}", req.request_id, identity.subject),
                ))
            }
        });
        if let Err(d) = permitted {
            return self.refuse(d, source, now, trace, id);
        }

        self.dispatch(&req, &identity, now, trace)
    }

    fn authenticate(&self, req: &Request, now: u64) -> Result<Identity, Denial> {
        let auth = |reason: &str, kind: ThreatKind, detail: String| {
            Denial::new(Layer::Ims, reason, 401, MSG_AUTH, kind, format!("{} {detail}", req.request_id))
        };
        let cert = req
            .certificate
            .as_deref()
            .ok_or_else(|| auth("missing-certificate", ThreatKind::AuthFailed, "no certificate".into()))?;
        let identity = self.ims.validate_certificate(cert.as_bytes(), now).map_err(|e| {
            let (reason, kind) = match e {
                ImsError::Forged => ("forged", ThreatKind::Forgery),
                ImsError::Expired => ("expired", ThreatKind::Expired),
                ImsError::Replayed => ("replayed", ThreatKind::Replay),
                _ => ("auth-failed", ThreatKind::AuthFailed),
            };
            auth(reason, kind, e.to_string())
        })?;
        match self.ims.principal(&identity.subject) {
            Some(p) if p.enabled => {}
            _ => {
                return Err(auth(
                    "auth-failed",
                    ThreatKind::AuthFailed,
                    format!("principal {} unknown or disabled", identity.subject),
                ))
            }
        }
        if !identity.scope.contains(&req.service) {
            return Err(Denial::new(
                Layer::Ims,
                "out-of-scope",
                403,
                MSG_REFUSED,
                ThreatKind::PermissionDenied,
                format!("{} {} not scoped for {}", req.request_id, identity.subject, req.service),
            ));
        }
        Ok(identity)
    }

    fn dispatch(&self, req: &Request, identity: &Identity, now: u64, mut trace: Vec<Layer>) -> GatewayResponse {
        let id = Some(req.request_id);
        let source = req.source.as_str();
        let tier2 = Tier2::new(&self.breaker, &self.vault, &self.vault_key);
        let outcome = self.step(Layer::Breaker, &mut trace, || {
            if req.service == ADMIN_SERVICE {
                return Ok(self.admin(req, identity, now));
            }
            let Some(svc) = self.services.get(&req.service).filter(|s| s.serves(&req.action)) else {
                return Ok(Err(ServiceError::Failed("no handler".into())));
            };
            let call = ServiceCall {
                request: req,
                subject: &identity.subject,
                now,
                tier2: &tier2,
            };
            match catch_unwind(AssertUnwindSafe(|| svc.invoke(&req.action, &call))) {
                Ok(r) => Ok(r.map(|body| (200, body))),
                Err(_) => Ok(Err(ServiceError::Failed("handler panicked".into()))),
            }
        });

        // Data-tier events are audited only now, outside any guarded call.
        for (kind, detail) in tier2.events.take() {
            self.record(now, kind, source, format!("{} {detail}", req.request_id));
        }
        let refused = tier2.refused.take();

        let result = match outcome {
            Err(d) => return self.refuse(d, source, now, trace, id),
            Ok(r) => r,
        };
        let service_denial = |reason: &str, status, message, kind, detail: String| Denial {
            verdict: Box::new(Verdict::deny(Layer::Breaker, reason, detail.clone())),
            status,
            message,
            kind,
            detail: format!("{} {detail}", req.request_id),
        };
        let denial = match (refused, result) {
            (true, _) | (false, Err(ServiceError::TierIsolated)) => service_denial(
                "tier-isolated",
                503,
                MSG_UNAVAILABLE,
                ThreatKind::TierRefused,
                format!("{}/{} refused: data tier isolated", req.service, req.action),
            ),
            (false, Ok((status, body))) => {
                return GatewayResponse {
                    status,
                    body,
                    verdict: Verdict::allow(Layer::Breaker, "dispatched"),
                    trace,
                    request_id: id,
                }
            }
            (false, Err(ServiceError::NotFound)) => {
                return self.service_reply(404, "not found", trace, id);
            }
            (false, Err(ServiceError::BadInput(m))) => {
                return self.service_reply(400, &m, trace, id);
            }
            (false, Err(ServiceError::TamperedRecord)) => {
                // Already audited as TamperedRecord above.
                return GatewayResponse {
                    status: 502,
                    body: MSG_UPSTREAM.to_string(),
                    verdict: Verdict::deny(Layer::Breaker, "tampered-record", "stored record failed authentication"),
                    trace,
                    request_id: id,
                };
            }
            (false, Err(ServiceError::Failed(m))) => service_denial(
                "upstream-failure",
                502,
                MSG_UPSTREAM,
                ThreatKind::UpstreamFailure,
                format!("{}/{}: {m}", req.service, req.action),
            ),
        };
        self.refuse(denial, source, now, trace, id)
    }

    fn service_reply(&self, status: u16, body: &str, trace: Vec<Layer>, id: Option<RequestId>) -> GatewayResponse {
        GatewayResponse {
            status,
            body: format!("{body}\n"),
            verdict: Verdict::allow(Layer::Breaker, "dispatched"),
            trace,
            request_id: id,
        }
    }

    /// Operator functions, reachable only on the admin binding.
    fn admin(&self, req: &Request, identity: &Identity, now: u64) -> Result<(u16, String), ServiceError> {
        let operator = identity.subject.as_str();
        let param = |k: &str| req.query_value(k).map(str::to_string).filter(|v| !v.is_empty());
        let need = |k: &str| param(k).ok_or_else(|| ServiceError::BadInput(format!("missing {k}")));
        match req.action.as_str() {
            "status" => {
                let link = self.breaker.link();
                Ok((
                    200,
                    format!(
                        "link={}\ntrip_count={}\ntier2_operations={}\nrules={}\nregistry={}\naudit_events={}\n",
                        if link.is_isolated() { "isolated" } else { "connected" },
                        link.trip_count,
                        self.breaker.tier2_operations(),
                        self.rules().version(),
                        self.registry().version(),
                        self.audit.len(),
                    ),
                ))
            }
            "reset_breaker" => match self.reset_breaker(operator, now) {
                Ok(()) => Ok((200, "link=connected\n".into())),
                Err(ResetError::PermissionDenied { .. }) => Ok((403, format!("{MSG_REFUSED}\n"))),
                Err(e) => Ok((409, format!("{e}\n"))),
            },
            "set_permission" => {
                let function = need("function")?;
                let class = need("class")?;
                let allowed = match param("allowed").as_deref() {
                    None | Some("true") | Some("1") => true,
                    Some("false") | Some("0") => false,
                    Some(_) => return Err(ServiceError::BadInput("allowed".into())),
                };
                match self.set_permission(&function, &class, allowed, operator, now) {
                    Ok(_) => Ok((200, format!("{function} {class} {allowed}\n"))),
                    Err(_) => Ok((403, format!("{MSG_REFUSED}\n"))),
                }
            }
            "grant_link" => {
                let caller = need("caller")?;
                let callee = need("callee")?;
                match self.ims.grant_service_link(&caller, &callee, now) {
                    Ok(grant) => {
                        self.record(
                            now,
                            ThreatKind::AdminChange,
                            operator,
                            format!("service link {caller} -> {callee} granted"),
                        );
                        Ok((200, format!("{}\n", grant.certificate.encode())))
                    }
                    Err(e) => Ok((409, format!("{e}\n"))),
                }
            }
            _ => Err(ServiceError::NotFound),
        }
    }

    /// Exchanges `id`, `secret` and optional `scope`, `ttl_ms`, `single_use`
    /// form fields for an encoded certificate.
    fn login(&self, raw: &RawRequest, now: u64, mut trace: Vec<Layer>) -> GatewayResponse {
        let source = raw.source.clone();
        let outcome = self.step(Layer::Ims, &mut trace, || {
            let bad = |what: &str| {
                Denial::new(Layer::Ims, "malformed", 400, MSG_BAD_REQUEST, ThreatKind::Malformed, format!("login: {what}"))
            };
            let form = parse_form(&raw.body).ok_or_else(|| bad("form encoding"))?;
            let field = |k: &str| form.iter().find(|(fk, _)| fk == k).map(|(_, v)| v.as_str());
            let id = field("id").ok_or_else(|| bad("missing id"))?;
            let secret = field("secret").ok_or_else(|| bad("missing secret"))?;
            let scope: BTreeSet<String> = field("scope")
                .unwrap_or("")
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            let ttl = match field("ttl_ms") {
                None => DEFAULT_LOGIN_TTL_MS.min(self.ims.config().max_ttl_ms),
                Some(t) => t.parse().map_err(|_| bad("ttl_ms"))?,
            };
            let single_use = matches!(field("single_use"), Some("1") | Some("true"));
            self.ims
                .issue_certificate(id, secret, scope, now, ttl, single_use)
                .map(|cert| (id.to_string(), cert.encode()))
                .map_err(|e| match e {
                    ImsError::InvalidTtl { .. } | ImsError::InvalidName(_) => bad(&e.to_string()),
                    _ => Denial::new(
                        Layer::Ims,
                        "auth-failed",
                        401,
                        MSG_AUTH,
                        ThreatKind::AuthFailed,
                        format!("login as {id:?} failed"),
                    ),
                })
        });
        match outcome {
            Err(d) => self.refuse(d, &source, now, trace, None),
            Ok((id, cert)) => GatewayResponse {
                status: 200,
                body: format!("{cert}\n"),
                verdict: Verdict::allow(Layer::Ims, format!("issued to {id}")),
                trace,
                request_id: None,
            },
        }
    }
}

fn parse_form(body: &[u8]) -> Option<Vec<(String, String)>> {
    let text = std::str::from_utf8(body).ok()?;
    let mut out = Vec::new();
    for pair in text.trim().split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        let k = String::from_utf8(percent_decode(k, true).ok()?).ok()?;
        let v = String::from_utf8(percent_decode(v, true).ok()?).ok()?;
        out.push((k, v));
    }
    Some(out)
}
