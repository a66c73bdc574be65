//! Attack corpora and the evaluation driver.
//!
//! Each scenario runs against a fresh [`Environment`] seeded from the
//! scenario seed, driven in-process with a scripted clock, so a report is a
//! pure function of `(scenarios, n, seeds)`. Every corpus entry is checked
//! against a per-module oracle before the gateway sees it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::action_filter::ActionRegistry;
use crate::domain::{canonicalize_request, percent_encode, Layer, RawRequest, ThreatEvent, ThreatKind, CERT_HEADER};
use crate::dos_guard::RateLimitConfig;
use crate::gateway::{ClassDirectory, Gateway, GatewayResponse, PermissionTable};
use crate::ids_breaker::DetectionPolicy;
use crate::ims::{Ims, ImsConfig, ImsError, PrincipalKind};
use crate::rules::{evaluate, RuleSet};
use crate::sanitizer::{sanitize_request, SanitizationPolicy};
use crate::vault::{Vault, VaultKey};

/// Bundled injection corpus: `class<TAB>payload` lines.
pub const INJECTION_PAYLOADS: &str = include_str!("../assets/injection_payloads.txt");

/// Start of the scripted clock.
pub const EPOCH_MS: u64 = 1_700_000_000_000;
/// Clock advance between requests that are not part of a flood.
pub const STEP_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioKind {
    ForgedCert,
    ReplayedCert,
    TamperedCert,
    InjectionPayload,
    UnknownAction,
    Flood,
    Benign,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::ForgedCert,
        ScenarioKind::ReplayedCert,
        ScenarioKind::TamperedCert,
        ScenarioKind::InjectionPayload,
        ScenarioKind::UnknownAction,
        ScenarioKind::Flood,
        ScenarioKind::Benign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::ForgedCert => "ForgedCert",
            ScenarioKind::ReplayedCert => "ReplayedCert",
            ScenarioKind::TamperedCert => "TamperedCert",
            ScenarioKind::InjectionPayload => "InjectionPayload",
            ScenarioKind::UnknownAction => "UnknownAction",
            ScenarioKind::Flood => "Flood",
            ScenarioKind::Benign => "Benign",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown scenario {0:?}")]
pub struct UnknownScenario(pub String);

impl FromStr for ScenarioKind {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| *c != '-' && *c != '_').collect();
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub class: String,
    pub text: String,
}

/// Parses the bundled payload list.
pub fn injection_payloads() -> Vec<Payload> {
    INJECTION_PAYLOADS
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('\t'))
        .map(|(class, text)| Payload {
            class: class.to_string(),
            text: text.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioParams {
    /// Bits flipped in each bit-flipped forged certificate.
    pub bit_flips: u32,
    pub payloads: Vec<Payload>,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            bit_flips: 1,
            payloads: injection_payloads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackScenario {
    pub kind: ScenarioKind,
    pub params: ScenarioParams,
    pub seed: u64,
}

impl AttackScenario {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            kind,
            params: ScenarioParams::default(),
            seed,
        }
    }
}

/// Known test principals: `(id, secret, kind)`. `root` is also in the
/// `admin` class.
pub const PRINCIPALS: [(&str, &str, PrincipalKind); 5] = [
    ("alice", "alice-secret-1", PrincipalKind::User),
    ("bob", "bob-secret-22", PrincipalKind::User),
    ("carol", "carol-secret-333", PrincipalKind::User),
    ("quotes-feed", "feed-secret-4444", PrincipalKind::Service),
    ("root", "root-secret-55555", PrincipalKind::User),
];

pub const BUSINESS_SERVICES: [&str; 3] = ["trading", "contracts", "banking"];

/// Rate limit used by the harness: 20 requests per second, 5 s bans.
pub fn harness_rate_limit() -> RateLimitConfig {
    RateLimitConfig {
        max_requests: 20,
        window_ms: 1_000,
        ban_ms: 5_000,
        max_tracked_sources: 100_000,
    }
}

/// Breaker policy used by the harness: 3 watched events in 5 s.
pub fn harness_detection() -> DetectionPolicy {
    DetectionPolicy {
        threshold: 3,
        window_ms: 5_000,
        watched: DetectionPolicy::default_watched(),
        cooldown_ms: 30_000,
    }
}

/// Secret hashing cost for harness principals. Lower than the production
/// default so that environments are cheap to build.
pub const HARNESS_HASH_ROUNDS: u32 = 1_000;

/// A gateway with the starter configuration and the known principals, fully
/// determined by `seed`.
pub struct Environment {
    pub gateway: Gateway,
    pub ims: Arc<Ims>,
    seed: u64,
}

impl fmt::Debug for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Environment").field("seed", &self.seed).finish_non_exhaustive()
    }
}

fn derive_key(seed: u64, label: &[u8]) -> [u8; 32] {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut skip = [0u8; 32];
    for _ in 0..label.len() {
        rng.fill_bytes(&mut skip);
    }
    let mut key = [0u8; 32];
    rng.fill_bytes(&mut key);
    for (k, l) in key.iter_mut().zip(label.iter().cycle()) {
        *k ^= l;
    }
    key
}

impl Environment {
    pub fn new(seed: u64) -> Self {
        Self::with_sanitization(seed, SanitizationPolicy::production())
    }

    pub fn with_sanitization(seed: u64, policy: SanitizationPolicy) -> Self {
        let ims = Arc::new(Ims::with_seed(
            derive_key(seed, b"ims"),
            ImsConfig {
                hash_rounds: HARNESS_HASH_ROUNDS,
                ..ImsConfig::default()
            },
            seed,
        ));
        for (id, secret, kind) in PRINCIPALS {
            ims.register_principal(id, secret, kind).expect("harness principals are valid");
        }
        let gateway = Gateway::builder(ims.clone())
            .sanitization(policy)
            .rate_limit(harness_rate_limit())
            .detection(harness_detection())
            .permissions(PermissionTable::starter())
            .classes(ClassDirectory::new().with("admin", "root"))
            .vault(Vault::in_memory(), VaultKey::from_bytes(derive_key(seed, b"vault")))
            .build()
            .expect("harness gateway configuration is valid");
        Self { gateway, ims, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn secret_of(id: &str) -> &'static str {
        PRINCIPALS
            .iter()
            .find(|(p, _, _)| *p == id)
            .map(|(_, s, _)| *s)
            .expect("known principal")
    }

    /// Logs in as a known principal and returns the encoded certificate.
    pub fn login(&self, id: &str, scope: &[&str], now: u64, ttl_ms: u64, single_use: bool) -> String {
        self.ims
            .issue_certificate(
                id,
                Self::secret_of(id),
                scope.iter().map(|s| s.to_string()).collect(),
                now,
                ttl_ms,
                single_use,
            )
            .expect("known principal logs in")
            .encode()
    }
}

/// Layer that must deny an entry, or `None` for benign traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Allow,
    Deny(Layer),
    /// Either outcome is acceptable for this entry on its own; the scenario
    /// expectation constrains the totals (replay and flood).
    Either,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub request: RawRequest,
    /// Clock value at which the entry is sent.
    pub at: u64,
    pub expected: Expected,
    pub binding_admin: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("corpus entry {index} failed its oracle: {reason}")]
pub struct OracleFailure {
    pub index: usize,
    pub reason: String,
}

fn source_for(rng: &mut ChaCha20Rng) -> String {
    format!(
        "10.{}.{}.{}:{}",
        rng.gen_range(0..=255u8),
        rng.gen_range(0..=255u8),
        rng.gen_range(1..=254u8),
        rng.gen_range(1024..=65535u16)
    )
}

fn with_cert(req: RawRequest, cert: &[u8]) -> RawRequest {
    req.header(CERT_HEADER, cert).header("user-agent", "harness/1.0")
}

fn flip_bits(cert: &str, flips: u32, rng: &mut ChaCha20Rng) -> Vec<u8> {
    let mut bytes = cert.as_bytes().to_vec();
    let bits = bytes.len() * 8;
    let mut chosen = BTreeSet::new();
    while chosen.len() < (flips.max(1) as usize).min(bits) {
        chosen.insert(rng.gen_range(0..bits));
    }
    for bit in chosen {
        bytes[bit / 8] ^= 1 << (bit % 8);
    }
    bytes
}

/// Rewrites one signed field of an encoded certificate, keeping the tag.
fn tamper(cert: &str, variant: u32) -> Vec<u8> {
    let plain = String::from_utf8(STANDARD.decode(cert).expect("issued certificates decode"))
        .expect("certificate plaintext is ASCII");
    let fields: Vec<String> = plain
        .split(';')
        .map(|f| {
            let (k, v) = f.split_once('=').unwrap_or((f, ""));
            let v = match (variant % 4, k) {
                (0, "sub") => "root".to_string(),
                (1, "scope") => format!("{v},admin"),
                (2, "exp") => (v.parse::<u64>().unwrap_or(0) + 86_400_000).to_string(),
                (3, "su") => if v == "0" { "1" } else { "0" }.to_string(),
                _ => v.to_string(),
            };
            format!("{k}={v}")
        })
        .collect();
    STANDARD.encode(fields.join(";")).into_bytes()
}

const ACTION_WORDS: [&str; 10] = [
    "drop_tables", "export_all", "debug", "shell", "transfer_all", "delete_account", "dump", "eval", "backup",
    "config",
];

const SEARCH_WORDS: [&str; 8] = ["acme", "globex", "initech", "umbrella", "steel", "energy", "bonds", "tech"];

/// Generates `n` requests for `scenario` against `env`. Certificates are
/// obtained from `env`, so the corpus is byte-identical for equal seeds.
pub fn generate_corpus(env: &Environment, scenario: &AttackScenario, n: usize) -> Vec<CorpusEntry> {
    let n = n.max(1);
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed ^ 0x5eed_0000_0000_0000 ^ scenario.kind as u64);
    let ttl = 3_600_000;
    let t0 = EPOCH_MS;
    let mut out = Vec::with_capacity(n);
    match scenario.kind {
        ScenarioKind::ForgedCert => {
            let template = env.login("alice", &["trading"], t0, ttl, false);
            for i in 0..n {
                let cert = if i % 2 == 0 {
                    let len = rng.gen_range(64..=512);
                    let mut blob = vec![0u8; len];
                    rng.fill_bytes(&mut blob);
                    STANDARD.encode(blob).into_bytes()
                } else {
                    flip_bits(&template, scenario.params.bit_flips, &mut rng)
                };
                let req = with_cert(RawRequest::new(source_for(&mut rng), "/svc/trading/list_quotes", 0), &cert);
                out.push(CorpusEntry {
                    request: req,
                    at: t0 + 1 + i as u64 * STEP_MS,
                    expected: Expected::Deny(Layer::Ims),
                    binding_admin: false,
                });
            }
        }
        ScenarioKind::ReplayedCert => {
            let cert = env.login("alice", &["trading"], t0, ttl, true);
            let source = source_for(&mut rng);
            let req = with_cert(RawRequest::new(source, "/svc/trading/list_quotes", 0), cert.as_bytes());
            for i in 0..n {
                out.push(CorpusEntry {
                    request: req.clone(),
                    // One per 100 ms keeps a single source under the rate limit.
                    at: t0 + 1 + i as u64 * STEP_MS,
                    expected: Expected::Either,
                    binding_admin: false,
                });
            }
        }
        ScenarioKind::TamperedCert => {
            for i in 0..n {
                let user = PRINCIPALS[i % 3].0;
                let cert = env.login(user, &["trading"], t0, ttl, false);
                let forged = tamper(&cert, i as u32);
                let req = with_cert(RawRequest::new(source_for(&mut rng), "/svc/trading/list_quotes", 0), &forged);
                out.push(CorpusEntry {
                    request: req,
                    at: t0 + 1 + i as u64 * STEP_MS,
                    expected: Expected::Deny(Layer::Ims),
                    binding_admin: false,
                });
            }
        }
        ScenarioKind::InjectionPayload => {
            let cert = env.login("bob", &["trading"], t0, ttl, false);
            let payloads = &scenario.params.payloads;
            assert!(!payloads.is_empty(), "injection scenario needs payloads");
            for i in 0..n {
                let p = &payloads[i % payloads.len()];
                let in_query = (i / payloads.len()).is_multiple_of(2);
                let base = if in_query {
                    RawRequest::new(
                        source_for(&mut rng),
                        &format!("/svc/trading/search?q={}", percent_encode(&p.text)),
                        0,
                    )
                } else {
                    RawRequest::new(source_for(&mut rng), "/svc/trading/search", 0)
                        .body(format!("q={}", p.text).into_bytes())
                };
                out.push(CorpusEntry {
                    request: with_cert(base, cert.as_bytes()),
                    at: t0 + 1 + i as u64 * STEP_MS,
                    expected: Expected::Deny(Layer::RuleEngine),
                    binding_admin: false,
                });
            }
        }
        ScenarioKind::UnknownAction => {
            let cert = env.login("carol", &BUSINESS_SERVICES, t0, ttl, false);
            let registry = env.gateway.registry();
            for i in 0..n {
                let service = BUSINESS_SERVICES[rng.gen_range(0..BUSINESS_SERVICES.len())];
                let action = loop {
                    let a = if rng.gen_bool(0.5) {
                        ACTION_WORDS[rng.gen_range(0..ACTION_WORDS.len())].to_string()
                    } else {
                        let len = rng.gen_range(3..12);
                        (0..len).map(|_| char::from(rng.gen_range(b'a'..=b'z'))).collect()
                    };
                    if !registry.contains(service, &a) {
                        break a;
                    }
                };
                let req = RawRequest::new(source_for(&mut rng), &format!("/svc/{service}/{action}"), 0);
                out.push(CorpusEntry {
                    request: with_cert(req, cert.as_bytes()),
                    at: t0 + 1 + i as u64 * STEP_MS,
                    expected: Expected::Deny(Layer::ActionFilter),
                    binding_admin: false,
                });
            }
        }
        ScenarioKind::Flood => {
            let cert = env.login("alice", &["trading"], t0, ttl, false);
            let source = source_for(&mut rng);
            let window = env.gateway.dos_guard().config().window_ms;
            let spacing = window / n as u64;
            for i in 0..n {
                let req = RawRequest::new(source.clone(), "/svc/trading/list_quotes", 0);
                out.push(CorpusEntry {
                    request: with_cert(req, cert.as_bytes()),
                    at: t0 + 1 + i as u64 * spacing,
                    expected: Expected::Either,
                    binding_admin: false,
                });
            }
        }
        ScenarioKind::Benign => {
            let certs: Vec<(&str, String)> = ["alice", "bob", "carol"]
                .into_iter()
                .map(|u| (u, env.login(u, &BUSINESS_SERVICES, t0, ttl, false)))
                .collect();
            for i in 0..n {
                let (user, cert) = &certs[rng.gen_range(0..certs.len())];
                let source = source_for(&mut rng);
                let base = match rng.gen_range(0..5) {
                    0 => RawRequest::new(source, "/svc/trading/list_quotes", 0),
                    1 => {
                        let sym = ["ACME", "GLOBEX", "INITECH", "UMBRELLA"][rng.gen_range(0..4)];
                        RawRequest::new(source, &format!("/svc/trading/get_quote?symbol={sym}"), 0)
                    }
                    2 => {
                        let q = SEARCH_WORDS[rng.gen_range(0..SEARCH_WORDS.len())];
                        RawRequest::new(source, &format!("/svc/trading/search?q={q}"), 0)
                    }
                    3 => RawRequest::new(
                        source,
                        &format!("/svc/banking/deposit?account={user}-{}&amount={}", rng.gen_range(1..5), rng.gen_range(1..10_000)),
                        0,
                    ),
                    _ => RawRequest::new(source, "/svc/contracts/create_contract", 0).body(
                        format!("party=Supplier {}&amount={}", rng.gen_range(1..100), rng.gen_range(100..100_000))
                            .into_bytes(),
                    ),
                };
                out.push(CorpusEntry {
                    request: with_cert(base, cert.as_bytes()),
                    at: t0 + 1 + i as u64 * STEP_MS,
                    expected: Expected::Allow,
                    binding_admin: false,
                });
            }
        }
    }
    out
}

/// Checks every entry's label with module-level oracles, independently of
/// the pipeline. Certificates are inspected without being consumed.
pub fn verify_corpus(env: &Environment, kind: ScenarioKind, corpus: &[CorpusEntry]) -> Result<(), OracleFailure> {
    let fail = |index: usize, reason: String| Err(OracleFailure { index, reason });
    let rules: Arc<RuleSet> = env.gateway.rules();
    let registry: Arc<ActionRegistry> = env.gateway.registry();
    let policy = env.gateway.sanitization();
    for (i, entry) in corpus.iter().enumerate() {
        let cert = entry
            .request
            .headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(CERT_HEADER.as_bytes()))
            .map(|(_, v)| v.as_slice())
            .unwrap_or_default();
        let inspected = env.ims.inspect_certificate(cert, entry.at);
        match kind {
            ScenarioKind::ForgedCert | ScenarioKind::TamperedCert => {
                if inspected != Err(ImsError::Forged) {
                    return fail(i, format!("certificate not rejected as forged: {inspected:?}"));
                }
            }
            ScenarioKind::ReplayedCert => {
                if inspected.is_err() || entry.request != corpus[0].request {
                    return fail(i, "replay entries must repeat one valid certificate".into());
                }
            }
            ScenarioKind::Flood => {
                let window = env.gateway.dos_guard().config().window_ms;
                if entry.request.source != corpus[0].request.source || entry.at >= corpus[0].at + window {
                    return fail(i, "flood entries must share a source and one window".into());
                }
            }
            ScenarioKind::InjectionPayload | ScenarioKind::UnknownAction | ScenarioKind::Benign => {
                let req = match canonicalize_request(&entry.request) {
                    Ok(r) => r,
                    Err(e) => return fail(i, format!("not canonicalizable: {e}")),
                };
                let (req, _) = sanitize_request(&req, &policy);
                let identity = match inspected {
                    Ok(id) => id,
                    Err(e) => return fail(i, format!("certificate invalid: {e}")),
                };
                let rule_deny = evaluate(&req, &rules).verdict.is_deny();
                let registered = registry.contains(&req.service, &req.action);
                let permitted = env
                    .gateway
                    .permits(&identity.subject, &format!("{}.{}", req.service, req.action));
                let scoped = identity.scope.contains(&req.service);
                let ok = match kind {
                    ScenarioKind::InjectionPayload => scoped && rule_deny,
                    ScenarioKind::UnknownAction => scoped && !rule_deny && !registered,
                    _ => scoped && !rule_deny && registered && permitted,
                };
                if !ok {
                    return fail(
                        i,
                        format!("scoped={scoped} rule_deny={rule_deny} registered={registered} permitted={permitted}"),
                    );
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub sent: u64,
    pub denied: u64,
    pub allowed: u64,
    /// Denials per deciding layer.
    pub layers: BTreeMap<Layer, u64>,
    /// Denials per reason code.
    pub reasons: BTreeMap<String, u64>,
    /// Entries whose outcome disagreed with their label.
    pub mislabeled: u64,
    pub expectation: String,
    pub met: bool,
}

impl ScenarioResult {
    pub fn block_rate(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            self.denied as f64 / self.sent as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub n: usize,
    pub results: Vec<ScenarioResult>,
    /// Breaker trips observed during each scenario.
    pub trips: Vec<(ScenarioKind, ThreatEvent)>,
}

impl EvaluationReport {
    pub fn result(&self, kind: ScenarioKind) -> Option<&ScenarioResult> {
        self.results.iter().find(|r| r.kind == kind)
    }

    /// Share of benign requests that were denied, if Benign ran.
    pub fn benign_false_positive_rate(&self) -> Option<f64> {
        self.result(ScenarioKind::Benign).map(ScenarioResult::block_rate)
    }

    pub fn all_met(&self) -> bool {
        self.results.iter().all(|r| r.met)
    }

    /// `scenario<TAB>sent<TAB>denied<TAB>allowed<TAB>block_rate` lines.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{:.4}", r.kind, r.sent, r.denied, r.allowed, r.block_rate());
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>7} {:>8} {:>10}  {:<5} deny layers",
            "scenario", "sent", "denied", "allowed", "block_rate", "ok"
        );
        for r in &self.results {
            let layers = r
                .layers
                .iter()
                .map(|(l, c)| format!("{}={c}", l.name()))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                out,
                "{:<18} {:>6} {:>7} {:>8} {:>10.4}  {:<5} {}",
                r.kind.name(),
                r.sent,
                r.denied,
                r.allowed,
                r.block_rate(),
                if r.met { "yes" } else { "NO" },
                layers
            );
        }
        if let Some(fp) = self.benign_false_positive_rate() {
            let _ = writeln!(out, "benign false-positive rate: {fp:.4}");
        }
        for r in self.results.iter().filter(|r| !r.met) {
            let _ = writeln!(out, "expectation missed: {}: {}", r.kind, r.expectation);
        }
        if self.trips.is_empty() {
            let _ = writeln!(out, "breaker trips: none");
        } else {
            let _ = writeln!(out, "breaker trips:");
            for (kind, e) in &self.trips {
                let _ = writeln!(out, "  {kind} at +{} ms: {}", e.at.saturating_sub(EPOCH_MS), e.detail);
            }
        }
        out
    }

    /// The table followed by the machine-readable records.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.table(), self.records())
    }
}

fn expectation(kind: ScenarioKind, sent: u64, denied: u64, allowed: u64, max_requests: u64) -> (String, bool) {
    match kind {
        ScenarioKind::Benign => ("no benign request denied".into(), denied == 0),
        ScenarioKind::ReplayedCert => (
            "exactly one request allowed, the rest denied".into(),
            allowed == 1 && denied == sent - 1,
        ),
        ScenarioKind::Flood => (
            format!("at most {max_requests} requests allowed in the window"),
            allowed <= max_requests,
        ),
        _ => ("every request denied".into(), denied == sent),
    }
}

/// Sends `corpus` through `env` in order and tallies the outcome.
pub fn run_scenario(env: &Environment, scenario: &AttackScenario, corpus: &[CorpusEntry]) -> ScenarioResult {
    let mut layers = BTreeMap::new();
    let mut reasons = BTreeMap::new();
    let (mut denied, mut allowed, mut mislabeled) = (0u64, 0u64, 0u64);
    for entry in corpus {
        let resp = send(env, entry);
        if resp.verdict.is_deny() {
            denied += 1;
            *layers.entry(resp.verdict.layer).or_insert(0) += 1;
            *reasons.entry(resp.verdict.reason.clone()).or_insert(0) += 1;
        } else {
            allowed += 1;
        }
        let agrees = match entry.expected {
            Expected::Allow => resp.verdict.is_allow(),
            Expected::Deny(layer) => resp.verdict.is_deny() && resp.verdict.layer == layer,
            Expected::Either => true,
        };
        if !agrees {
            mislabeled += 1;
        }
    }
    let sent = corpus.len() as u64;
    let max = u64::from(env.gateway.dos_guard().config().max_requests);
    let (text, met) = expectation(scenario.kind, sent, denied, allowed, max);
    ScenarioResult {
        kind: scenario.kind,
        seed: scenario.seed,
        sent,
        denied,
        allowed,
        layers,
        reasons,
        mislabeled,
        expectation: text,
        met: met && mislabeled == 0,
    }
}

fn send(env: &Environment, entry: &CorpusEntry) -> GatewayResponse {
    let binding = if entry.binding_admin {
        crate::gateway::Binding::Admin
    } else {
        crate::gateway::Binding::Public
    };
    env.gateway.handle_on(binding, &entry.request, entry.at)
}

/// Runs each scenario against its own fresh environment.
///
/// Panics if a generated corpus fails its oracle: the harness never grades
/// the gateway on unlabeled input.
pub fn run_evaluation(scenarios: &[AttackScenario], n: usize) -> EvaluationReport {
    let mut results = Vec::new();
    let mut trips = Vec::new();
    for scenario in scenarios {
        let env = Environment::new(scenario.seed);
        let corpus = generate_corpus(&env, scenario, n);
        if let Err(e) = verify_corpus(&env, scenario.kind, &corpus) {
            panic!("{} corpus (seed {}): {e}", scenario.kind, scenario.seed);
        }
        results.push(run_scenario(&env, scenario, &corpus));
        for e in env.gateway.audit().entries() {
            if e.kind == ThreatKind::BreakerTrip {
                trips.push((scenario.kind, e));
            }
        }
    }
    EvaluationReport { n, results, trips }
}

/// Every scenario kind with seeds derived from `seed`.
pub fn standard_scenarios(seed: u64) -> Vec<AttackScenario> {
    ScenarioKind::ALL
        .into_iter()
        .map(|k| AttackScenario::new(k, seed))
        .collect()
}

/// Sends the same corpus from `threads` threads at once, for atomicity
/// checks. Results are returned in corpus order.
pub fn run_concurrently(env: &Environment, corpus: &[CorpusEntry], threads: usize) -> Vec<GatewayResponse> {
    let threads = threads.max(1);
    let mut slots: Vec<Option<GatewayResponse>> = vec![None; corpus.len()];
    std::thread::scope(|s| {
        let chunks: Vec<_> = slots
            .chunks_mut(corpus.len().div_ceil(threads).max(1))
            .zip(corpus.chunks(corpus.len().div_ceil(threads).max(1)))
            .map(|(out, input)| {
                s.spawn(move || {
                    for (slot, entry) in out.iter_mut().zip(input) {
                        *slot = Some(send(env, entry));
                    }
                })
            })
            .collect();
        for c in chunks {
            c.join().expect("harness thread");
        }
    });
    slots.into_iter().map(|r| r.expect("every entry sent")).collect()
}
