//! Shared data model: requests, verdicts, threat events and the audit log.

mod audit;
mod request;

use std::fmt;
use std::str::FromStr;

pub(crate) use request::percent_decode;
pub use audit::{format_line, parse_line, read_audit_file, AuditError, AuditLog};
pub use request::{
    canonicalize_request, percent_encode, MalformedRequest, RawRequest, Request, RequestId, CERT_HEADER,
};

/// Pipeline layers in their fixed execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    DosGuard,
    Sanitizer,
    Ims,
    RuleEngine,
    ActionFilter,
    Permission,
    Breaker,
}

impl Layer {
    pub const ORDER: [Layer; 7] = [
        Layer::DosGuard,
        Layer::Sanitizer,
        Layer::Ims,
        Layer::RuleEngine,
        Layer::ActionFilter,
        Layer::Permission,
        Layer::Breaker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::DosGuard => "dos_guard",
            Layer::Sanitizer => "sanitizer",
            Layer::Ims => "ims",
            Layer::RuleEngine => "rule_engine",
            Layer::ActionFilter => "action_filter",
            Layer::Permission => "permission",
            Layer::Breaker => "breaker",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Allow,
    Deny,
}

/// Outcome of one layer (or of the whole pipeline).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub decision: Decision,
    pub layer: Layer,
    pub reason: String,
    pub detail: String,
    /// Only set for rule-engine denials.
    pub rule_id: Option<String>,
}

impl Verdict {
    pub fn allow(layer: Layer, reason: impl Into<String>) -> Self {
        Self {
            decision: Decision::Allow,
            layer,
            reason: reason.into(),
            detail: String::new(),
            rule_id: None,
        }
    }

    pub fn deny(layer: Layer, reason: impl Into<String>, detail: impl Into<String>) -> Self {
        let reason = reason.into();
        debug_assert!(!reason.is_empty());
        Self {
            decision: Decision::Deny,
            layer,
            reason,
            detail: detail.into(),
            rule_id: None,
        }
    }

    pub fn rule_deny(rule_id: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            rule_id: Some(rule_id.into()),
            ..Self::deny(Layer::RuleEngine, "rule-match", detail)
        }
    }

    pub fn is_allow(&self) -> bool {
        self.decision == Decision::Allow
    }

    pub fn is_deny(&self) -> bool {
        self.decision == Decision::Deny
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ThreatKind {
    Forgery,
    Replay,
    Expired,
    RuleMatch,
    UnknownAction,
    RateExceeded,
    TamperedRecord,
    BreakerTrip,
    PermissionDenied,
    /// A call refused because the data tier is isolated.
    TierRefused,
    /// A business handler failed after every layer allowed the request.
    UpstreamFailure,
    /// The sanitizer rewrote input under a reporting policy.
    Sanitized,
    /// Operator changes: permission edits, breaker resets, enrollment.
    AdminChange,
    /// Missing certificate, failed login, disabled or unknown principal.
    AuthFailed,
    /// A request that could not be canonicalized.
    Malformed,
}

impl ThreatKind {
    pub const ALL: [ThreatKind; 15] = [
        ThreatKind::Forgery,
        ThreatKind::Replay,
        ThreatKind::Expired,
        ThreatKind::RuleMatch,
        ThreatKind::UnknownAction,
        ThreatKind::RateExceeded,
        ThreatKind::TamperedRecord,
        ThreatKind::BreakerTrip,
        ThreatKind::PermissionDenied,
        ThreatKind::TierRefused,
        ThreatKind::UpstreamFailure,
        ThreatKind::Sanitized,
        ThreatKind::AdminChange,
        ThreatKind::AuthFailed,
        ThreatKind::Malformed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThreatKind::Forgery => "Forgery",
            ThreatKind::Replay => "Replay",
            ThreatKind::Expired => "Expired",
            ThreatKind::RuleMatch => "RuleMatch",
            ThreatKind::UnknownAction => "UnknownAction",
            ThreatKind::RateExceeded => "RateExceeded",
            ThreatKind::TamperedRecord => "TamperedRecord",
            ThreatKind::BreakerTrip => "BreakerTrip",
            ThreatKind::PermissionDenied => "PermissionDenied",
            ThreatKind::TierRefused => "TierRefused",
            ThreatKind::UpstreamFailure => "UpstreamFailure",
            ThreatKind::Sanitized => "Sanitized",
            ThreatKind::AdminChange => "AdminChange",
            ThreatKind::AuthFailed => "AuthFailed",
            ThreatKind::Malformed => "Malformed",
        }
    }
}

impl fmt::Display for ThreatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown threat kind {0:?}")]
pub struct UnknownThreatKind(pub String);

impl FromStr for ThreatKind {
    type Err = UnknownThreatKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ThreatKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownThreatKind(s.to_string()))
    }
}

/// Normalized security observation. `seq` is assigned by the [`AuditLog`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreatEvent {
    pub seq: u64,
    pub at: u64,
    pub kind: ThreatKind,
    pub source: String,
    pub detail: String,
}

impl ThreatEvent {
    pub fn new(at: u64, kind: ThreatKind, source: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            seq: 0,
            at,
            kind,
            source: source.into(),
            detail: detail.into(),
        }
    }
}

/// Answers "may this principal call this function".
pub trait Authorizer {
    fn permits(&self, principal: &str, function: &str) -> bool;
}

impl<F: Fn(&str, &str) -> bool> Authorizer for F {
    fn permits(&self, principal: &str, function: &str) -> bool {
        self(principal, function)
    }
}
