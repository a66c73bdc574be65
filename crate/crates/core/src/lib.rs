//! Layered security gateway for service-oriented e-commerce backends.
//!
//! A request passes, in order, through the DoS guard, canonicalization,
//! input sanitization, certificate validation against the identity
//! management service, the rule engine, the action allow-list and the
//! function permission table before it is dispatched to a business service.
//! Business services reach the encrypted data tier only through the
//! intrusion-triggered breaker.

pub mod domain;

pub use domain::{
    canonicalize_request, percent_encode, AuditLog, Decision, Layer, RawRequest, Request, ThreatEvent, ThreatKind,
    CERT_HEADER,
    Verdict,
};
pub mod ims;
pub mod keyfile;
pub mod sanitizer;
pub mod rules;
pub mod action_filter;
pub mod dos_guard;
pub mod ids_breaker;
pub mod vault;
pub mod gateway;
pub mod harness;
