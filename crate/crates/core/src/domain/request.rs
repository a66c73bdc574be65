//! Inbound request model and canonicalization.
//!
//! Every layer of the pipeline sees the [`Request`] produced by
//! [`canonicalize_request`]: percent-encodings decoded exactly once, dot
//! segments resolved, header names lowercased. Filters that run on a single
//! canonical form cannot be bypassed by re-encoding a payload.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Header that carries the encoded IMS certificate.
pub const CERT_HEADER: &str = "x-ims-cert";

static NEXT_REQUEST_ID: AtomicU64 = AtomicU64::new(1);

/// Opaque per-process request identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestId(u64);

impl RequestId {
    fn next() -> Self {
        Self(NEXT_REQUEST_ID.fetch_add(1, Ordering::Relaxed))
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "req-{:016x}", self.0)
    }
}

/// A request as it arrives off the wire, before any interpretation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawRequest {
    pub source: String,
    /// Path as sent, without the query string.
    pub path: String,
    /// Raw query string without the leading `?`.
    pub query: String,
    pub headers: Vec<(Vec<u8>, Vec<u8>)>,
    pub body: Vec<u8>,
    /// Milliseconds since the epoch, supplied by the caller's clock.
    pub received_at: u64,
}

impl RawRequest {
    pub fn new(source: impl Into<String>, target: &str, received_at: u64) -> Self {
        let (path, query) = match target.split_once('?') {
            Some((p, q)) => (p.to_string(), q.to_string()),
            None => (target.to_string(), String::new()),
        };
        Self {
            source: source.into(),
            path,
            query,
            headers: Vec::new(),
            body: Vec::new(),
            received_at,
        }
    }

    pub fn header(mut self, name: impl AsRef<[u8]>, value: impl AsRef<[u8]>) -> Self {
        self.headers
            .push((name.as_ref().to_vec(), value.as_ref().to_vec()));
        self
    }

    pub fn body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedRequest {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid percent-encoding at byte {0}")]
    BadEscape(usize),
    #[error("decoded {0} is not valid UTF-8")]
    NotUtf8(&'static str),
    #[error("path resolves above the root")]
    EscapesRoot,
    #[error("path must be absolute")]
    RelativePath,
    #[error("path still contains an escape sequence after decoding")]
    DoubleEncoded,
    #[error("header name is not valid UTF-8")]
    HeaderName,
}

/// Canonical request. Immutable once built; every field is already decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub request_id: RequestId,
    pub source: String,
    pub service: String,
    pub action: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub query: Vec<(String, String)>,
    pub body: Vec<u8>,
    pub certificate: Option<String>,
    pub received_at: u64,
}

impl Request {
    pub fn header_values<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.headers
            .iter()
            .filter(move |(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn query_values<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.query
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn query_value<'a>(&'a self, key: &'a str) -> Option<&'a str> {
        self.query_values(key).next()
    }

    /// Field-wise equality ignoring the request id.
    pub fn same_content(&self, other: &Request) -> bool {
        Request {
            request_id: other.request_id,
            ..self.clone()
        } == *other
    }

    /// Re-encodes this request into wire form. Canonicalizing the result
    /// yields a request with the same content.
    pub fn to_raw(&self) -> RawRequest {
        let mut headers: Vec<(Vec<u8>, Vec<u8>)> = self
            .headers
            .iter()
            .map(|(n, v)| (n.as_bytes().to_vec(), v.as_bytes().to_vec()))
            .collect();
        if let Some(cert) = &self.certificate {
            headers.push((CERT_HEADER.as_bytes().to_vec(), cert.as_bytes().to_vec()));
        }
        let query = self
            .query
            .iter()
            .map(|(k, v)| format!("{}={}", percent_encode(k), percent_encode(v)))
            .collect::<Vec<_>>()
            .join("&");
        RawRequest {
            source: self.source.clone(),
            path: self
                .path
                .split('/')
                .map(percent_encode)
                .collect::<Vec<_>>()
                .join("/"),
            query,
            headers,
            body: self.body.clone(),
            received_at: self.received_at,
        }
    }

    /// Derives `(service, action)` from a `/svc/<service>/<action>` path.
    pub fn route_of(path: &str) -> (String, String) {
        let mut parts = path.trim_start_matches('/').split('/');
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("svc"), Some(service), Some(action), None)
                if !service.is_empty() && !action.is_empty() =>
            {
                (service.to_string(), action.to_string())
            }
            _ => (String::new(), String::new()),
        }
    }
}

/// Percent-encodes everything except RFC 3986 unreserved characters.
pub fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        b'A'..=b'F' => Some(b - b'A' + 10),
        _ => None,
    }
}

/// Single pass of percent-decoding. `plus_as_space` applies form encoding.
pub(crate) fn percent_decode(input: &str, plus_as_space: bool) -> Result<Vec<u8>, MalformedRequest> {
    let bytes = input.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' => {
                let hi = bytes.get(i + 1).copied().and_then(hex_val);
                let lo = bytes.get(i + 2).copied().and_then(hex_val);
                match (hi, lo) {
                    (Some(h), Some(l)) => out.push(h << 4 | l),
                    _ => return Err(MalformedRequest::BadEscape(i)),
                }
                i += 3;
            }
            b'+' if plus_as_space => {
                out.push(b' ');
                i += 1;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    Ok(out)
}

fn contains_escape(s: &str) -> bool {
    s.as_bytes()
        .windows(3)
        .any(|w| w[0] == b'%' && hex_val(w[1]).is_some() && hex_val(w[2]).is_some())
}

fn canonical_path(raw: &str) -> Result<String, MalformedRequest> {
    let decoded = String::from_utf8(percent_decode(raw, false)?)
        .map_err(|_| MalformedRequest::NotUtf8("path"))?;
    if !decoded.starts_with('/') {
        return Err(MalformedRequest::RelativePath);
    }
    // A residual escape means the client encoded twice; a second decode
    // would be needed to see the real path, so refuse it outright.
    if contains_escape(&decoded) {
        return Err(MalformedRequest::DoubleEncoded);
    }
    let mut stack: Vec<&str> = Vec::new();
    let segments: Vec<&str> = decoded[1..].split('/').collect();
    let last = segments.len() - 1;
    for (i, seg) in segments.iter().enumerate() {
        match *seg {
            "." => {
                if i == last {
                    stack.push("");
                }
            }
            ".." => {
                if stack.pop().is_none() {
                    return Err(MalformedRequest::EscapesRoot);
                }
                if i == last {
                    stack.push("");
                }
            }
            s => stack.push(s),
        }
    }
    Ok(format!("/{}", stack.join("/")))
}

fn canonical_query(raw: &str) -> Result<Vec<(String, String)>, MalformedRequest> {
    let mut out = Vec::new();
    for pair in raw.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        let k = String::from_utf8(percent_decode(k, true)?)
            .map_err(|_| MalformedRequest::NotUtf8("query"))?;
        let v = String::from_utf8(percent_decode(v, true)?)
            .map_err(|_| MalformedRequest::NotUtf8("query"))?;
        out.push((k, v));
    }
    Ok(out)
}

/// Produces the canonical [`Request`] for a raw request record.
pub fn canonicalize_request(raw: &RawRequest) -> Result<Request, MalformedRequest> {
    if raw.source.is_empty() {
        return Err(MalformedRequest::Empty("source"));
    }
    if raw.path.is_empty() {
        return Err(MalformedRequest::Empty("path"));
    }
    let path = canonical_path(&raw.path)?;
    let query = canonical_query(&raw.query)?;

    let mut headers = Vec::with_capacity(raw.headers.len());
    let mut certificate = None;
    for (name, value) in &raw.headers {
        let name = std::str::from_utf8(name)
            .map_err(|_| MalformedRequest::HeaderName)?
            .to_ascii_lowercase();
        let value = String::from_utf8_lossy(value).into_owned();
        if name == CERT_HEADER {
            // First certificate wins; duplicates are dropped rather than merged.
            certificate.get_or_insert(value);
        } else {
            headers.push((name, value));
        }
    }

    let (service, action) = Request::route_of(&path);
    Ok(Request {
        request_id: RequestId::next(),
        source: raw.source.clone(),
        service,
        action,
        path,
        headers,
        query,
        body: raw.body.clone(),
        certificate,
        received_at: raw.received_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_of(p: &str) -> Result<String, MalformedRequest> {
        canonicalize_request(&RawRequest::new("10.0.0.1:4000", p, 0)).map(|r| r.path)
    }

    #[test]
    fn removes_dot_segments() {
        assert_eq!(path_of("/a/./b").unwrap(), "/a/b");
        assert_eq!(path_of("/svc/%2e%2e/admin").unwrap(), "/admin");
        assert_eq!(path_of("/a/b/..").unwrap(), "/a/");
    }

    #[test]
    fn refuses_escape_above_root() {
        assert_eq!(path_of("/../etc/passwd"), Err(MalformedRequest::EscapesRoot));
        assert_eq!(path_of("/a/%2E%2E/%2e%2e/x"), Err(MalformedRequest::EscapesRoot));
    }

    #[test]
    fn bad_escapes_and_double_encoding() {
        assert_eq!(path_of("/a%zz"), Err(MalformedRequest::BadEscape(2)));
        assert_eq!(path_of("/a%2"), Err(MalformedRequest::BadEscape(2)));
        assert_eq!(path_of("/a/%252e%252e/"), Err(MalformedRequest::DoubleEncoded));
        assert_eq!(path_of("/%ff"), Err(MalformedRequest::NotUtf8("path")));
        assert_eq!(path_of("relative"), Err(MalformedRequest::RelativePath));
    }

    #[test]
    fn query_is_decoded_once() {
        let raw = RawRequest::new("s", "/svc/trading/search?q=%2523x&b=a+b", 0);
        let req = canonicalize_request(&raw).unwrap();
        assert_eq!(req.query_value("q"), Some("%23x"));
        assert_eq!(req.query_value("b"), Some("a b"));
    }

    #[test]
    fn headers_lowercased_and_certificate_extracted() {
        let raw = RawRequest::new("s", "/svc/trading/list_quotes", 0)
            .header("Content-Type", "text/plain")
            .header("X-IMS-Cert", "abc");
        let req = canonicalize_request(&raw).unwrap();
        assert_eq!(req.headers, vec![("content-type".into(), "text/plain".into())]);
        assert_eq!(req.certificate.as_deref(), Some("abc"));
        assert_eq!(req.service, "trading");
        assert_eq!(req.action, "list_quotes");

        let bad = RawRequest::new("s", "/", 0).header([0xff, 0xfe], "v");
        assert_eq!(canonicalize_request(&bad), Err(MalformedRequest::HeaderName));
    }

    #[test]
    fn empty_fields_rejected() {
        assert_eq!(
            canonicalize_request(&RawRequest::new("", "/", 0)),
            Err(MalformedRequest::Empty("source"))
        );
        assert_eq!(
            canonicalize_request(&RawRequest::new("s", "", 0)),
            Err(MalformedRequest::Empty("path"))
        );
    }

    #[test]
    fn canonical_request_is_fixed_point() {
        let raw = RawRequest::new("s", "/svc/trading/get_quote?sym=ACME&n=%20x", 5)
            .header("Accept", "*/*")
            .body(b"hello".to_vec());
        let once = canonicalize_request(&raw).unwrap();
        let twice = canonicalize_request(&once.to_raw()).unwrap();
        assert!(once.same_content(&twice));
        assert_ne!(once.request_id, twice.request_id);
    }

    #[test]
    fn route_requires_exact_shape() {
        assert_eq!(Request::route_of("/svc/a/b"), ("a".into(), "b".into()));
        assert_eq!(Request::route_of("/svc/a"), (String::new(), String::new()));
        assert_eq!(Request::route_of("/svc/a/b/c"), (String::new(), String::new()));
        assert_eq!(Request::route_of("/other/a/b"), (String::new(), String::new()));
    }
}
