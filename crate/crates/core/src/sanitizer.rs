//! Character-policy input sanitization.
//!
//! Runs before every other content layer: fields named by the policy are
//! rewritten so they contain only allowed characters. Structural checks
//! (script tags, traversal sequences) belong to the rule engine.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::domain::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Strip,
    Replace(char),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseMode {
    Preserve,
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    QueryValues,
    Body,
    HeaderValues,
    PathSegments,
}

impl Target {
    fn name(self) -> &'static str {
        match self {
            Target::QueryValues => "query",
            Target::Body => "body",
            Target::HeaderValues => "headers",
            Target::PathSegments => "path",
        }
    }
}

/// Allowed alphabet: ASCII letters and/or digits, space, plus extra chars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    pub letters: bool,
    pub digits: bool,
    pub space: bool,
    pub extra: BTreeSet<char>,
}

impl Alphabet {
    pub fn alnum() -> Self {
        Self {
            letters: true,
            digits: true,
            space: false,
            extra: BTreeSet::new(),
        }
    }

    pub fn contains(&self, c: char) -> bool {
        (self.letters && c.is_ascii_alphabetic())
            || (self.digits && c.is_ascii_digit())
            || (self.space && c == ' ')
            || self.extra.contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("replacement {0:?} is not itself an allowed character")]
    ReplacementNotAllowed(char),
    #[error("policy must apply to at least one field")]
    NoTargets,
    #[error("invalid {key}: {value:?}")]
    Syntax { key: &'static str, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SanitizationPolicy {
    allowed: Alphabet,
    strategy: Strategy,
    case_mode: CaseMode,
    applies_to: BTreeSet<Target>,
    report: bool,
}

impl SanitizationPolicy {
    pub fn new(
        allowed: Alphabet,
        strategy: Strategy,
        case_mode: CaseMode,
        applies_to: impl IntoIterator<Item = Target>,
    ) -> Result<Self, PolicyError> {
        let applies_to: BTreeSet<Target> = applies_to.into_iter().collect();
        if applies_to.is_empty() {
            return Err(PolicyError::NoTargets);
        }
        if let Strategy::Replace(c) = strategy {
            if !allowed.contains(c) {
                return Err(PolicyError::ReplacementNotAllowed(c));
            }
        }
        Ok(Self {
            allowed,
            strategy,
            case_mode,
            applies_to,
            report: false,
        })
    }

    /// Letters and digits only, stripped, uppercased: `"#@abc*"` becomes `"ABC"`.
    pub fn paper_compat() -> Self {
        Self::new(
            Alphabet::alnum(),
            Strategy::Strip,
            CaseMode::Upper,
            [Target::QueryValues, Target::Body],
        )
        .expect("static policy is valid")
    }

    /// Printable ASCII is kept and case preserved; control characters and
    /// non-ASCII are stripped. Structural attacks are left for the rules.
    pub fn production() -> Self {
        let extra = (0x21u8..=0x7e)
            .map(char::from)
            .filter(|c| !c.is_ascii_alphanumeric())
            .collect();
        Self::new(
            Alphabet {
                letters: true,
                digits: true,
                space: true,
                extra,
            },
            Strategy::Strip,
            CaseMode::Preserve,
            [Target::QueryValues, Target::Body],
        )
        .expect("static policy is valid")
    }

    pub fn with_reporting(mut self, report: bool) -> Self {
        self.report = report;
        self
    }

    pub fn reports(&self) -> bool {
        self.report
    }

    pub fn allowed(&self) -> &Alphabet {
        &self.allowed
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn case_mode(&self) -> CaseMode {
        self.case_mode
    }

    pub fn applies_to(&self, target: Target) -> bool {
        self.applies_to.contains(&target)
    }

    fn map_case(&self, c: char) -> char {
        let mapped = match self.case_mode {
            CaseMode::Preserve => c,
            CaseMode::Upper => c.to_ascii_uppercase(),
            CaseMode::Lower => c.to_ascii_lowercase(),
        };
        // Never let case mapping introduce a disallowed character.
        if self.allowed.contains(mapped) {
            mapped
        } else {
            c
        }
    }

    /// Builds a policy from the gateway config values.
    ///
    /// `allowed` is `alnum` or `alnum+<chars>`, `strategy` is `strip` or
    /// `replace:<c>`, `case` is `preserve|upper|lower` and `targets` a comma
    /// list of `query`, `body`, `headers`, `path`.
    pub fn from_config(allowed: &str, strategy: &str, case: &str, targets: &str) -> Result<Self, PolicyError> {
        let syntax = |key, value: &str| PolicyError::Syntax {
            key,
            value: value.to_string(),
        };
        let alphabet = match allowed.strip_prefix("alnum") {
            Some("") => Alphabet::alnum(),
            Some(rest) => {
                let chars = rest.strip_prefix('+').ok_or_else(|| syntax("allowed", allowed))?;
                let mut a = Alphabet::alnum();
                for c in chars.chars() {
                    if c == ' ' {
                        a.space = true;
                    } else {
                        a.extra.insert(c);
                    }
                }
                a
            }
            None => return Err(syntax("allowed", allowed)),
        };
        let strategy = match strategy {
            "strip" => Strategy::Strip,
            s => {
                let rest = s.strip_prefix("replace:").ok_or_else(|| syntax("strategy", s))?;
                let mut chars = rest.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Strategy::Replace(c),
                    _ => return Err(syntax("strategy", s)),
                }
            }
        };
        let case_mode = case.parse().map_err(|_| syntax("case", case))?;
        let targets = targets
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| syntax("targets", t)))
            .collect::<Result<Vec<Target>, _>>()?;
        Self::new(alphabet, strategy, case_mode, targets)
    }
}

impl FromStr for CaseMode {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "preserve" => Ok(CaseMode::Preserve),
            "upper" => Ok(CaseMode::Upper),
            "lower" => Ok(CaseMode::Lower),
            _ => Err(()),
        }
    }
}

impl FromStr for Target {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        [Target::QueryValues, Target::Body, Target::HeaderValues, Target::PathSegments]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or(())
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SanitizedInput {
    pub original: String,
    pub cleaned: String,
    /// Characters dropped or replaced.
    pub removed_count: usize,
}

pub fn sanitize(text: &str, policy: &SanitizationPolicy) -> SanitizedInput {
    let mut cleaned = String::with_capacity(text.len());
    let mut removed_count = 0;
    for c in text.chars() {
        if policy.allowed.contains(c) {
            cleaned.push(policy.map_case(c));
        } else {
            removed_count += 1;
            if let Strategy::Replace(r) = policy.strategy {
                cleaned.push(policy.map_case(r));
            }
        }
    }
    SanitizedInput {
        original: text.to_string(),
        cleaned,
        removed_count,
    }
}

/// Rewrites every field the policy targets. Returns the new request and the
/// total number of characters removed or replaced. The certificate is never
/// touched.
pub fn sanitize_request(req: &Request, policy: &SanitizationPolicy) -> (Request, usize) {
    let mut out = req.clone();
    let mut removed = 0;
    let mut clean = |s: &str| -> String {
        let r = sanitize(s, policy);
        removed += r.removed_count;
        r.cleaned
    };
    if policy.applies_to(Target::QueryValues) {
        for (_, v) in &mut out.query {
            *v = clean(v);
        }
    }
    if policy.applies_to(Target::HeaderValues) {
        for (_, v) in &mut out.headers {
            *v = clean(v);
        }
    }
    if policy.applies_to(Target::Body) && !out.body.is_empty() {
        let text = String::from_utf8_lossy(&req.body);
        let cleaned = clean(&text);
        if cleaned.as_bytes() != req.body.as_slice() {
            out.body = cleaned.into_bytes();
        }
    }
    if policy.applies_to(Target::PathSegments) {
        out.path = out.path.split('/').map(&mut clean).collect::<Vec<_>>().join("/");
        let (service, action) = Request::route_of(&out.path);
        out.service = service;
        out.action = action;
    }
    (out, removed)
}
