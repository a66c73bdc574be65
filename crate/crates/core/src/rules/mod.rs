//! Rule language describing abnormal requests, and its evaluator.
//!
//! One rule per line:
//!
//! ```text
//! # comment
//! rule "xss-1" target:body op:rx "(?i)<script" action:deny severity:5
//! rule "long-q" target:query.any op:len_gt 512 action:log severity:2
//! ```
//!
//! Rules are tried in file order and the first rule whose action is `deny`
//! or `allow` decides. `log` rules record a match and let evaluation go on.
//! A request no terminal rule matches is allowed.

mod eval;
mod parser;

use std::fmt;

use regex::Regex;
use sha2::{Digest, Sha256};

pub use eval::{evaluate, evaluate_with, EvalOptions, LoggedMatch, MatchResult, DEFAULT_BODY_LIMIT};
pub use parser::{parse_rules, parse_rules_named, ParseError, RuleError};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Selector {
    Path,
    Body,
    Source,
    Action,
    QueryAny,
    Query(String),
    Header(String),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Path => f.write_str("path"),
            Selector::Body => f.write_str("body"),
            Selector::Source => f.write_str("source"),
            Selector::Action => f.write_str("action"),
            Selector::QueryAny => f.write_str("query.any"),
            Selector::Query(k) => write!(f, "query.{k}"),
            Selector::Header(n) => write!(f, "header.{n}"),
        }
    }
}

/// Compiled pattern that compares by its source text.
#[derive(Debug, Clone)]
pub struct Pattern {
    source: String,
    regex: Regex,
}

impl Pattern {
    pub fn new(source: &str) -> Result<Self, regex::Error> {
        Ok(Self {
            source: source.to_string(),
            regex: Regex::new(source)?,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn regex(&self) -> &Regex {
        &self.regex
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Eq for Pattern {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operator {
    Rx(Pattern),
    Contains(String),
    Eq(String),
    LenGt(u64),
    Absent,
}

impl Operator {
    pub fn name(&self) -> &'static str {
        match self {
            Operator::Rx(_) => "rx",
            Operator::Contains(_) => "contains",
            Operator::Eq(_) => "eq",
            Operator::LenGt(_) => "len_gt",
            Operator::Absent => "absent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleAction {
    Deny,
    Allow,
    Log,
}

impl RuleAction {
    pub fn name(self) -> &'static str {
        match self {
            RuleAction::Deny => "deny",
            RuleAction::Allow => "allow",
            RuleAction::Log => "log",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub id: String,
    pub target: Selector,
    pub operator: Operator,
    pub action: RuleAction,
    /// 1 (informational) to 5 (critical).
    pub severity: u8,
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule {} target:{} op:{}", quote(&self.id), self.target, self.operator.name())?;
        match &self.operator {
            Operator::Rx(p) => write!(f, " {}", quote(p.as_str()))?,
            Operator::Contains(s) | Operator::Eq(s) => write!(f, " {}", quote(s))?,
            Operator::LenGt(n) => write!(f, " {n}")?,
            Operator::Absent => {}
        }
        write!(f, " action:{} severity:{}", self.action.name(), self.severity)
    }
}

/// Ordered, immutable set of rules loaded from one file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<Rule>,
    source_name: String,
    version: String,
}

impl RuleSet {
    pub fn new(source_name: impl Into<String>, rules: Vec<Rule>) -> Self {
        let mut set = Self {
            rules,
            source_name: source_name.into(),
            version: String::new(),
        };
        let digest = Sha256::digest(set.serialize().as_bytes());
        set.version = hex::encode(&digest[..8]);
        set
    }

    pub fn empty() -> Self {
        Self::new("<empty>", Vec::new())
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    /// Content hash of the canonical serialization.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn get(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    /// Canonical text form; parsing it yields an equal rule list.
    pub fn serialize(&self) -> String {
        self.rules.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Rule pack covering cross-site scripting, file inclusion, traversal and
/// SQL injection, shipped with the crate.
pub const STARTER_RULES: &str = include_str!("../../assets/starter.wsr");

pub fn starter_rules() -> RuleSet {
    parse_rules_named("starter.wsr", STARTER_RULES).expect("bundled starter rules parse")
}
