use std::borrow::Cow;

use crate::domain::{Layer, Request, Verdict};

use super::{Operator, Rule, RuleAction, RuleSet, Selector};

/// Body bytes inspected by text operators.
pub const DEFAULT_BODY_LIMIT: usize = 1 << 20;

const EXCERPT_CHARS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub body_limit: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            body_limit: DEFAULT_BODY_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoggedMatch {
    pub rule_id: String,
    pub severity: u8,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// The deciding rule, or the first `log` rule if none decided.
    pub matched_rule: Option<String>,
    pub verdict: Verdict,
    pub matched_value: Option<String>,
    /// Every `log` rule that matched before the decision, in order.
    pub logged: Vec<LoggedMatch>,
}

fn values<'a>(req: &'a Request, selector: &'a Selector, opts: EvalOptions) -> Vec<Cow<'a, str>> {
    let non_empty = |s: &'a str| if s.is_empty() { vec![] } else { vec![Cow::Borrowed(s)] };
    match selector {
        Selector::Path => vec![Cow::Borrowed(req.path.as_str())],
        Selector::Source => non_empty(&req.source),
        Selector::Action => non_empty(&req.action),
        Selector::Body => {
            if req.body.is_empty() {
                vec![]
            } else {
                let end = req.body.len().min(opts.body_limit);
                vec![String::from_utf8_lossy(&req.body[..end])]
            }
        }
        Selector::QueryAny => req.query.iter().map(|(_, v)| Cow::Borrowed(v.as_str())).collect(),
        Selector::Query(key) => req.query_values(key).map(Cow::Borrowed).collect(),
        Selector::Header(name) => req.header_values(name).map(Cow::Borrowed).collect(),
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(EXCERPT_CHARS).collect()
}

/// Tests one rule against a request. Returns the matching value's excerpt.
pub(crate) fn rule_matches(rule: &Rule, req: &Request, opts: EvalOptions) -> Option<String> {
    if let (Selector::Body, Operator::LenGt(n)) = (&rule.target, &rule.operator) {
        // Length of the whole body, including bytes past the inspection cap.
        return (req.body.len() as u64 > *n).then(String::new);
    }
    let vals = values(req, &rule.target, opts);
    match &rule.operator {
        Operator::Absent => vals.is_empty().then(String::new),
        Operator::Rx(p) => vals.iter().find(|v| p.regex().is_match(v)).map(|v| excerpt(v)),
        Operator::Contains(s) => vals.iter().find(|v| v.contains(s.as_str())).map(|v| excerpt(v)),
        Operator::Eq(s) => vals.iter().find(|v| v.as_ref() == s).map(|v| excerpt(v)),
        Operator::LenGt(n) => vals.iter().find(|v| v.len() as u64 > *n).map(|v| excerpt(v)),
    }
}

pub fn evaluate(req: &Request, rules: &RuleSet) -> MatchResult {
    evaluate_with(req, rules, EvalOptions::default())
}

pub fn evaluate_with(req: &Request, rules: &RuleSet, opts: EvalOptions) -> MatchResult {
    let mut logged = Vec::new();
    for rule in rules.rules() {
        let Some(value) = rule_matches(rule, req, opts) else {
            continue;
        };
        let verdict = match rule.action {
            RuleAction::Log => {
                logged.push(LoggedMatch {
                    rule_id: rule.id.clone(),
                    severity: rule.severity,
                    excerpt: value,
                });
                continue;
            }
            RuleAction::Deny => Verdict::rule_deny(
                &rule.id,
                format!("rule {} matched {} (severity {})", rule.id, rule.target, rule.severity),
            ),
            RuleAction::Allow => Verdict::allow(Layer::RuleEngine, "rule-allow"),
        };
        return MatchResult {
            matched_rule: Some(rule.id.clone()),
            verdict,
            matched_value: Some(value),
            logged,
        };
    }
    MatchResult {
        matched_rule: logged.first().map(|l| l.rule_id.clone()),
        matched_value: logged.first().map(|l| l.excerpt.clone()),
        verdict: Verdict::allow(Layer::RuleEngine, "no-match"),
        logged,
    }
}
