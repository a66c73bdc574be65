use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use super::{Operator, Pattern, Rule, RuleAction, RuleSet, Selector};

/// Syntax error at a 1-based line and column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    /// Offending token, empty at end of line.
    pub token: String,
    pub expected: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let found = if self.token.is_empty() {
            "end of line".to_string()
        } else {
            format!("{:?}", self.token)
        };
        write!(
            f,
            "line {}, column {}: found {found}, expected {}",
            self.line, self.column, self.expected
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("{0}")]
    Parse(ParseError),
    #[error("duplicate rule id {id:?} on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
}

impl RuleError {
    pub fn line(&self) -> usize {
        match self {
            RuleError::Parse(e) => e.line,
            RuleError::DuplicateId { second, .. } => *second,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokenKind {
    Word(String),
    Quoted(String),
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    /// Source text of the token, for diagnostics.
    text: String,
    column: usize,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    line_no: usize,
    src: &'a str,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line_no: usize) -> Self {
        Self {
            chars: src.char_indices().peekable(),
            line_no,
            src,
        }
    }

    fn column(&self, byte: usize) -> usize {
        self.src[..byte].chars().count() + 1
    }

    fn tokens(mut self) -> Result<Vec<Token>, ParseError> {
        let mut out = Vec::new();
        while let Some(&(start, c)) = self.chars.peek() {
            if c.is_whitespace() {
                self.chars.next();
                continue;
            }
            if c == '"' {
                out.push(self.quoted(start)?);
                continue;
            }
            let mut end = start;
            while let Some(&(i, c)) = self.chars.peek() {
                if c.is_whitespace() || c == '"' {
                    break;
                }
                end = i + c.len_utf8();
                self.chars.next();
            }
            let word = &self.src[start..end];
            out.push(Token {
                kind: TokenKind::Word(word.to_string()),
                text: word.to_string(),
                column: self.column(start),
            });
        }
        Ok(out)
    }

    fn quoted(&mut self, start: usize) -> Result<Token, ParseError> {
        self.chars.next();
        let mut value = String::new();
        loop {
            match self.chars.next() {
                Some((i, '"')) => {
                    return Ok(Token {
                        kind: TokenKind::Quoted(value),
                        text: self.src[start..=i].to_string(),
                        column: self.column(start),
                    })
                }
                Some((_, '\\')) => match self.chars.next() {
                    Some((_, '"')) => value.push('"'),
                    Some((_, '\\')) => value.push('\\'),
                    Some((_, 'n')) => value.push('\n'),
                    Some((_, 'r')) => value.push('\r'),
                    Some((_, 't')) => value.push('\t'),
                    // Unknown escapes stay verbatim so regex classes like \d survive.
                    Some((_, c)) => {
                        value.push('\\');
                        value.push(c);
                    }
                    None => break,
                },
                Some((_, c)) => value.push(c),
                None => break,
            }
        }
        Err(ParseError {
            line: self.line_no,
            column: self.column(start),
            token: self.src[start..].to_string(),
            expected: "closing '\"'".into(),
        })
    }
}

struct LineParser {
    tokens: std::vec::IntoIter<Token>,
    line_no: usize,
    eol_column: usize,
}

impl LineParser {
    fn error(&self, tok: Option<&Token>, expected: &str) -> ParseError {
        ParseError {
            line: self.line_no,
            column: tok.map_or(self.eol_column, |t| t.column),
            token: tok.map(|t| t.text.clone()).unwrap_or_default(),
            expected: expected.to_string(),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.tokens.next() {
            Some(Token {
                kind: TokenKind::Word(w), ..
            }) if w == kw => Ok(()),
            other => Err(self.error(other.as_ref(), &format!("'{kw}'"))),
        }
    }

    fn quoted(&mut self, what: &str) -> Result<(String, Token), ParseError> {
        match self.tokens.next() {
            Some(t) => match &t.kind {
                TokenKind::Quoted(s) => Ok((s.clone(), t)),
                TokenKind::Word(_) => Err(self.error(Some(&t), what)),
            },
            None => Err(self.error(None, what)),
        }
    }

    /// Reads `key:value`, accepting `key: value` as two tokens as well.
    fn keyed(&mut self, key: &str, expected: &str) -> Result<(String, Token), ParseError> {
        let prefix = format!("{key}:");
        let tok = self.tokens.next();
        let Some(tok) = tok else {
            return Err(self.error(None, &format!("'{prefix}'")));
        };
        let TokenKind::Word(word) = &tok.kind else {
            return Err(self.error(Some(&tok), &format!("'{prefix}'")));
        };
        let Some(rest) = word.strip_prefix(&prefix) else {
            return Err(self.error(Some(&tok), &format!("'{prefix}'")));
        };
        if !rest.is_empty() {
            let value_tok = Token {
                kind: TokenKind::Word(rest.to_string()),
                text: rest.to_string(),
                column: tok.column + prefix.chars().count(),
            };
            return Ok((rest.to_string(), value_tok));
        }
        match self.tokens.next() {
            Some(t) => match &t.kind {
                TokenKind::Word(w) => Ok((w.clone(), t.clone())),
                TokenKind::Quoted(_) => Err(self.error(Some(&t), expected)),
            },
            None => Err(self.error(None, expected)),
        }
    }

    fn int(&mut self, tok: Option<Token>, expected: &str) -> Result<(u64, Token), ParseError> {
        match tok {
            Some(t) => match &t.kind {
                TokenKind::Word(w) if !w.is_empty() && w.bytes().all(|b| b.is_ascii_digit()) => {
                    let n = w.parse().map_err(|_| self.error(Some(&t), expected))?;
                    Ok((n, t))
                }
                _ => Err(self.error(Some(&t), expected)),
            },
            None => Err(self.error(None, expected)),
        }
    }

    fn rule(mut self) -> Result<Rule, ParseError> {
        self.keyword("rule")?;
        let (id, id_tok) = self.quoted("quoted rule id")?;
        if id.is_empty() {
            return Err(self.error(Some(&id_tok), "non-empty rule id"));
        }

        const TARGETS: &str = "path, body, source, action, query.any, query.<key> or header.<name>";
        let (target_text, target_tok) = self.keyed("target", TARGETS)?;
        let target = parse_selector(&target_text).ok_or_else(|| self.error(Some(&target_tok), TARGETS))?;

        const OPS: &str = "rx, contains, eq, len_gt or absent";
        let (op_text, op_tok) = self.keyed("op", OPS)?;
        let operator = match op_text.as_str() {
            "rx" => {
                let (pattern, tok) = self.quoted("quoted regular expression")?;
                Operator::Rx(
                    Pattern::new(&pattern)
                        .map_err(|_| self.error(Some(&tok), "valid regular expression"))?,
                )
            }
            "contains" => Operator::Contains(self.quoted("quoted string")?.0),
            "eq" => Operator::Eq(self.quoted("quoted string")?.0),
            "len_gt" => {
                let next = self.tokens.next();
                Operator::LenGt(self.int(next, "non-negative integer")?.0)
            }
            "absent" => Operator::Absent,
            _ => return Err(self.error(Some(&op_tok), OPS)),
        };

        let (action_text, action_tok) = self.keyed("action", "deny, allow or log")?;
        let action = match action_text.as_str() {
            "deny" => RuleAction::Deny,
            "allow" => RuleAction::Allow,
            "log" => RuleAction::Log,
            _ => return Err(self.error(Some(&action_tok), "deny, allow or log")),
        };

        let (sev_text, sev_tok) = self.keyed("severity", "severity 1-5")?;
        let sev_tok = Token {
            kind: TokenKind::Word(sev_text),
            ..sev_tok
        };
        let (severity, sev_tok) = self.int(Some(sev_tok), "severity 1-5")?;
        if !(1..=5).contains(&severity) {
            return Err(self.error(Some(&sev_tok), "severity 1-5"));
        }

        if let Some(extra) = self.tokens.next() {
            return Err(self.error(Some(&extra), "end of line"));
        }
        Ok(Rule {
            id,
            target,
            operator,
            action,
            severity: severity as u8,
        })
    }
}

fn parse_selector(text: &str) -> Option<Selector> {
    Some(match text {
        "path" => Selector::Path,
        "body" => Selector::Body,
        "source" => Selector::Source,
        "action" => Selector::Action,
        "query.any" => Selector::QueryAny,
        _ => {
            if let Some(key) = text.strip_prefix("query.").filter(|k| !k.is_empty()) {
                Selector::Query(key.to_string())
            } else {
                let name = text.strip_prefix("header.").filter(|n| !n.is_empty())?;
                Selector::Header(name.to_ascii_lowercase())
            }
        }
    })
}

pub fn parse_rules(text: &str) -> Result<RuleSet, RuleError> {
    parse_rules_named("<inline>", text)
}

pub fn parse_rules_named(source_name: &str, text: &str) -> Result<RuleSet, RuleError> {
    let mut rules = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens = Lexer::new(line, line_no).tokens().map_err(RuleError::Parse)?;
        let parser = LineParser {
            tokens: tokens.into_iter(),
            line_no,
            eol_column: line.chars().count() + 1,
        };
        let rule = parser.rule().map_err(RuleError::Parse)?;
        if let Some(&first) = seen.get(&rule.id) {
            return Err(RuleError::DuplicateId {
                id: rule.id,
                first,
                second: line_no,
            });
        }
        seen.insert(rule.id.clone(), line_no);
        rules.push(rule);
    }
    Ok(RuleSet::new(source_name, rules))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_err(text: &str) -> ParseError {
        match parse_rules(text) {
            Err(RuleError::Parse(e)) => e,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parses_example_rule() {
        let set = parse_rules(r#"rule "xss-1" target:body op:rx "(?i)<script" action:deny severity:5"#).unwrap();
        let rule = &set.rules()[0];
        assert_eq!(rule.id, "xss-1");
        assert_eq!(rule.target, Selector::Body);
        assert_eq!(rule.operator, Operator::Rx(Pattern::new("(?i)<script").unwrap()));
        assert_eq!(rule.action, RuleAction::Deny);
        assert_eq!(rule.severity, 5);
    }

    #[test]
    fn comments_blank_lines_and_all_forms() {
        let text = r#"
# leading comment
   # indented comment
rule "a" target:path op:contains "/admin" action:deny severity:4
rule "b" target:query.q op:len_gt 10 action:log severity:1
rule "c" target: header.User-Agent op: absent action: allow severity: 2
rule "d" target:query.any op:eq "x\"y\\z" action:deny severity:3
rule "e" target:source op:rx "^10\.\d+" action:deny severity:3
"#;
        let set = parse_rules(text).unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.rules()[1].operator, Operator::LenGt(10));
        assert_eq!(set.rules()[2].target, Selector::Header("user-agent".into()));
        assert_eq!(set.rules()[3].operator, Operator::Eq("x\"y\\z".into()));
        assert_eq!(set.rules()[4].operator, Operator::Rx(Pattern::new(r"^10\.\d+").unwrap()));
    }

    #[test]
    fn bad_target_reported_at_target_token() {
        let e = parse_err(r#"rule "bad" target:nowhere op:eq "x" action:deny severity:1"#);
        assert_eq!(e.line, 1);
        assert_eq!(e.column, 19);
        assert_eq!(e.token, "nowhere");
        assert!(e.expected.contains("query.any"));
    }

    #[test]
    fn error_positions() {
        let e = parse_err("\n\nrul \"x\"");
        assert_eq!((e.line, e.column, e.token.as_str()), (3, 1, "rul"));

        let e = parse_err(r#"rule "x" target:body op:rx "(" action:deny severity:1"#);
        assert_eq!((e.column, e.expected.as_str()), (28, "valid regular expression"));

        let e = parse_err(r#"rule "x" target:body op:len_gt -1 action:deny severity:1"#);
        assert_eq!(e.token, "-1");

        let e = parse_err(r#"rule "x" target:body op:absent action:deny severity:9"#);
        assert_eq!((e.token.as_str(), e.column), ("9", 53));

        let e = parse_err(r#"rule "x" target:body op:absent action:deny"#);
        assert_eq!((e.token.as_str(), e.column), ("", 43));

        let e = parse_err(r#"rule "x" target:body op:absent action:deny severity:1 extra"#);
        assert_eq!(e.expected, "end of line");

        let e = parse_err(r#"rule "unterminated target:body"#);
        assert_eq!((e.column, e.expected.as_str()), (6, "closing '\"'"));

        let e = parse_err(r#"rule "" target:body op:absent action:deny severity:1"#);
        assert_eq!(e.expected, "non-empty rule id");
    }

    #[test]
    fn duplicate_ids_name_both_lines() {
        let text = "rule \"a\" target:body op:absent action:log severity:1\n\nrule \"a\" target:path op:absent action:log severity:1\n";
        assert_eq!(
            parse_rules(text),
            Err(RuleError::DuplicateId {
                id: "a".into(),
                first: 1,
                second: 3
            })
        );
    }

    #[test]
    fn version_stable_and_content_sensitive() {
        let a = parse_rules("rule \"a\" target:body op:absent action:log severity:1").unwrap();
        let b = parse_rules("# c\nrule \"a\"   target:body op:absent action:log severity:1\n").unwrap();
        let c = parse_rules("rule \"a\" target:body op:absent action:log severity:2").unwrap();
        assert_eq!(a.version(), b.version());
        assert_ne!(a.version(), c.version());
        assert_eq!(parse_rules(&a.serialize()).unwrap(), a);
    }

    #[test]
    fn starter_pack_parses() {
        let set = super::super::starter_rules();
        assert!(set.len() >= 10);
    }
}
