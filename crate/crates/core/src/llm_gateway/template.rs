//! Minimal prompt template renderer.
//!
//! Supported syntax:
//!
//! * `{{ name }}` substitutes a variable (missing variable is an error).
//! * `{% if name %} ... {% endif %}` keeps the body when `name` is truthy.
//! * `{% if name == "literal" %} ... {% endif %}` compares against a string.
//! * Conditions may be chained with `or`.
//!
//! Blocks nest. There are no loops, filters or `else` branches.

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

/// Variables available to a template.
pub type TemplateVars = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unknown template variable `{0}`")]
    UnknownVariable(String),
    #[error("unbalanced block: {0}")]
    UnbalancedBlock(String),
    #[error("malformed tag `{0}`")]
    MalformedTag(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Condition {
    Truthy(String),
    Equals(String, String),
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Text(String),
    Var(String),
    If(Vec<Condition>, Vec<Node>),
}

/// Render `template` against `vars`.
pub fn render_template(template: &str, vars: &TemplateVars) -> Result<String, TemplateError> {
    let nodes = parse(template)?;
    let mut out = String::with_capacity(template.len());
    emit(&nodes, vars, &mut out)?;
    Ok(out)
}

/// Convenience: build template variables from string pairs.
pub fn vars<I, K, V>(pairs: I) -> TemplateVars
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<Value>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

fn emit(nodes: &[Node], vars: &TemplateVars, out: &mut String) -> Result<(), TemplateError> {
    for node in nodes {
        match node {
            Node::Text(t) => out.push_str(t),
            Node::Var(name) => {
                let value = vars.get(name).ok_or_else(|| TemplateError::UnknownVariable(name.clone()))?;
                match value {
                    Value::String(s) => out.push_str(s),
                    Value::Null => {}
                    other => out.push_str(&other.to_string()),
                }
            }
            Node::If(conds, body) => {
                if conds.iter().any(|c| holds(c, vars)) {
                    emit(body, vars, out)?;
                }
            }
        }
    }
    Ok(())
}

fn holds(cond: &Condition, vars: &TemplateVars) -> bool {
    match cond {
        Condition::Truthy(name) => vars.get(name).is_some_and(truthy),
        Condition::Equals(name, lit) => {
            matches!(vars.get(name), Some(Value::String(s)) if s == lit)
        }
    }
}

fn truthy(v: &Value) -> bool {
    match v {
        Value::Null => false,
        Value::Bool(b) => *b,
        Value::Number(n) => n.as_f64().is_some_and(|x| x != 0.0),
        Value::String(s) => !s.is_empty(),
        Value::Array(a) => !a.is_empty(),
        Value::Object(o) => !o.is_empty(),
    }
}

enum Token<'a> {
    Text(&'a str),
    Var(&'a str),
    Tag(&'a str),
}

fn tokenize(src: &str) -> Result<Vec<Token<'_>>, TemplateError> {
    let mut tokens = Vec::new();
    let mut rest = src;
    loop {
        let next_var = rest.find("{{");
        let next_tag = rest.find("{%");
        let (pos, is_var) = match (next_var, next_tag) {
            (None, None) => {
                if !rest.is_empty() {
                    tokens.push(Token::Text(rest));
                }
                return Ok(tokens);
            }
            (Some(v), None) => (v, true),
            (None, Some(t)) => (t, false),
            (Some(v), Some(t)) => {
                if v < t {
                    (v, true)
                } else {
                    (t, false)
                }
            }
        };
        if pos > 0 {
            tokens.push(Token::Text(&rest[..pos]));
        }
        let close = if is_var { "}}" } else { "%}" };
        let body_start = pos + 2;
        let end = rest[body_start..]
            .find(close)
            .ok_or_else(|| TemplateError::MalformedTag(rest[pos..].chars().take(40).collect()))?;
        let inner = rest[body_start..body_start + end].trim();
        tokens.push(if is_var { Token::Var(inner) } else { Token::Tag(inner) });
        rest = &rest[body_start + end + 2..];
    }
}

fn parse(src: &str) -> Result<Vec<Node>, TemplateError> {
    let tokens = tokenize(src)?;
    // Stack of open blocks: (conditions, children).
    let mut stack: Vec<(Vec<Condition>, Vec<Node>)> = Vec::new();
    let mut root: Vec<Node> = Vec::new();

    fn sink<'a>(root: &'a mut Vec<Node>, stack: &'a mut [(Vec<Condition>, Vec<Node>)]) -> &'a mut Vec<Node> {
        match stack.last_mut() {
            Some((_, children)) => children,
            None => root,
        }
    }

    for token in tokens {
        match token {
            Token::Text(t) => sink(&mut root, &mut stack).push(Node::Text(t.to_string())),
            Token::Var(name) => {
                if !is_ident(name) {
                    return Err(TemplateError::MalformedTag(format!("{{{{{name}}}}}")));
                }
                sink(&mut root, &mut stack).push(Node::Var(name.to_string()))
            }
            Token::Tag(tag) => {
                if tag == "endif" {
                    let (conds, body) = stack
                        .pop()
                        .ok_or_else(|| TemplateError::UnbalancedBlock("`endif` without matching `if`".into()))?;
                    sink(&mut root, &mut stack).push(Node::If(conds, body));
                } else if let Some(expr) = tag.strip_prefix("if") {
                    if !expr.starts_with(char::is_whitespace) {
                        return Err(TemplateError::UnbalancedBlock(format!("`if` without a condition: `{tag}`")));
                    }
                    let conds =
                        parse_conditions(expr.trim()).ok_or_else(|| TemplateError::MalformedTag(tag.to_string()))?;
                    stack.push((conds, Vec::new()));
                } else {
                    return Err(TemplateError::MalformedTag(tag.to_string()));
                }
            }
        }
    }
    if !stack.is_empty() {
        return Err(TemplateError::UnbalancedBlock(format!("{} `if` block(s) not closed", stack.len())));
    }
    Ok(root)
}

fn parse_conditions(expr: &str) -> Option<Vec<Condition>> {
    if expr.is_empty() {
        return None;
    }
    split_or(expr).into_iter().map(parse_condition).collect()
}

// Splits on ` or ` outside of string literals.
fn split_or(expr: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut in_str = false;
    let mut start = 0;
    let bytes = expr.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => in_str = !in_str,
            b' ' if !in_str && expr[i..].starts_with(" or ") => {
                parts.push(expr[start..i].trim());
                i += 4;
                start = i;
                continue;
            }
            _ => {}
        }
        i += 1;
    }
    parts.push(expr[start..].trim());
    parts
}

fn parse_condition(part: &str) -> Option<Condition> {
    match part.split_once("==") {
        Some((lhs, rhs)) => {
            let name = lhs.trim();
            let lit = rhs.trim().strip_prefix('"')?.strip_suffix('"')?;
            is_ident(name).then(|| Condition::Equals(name.to_string(), lit.to_string()))
        }
        None => is_ident(part).then(|| Condition::Truthy(part.to_string())),
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}
