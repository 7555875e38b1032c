//! A small FHIRPath subset for selecting values from resource bundles.
//!
//! ```text
//! path    = root { "." step }
//! root    = "Patient" | "Observation" | "Condition"
//! step    = "where" "(" ident "=" literal ")" | "first" "(" ")" | ident
//! literal = "'" { char } "'" | number
//! ```
//!
//! Whitespace is allowed between tokens. [`PathExpr`]'s `Display` prints the
//! canonical form, which is what cross-station comparisons use.

use std::borrow::Cow;
use std::fmt;

use thiserror::Error;

use crate::cdf::Value;
use crate::profile::{Node, Resource, ResourceBundle, RESOURCE_TYPES};

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },
    #[error("unknown root resource type {0:?}")]
    UnknownRoot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Text(String),
    Number(f64),
}

impl Literal {
    fn as_value(&self) -> Value {
        match self {
            Literal::Text(s) => Value::Text(s.clone()),
            Literal::Number(n) => Value::Decimal(*n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Field(String),
    Where { field: String, literal: Literal },
    First,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathExpr {
    pub root: String,
    pub steps: Vec<Step>,
}

impl fmt::Display for PathExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.root)?;
        for step in &self.steps {
            match step {
                Step::Field(name) => write!(f, ".{name}")?,
                Step::First => f.write_str(".first()")?,
                Step::Where { field, literal } => match literal {
                    Literal::Text(s) => write!(f, ".where({field} = '{}')", s.replace('\\', "\\\\").replace('\'', "\\'"))?,
                    Literal::Number(n) => write!(f, ".where({field} = {n})")?,
                },
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Text(String),
    Number(f64),
    Dot,
    LParen,
    RParen,
    Equals,
}

fn describe(t: Option<&(usize, Token)>) -> String {
    match t {
        None => "end of input".into(),
        Some((_, Token::Ident(s))) => format!("identifier {s:?}"),
        Some((_, Token::Text(s))) => format!("string '{s}'"),
        Some((_, Token::Number(n))) => format!("number {n}"),
        Some((_, Token::Dot)) => "'.'".into(),
        Some((_, Token::LParen)) => "'('".into(),
        Some((_, Token::RParen)) => "')'".into(),
        Some((_, Token::Equals)) => "'='".into(),
    }
}

fn syntax(column: usize, message: impl Into<String>) -> PathError {
    PathError::Syntax {
        column,
        message: message.into(),
    }
}

/// Tokens with their 1-based starting column.
fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, PathError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        match c {
            c if c.is_whitespace() => i += 1,
            '.' => {
                tokens.push((column, Token::Dot));
                i += 1;
            }
            '(' => {
                tokens.push((column, Token::LParen));
                i += 1;
            }
            ')' => {
                tokens.push((column, Token::RParen));
                i += 1;
            }
            '=' => {
                tokens.push((column, Token::Equals));
                i += 1;
            }
            '\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(syntax(column, "unterminated string literal")),
                        Some('\\') => {
                            let escaped = chars.get(i + 1).ok_or_else(|| syntax(i + 1, "dangling escape"))?;
                            s.push(*escaped);
                            i += 2;
                        }
                        Some('\'') => {
                            i += 1;
                            break;
                        }
                        Some(ch) => {
                            s.push(*ch);
                            i += 1;
                        }
                    }
                }
                tokens.push((column, Token::Text(s)));
            }
            c if c.is_ascii_digit() || c == '-' => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                let lexeme: String = chars[start..i].iter().collect();
                let n = lexeme
                    .parse::<f64>()
                    .map_err(|_| syntax(column, format!("invalid number {lexeme:?}")))?;
                tokens.push((column, Token::Number(n)));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                tokens.push((column, Token::Ident(chars[start..i].iter().collect())));
            }
            other => return Err(syntax(column, format!("unexpected character {other:?}"))),
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end_column: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(usize, Token)> {
        self.tokens.get(self.pos)
    }

    fn column(&self) -> usize {
        self.peek().map(|(c, _)| *c).unwrap_or(self.end_column)
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), PathError> {
        match self.peek() {
            Some((_, t)) if *t == want => {
                self.pos += 1;
                Ok(())
            }
            other => Err(syntax(self.column(), format!("expected {what}, found {}", describe(other)))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, PathError> {
        match self.peek() {
            Some((_, Token::Ident(s))) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            other => Err(syntax(self.column(), format!("expected {what}, found {}", describe(other)))),
        }
    }

    fn step(&mut self) -> Result<Step, PathError> {
        let name = self.ident("a step")?;
        let is_call = matches!(self.peek(), Some((_, Token::LParen)));
        match (name.as_str(), is_call) {
            ("where", true) => {
                self.pos += 1;
                let field = self.ident("a field name")?;
                self.expect(Token::Equals, "'='")?;
                let literal = match self.peek() {
                    Some((_, Token::Text(s))) => Literal::Text(s.clone()),
                    Some((_, Token::Number(n))) => Literal::Number(*n),
                    other => return Err(syntax(self.column(), format!("expected a literal, found {}", describe(other)))),
                };
                self.pos += 1;
                self.expect(Token::RParen, "')'")?;
                Ok(Step::Where { field, literal })
            }
            ("first", true) => {
                self.pos += 1;
                self.expect(Token::RParen, "')'")?;
                Ok(Step::First)
            }
            (other, true) => Err(syntax(self.column(), format!("unsupported function {other}()"))),
            (_, false) => Ok(Step::Field(name)),
        }
    }
}

pub fn parse_path(text: &str) -> Result<PathExpr, PathError> {
    let mut p = Parser {
        tokens: tokenize(text)?,
        pos: 0,
        end_column: text.chars().count() + 1,
    };
    let root = p.ident("a root resource type")?;
    if !RESOURCE_TYPES.contains(&root.as_str()) {
        return Err(PathError::UnknownRoot(root));
    }
    let mut steps = Vec::new();
    while p.peek().is_some() {
        p.expect(Token::Dot, "'.'")?;
        steps.push(p.step()?);
    }
    Ok(PathExpr { root, steps })
}

/// Canonical text of an expression, or `None` when it does not parse.
pub fn normalize(text: &str) -> Option<String> {
    parse_path(text).ok().map(|e| e.to_string())
}

#[derive(Debug, Clone)]
enum Item<'a> {
    Resource(&'a Resource),
    Node(Cow<'a, Node>),
}

fn scalar<'a>(v: Value) -> Item<'a> {
    Item::Node(Cow::Owned(Node::Scalar(v)))
}

fn node_children<'a>(node: &Cow<'a, Node>, field: &str) -> Vec<Item<'a>> {
    let borrowed = |n: &'a Node| -> Vec<Item<'a>> { n.flatten_list().into_iter().map(|c| Item::Node(Cow::Borrowed(c))).collect() };
    match node {
        Cow::Borrowed(Node::Tree(t)) => t.get(field).map(borrowed).unwrap_or_default(),
        Cow::Borrowed(Node::List(items)) => items
            .iter()
            .flat_map(|n| node_children(&Cow::Borrowed(n), field))
            .collect(),
        Cow::Owned(Node::Tree(t)) => t
            .get(field)
            .map(|n| n.flatten_list().into_iter().map(|c| Item::Node(Cow::Owned(c.clone()))).collect())
            .unwrap_or_default(),
        other => match (other.as_ref(), field) {
            (Node::Quantity { value, .. }, "value") => vec![scalar(Value::Decimal(*value))],
            (Node::Quantity { unit: Some(u), .. }, "unit") => vec![scalar(Value::text(u))],
            (Node::Coded(c), "code") => vec![scalar(Value::text(&c.code))],
            (Node::Coded(c), "system") => vec![scalar(Value::text(&c.system))],
            _ => vec![],
        },
    }
}

fn children<'a>(item: &Item<'a>, field: &str) -> Vec<Item<'a>> {
    match item {
        Item::Resource(r) => match field {
            "id" => vec![scalar(Value::text(&r.id))],
            "subject" => r.subject.iter().map(|s| scalar(Value::text(s))).collect(),
            _ => r
                .body
                .get(field)
                .map(|n| n.flatten_list().into_iter().map(|c| Item::Node(Cow::Borrowed(c))).collect())
                .unwrap_or_default(),
        },
        Item::Node(node) => node_children(node, field),
    }
}

/// Collapses a terminal node to a value: codings to their code, quantities to
/// their magnitude. Resources and trees carry no value.
fn collapse(item: &Item<'_>) -> Option<Value> {
    match item {
        Item::Resource(_) => None,
        Item::Node(n) => match n.as_ref() {
            Node::Scalar(v) => Some(v.clone()),
            Node::Coded(c) => Some(Value::text(&c.code)),
            Node::Quantity { value, .. } => Some(Value::Decimal(*value)),
            Node::Tree(_) | Node::List(_) => None,
        },
    }
}

/// All matches in bundle order; empty when nothing matches.
pub fn eval_path(expr: &PathExpr, bundle: &ResourceBundle) -> Vec<Value> {
    let mut items: Vec<Item<'_>> = bundle
        .resources
        .iter()
        .filter(|r| r.resource_type == expr.root)
        .map(Item::Resource)
        .collect();
    for step in &expr.steps {
        items = match step {
            Step::Field(name) => items.iter().flat_map(|i| children(i, name)).collect(),
            Step::First => {
                items.truncate(1);
                items
            }
            Step::Where { field, literal } => {
                let want = literal.as_value();
                items
                    .into_iter()
                    .filter(|i| {
                        children(i, field)
                            .iter()
                            .filter_map(collapse)
                            .any(|v| v.loosely_equals(&want))
                    })
                    .collect()
            }
        };
    }
    items.iter().filter_map(collapse).collect()
}

pub fn eval_first(expr: &PathExpr, bundle: &ResourceBundle) -> Option<Value> {
    eval_path(expr, bundle).into_iter().next()
}
