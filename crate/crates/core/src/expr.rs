//! A small expression language over stream payloads.
//!
//! Score functions, context-rule conditions, task pre-conditions and the
//! filter/map stages declared in a controller config are all written in this
//! language. An expression reads the latest payload of one or more named
//! streams and computes a number or a boolean:
//!
//! ```text
//! if(`slam/status`.lost, 2, 1)
//! norm(imu.accelerometer) > 0
//! value.accelerometer.x != 0 && value.accelerometer.y != 0
//! 1 + min(sign_cam.signs, 3) * 0.5
//! ```
//!
//! A path starts with a stream name (backtick-quote names that contain
//! anything besides letters, digits and `_`) and descends into the JSON
//! payload with `.field` or `.0` segments. Booleans coerce to 0/1 in
//! arithmetic and numbers are truthy when non-zero.
//!
//! Built-in functions: `abs`, `min`, `max`, `clamp(x, lo, hi)`,
//! `if(cond, then, else)` and `norm(v)`, the Euclidean norm of a number, an
//! array of numbers, or the numeric values of an object.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

/// Failure to parse an expression.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at offset {offset} in `{source_text}`")]
pub struct ParseError {
    pub message: String,
    pub offset: usize,
    pub source_text: String,
}

/// Failure while evaluating a parsed expression against payloads.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("stream `{0}` has no value")]
    MissingStream(String),
    #[error("payload of `{stream}` has no field `{path}`")]
    MissingField { stream: String, path: String },
    #[error("expected {expected}, found {found}")]
    Type { expected: &'static str, found: String },
    #[error("result is not a finite number")]
    NotFinite,
}

/// Source of the latest payload per stream name.
pub trait Env {
    fn lookup(&self, stream: &str) -> Option<&Value>;
}

impl Env for std::collections::HashMap<String, Value> {
    fn lookup(&self, stream: &str) -> Option<&Value> {
        self.get(stream)
    }
}

impl Env for std::collections::BTreeMap<String, Value> {
    fn lookup(&self, stream: &str) -> Option<&Value> {
        self.get(stream)
    }
}

/// Binds a single payload to the name `value`, the way filter and map stages
/// see their input.
pub struct ValueEnv<'a>(pub &'a Value);

impl Env for ValueEnv<'_> {
    fn lookup(&self, stream: &str) -> Option<&Value> {
        (stream == "value").then_some(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Abs,
    Min,
    Max,
    Clamp,
    If,
    Norm,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "clamp" => Func::Clamp,
            "if" => Func::If,
            "norm" => Func::Norm,
            _ => return None,
        })
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            Func::Abs | Func::Norm => n == 1,
            Func::Min | Func::Max => n >= 1,
            Func::Clamp | Func::If => n == 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Bool(bool),
    Str(String),
    Path { stream: String, fields: Vec<String> },
    Unary(UnOp, Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// A parsed expression. Equality and serialization go through the source
/// text, so a config file round-trips exactly.
#[derive(Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse(s)
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Expr::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Intermediate evaluation result.
#[derive(Debug, Clone, PartialEq)]
enum Val {
    Num(f64),
    Bool(bool),
    Json(Value),
}

fn describe(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(_) => "bool".into(),
        Value::Number(_) => "number".into(),
        Value::String(_) => "string".into(),
        Value::Array(_) => "array".into(),
        Value::Object(_) => "object".into(),
    }
}

impl Val {
    fn num(&self) -> Result<f64, EvalError> {
        match self {
            Val::Num(n) => Ok(*n),
            Val::Bool(b) => Ok(if *b { 1.0 } else { 0.0 }),
            Val::Json(Value::Number(n)) => Ok(n.as_f64().unwrap_or(f64::NAN)),
            Val::Json(Value::Bool(b)) => Ok(if *b { 1.0 } else { 0.0 }),
            Val::Json(other) => Err(EvalError::Type {
                expected: "number",
                found: describe(other),
            }),
        }
    }

    fn truthy(&self) -> Result<bool, EvalError> {
        match self {
            Val::Bool(b) => Ok(*b),
            Val::Num(n) => Ok(*n != 0.0),
            Val::Json(Value::Bool(b)) => Ok(*b),
            Val::Json(Value::Number(n)) => Ok(n.as_f64().is_some_and(|x| x != 0.0)),
            Val::Json(Value::Null) => Ok(false),
            Val::Json(other) => Err(EvalError::Type {
                expected: "bool",
                found: describe(other),
            }),
        }
    }

    fn into_json(self) -> Result<Value, EvalError> {
        match self {
            Val::Num(n) => serde_json::Number::from_f64(n)
                .map(Value::Number)
                .ok_or(EvalError::NotFinite),
            Val::Bool(b) => Ok(Value::Bool(b)),
            Val::Json(v) => Ok(v),
        }
    }

    fn loose_eq(&self, other: &Val) -> bool {
        match (self.num(), other.num()) {
            (Ok(a), Ok(b)) => a == b,
            _ => match (self, other) {
                (Val::Json(a), Val::Json(b)) => a == b,
                _ => false,
            },
        }
    }
}

fn norm_of(v: &Value) -> Result<f64, EvalError> {
    let comp = |x: &Value| -> Result<f64, EvalError> {
        x.as_f64().ok_or_else(|| EvalError::Type {
            expected: "number",
            found: describe(x),
        })
    };
    let sq: f64 = match v {
        Value::Number(_) => comp(v)?.powi(2),
        Value::Array(items) => items.iter().map(comp).collect::<Result<Vec<_>, _>>()?.iter().map(|x| x * x).sum(),
        Value::Object(map) => map.values().map(comp).collect::<Result<Vec<_>, _>>()?.iter().map(|x| x * x).sum(),
        other => {
            return Err(EvalError::Type {
                expected: "vector",
                found: describe(other),
            })
        }
    };
    Ok(sq.sqrt())
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ParseError> {
        let tokens = lex(source)?;
        let mut p = Parser {
            src: source,
            tokens,
            pos: 0,
        };
        let root = p.expr(0)?;
        if let Some(tok) = p.tokens.get(p.pos) {
            return Err(p.error("unexpected trailing input", tok.offset));
        }
        Ok(Expr {
            source: source.trim().to_string(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Stream names referenced by this expression, in first-use order.
    pub fn streams(&self) -> Vec<String> {
        fn walk(node: &Node, out: &mut Vec<String>) {
            match node {
                Node::Path { stream, .. } => {
                    if !out.contains(stream) {
                        out.push(stream.clone());
                    }
                }
                Node::Unary(_, a) => walk(a, out),
                Node::Binary(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                Node::Call(_, args) => args.iter().for_each(|a| walk(a, out)),
                Node::Num(_) | Node::Bool(_) | Node::Str(_) => {}
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Evaluates to a finite number.
    pub fn eval_f64(&self, env: &dyn Env) -> Result<f64, EvalError> {
        let n = eval(&self.root, env)?.num()?;
        if n.is_finite() {
            Ok(n)
        } else {
            Err(EvalError::NotFinite)
        }
    }

    pub fn eval_bool(&self, env: &dyn Env) -> Result<bool, EvalError> {
        eval(&self.root, env)?.truthy()
    }

    /// Evaluates to a JSON value; a bare path yields the payload subtree as-is.
    pub fn eval_json(&self, env: &dyn Env) -> Result<Value, EvalError> {
        eval(&self.root, env)?.into_json()
    }
}

fn eval(node: &Node, env: &dyn Env) -> Result<Val, EvalError> {
    Ok(match node {
        Node::Num(n) => Val::Num(*n),
        Node::Bool(b) => Val::Bool(*b),
        Node::Str(s) => Val::Json(Value::String(s.clone())),
        Node::Path { stream, fields } => {
            let mut cur = env
                .lookup(stream)
                .ok_or_else(|| EvalError::MissingStream(stream.clone()))?;
            for (i, field) in fields.iter().enumerate() {
                let next = match cur {
                    Value::Object(map) => map.get(field),
                    Value::Array(items) => field.parse::<usize>().ok().and_then(|idx| items.get(idx)),
                    _ => None,
                };
                cur = next.ok_or_else(|| EvalError::MissingField {
                    stream: stream.clone(),
                    path: fields[..=i].join("."),
                })?;
            }
            Val::Json(cur.clone())
        }
        Node::Unary(UnOp::Neg, a) => Val::Num(-eval(a, env)?.num()?),
        Node::Unary(UnOp::Not, a) => Val::Bool(!eval(a, env)?.truthy()?),
        Node::Binary(BinOp::And, a, b) => Val::Bool(eval(a, env)?.truthy()? && eval(b, env)?.truthy()?),
        Node::Binary(BinOp::Or, a, b) => Val::Bool(eval(a, env)?.truthy()? || eval(b, env)?.truthy()?),
        Node::Binary(op, a, b) => {
            let (l, r) = (eval(a, env)?, eval(b, env)?);
            match op {
                BinOp::Eq => Val::Bool(l.loose_eq(&r)),
                BinOp::Ne => Val::Bool(!l.loose_eq(&r)),
                _ => {
                    let (x, y) = (l.num()?, r.num()?);
                    match op {
                        BinOp::Add => Val::Num(x + y),
                        BinOp::Sub => Val::Num(x - y),
                        BinOp::Mul => Val::Num(x * y),
                        BinOp::Div => Val::Num(x / y),
                        BinOp::Rem => Val::Num(x % y),
                        BinOp::Lt => Val::Bool(x < y),
                        BinOp::Le => Val::Bool(x <= y),
                        BinOp::Gt => Val::Bool(x > y),
                        BinOp::Ge => Val::Bool(x >= y),
                        BinOp::Eq | BinOp::Ne | BinOp::And | BinOp::Or => unreachable!(),
                    }
                }
            }
        }
        Node::Call(Func::If, args) => {
            if eval(&args[0], env)?.truthy()? {
                eval(&args[1], env)?
            } else {
                eval(&args[2], env)?
            }
        }
        Node::Call(Func::Norm, args) => match eval(&args[0], env)? {
            Val::Json(v) => Val::Num(norm_of(&v)?),
            other => Val::Num(other.num()?.abs()),
        },
        Node::Call(func, args) => {
            let xs = args
                .iter()
                .map(|a| eval(a, env)?.num())
                .collect::<Result<Vec<_>, _>>()?;
            Val::Num(match func {
                Func::Abs => xs[0].abs(),
                Func::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
                Func::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Func::Clamp => xs[0].max(xs[1]).min(xs[2]),
                Func::If | Func::Norm => unreachable!(),
            })
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Quoted(String),
    Str(String),
    Sym(&'static str),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
}

const SYMBOLS: [&str; 18] = [
    "&&", "||", "==", "!=", "<=", ">=", "<", ">", "+", "-", "*", "/", "%", "!", "(", ")", ",", ".",
];

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let err = |message: &str, offset| ParseError {
        message: message.into(),
        offset,
        source_text: src.into(),
    };
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.' && !after_path_dot(&out)) {
                i += 1;
            }
            // Exponent part.
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            if after_path_dot(&out) {
                out.push(Token {
                    tok: Tok::Ident(text.to_string()),
                    offset: start,
                });
            } else {
                let n = text.parse::<f64>().map_err(|_| err("malformed number", start))?;
                out.push(Token {
                    tok: Tok::Num(n),
                    offset: start,
                });
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(src[start..i].to_string()),
                offset: start,
            });
            continue;
        }
        if c == '`' || c == '"' {
            let end = src[i + 1..]
                .find(c)
                .ok_or_else(|| err("unterminated quote", start))?;
            let text = src[i + 1..i + 1 + end].to_string();
            i += end + 2;
            out.push(Token {
                tok: if c == '`' { Tok::Quoted(text) } else { Tok::Str(text) },
                offset: start,
            });
            continue;
        }
        match SYMBOLS.iter().find(|s| src[i..].starts_with(**s)) {
            Some(sym) => {
                i += sym.len();
                out.push(Token {
                    tok: Tok::Sym(sym),
                    offset: start,
                });
            }
            None => return Err(err("unexpected character", start)),
        }
    }
    Ok(out)
}

// A digit run right after `path.` is an array index, not a float.
fn after_path_dot(out: &[Token]) -> bool {
    matches!(out.last(), Some(Token { tok: Tok::Sym("."), .. }))
}

struct Parser<'a> {
    src: &'a str,
    tokens: Vec<Token>,
    pos: usize,
}

fn binding(sym: &str) -> Option<(u8, BinOp)> {
    Some(match sym {
        "||" => (1, BinOp::Or),
        "&&" => (2, BinOp::And),
        "==" => (3, BinOp::Eq),
        "!=" => (3, BinOp::Ne),
        "<" => (4, BinOp::Lt),
        "<=" => (4, BinOp::Le),
        ">" => (4, BinOp::Gt),
        ">=" => (4, BinOp::Ge),
        "+" => (5, BinOp::Add),
        "-" => (5, BinOp::Sub),
        "*" => (6, BinOp::Mul),
        "/" => (6, BinOp::Div),
        "%" => (6, BinOp::Rem),
        _ => return None,
    })
}

impl Parser<'_> {
    fn error(&self, message: &str, offset: usize) -> ParseError {
        ParseError {
            message: message.into(),
            offset,
            source_text: self.src.into(),
        }
    }

    fn end_offset(&self) -> usize {
        self.src.len()
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), ParseError> {
        match self.next() {
            Some(Token { tok: Tok::Sym(s), .. }) if s == sym => Ok(()),
            Some(t) => Err(self.error(&format!("expected `{sym}`"), t.offset)),
            None => Err(self.error(&format!("expected `{sym}`"), self.end_offset())),
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Sym(sym)) = self.peek() {
            let Some((bp, op)) = binding(sym) else { break };
            if bp <= min_bp {
                break;
            }
            self.pos += 1;
            let rhs = self.expr(bp)?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Some(Tok::Sym("-")) => {
                self.pos += 1;
                Ok(Node::Unary(UnOp::Neg, Box::new(self.unary()?)))
            }
            Some(Tok::Sym("!")) => {
                self.pos += 1;
                Ok(Node::Unary(UnOp::Not, Box::new(self.unary()?)))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let Some(token) = self.next() else {
            return Err(self.error("unexpected end of expression", self.end_offset()));
        };
        match token.tok {
            Tok::Num(n) => Ok(Node::Num(n)),
            Tok::Str(s) => Ok(Node::Str(s)),
            Tok::Sym("(") => {
                let inner = self.expr(0)?;
                self.expect_sym(")")?;
                Ok(inner)
            }
            Tok::Ident(name) if name == "true" => Ok(Node::Bool(true)),
            Tok::Ident(name) if name == "false" => Ok(Node::Bool(false)),
            Tok::Ident(name) if self.peek() == Some(&Tok::Sym("(")) => {
                let func = Func::from_name(&name)
                    .ok_or_else(|| self.error(&format!("unknown function `{name}`"), token.offset))?;
                self.pos += 1;
                let mut args = Vec::new();
                if self.peek() != Some(&Tok::Sym(")")) {
                    loop {
                        args.push(self.expr(0)?);
                        if self.peek() == Some(&Tok::Sym(",")) {
                            self.pos += 1;
                        } else {
                            break;
                        }
                    }
                }
                self.expect_sym(")")?;
                if !func.arity_ok(args.len()) {
                    return Err(self.error(&format!("wrong number of arguments to `{name}`"), token.offset));
                }
                Ok(Node::Call(func, args))
            }
            Tok::Ident(stream) | Tok::Quoted(stream) => {
                let mut fields = Vec::new();
                while self.peek() == Some(&Tok::Sym(".")) {
                    self.pos += 1;
                    match self.next() {
                        Some(Token {
                            tok: Tok::Ident(f) | Tok::Quoted(f),
                            ..
                        }) => fields.push(f),
                        Some(t) => return Err(self.error("expected field name", t.offset)),
                        None => return Err(self.error("expected field name", self.end_offset())),
                    }
                }
                Ok(Node::Path { stream, fields })
            }
            Tok::Sym(_) => Err(self.error("unexpected symbol", token.offset)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, Value)]) -> HashMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn arithmetic_precedence() {
        let e = Expr::parse("1 + 2 * 3 - 4 / 2").unwrap();
        assert_eq!(e.eval_f64(&env(&[])).unwrap(), 5.0);
        let e = Expr::parse("-(1 + 2) * 2").unwrap();
        assert_eq!(e.eval_f64(&env(&[])).unwrap(), -6.0);
    }

    #[test]
    fn listing_style_filter() {
        let e = Expr::parse(
            "value.accelerometer.x != 0 && value.accelerometer.y != 0 && value.accelerometer.z != 0",
        )
        .unwrap();
        let moving = json!({"accelerometer": {"x": 0.1, "y": -0.2, "z": 9.8}});
        let still = json!({"accelerometer": {"x": 0.0, "y": 0.0, "z": 0.0}});
        assert!(e.eval_bool(&ValueEnv(&moving)).unwrap());
        assert!(!e.eval_bool(&ValueEnv(&still)).unwrap());
        assert_eq!(e.streams(), vec!["value".to_string()]);
    }

    #[test]
    fn norm_of_record() {
        let e = Expr::parse("norm(imu.accelerometer)").unwrap();
        let vars = env(&[("imu", json!({"accelerometer": {"x": 3.0, "y": 4.0, "z": 12.0}}))]);
        assert_eq!(e.eval_f64(&vars).unwrap(), 13.0);
        let vars = env(&[("imu", json!({"accelerometer": [1.0, 2.0, 2.0]}))]);
        assert_eq!(e.eval_f64(&vars).unwrap(), 3.0);
    }

    #[test]
    fn quoted_stream_and_if() {
        let e = Expr::parse("if(`slam/status`.lost, 2, 1)").unwrap();
        assert_eq!(e.streams(), vec!["slam/status".to_string()]);
        let lost = env(&[("slam/status", json!({"lost": true}))]);
        let ok = env(&[("slam/status", json!({"lost": false}))]);
        assert_eq!(e.eval_f64(&lost).unwrap(), 2.0);
        assert_eq!(e.eval_f64(&ok).unwrap(), 1.0);
    }

    #[test]
    fn array_index_and_strings() {
        let e = Expr::parse("v.items.1 == \"b\"").unwrap();
        assert!(e.eval_bool(&env(&[("v", json!({"items": ["a", "b"]}))])).unwrap());
        let e = Expr::parse("v.0 * 2.5e1").unwrap();
        assert_eq!(e.eval_f64(&env(&[("v", json!([2]))])).unwrap(), 50.0);
    }

    #[test]
    fn min_max_clamp() {
        let e = Expr::parse("clamp(max(1, 7, 3), 0, 5) + min(4, 2)").unwrap();
        assert_eq!(e.eval_f64(&env(&[])).unwrap(), 7.0);
    }

    #[test]
    fn missing_values_are_errors() {
        let e = Expr::parse("a.b + 1").unwrap();
        assert_eq!(e.eval_f64(&env(&[])), Err(EvalError::MissingStream("a".into())));
        assert!(matches!(
            e.eval_f64(&env(&[("a", json!({}))])),
            Err(EvalError::MissingField { .. })
        ));
        assert_eq!(Expr::parse("1 / 0").unwrap().eval_f64(&env(&[])), Err(EvalError::NotFinite));
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "1 +", "foo(1)", "(1", "a.", "1 ) 2", "abs(1, 2)", "`open"] {
            assert!(Expr::parse(bad).is_err(), "{bad:?} should fail");
        }
    }

    #[test]
    fn streams_are_deduplicated_in_order() {
        let e = Expr::parse("b.x + a.y * b.z").unwrap();
        assert_eq!(e.streams(), vec!["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn serde_uses_source_text() {
        let e = Expr::parse("  1 + speech.level ").unwrap();
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(s, "\"1 + speech.level\"");
        let back: Expr = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }
}
