//! Constraint expressions over template parameters.
//!
//! A small comparison/boolean grammar used by space constraints:
//!
//! ```text
//! expr   := or
//! or     := and ("||" and)*
//! and    := unary ("&&" unary)*
//! unary  := "!" unary | cmp
//! cmp    := sum (("=="|"!="|"<="|">="|"<"|">") sum)?
//! sum    := term (("+"|"-") term)*
//! term   := factor (("*"|"/") factor)*
//! factor := "-" factor | "(" expr ")" | number | string | "true" | "false" | ident
//! ```
//!
//! Strings compare only with `==`/`!=`; booleans coerce to 0/1 in numeric
//! position. Evaluation is three-valued: an identifier missing from the
//! environment yields [`Partial::Unknown`], which propagates through
//! arithmetic and comparisons and short-circuits through `&&`/`||` with
//! Kleene semantics. Discrete-projection counting relies on this to treat a
//! constraint that mentions an unbound continuous parameter as satisfiable.

use std::collections::BTreeSet;
use std::fmt;

use crate::{Error, Result};

/// A constraint value: numbers (ints are widened), strings, booleans.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Str(String),
    Bool(bool),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(x) => write!(f, "{x}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

/// Result of three-valued evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Partial {
    Val(Value),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "||",
            BinOp::And => "&&",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

/// Parsed constraint expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Str(String),
    Bool(bool),
    Ident(String),
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Binary(BinOpExpr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinOpExpr {
    op: BinOp,
    lhs: Box<Expr>,
    rhs: Box<Expr>,
}

impl Expr {
    /// Parses a constraint from its source text.
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, src };
        let expr = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expr(format!(
                "unexpected trailing input at {:?} in {src:?}",
                p.tokens[p.pos]
            )));
        }
        Ok(expr)
    }

    /// Collects every identifier the expression references.
    pub fn referenced_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_names(&mut out);
        out
    }

    fn collect_names(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Ident(name) => {
                out.insert(name.clone());
            }
            Expr::Not(inner) | Expr::Neg(inner) => inner.collect_names(out),
            Expr::Binary(b) => {
                b.lhs.collect_names(out);
                b.rhs.collect_names(out);
            }
            _ => {}
        }
    }

    /// Three-valued evaluation against a partial environment.
    pub fn eval(&self, env: &dyn Fn(&str) -> Option<Value>) -> Result<Partial> {
        Ok(match self {
            Expr::Num(x) => Partial::Val(Value::Num(*x)),
            Expr::Str(s) => Partial::Val(Value::Str(s.clone())),
            Expr::Bool(b) => Partial::Val(Value::Bool(*b)),
            Expr::Ident(name) => match env(name) {
                Some(v) => Partial::Val(v),
                None => Partial::Unknown,
            },
            Expr::Not(inner) => match inner.eval(env)? {
                Partial::Unknown => Partial::Unknown,
                Partial::Val(v) => Partial::Val(Value::Bool(!as_bool(&v, "!")?)),
            },
            Expr::Neg(inner) => match inner.eval(env)? {
                Partial::Unknown => Partial::Unknown,
                Partial::Val(v) => Partial::Val(Value::Num(-as_num(&v, "-")?)),
            },
            Expr::Binary(b) => b.eval(env)?,
        })
    }

    /// Evaluates as a constraint with every name bound: `true` iff satisfied.
    pub fn satisfied(&self, env: &dyn Fn(&str) -> Option<Value>) -> Result<bool> {
        match self.eval(env)? {
            Partial::Val(Value::Bool(b)) => Ok(b),
            Partial::Val(v) => Err(Error::Expr(format!(
                "constraint must evaluate to a boolean, got {v}"
            ))),
            Partial::Unknown => Err(Error::Expr(
                "constraint references an unbound name".into(),
            )),
        }
    }

    /// Constraint evaluation over a partial assignment: `Some(b)` when the
    /// outcome is already decided, `None` when unbound names leave it open.
    pub fn satisfied_partial(
        &self,
        env: &dyn Fn(&str) -> Option<Value>,
    ) -> Result<Option<bool>> {
        match self.eval(env)? {
            Partial::Val(Value::Bool(b)) => Ok(Some(b)),
            Partial::Val(v) => Err(Error::Expr(format!(
                "constraint must evaluate to a boolean, got {v}"
            ))),
            Partial::Unknown => Ok(None),
        }
    }
}

impl BinOpExpr {
    fn eval(&self, env: &dyn Fn(&str) -> Option<Value>) -> Result<Partial> {
        use BinOp::*;
        // Kleene logic: one decided operand may settle &&/|| on its own.
        if matches!(self.op, And | Or) {
            let l = self.lhs.eval(env)?;
            let r = self.rhs.eval(env)?;
            let lb = partial_bool(&l, self.op.symbol())?;
            let rb = partial_bool(&r, self.op.symbol())?;
            let out = match self.op {
                And => match (lb, rb) {
                    (Some(false), _) | (_, Some(false)) => Some(false),
                    (Some(true), Some(true)) => Some(true),
                    _ => None,
                },
                Or => match (lb, rb) {
                    (Some(true), _) | (_, Some(true)) => Some(true),
                    (Some(false), Some(false)) => Some(false),
                    _ => None,
                },
                _ => unreachable!(),
            };
            return Ok(match out {
                Some(b) => Partial::Val(Value::Bool(b)),
                None => Partial::Unknown,
            });
        }

        let l = match self.lhs.eval(env)? {
            Partial::Unknown => return Ok(Partial::Unknown),
            Partial::Val(v) => v,
        };
        let r = match self.rhs.eval(env)? {
            Partial::Unknown => return Ok(Partial::Unknown),
            Partial::Val(v) => v,
        };
        let sym = self.op.symbol();
        let v = match self.op {
            Eq => Value::Bool(values_eq(&l, &r, sym)?),
            Ne => Value::Bool(!values_eq(&l, &r, sym)?),
            Lt => Value::Bool(as_num(&l, sym)? < as_num(&r, sym)?),
            Le => Value::Bool(as_num(&l, sym)? <= as_num(&r, sym)?),
            Gt => Value::Bool(as_num(&l, sym)? > as_num(&r, sym)?),
            Ge => Value::Bool(as_num(&l, sym)? >= as_num(&r, sym)?),
            Add => Value::Num(as_num(&l, sym)? + as_num(&r, sym)?),
            Sub => Value::Num(as_num(&l, sym)? - as_num(&r, sym)?),
            Mul => Value::Num(as_num(&l, sym)? * as_num(&r, sym)?),
            Div => Value::Num(as_num(&l, sym)? / as_num(&r, sym)?),
            And | Or => unreachable!(),
        };
        Ok(Partial::Val(v))
    }
}

fn partial_bool(p: &Partial, op: &str) -> Result<Option<bool>> {
    match p {
        Partial::Unknown => Ok(None),
        Partial::Val(v) => as_bool(v, op).map(Some),
    }
}

fn as_bool(v: &Value, op: &str) -> Result<bool> {
    match v {
        Value::Bool(b) => Ok(*b),
        other => Err(Error::Expr(format!("{op} expects a boolean, got {other}"))),
    }
}

fn as_num(v: &Value, op: &str) -> Result<f64> {
    match v {
        Value::Num(x) => Ok(*x),
        Value::Bool(b) => Ok(if *b { 1.0 } else { 0.0 }),
        Value::Str(s) => Err(Error::Expr(format!("{op} expects a number, got {s:?}"))),
    }
}

fn values_eq(l: &Value, r: &Value, op: &str) -> Result<bool> {
    match (l, r) {
        (Value::Str(a), Value::Str(b)) => Ok(a == b),
        (Value::Str(s), other) | (other, Value::Str(s)) => Err(Error::Expr(format!(
            "{op} cannot compare string {s:?} with {other}"
        ))),
        _ => Ok(as_num(l, op)? == as_num(r, op)?),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Str(String),
    Ident(String),
    Op(&'static str),
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' | ')' | '+' | '-' | '*' | '/' => {
                tokens.push(Token::Op(match c {
                    '(' => "(",
                    ')' => ")",
                    '+' => "+",
                    '-' => "-",
                    '*' => "*",
                    _ => "/",
                }));
                i += 1;
            }
            '&' | '|' => {
                if i + 1 < chars.len() && chars[i + 1] == c {
                    tokens.push(Token::Op(if c == '&' { "&&" } else { "||" }));
                    i += 2;
                } else {
                    return Err(Error::Expr(format!("stray {c:?} in {src:?}")));
                }
            }
            '=' | '!' | '<' | '>' => {
                let eq = i + 1 < chars.len() && chars[i + 1] == '=';
                let op = match (c, eq) {
                    ('=', true) => "==",
                    ('=', false) => {
                        return Err(Error::Expr(format!("stray '=' in {src:?}")))
                    }
                    ('!', true) => "!=",
                    ('!', false) => "!",
                    ('<', true) => "<=",
                    ('<', false) => "<",
                    ('>', true) => ">=",
                    ('>', false) => ">",
                    _ => unreachable!(),
                };
                tokens.push(Token::Op(op));
                i += if eq { 2 } else { 1 };
            }
            '"' | '\'' => {
                let quote = c;
                let start = i + 1;
                let mut j = start;
                while j < chars.len() && chars[j] != quote {
                    j += 1;
                }
                if j == chars.len() {
                    return Err(Error::Expr(format!("unterminated string in {src:?}")));
                }
                tokens.push(Token::Str(chars[start..j].iter().collect()));
                i = j + 1;
            }
            _ if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let value = text
                    .parse::<f64>()
                    .map_err(|_| Error::Expr(format!("bad number {text:?} in {src:?}")))?;
                tokens.push(Token::Num(value));
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || chars[i] == '_')
                {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                tokens.push(Token::Ident(text));
            }
            _ => return Err(Error::Expr(format!("unexpected {c:?} in {src:?}"))),
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn peek_op(&self) -> Option<&'static str> {
        match self.tokens.get(self.pos) {
            Some(Token::Op(op)) => Some(op),
            _ => None,
        }
    }

    fn take_op(&mut self, candidates: &[&'static str]) -> Option<&'static str> {
        let op = self.peek_op()?;
        if candidates.contains(&op) {
            self.pos += 1;
            Some(op)
        } else {
            None
        }
    }

    fn binary(op: &'static str, lhs: Expr, rhs: Expr) -> Expr {
        let op = match op {
            "||" => BinOp::Or,
            "&&" => BinOp::And,
            "==" => BinOp::Eq,
            "!=" => BinOp::Ne,
            "<" => BinOp::Lt,
            "<=" => BinOp::Le,
            ">" => BinOp::Gt,
            ">=" => BinOp::Ge,
            "+" => BinOp::Add,
            "-" => BinOp::Sub,
            "*" => BinOp::Mul,
            _ => BinOp::Div,
        };
        Expr::Binary(BinOpExpr {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        })
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.and()?;
        while let Some(op) = self.take_op(&["||"]) {
            lhs = Self::binary(op, lhs, self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.take_op(&["&&"]) {
            lhs = Self::binary(op, lhs, self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.take_op(&["!"]).is_some() {
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr> {
        let lhs = self.sum()?;
        if let Some(op) = self.take_op(&["==", "!=", "<=", ">=", "<", ">"]) {
            let rhs = self.sum()?;
            return Ok(Self::binary(op, lhs, rhs));
        }
        Ok(lhs)
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op) = self.take_op(&["+", "-"]) {
            lhs = Self::binary(op, lhs, self.term()?);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(op) = self.take_op(&["*", "/"]) {
            lhs = Self::binary(op, lhs, self.factor()?);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        if self.take_op(&["-"]).is_some() {
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        if self.take_op(&["("]).is_some() {
            let inner = self.expr()?;
            if self.take_op(&[")"]).is_none() {
                return Err(Error::Expr(format!("missing ')' in {:?}", self.src)));
            }
            return Ok(inner);
        }
        let token = self.tokens.get(self.pos).cloned().ok_or_else(|| {
            Error::Expr(format!("unexpected end of input in {:?}", self.src))
        })?;
        self.pos += 1;
        match token {
            Token::Num(x) => Ok(Expr::Num(x)),
            Token::Str(s) => Ok(Expr::Str(s)),
            Token::Ident(name) => match name.as_str() {
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                _ => Ok(Expr::Ident(name)),
            },
            Token::Op(op) => Err(Error::Expr(format!(
                "unexpected {op:?} in {:?}",
                self.src
            ))),
        }
    }
}
