//! A small arithmetic language for recombination equations and subquery
//! combine expressions.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := number | slot | '(' expr ')'
//! number := digits ['.' digits] [('e' | 'E') ['+' | '-'] digits]
//! slot   := (letter | '_') (letter | digit | '_')*
//! ```
//!
//! Evaluation is plain IEEE double arithmetic in tree order, so a rendered
//! and re-parsed expression evaluates to the same bits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Slot(String),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at offset {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound slot `{0}`")]
    UnboundSlot(String),
    #[error("division by zero")]
    DivisionByZero,
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn slot(name: impl Into<String>) -> Expr {
        Expr::Slot(name.into())
    }

    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(lhs: Expr, rhs: Expr) -> Expr {
        Expr::binary(BinOp::Mul, lhs, rhs)
    }

    /// Left fold of `items` under multiplication; `None` when empty.
    pub fn product(items: impl IntoIterator<Item = Expr>) -> Option<Expr> {
        items.into_iter().reduce(Expr::mul)
    }

    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        Parser::new(text).parse_all()
    }

    pub fn evaluate<B: Bindings + ?Sized>(&self, bindings: &B) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Slot(name) => bindings
                .lookup(name)
                .ok_or_else(|| EvalError::UnboundSlot(name.clone())),
            Expr::Binary(op, l, r) => {
                let a = l.evaluate(bindings)?;
                let b = r.evaluate(bindings)?;
                Ok(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        a / b
                    }
                })
            }
        }
    }

    /// Canonical fully-parenthesized form.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        match self {
            Expr::Num(v) if *v < 0.0 => {
                // The grammar has no unary minus.
                out.push_str("(0 - ");
                out.push_str(&format_number(-v));
                out.push(')');
            }
            Expr::Num(v) => out.push_str(&format_number(*v)),
            Expr::Slot(name) => out.push_str(name),
            Expr::Binary(op, l, r) => {
                out.push('(');
                l.render_into(out);
                out.push(' ');
                out.push(op.symbol());
                out.push(' ');
                r.render_into(out);
                out.push(')');
            }
        }
    }

    /// Slot names in left-to-right order, repeats included.
    pub fn slots(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_slots(&mut out);
        out
    }

    fn collect_slots<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Num(_) => {}
            Expr::Slot(s) => out.push(s),
            Expr::Binary(_, l, r) => {
                l.collect_slots(out);
                r.collect_slots(out);
            }
        }
    }

    /// Replaces slots with the given sub-expressions; unlisted slots stay.
    pub fn substitute(&self, with: &BTreeMap<String, Expr>) -> Expr {
        match self {
            Expr::Slot(s) => with.get(s).cloned().unwrap_or_else(|| self.clone()),
            Expr::Num(_) => self.clone(),
            Expr::Binary(op, l, r) => Expr::binary(*op, l.substitute(with), r.substitute(with)),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Shortest decimal that parses back to the same double.
fn format_number(v: f64) -> String {
    // `Display` for f64 is round-trip exact and never uses an exponent.
    format!("{v}")
}

/// Slot lookup for [`Expr::evaluate`].
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<f64>;
}

/// No slots bound.
pub struct NoBindings;

impl Bindings for NoBindings {
    fn lookup(&self, _: &str) -> Option<f64> {
        None
    }
}

impl Bindings for BTreeMap<String, f64> {
    fn lookup(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

impl Bindings for HashMap<String, f64> {
    fn lookup(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

impl Bindings for [(&str, f64)] {
    fn lookup(&self, name: &str) -> Option<f64> {
        self.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

impl<const N: usize> Bindings for [(&str, f64); N] {
    fn lookup(&self, name: &str) -> Option<f64> {
        self.as_slice().lookup(name)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            offset,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn parse_all(mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        if self.pos == self.src.len() {
            return Err(self.err(0, "empty expression"));
        }
        let e = self.expr()?;
        self.skip_ws();
        if self.pos != self.src.len() {
            let msg = if self.peek() == Some(')') {
                "unbalanced ')'"
            } else {
                "unexpected trailing input"
            };
            return Err(self.err(self.pos, msg));
        }
        Ok(e)
    }

    fn additive_op(&mut self) -> Option<BinOp> {
        self.skip_ws();
        let op = match self.peek()? {
            '+' => BinOp::Add,
            '-' | '\u{2212}' => BinOp::Sub,
            _ => return None,
        };
        self.pos += self.peek().unwrap().len_utf8();
        Some(op)
    }

    fn multiplicative_op(&mut self) -> Option<BinOp> {
        self.skip_ws();
        let op = match self.peek()? {
            '*' | '\u{00d7}' => BinOp::Mul,
            '/' | '\u{00f7}' => BinOp::Div,
            _ => return None,
        };
        self.pos += self.peek().unwrap().len_utf8();
        Some(op)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.additive_op() {
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        while let Some(op) = self.multiplicative_op() {
            let rhs = self.factor()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            None => Err(self.err(start, "expected operand")),
            Some('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.skip_ws();
                if self.peek() != Some(')') {
                    return Err(self.err(self.pos, "expected ')'"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                let len = self.src[start..]
                    .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                    .unwrap_or(self.src.len() - start);
                self.pos += len;
                Ok(Expr::Slot(self.src[start..self.pos].to_string()))
            }
            Some(_) => Err(self.err(start, "expected operand")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let mut i = start;
        let digits = |i: &mut usize| {
            let s = *i;
            while *i < bytes.len() && bytes[*i].is_ascii_digit() {
                *i += 1;
            }
            *i - s
        };
        let int_digits = digits(&mut i);
        let mut frac_digits = 0;
        if i < bytes.len() && bytes[i] == b'.' {
            i += 1;
            frac_digits = digits(&mut i);
        }
        if int_digits + frac_digits == 0 {
            return Err(self.err(start, "malformed number"));
        }
        if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                j += 1;
            }
            if digits(&mut j) == 0 {
                return Err(self.err(j, "malformed exponent"));
            }
            i = j;
        }
        let text = &self.src[start..i];
        let v: f64 = text.parse().map_err(|_| self.err(start, "malformed number"))?;
        if !v.is_finite() {
            return Err(self.err(start, "number out of range"));
        }
        self.pos = i;
        Ok(Expr::Num(v))
    }
}
