//! Small arithmetic expression language for user-supplied `g(r)` and `u₀(x)`.
//!
//! Grammar (usual precedence, `^` right-associative, binds tighter than
//! unary minus so `-x^2 = -(x^2)`):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'pi' | var | func '(' expr (',' expr)* ')' | '(' expr ')'
//! var   := 'x' | 'r' | 't'
//! func  := ln | exp | sin | cos | tanh | abs | sqrt | pow
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unexpected character '{ch}' at offset {pos}")]
    BadChar { ch: char, pos: usize },
    #[error("unexpected end of expression")]
    Eof,
    #[error("unexpected token {found} at offset {pos}")]
    Unexpected { found: String, pos: usize },
    #[error("unknown identifier '{0}'")]
    UnknownIdent(String),
    #[error("function {name} takes {expected} argument(s), got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("variable '{name}' not allowed here (allowed: {allowed})")]
    VarNotAllowed { name: char, allowed: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Func {
    Ln,
    Exp,
    Sin,
    Cos,
    Tanh,
    Abs,
    Sqrt,
    Pow,
}

impl Func {
    fn lookup(name: &str) -> Option<Self> {
        Some(match name {
            "ln" => Self::Ln,
            "exp" => Self::Exp,
            "sin" => Self::Sin,
            "cos" => Self::Cos,
            "tanh" => Self::Tanh,
            "abs" => Self::Abs,
            "sqrt" => Self::Sqrt,
            "pow" => Self::Pow,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        if self == Self::Pow {
            2
        } else {
            1
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(char),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variable bindings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Vars {
    pub x: f64,
    pub r: f64,
    pub t: f64,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0 };
        let e = p.expr()?;
        match p.peek() {
            None => Ok(e),
            Some((t, pos)) => Err(ExprError::Unexpected { found: t.to_string(), pos }),
        }
    }

    /// Parses and checks that only the listed variables occur.
    pub fn parse_in(src: &str, allowed: &[char]) -> Result<Self, ExprError> {
        let e = Self::parse(src)?;
        let mut bad = None;
        e.visit_vars(&mut |c| {
            if !allowed.contains(&c) && bad.is_none() {
                bad = Some(c);
            }
        });
        match bad {
            Some(name) => Err(ExprError::VarNotAllowed { name, allowed: allowed.iter().collect() }),
            None => Ok(e),
        }
    }

    fn visit_vars(&self, f: &mut impl FnMut(char)) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(c) => f(*c),
            Expr::Neg(a) => a.visit_vars(f),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.visit_vars(f)),
        }
    }

    pub fn eval(&self, v: &Vars) -> f64 {
        match self {
            Expr::Num(n) => *n,
            Expr::Var('x') => v.x,
            Expr::Var('r') => v.r,
            Expr::Var(_) => v.t,
            Expr::Neg(a) => -a.eval(v),
            Expr::Add(a, b) => a.eval(v) + b.eval(v),
            Expr::Sub(a, b) => a.eval(v) - b.eval(v),
            Expr::Mul(a, b) => a.eval(v) * b.eval(v),
            Expr::Div(a, b) => a.eval(v) / b.eval(v),
            Expr::Pow(a, b) => pow(a.eval(v), b.eval(v)),
            Expr::Call(f, args) => {
                let a = args[0].eval(v);
                match f {
                    Func::Ln => a.ln(),
                    Func::Exp => a.exp(),
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tanh => a.tanh(),
                    Func::Abs => a.abs(),
                    Func::Sqrt => a.sqrt(),
                    Func::Pow => pow(a, args[1].eval(v)),
                }
            }
        }
    }

    pub fn eval_x(&self, x: f64) -> f64 {
        self.eval(&Vars { x, ..Default::default() })
    }

    pub fn eval_r(&self, r: f64) -> f64 {
        self.eval(&Vars { r, ..Default::default() })
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() < 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(n) => write!(f, "{n}"),
            Tok::Ident(s) => write!(f, "'{s}'"),
            Tok::Op(c) => write!(f, "'{c}'"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| ExprError::BadChar { ch: chars[start], pos: start })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start));
        } else if "+-*/^(),".contains(c) {
            out.push((Tok::Op(c), i));
            i += 1;
        } else {
            return Err(ExprError::BadChar { ch: c, pos: i });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<(&Tok, usize)> {
        self.toks.get(self.pos).map(|(t, p)| (t, *p))
    }

    fn eat_op(&mut self, c: char) -> bool {
        if let Some((Tok::Op(o), _)) = self.peek() {
            if *o == c {
                self.pos += 1;
                return true;
            }
        }
        false
    }

    fn expect_op(&mut self, c: char) -> Result<(), ExprError> {
        if self.eat_op(c) {
            return Ok(());
        }
        match self.peek() {
            None => Err(ExprError::Eof),
            Some((t, pos)) => Err(ExprError::Unexpected { found: t.to_string(), pos }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat_op('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat_op('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat_op('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.eat_op('^') {
            let e = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(e)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let (tok, pos) = match self.toks.get(self.pos) {
            None => return Err(ExprError::Eof),
            Some((t, p)) => (t.clone(), *p),
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Tok::Ident(name) => match name.as_str() {
                "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                "x" | "r" | "t" => Ok(Expr::Var(name.chars().next().unwrap())),
                _ => {
                    let f = Func::lookup(&name).ok_or_else(|| ExprError::UnknownIdent(name.clone()))?;
                    self.expect_op('(')?;
                    let mut args = vec![self.expr()?];
                    while self.eat_op(',') {
                        args.push(self.expr()?);
                    }
                    self.expect_op(')')?;
                    if args.len() != f.arity() {
                        return Err(ExprError::Arity { name, expected: f.arity(), got: args.len() });
                    }
                    Ok(Expr::Call(f, args))
                }
            },
            t => Err(ExprError::Unexpected { found: t.to_string(), pos }),
        }
    }
}
