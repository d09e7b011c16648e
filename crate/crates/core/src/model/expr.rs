//! Arithmetic expressions used by model right-hand sides and observables.
//!
//! Grammar (usual precedence, `^` is right associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `exp`, `ln`, `sqrt`, `abs`, `pow(a, b)`, `min(a, b)`,
//! `max(a, b)` and the Hill term `h(x, k, n) = x^n / (x^n + k^n)`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("unexpected character '{ch}' at offset {pos}")]
    UnexpectedChar { ch: char, pos: usize },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected token '{found}' at offset {pos}")]
    UnexpectedToken { found: String, pos: usize },
    #[error("unknown function '{0}'")]
    UnknownFunction(String),
    #[error("function '{name}' takes {expected} argument(s), got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("invalid number literal '{0}'")]
    BadNumber(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sqrt,
    Abs,
    Pow,
    Min,
    Max,
    Hill,
}

impl Func {
    fn lookup(name: &str) -> Option<(Func, usize)> {
        Some(match name {
            "exp" => (Func::Exp, 1),
            "ln" | "log" => (Func::Ln, 1),
            "sqrt" => (Func::Sqrt, 1),
            "abs" => (Func::Abs, 1),
            "pow" => (Func::Pow, 2),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            "h" | "hill" => (Func::Hill, 3),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Parsed expression with unresolved identifiers.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Ident(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Where a resolved identifier reads its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    State(usize),
    Param(usize),
    Time,
}

/// Expression with identifiers bound to slots; ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Compiled {
    Num(f64),
    Var(Slot),
    Neg(Box<Compiled>),
    Bin(BinOp, Box<Compiled>, Box<Compiled>),
    Call(Func, Vec<Compiled>),
}

pub fn hill(x: f64, k: f64, n: f64) -> f64 {
    let xn = x.powf(n);
    xn / (xn + k.powf(n))
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ParseError> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        match p.peek() {
            None => Ok(e),
            Some((tok, pos)) => Err(ParseError::UnexpectedToken { found: tok.to_string(), pos }),
        }
    }

    /// Every identifier referenced, in first-occurrence order.
    pub fn identifiers(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_idents(&mut out);
        out
    }

    fn collect_idents<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Num(_) => {}
            Expr::Ident(name) => {
                if !out.contains(&name.as_str()) {
                    out.push(name);
                }
            }
            Expr::Neg(e) => e.collect_idents(out),
            Expr::Bin(_, a, b) => {
                a.collect_idents(out);
                b.collect_idents(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_idents(out)),
        }
    }

    /// Binds identifiers through `resolve`; the first unresolved name is returned as `Err`.
    pub fn compile<F>(&self, resolve: &F) -> Result<Compiled, String>
    where
        F: Fn(&str) -> Option<Slot>,
    {
        Ok(match self {
            Expr::Num(v) => Compiled::Num(*v),
            Expr::Ident(name) => Compiled::Var(resolve(name).ok_or_else(|| name.clone())?),
            Expr::Neg(e) => Compiled::Neg(Box::new(e.compile(resolve)?)),
            Expr::Bin(op, a, b) => {
                Compiled::Bin(*op, Box::new(a.compile(resolve)?), Box::new(b.compile(resolve)?))
            }
            Expr::Call(f, args) => Compiled::Call(
                *f,
                args.iter().map(|a| a.compile(resolve)).collect::<Result<_, _>>()?,
            ),
        })
    }
}

impl Compiled {
    #[inline]
    pub fn eval(&self, t: f64, states: &[f64], params: &[f64]) -> f64 {
        match self {
            Compiled::Num(v) => *v,
            Compiled::Var(Slot::State(i)) => states[*i],
            Compiled::Var(Slot::Param(i)) => params[*i],
            Compiled::Var(Slot::Time) => t,
            Compiled::Neg(e) => -e.eval(t, states, params),
            Compiled::Bin(op, a, b) => {
                let x = a.eval(t, states, params);
                let y = b.eval(t, states, params);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Pow => x.powf(y),
                }
            }
            Compiled::Call(f, args) => {
                let a = |i: usize| args[i].eval(t, states, params);
                match f {
                    Func::Exp => a(0).exp(),
                    Func::Ln => a(0).ln(),
                    Func::Sqrt => a(0).sqrt(),
                    Func::Abs => a(0).abs(),
                    Func::Pow => a(0).powf(a(1)),
                    Func::Min => a(0).min(a(1)),
                    Func::Max => a(0).max(a(1)),
                    Func::Hill => hill(a(0), a(1), a(2)),
                }
            }
        }
    }

    /// State indices this expression reads.
    pub fn state_refs(&self, out: &mut Vec<usize>) {
        match self {
            Compiled::Var(Slot::State(i)) => {
                if !out.contains(i) {
                    out.push(*i);
                }
            }
            Compiled::Num(_) | Compiled::Var(_) => {}
            Compiled::Neg(e) => e.state_refs(out),
            Compiled::Bin(_, a, b) => {
                a.state_refs(out);
                b.state_refs(out);
            }
            Compiled::Call(_, args) => args.iter().for_each(|a| a.state_refs(out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "{v}"),
            Tok::Ident(s) => f.write_str(s),
            Tok::Sym(c) => write!(f, "{c}"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
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
            let v = text.parse::<f64>().map_err(|_| ParseError::BadNumber(text.to_string()))?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else if "+-*/^(),".contains(c) {
            out.push((Tok::Sym(c), i));
            i += 1;
        } else {
            let ch = src[i..].chars().next().unwrap_or(c);
            return Err(ParseError::UnexpectedChar { ch, pos: i });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<(&Tok, usize)> {
        self.tokens.get(self.pos).map(|(t, p)| (t, *p))
    }

    fn eat(&mut self, sym: char) -> bool {
        if matches!(self.peek(), Some((Tok::Sym(c), _)) if *c == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, sym: char) -> Result<(), ParseError> {
        if self.eat(sym) {
            return Ok(());
        }
        match self.peek() {
            None => Err(ParseError::UnexpectedEnd),
            Some((tok, pos)) => Err(ParseError::UnexpectedToken { found: tok.to_string(), pos }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinOp::Add
            } else if self.eat('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinOp::Mul
            } else if self.eat('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let (tok, pos) = match self.tokens.get(self.pos) {
            None => return Err(ParseError::UnexpectedEnd),
            Some((t, p)) => (t.clone(), *p),
        };
        self.pos += 1;
        match tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::Ident(name) => {
                if !self.eat('(') {
                    return Ok(Expr::Ident(name));
                }
                let (func, arity) =
                    Func::lookup(&name).ok_or_else(|| ParseError::UnknownFunction(name.clone()))?;
                let mut args = vec![self.expr()?];
                while self.eat(',') {
                    args.push(self.expr()?);
                }
                self.expect(')')?;
                if args.len() != arity {
                    return Err(ParseError::Arity { name, expected: arity, got: args.len() });
                }
                Ok(Expr::Call(func, args))
            }
            Tok::Sym('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            other => Err(ParseError::UnexpectedToken { found: other.to_string(), pos }),
        }
    }
}
