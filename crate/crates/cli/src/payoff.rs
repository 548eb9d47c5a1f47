//! Minimal payoff expression language: recursive descent parser, printer,
//! and per-leaf evaluation.
//!
//! Grammar (left-associative, usual precedence):
//!   expr   := term (('+' | '-') term)*
//!   term   := factor (('*' | '/') factor)*
//!   factor := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')' | '-' factor

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("parse error at byte {offset}: expected {expected}")]
    Unexpected { offset: usize, expected: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("`{name}` takes {want} argument(s), got {got}")]
    ArityMismatch { name: String, want: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Max,
    Min,
    Abs,
    Exp,
    Log,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Max => "max",
            Func::Min => "min",
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Log => "log",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Max | Func::Min => 2,
            Func::Abs | Func::Exp | Func::Log => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Terminal Brownian coordinate, 1-based index.
    B(usize),
    S,
    RunMaxS,
    RunMinS,
    T,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::B(j) => write!(f, "B{j}"),
            Var::S => write!(f, "S"),
            Var::RunMaxS => write!(f, "RUNMAX_S"),
            Var::RunMinS => write!(f, "RUNMIN_S"),
            Var::T => write!(f, "T"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayoffExpr {
    Num(f64),
    Var(Var),
    Neg(Box<PayoffExpr>),
    Bin(BinOp, Box<PayoffExpr>, Box<PayoffExpr>),
    Call(Func, Vec<PayoffExpr>),
}

/// Inputs for one leaf evaluation.
pub struct LeafContext<'a> {
    /// Terminal Brownian coordinates B_T^1..B_T^d.
    pub b: &'a [f64],
    pub s: f64,
    pub runmax_s: f64,
    pub runmin_s: f64,
    pub horizon: f64,
}

impl PayoffExpr {
    pub fn uses_running_extrema(&self) -> bool {
        match self {
            PayoffExpr::Var(Var::RunMaxS | Var::RunMinS) => true,
            PayoffExpr::Var(_) | PayoffExpr::Num(_) => false,
            PayoffExpr::Neg(e) => e.uses_running_extrema(),
            PayoffExpr::Bin(_, a, b) => a.uses_running_extrema() || b.uses_running_extrema(),
            PayoffExpr::Call(_, args) => args.iter().any(|a| a.uses_running_extrema()),
        }
    }

    pub fn max_brownian_coord(&self) -> usize {
        match self {
            PayoffExpr::Var(Var::B(j)) => *j,
            PayoffExpr::Var(_) | PayoffExpr::Num(_) => 0,
            PayoffExpr::Neg(e) => e.max_brownian_coord(),
            PayoffExpr::Bin(_, a, b) => a.max_brownian_coord().max(b.max_brownian_coord()),
            PayoffExpr::Call(_, args) => {
                args.iter().map(|a| a.max_brownian_coord()).max().unwrap_or(0)
            }
        }
    }

    pub fn eval(&self, ctx: &LeafContext<'_>) -> f64 {
        match self {
            PayoffExpr::Num(v) => *v,
            PayoffExpr::Var(Var::B(j)) => ctx.b[j - 1],
            PayoffExpr::Var(Var::S) => ctx.s,
            PayoffExpr::Var(Var::RunMaxS) => ctx.runmax_s,
            PayoffExpr::Var(Var::RunMinS) => ctx.runmin_s,
            PayoffExpr::Var(Var::T) => ctx.horizon,
            PayoffExpr::Neg(e) => -e.eval(ctx),
            PayoffExpr::Bin(op, a, b) => {
                let (a, b) = (a.eval(ctx), b.eval(ctx));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            0.0
                        } else {
                            a / b
                        }
                    }
                }
            }
            PayoffExpr::Call(f, args) => {
                let v: Vec<f64> = args.iter().map(|a| a.eval(ctx)).collect();
                match f {
                    Func::Max => v[0].max(v[1]),
                    Func::Min => v[0].min(v[1]),
                    Func::Abs => v[0].abs(),
                    Func::Exp => v[0].exp(),
                    Func::Log => v[0].max(f64::MIN_POSITIVE).ln(),
                }
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
        match self {
            PayoffExpr::Num(v) => write!(f, "{v}"),
            PayoffExpr::Var(v) => write!(f, "{v}"),
            PayoffExpr::Neg(e) => {
                write!(f, "-")?;
                e.fmt_prec(f, 3)
            }
            PayoffExpr::Bin(op, a, b) => {
                let p = op.precedence();
                if p < parent {
                    write!(f, "(")?;
                }
                a.fmt_prec(f, p)?;
                write!(f, " {} ", op.symbol())?;
                b.fmt_prec(f, p + 1)?;
                if p < parent {
                    write!(f, ")")?;
                }
                Ok(())
            }
            PayoffExpr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.fmt_prec(f, 0)?;
                }
                write!(f, ")")
            }
        }
    }
}

impl fmt::Display for PayoffExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.text.get(self.pos).copied()
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        ParseError::Unexpected { offset: self.pos, expected: expected.to_string() }
    }

    fn expect(&mut self, ch: u8) -> Result<(), ParseError> {
        if self.peek() == Some(ch) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{}`", ch as char)))
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        let start = self.pos;
        while self
            .text
            .get(self.pos)
            .is_some_and(|c| c.is_ascii_digit() || *c == b'.')
        {
            self.pos += 1;
        }
        // exponent part
        if self.text.get(self.pos).is_some_and(|c| *c == b'e' || *c == b'E') {
            let mut probe = self.pos + 1;
            if self.text.get(probe).is_some_and(|c| *c == b'+' || *c == b'-') {
                probe += 1;
            }
            if self.text.get(probe).is_some_and(|c| c.is_ascii_digit()) {
                self.pos = probe;
                while self.text.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            }
        }
        let raw = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
        raw.parse().map_err(|_| ParseError::Unexpected {
            offset: start,
            expected: "a number".to_string(),
        })
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self
            .text
            .get(self.pos)
            .is_some_and(|c| c.is_ascii_alphanumeric() || *c == b'_')
        {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.text[start..self.pos]).into_owned()
    }

    fn factor(&mut self) -> Result<PayoffExpr, ParseError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(PayoffExpr::Neg(Box::new(self.factor()?)))
            }
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number().map(PayoffExpr::Num),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let at = self.pos;
                let name = self.ident();
                if self.peek() == Some(b'(') {
                    self.pos += 1;
                    let func = match name.as_str() {
                        "max" => Func::Max,
                        "min" => Func::Min,
                        "abs" => Func::Abs,
                        "exp" => Func::Exp,
                        "log" => Func::Log,
                        _ => return Err(ParseError::UnknownIdentifier { offset: at, name }),
                    };
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(b',') {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(b')')?;
                    if args.len() != func.arity() {
                        return Err(ParseError::ArityMismatch {
                            name,
                            want: func.arity(),
                            got: args.len(),
                        });
                    }
                    Ok(PayoffExpr::Call(func, args))
                } else {
                    let var = match name.as_str() {
                        "S" => Var::S,
                        "RUNMAX_S" => Var::RunMaxS,
                        "RUNMIN_S" => Var::RunMinS,
                        "T" => Var::T,
                        _ => {
                            if let Some(rest) = name.strip_prefix('B') {
                                match rest.parse::<usize>() {
                                    Ok(j) if j >= 1 => Var::B(j),
                                    _ => {
                                        return Err(ParseError::UnknownIdentifier {
                                            offset: at,
                                            name,
                                        })
                                    }
                                }
                            } else {
                                return Err(ParseError::UnknownIdentifier { offset: at, name });
                            }
                        }
                    };
                    Ok(PayoffExpr::Var(var))
                }
            }
            _ => Err(self.unexpected("a number, identifier, `(` or `-`")),
        }
    }

    fn term(&mut self) -> Result<PayoffExpr, ParseError> {
        let mut acc = self.factor()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(acc),
            };
            self.pos += 1;
            acc = PayoffExpr::Bin(op, Box::new(acc), Box::new(self.factor()?));
        }
    }

    fn expr(&mut self) -> Result<PayoffExpr, ParseError> {
        let mut acc = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(acc),
            };
            self.pos += 1;
            acc = PayoffExpr::Bin(op, Box::new(acc), Box::new(self.term()?));
        }
    }
}

pub fn parse_payoff(text: &str) -> Result<PayoffExpr, ParseError> {
    let mut p = Parser { text: text.as_bytes(), pos: 0 };
    if p.peek().is_none() {
        return Err(ParseError::Unexpected {
            offset: 0,
            expected: "a nonempty expression".to_string(),
        });
    }
    let e = p.expr()?;
    if p.peek().is_some() {
        return Err(p.unexpected("end of input"));
    }
    Ok(e)
}
