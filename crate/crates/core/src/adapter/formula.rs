//! Formula language: arithmetic over a single variable `x`.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := NUMBER | 'x' | '-' factor | '(' expr ')'
//! ```

use std::fmt;

use super::AdapterError;

pub const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    Const(f64),
    Var,
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
}

impl Expr {
    pub fn binary(op: BinOp, l: Expr, r: Expr) -> Self {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var => 1,
            Expr::Neg(e) => 1 + e.depth(),
            Expr::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Host-side evaluation with single-precision arithmetic; constants are
    /// rounded to f32 first, matching the emitted module.
    pub fn eval_f32(&self, x: f32) -> f32 {
        match self {
            Expr::Const(c) => *c as f32,
            Expr::Var => x,
            Expr::Neg(e) => -e.eval_f32(x),
            Expr::Binary(op, l, r) => {
                let (a, b) = (l.eval_f32(x), r.eval_f32(x));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
        }
    }

    pub fn eval_f64(&self, x: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var => x,
            Expr::Neg(e) => -e.eval_f64(x),
            Expr::Binary(op, l, r) => {
                let (a, b) = (l.eval_f64(x), r.eval_f64(x));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
        }
    }
}

/// Fully parenthesised rendering; parses back to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var => f.write_str("x"),
            Expr::Neg(e) => write!(f, "-({e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    X,
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(n) => write!(f, "{n}"),
            Token::X => f.write_str("x"),
            Token::Plus => f.write_str("+"),
            Token::Minus => f.write_str("-"),
            Token::Star => f.write_str("*"),
            Token::Slash => f.write_str("/"),
            Token::LParen => f.write_str("("),
            Token::RParen => f.write_str(")"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Token)>, AdapterError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => out.push((i, Token::Plus)),
            b'-' => out.push((i, Token::Minus)),
            b'*' => out.push((i, Token::Star)),
            b'/' => out.push((i, Token::Slash)),
            b'(' => out.push((i, Token::LParen)),
            b')' => out.push((i, Token::RParen)),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let mut digits = i > start;
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    let frac = i;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    digits |= i > frac;
                }
                if !digits {
                    return Err(AdapterError::Lex { pos: start, ch: '.' });
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    let exp = j;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    if j == exp {
                        return Err(AdapterError::Lex {
                            pos: i,
                            ch: bytes[i] as char,
                        });
                    }
                    i = j;
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| AdapterError::Lex {
                    pos: start,
                    ch: c as char,
                })?;
                out.push((start, Token::Num(v)));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let ident = &src[start..i];
                if ident != "x" {
                    return Err(AdapterError::UnknownIdentifier(ident.to_owned()));
                }
                out.push((start, Token::X));
                continue;
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or('?');
                return Err(AdapterError::Lex { pos: i, ch });
            }
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
    nesting: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn unexpected(&self) -> AdapterError {
        match self.tokens.get(self.pos) {
            Some((p, t)) => AdapterError::UnexpectedToken {
                pos: *p,
                found: t.to_string(),
            },
            None => AdapterError::UnexpectedToken {
                pos: self.end,
                found: "end of input".into(),
            },
        }
    }

    fn enter(&mut self) -> Result<(), AdapterError> {
        self.nesting += 1;
        if self.nesting > MAX_DEPTH {
            return Err(AdapterError::DepthExceeded(self.nesting));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, AdapterError> {
        let mut left = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => BinOp::Add,
                Some(Token::Minus) => BinOp::Sub,
                _ => return Ok(left),
            };
            self.pos += 1;
            left = Expr::binary(op, left, self.term()?);
        }
    }

    fn term(&mut self) -> Result<Expr, AdapterError> {
        let mut left = self.factor()?;
        loop {
            let op = match self.peek() {
                Some(Token::Star) => BinOp::Mul,
                Some(Token::Slash) => BinOp::Div,
                _ => return Ok(left),
            };
            self.pos += 1;
            left = Expr::binary(op, left, self.factor()?);
        }
    }

    fn factor(&mut self) -> Result<Expr, AdapterError> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Token::X) => {
                self.pos += 1;
                Ok(Expr::Var)
            }
            Some(Token::Minus) => {
                self.pos += 1;
                self.enter()?;
                let e = self.factor()?;
                self.nesting -= 1;
                Ok(Expr::Neg(Box::new(e)))
            }
            Some(Token::LParen) => {
                self.pos += 1;
                self.enter()?;
                let e = self.expr()?;
                self.nesting -= 1;
                if self.peek() != Some(&Token::RParen) {
                    return Err(self.unexpected());
                }
                self.pos += 1;
                Ok(e)
            }
            _ => Err(self.unexpected()),
        }
    }
}

pub fn parse_formula(src: &str) -> Result<Expr, AdapterError> {
    let tokens = lex(src)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end: src.len(),
        nesting: 0,
    };
    let e = p.expr()?;
    if let Some((pos, _)) = p.tokens.get(p.pos) {
        return Err(AdapterError::TrailingInput(*pos));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(
            parse_formula("x * 0.2").unwrap(),
            Expr::binary(BinOp::Mul, Expr::Var, Expr::Const(0.2))
        );
        assert_eq!(
            parse_formula("x * 1.8 + 32.0").unwrap(),
            Expr::binary(
                BinOp::Add,
                Expr::binary(BinOp::Mul, Expr::Var, Expr::Const(1.8)),
                Expr::Const(32.0)
            )
        );
        assert_eq!(
            parse_formula("x - 1 - 2").unwrap(),
            Expr::binary(
                BinOp::Sub,
                Expr::binary(BinOp::Sub, Expr::Var, Expr::Const(1.0)),
                Expr::Const(2.0)
            )
        );
        assert_eq!(
            parse_formula("-(x)/2e1").unwrap(),
            Expr::binary(BinOp::Div, Expr::Neg(Box::new(Expr::Var)), Expr::Const(20.0))
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_formula("x + * 2"), Err(AdapterError::UnexpectedToken { pos: 4, .. })));
        assert!(matches!(parse_formula("y + 1"), Err(AdapterError::UnknownIdentifier(_))));
        assert!(matches!(parse_formula("x 1"), Err(AdapterError::TrailingInput(2))));
        assert!(matches!(parse_formula("x $ 1"), Err(AdapterError::Lex { pos: 2, ch: '$' })));
        assert!(matches!(parse_formula("1e"), Err(AdapterError::Lex { .. })));
        assert!(matches!(parse_formula("(x"), Err(AdapterError::UnexpectedToken { .. })));
        assert!(matches!(parse_formula(""), Err(AdapterError::UnexpectedToken { .. })));
        let deep = format!("{}x{}", "(".repeat(100), ")".repeat(100));
        assert!(matches!(parse_formula(&deep), Err(AdapterError::DepthExceeded(_))));
    }

    #[test]
    fn display_roundtrip() {
        let e = parse_formula("-(x + 3.5) * x / 1e-3 - 2").unwrap();
        assert_eq!(parse_formula(&e.to_string()).unwrap(), e);
    }
}
