//! Recursive-descent parser for the expression grammar:
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := ['-'] atom ['^' uint]
//! atom   := number | ident | func '(' expr (',' expr)? ')' | '(' expr ')'
//! ident  := 'x'uint | 'u'uint | 'w'uint        (1-based in text)
//! func   := sin | cos | exp | tanh | abs | min | max
//! ```
//!
//! Unary minus binds tighter than `^`, so `-x1^2` is `(-x1)^2`.

use super::Expr;
use thiserror::Error;

/// Declared dimensions `(n_state, n_input, n_noise)` an expression's
/// variable indices are validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_state: usize,
    pub n_input: usize,
    pub n_noise: usize,
}

impl Dims {
    pub fn new(n_state: usize, n_input: usize, n_noise: usize) -> Self {
        Self {
            n_state,
            n_input,
            n_noise,
        }
    }

    pub fn state_only(n_state: usize) -> Self {
        Self::new(n_state, 0, 0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("variable `{name}` out of range at byte {pos}: {reason}")]
    IndexOutOfRange {
        pos: usize,
        name: String,
        reason: String,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_expected_trees() {
        let e = parse_expr("x1 + 2*x2", Dims::state_only(2)).unwrap();
        assert_eq!(
            e,
            Expr::Add(
                Box::new(Expr::State(0)),
                Box::new(Expr::Mul(
                    Box::new(Expr::Const(2.0)),
                    Box::new(Expr::State(1))
                ))
            )
        );
        assert_eq!(
            parse_expr("-x1", Dims::state_only(1)).unwrap(),
            Expr::Neg(Box::new(Expr::State(0)))
        );
    }

    #[test]
    fn literal_subtrees_fold() {
        assert_eq!(
            parse_expr("2 + 3*4", Dims::state_only(1)).unwrap(),
            Expr::Const(14.0)
        );
    }

    #[test]
    fn unary_minus_binds_tighter_than_pow() {
        let e = parse_expr("-x1^2", Dims::state_only(1)).unwrap();
        assert_eq!(e.eval(&[2.0], &[], &[]), Ok(4.0));
    }

    #[test]
    fn out_of_range_variables_are_rejected() {
        assert!(matches!(
            parse_expr("u1*tanh(x1)", Dims::new(1, 0, 0)),
            Err(ParseError::IndexOutOfRange { name, .. }) if name == "u1"
        ));
        assert!(matches!(
            parse_expr("x0", Dims::state_only(2)),
            Err(ParseError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            parse_expr("x3", Dims::state_only(2)),
            Err(ParseError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn diagnostics_carry_positions() {
        assert!(matches!(
            parse_expr("x1 + foo(x1)", Dims::state_only(1)),
            Err(ParseError::UnknownIdentifier { pos: 5, .. })
        ));
        assert!(matches!(
            parse_expr("x1 + ", Dims::state_only(1)),
            Err(ParseError::Syntax { pos: 5, .. })
        ));
        assert!(matches!(
            parse_expr("min(x1)", Dims::state_only(1)),
            Err(ParseError::Syntax { .. })
        ));
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dims: Dims,
}

/// Parse `text` against the declared dimensions.
pub fn parse_expr(text: &str, dims: Dims) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        dims,
    };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

impl<'a> Parser<'a> {
    fn syntax(&self, msg: &str) -> ParseError {
        ParseError::Syntax {
            pos: self.pos,
            message: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            self.skip_ws();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.term()?;
        loop {
            if self.eat(b'+') {
                e = Expr::add(e, self.term()?);
            } else if self.eat(b'-') {
                e = Expr::sub(e, self.term()?);
            } else {
                return Ok(e);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.factor()?;
        loop {
            if self.eat(b'*') {
                e = Expr::mul(e, self.factor()?);
            } else if self.eat(b'/') {
                e = Expr::div(e, self.factor()?);
            } else {
                return Ok(e);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let negated = self.eat(b'-');
        let mut a = self.atom()?;
        if negated {
            a = Expr::neg(a);
        }
        if self.eat(b'^') {
            let p = self.uint()?;
            a = Expr::pow_int(a, p);
        }
        Ok(a)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_lowercase() => self.ident_or_call(),
            Some(b'(') => {
                self.expect(b'(')?;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) => Err(self.syntax(&format!("unexpected character `{}`", c as char))),
            None => Err(self.syntax("unexpected end of input")),
        }
    }

    fn uint(&mut self) -> Result<u32, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.syntax("expected an unsigned integer"));
        }
        let s = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let v = s.parse::<u32>().map_err(|_| ParseError::Syntax {
            pos: start,
            message: format!("integer `{s}` out of range"),
        })?;
        self.skip_ws();
        Ok(v)
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if self.peek() == Some(b'e') || self.peek() == Some(b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.peek() == Some(b'+') || self.peek() == Some(b'-') {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // `e` belonged to something else; back out.
                self.pos = mark;
            }
        }
        let s = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let v = s.parse::<f64>().map_err(|_| ParseError::Syntax {
            pos: start,
            message: format!("malformed number `{s}`"),
        })?;
        if !v.is_finite() {
            return Err(ParseError::Syntax {
                pos: start,
                message: format!("number `{s}` overflows a double"),
            });
        }
        self.skip_ws();
        Ok(Expr::Const(v))
    }

    fn ident_or_call(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .to_string();
        self.skip_ws();
        match name.as_str() {
            "sin" | "cos" | "exp" | "tanh" | "abs" => {
                self.expect(b'(')?;
                let a = self.expr()?;
                self.expect(b')')?;
                Ok(match name.as_str() {
                    "sin" => Expr::sin(a),
                    "cos" => Expr::cos(a),
                    "exp" => Expr::exp(a),
                    "tanh" => Expr::tanh(a),
                    _ => Expr::abs(a),
                })
            }
            "min" | "max" => {
                self.expect(b'(')?;
                let a = self.expr()?;
                self.expect(b',')?;
                let b = self.expr()?;
                self.expect(b')')?;
                Ok(if name == "min" {
                    Expr::min(a, b)
                } else {
                    Expr::max(a, b)
                })
            }
            _ => self.variable(start, &name),
        }
    }

    fn variable(&self, start: usize, name: &str) -> Result<Expr, ParseError> {
        let unknown = || ParseError::UnknownIdentifier {
            pos: start,
            name: name.to_string(),
        };
        let mut chars = name.chars();
        let kind = chars.next().ok_or_else(unknown)?;
        let digits: String = chars.collect();
        if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
            return Err(unknown());
        }
        let idx: usize = digits.parse().map_err(|_| unknown())?;
        if idx == 0 {
            return Err(ParseError::IndexOutOfRange {
                pos: start,
                name: name.to_string(),
                reason: "variable indices are 1-based".to_string(),
            });
        }
        let (limit, build): (usize, fn(usize) -> Expr) = match kind {
            'x' => (self.dims.n_state, Expr::State),
            'u' => (self.dims.n_input, Expr::Input),
            'w' => (self.dims.n_noise, Expr::Noise),
            _ => return Err(unknown()),
        };
        if idx > limit {
            return Err(ParseError::IndexOutOfRange {
                pos: start,
                name: name.to_string(),
                reason: format!("only {limit} such variable(s) declared"),
            });
        }
        Ok(build(idx - 1))
    }
}
