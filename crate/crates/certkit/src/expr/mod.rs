//! Symbolic scalar expressions over state, input, and noise variables.
//!
//! Expressions carry the model dynamics and set-constraint functions. They
//! support point evaluation, outward-rounded interval evaluation, and
//! symbolic differentiation. Values are immutable after construction and all
//! operations are pure, so expressions can be shared freely across workers.

mod interval;
mod parse;

pub use interval::{Hyperbox, Interval, IntervalError, PAD_ULPS};
pub use parse::{parse_expr, Dims, ParseError};

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by a near-zero denominator ({0:e})")]
    DivisionNearZero(f64),
    #[error("evaluation produced a non-finite result")]
    NonFiniteResult,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("expression contains a non-differentiable node ({0}) on a differentiated path")]
    NonDifferentiableNode(&'static str),
}

/// Denominators smaller than this in magnitude are rejected during point
/// evaluation rather than silently overflowing.
pub const DIV_GUARD: f64 = 1e-300;

/// A variable an expression can be differentiated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    State(usize),
    Input(usize),
}

/// Expression tree. Variable indices are zero-based and validated against
/// the declared dimensions at parse/construction time.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    State(usize),
    Input(usize),
    Noise(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    PowInt(Box<Expr>, u32),
    Exp(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Tanh(Box<Expr>),
    Abs(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
}

fn fold1(f: fn(f64) -> f64, e: Expr, wrap: fn(Box<Expr>) -> Expr) -> Expr {
    if let Expr::Const(c) = e {
        let v = f(c);
        if v.is_finite() {
            return Expr::Const(v);
        }
    }
    wrap(Box::new(e))
}

fn fold2(f: fn(f64, f64) -> f64, a: Expr, b: Expr, wrap: fn(Box<Expr>, Box<Expr>) -> Expr) -> Expr {
    if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
        let v = f(*x, *y);
        if v.is_finite() {
            return Expr::Const(v);
        }
    }
    wrap(Box::new(a), Box::new(b))
}

/// Smart constructors with constant folding of literal subtrees. No other
/// simplification is performed.
impl Expr {
    pub fn add(a: Expr, b: Expr) -> Expr {
        fold2(|x, y| x + y, a, b, Expr::Add)
    }
    pub fn sub(a: Expr, b: Expr) -> Expr {
        fold2(|x, y| x - y, a, b, Expr::Sub)
    }
    pub fn mul(a: Expr, b: Expr) -> Expr {
        fold2(|x, y| x * y, a, b, Expr::Mul)
    }
    pub fn div(a: Expr, b: Expr) -> Expr {
        if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
            if y.abs() >= DIV_GUARD && (x / y).is_finite() {
                return Expr::Const(x / y);
            }
        }
        Expr::Div(Box::new(a), Box::new(b))
    }
    pub fn neg(a: Expr) -> Expr {
        fold1(|x| -x, a, Expr::Neg)
    }
    pub fn pow_int(a: Expr, p: u32) -> Expr {
        if let Expr::Const(x) = &a {
            let v = x.powi(p as i32);
            if v.is_finite() {
                return Expr::Const(v);
            }
        }
        Expr::PowInt(Box::new(a), p)
    }
    pub fn exp(a: Expr) -> Expr {
        fold1(f64::exp, a, Expr::Exp)
    }
    pub fn sin(a: Expr) -> Expr {
        fold1(f64::sin, a, Expr::Sin)
    }
    pub fn cos(a: Expr) -> Expr {
        fold1(f64::cos, a, Expr::Cos)
    }
    pub fn tanh(a: Expr) -> Expr {
        fold1(f64::tanh, a, Expr::Tanh)
    }
    pub fn abs(a: Expr) -> Expr {
        fold1(f64::abs, a, Expr::Abs)
    }
    pub fn min(a: Expr, b: Expr) -> Expr {
        fold2(f64::min, a, b, Expr::Min)
    }
    pub fn max(a: Expr, b: Expr) -> Expr {
        fold2(f64::max, a, b, Expr::Max)
    }

    /// Point evaluation under IEEE double semantics.
    pub fn eval(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<f64, EvalError> {
        let v = self.eval_inner(x, u, w)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFiniteResult)
        }
    }

    fn eval_inner(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::State(i) => x[*i],
            Expr::Input(j) => u[*j],
            Expr::Noise(k) => w[*k],
            Expr::Add(a, b) => a.eval_inner(x, u, w)? + b.eval_inner(x, u, w)?,
            Expr::Sub(a, b) => a.eval_inner(x, u, w)? - b.eval_inner(x, u, w)?,
            Expr::Mul(a, b) => a.eval_inner(x, u, w)? * b.eval_inner(x, u, w)?,
            Expr::Div(a, b) => {
                let den = b.eval_inner(x, u, w)?;
                if den.abs() < DIV_GUARD {
                    return Err(EvalError::DivisionNearZero(den));
                }
                a.eval_inner(x, u, w)? / den
            }
            Expr::Neg(a) => -a.eval_inner(x, u, w)?,
            Expr::PowInt(a, p) => a.eval_inner(x, u, w)?.powi(*p as i32),
            Expr::Exp(a) => a.eval_inner(x, u, w)?.exp(),
            Expr::Sin(a) => a.eval_inner(x, u, w)?.sin(),
            Expr::Cos(a) => a.eval_inner(x, u, w)?.cos(),
            Expr::Tanh(a) => a.eval_inner(x, u, w)?.tanh(),
            Expr::Abs(a) => a.eval_inner(x, u, w)?.abs(),
            Expr::Min(a, b) => a.eval_inner(x, u, w)?.min(b.eval_inner(x, u, w)?),
            Expr::Max(a, b) => a.eval_inner(x, u, w)?.max(b.eval_inner(x, u, w)?),
        })
    }

    /// Sound enclosure of the expression's range over the given boxes.
    pub fn interval_eval(
        &self,
        bx: &Hyperbox,
        bu: &Hyperbox,
        bw: &Hyperbox,
    ) -> Result<Interval, IntervalError> {
        Ok(match self {
            Expr::Const(c) => Interval::point(*c)?,
            Expr::State(i) => *bx.interval(*i),
            Expr::Input(j) => *bu.interval(*j),
            Expr::Noise(k) => *bw.interval(*k),
            Expr::Add(a, b) => a
                .interval_eval(bx, bu, bw)?
                .add(&b.interval_eval(bx, bu, bw)?)?,
            Expr::Sub(a, b) => a
                .interval_eval(bx, bu, bw)?
                .sub(&b.interval_eval(bx, bu, bw)?)?,
            Expr::Mul(a, b) => a
                .interval_eval(bx, bu, bw)?
                .mul(&b.interval_eval(bx, bu, bw)?)?,
            Expr::Div(a, b) => a
                .interval_eval(bx, bu, bw)?
                .div(&b.interval_eval(bx, bu, bw)?)?,
            Expr::Neg(a) => a.interval_eval(bx, bu, bw)?.neg(),
            Expr::PowInt(a, p) => a.interval_eval(bx, bu, bw)?.pow_int(*p)?,
            Expr::Exp(a) => a.interval_eval(bx, bu, bw)?.exp()?,
            Expr::Sin(a) => a.interval_eval(bx, bu, bw)?.sin()?,
            Expr::Cos(a) => a.interval_eval(bx, bu, bw)?.cos()?,
            Expr::Tanh(a) => a.interval_eval(bx, bu, bw)?.tanh()?,
            Expr::Abs(a) => a.interval_eval(bx, bu, bw)?.abs(),
            Expr::Min(a, b) => a
                .interval_eval(bx, bu, bw)?
                .min(&b.interval_eval(bx, bu, bw)?),
            Expr::Max(a, b) => a
                .interval_eval(bx, bu, bw)?
                .max(&b.interval_eval(bx, bu, bw)?),
        })
    }

    /// Symbolic partial derivative with respect to state variable `var`.
    pub fn differentiate(&self, var: usize) -> Result<Expr, DiffError> {
        self.diff(Var::State(var))
    }

    /// Partial derivative with respect to any state or input variable.
    ///
    /// Abs/Min/Max subtrees that do not depend on `var` act as constants;
    /// on a dependent path they are rejected.
    pub fn diff(&self, var: Var) -> Result<Expr, DiffError> {
        if !self.depends_on(var) {
            return Ok(Expr::Const(0.0));
        }
        Ok(match self {
            Expr::Const(_) | Expr::Noise(_) => Expr::Const(0.0),
            Expr::State(i) => {
                if var == Var::State(*i) {
                    Expr::Const(1.0)
                } else {
                    Expr::Const(0.0)
                }
            }
            Expr::Input(j) => {
                if var == Var::Input(*j) {
                    Expr::Const(1.0)
                } else {
                    Expr::Const(0.0)
                }
            }
            Expr::Add(a, b) => Expr::add(a.diff(var)?, b.diff(var)?),
            Expr::Sub(a, b) => Expr::sub(a.diff(var)?, b.diff(var)?),
            Expr::Mul(a, b) => Expr::add(
                Expr::mul(a.diff(var)?, (**b).clone()),
                Expr::mul((**a).clone(), b.diff(var)?),
            ),
            Expr::Div(a, b) => Expr::div(
                Expr::sub(
                    Expr::mul(a.diff(var)?, (**b).clone()),
                    Expr::mul((**a).clone(), b.diff(var)?),
                ),
                Expr::mul((**b).clone(), (**b).clone()),
            ),
            Expr::Neg(a) => Expr::neg(a.diff(var)?),
            Expr::PowInt(a, p) => {
                if *p == 0 {
                    Expr::Const(0.0)
                } else {
                    Expr::mul(
                        Expr::mul(Expr::Const(*p as f64), Expr::pow_int((**a).clone(), p - 1)),
                        a.diff(var)?,
                    )
                }
            }
            Expr::Exp(a) => Expr::mul(Expr::exp((**a).clone()), a.diff(var)?),
            Expr::Sin(a) => Expr::mul(Expr::cos((**a).clone()), a.diff(var)?),
            Expr::Cos(a) => Expr::neg(Expr::mul(Expr::sin((**a).clone()), a.diff(var)?)),
            Expr::Tanh(a) => Expr::mul(
                Expr::sub(
                    Expr::Const(1.0),
                    Expr::pow_int(Expr::tanh((**a).clone()), 2),
                ),
                a.diff(var)?,
            ),
            Expr::Abs(_) => return Err(DiffError::NonDifferentiableNode("abs")),
            Expr::Min(_, _) => return Err(DiffError::NonDifferentiableNode("min")),
            Expr::Max(_, _) => return Err(DiffError::NonDifferentiableNode("max")),
        })
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) | Expr::Noise(_) => false,
            Expr::State(i) => var == Var::State(*i),
            Expr::Input(j) => var == Var::Input(*j),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.depends_on(var) || b.depends_on(var),
            Expr::Neg(a)
            | Expr::PowInt(a, _)
            | Expr::Exp(a)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Tanh(a)
            | Expr::Abs(a) => a.depends_on(var),
        }
    }

    pub fn uses_noise(&self) -> bool {
        match self {
            Expr::Noise(_) => true,
            Expr::Const(_) | Expr::State(_) | Expr::Input(_) => false,
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.uses_noise() || b.uses_noise(),
            Expr::Neg(a)
            | Expr::PowInt(a, _)
            | Expr::Exp(a)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Tanh(a)
            | Expr::Abs(a) => a.uses_noise(),
        }
    }

    pub fn uses_input(&self) -> bool {
        match self {
            Expr::Input(_) => true,
            Expr::Const(_) | Expr::State(_) | Expr::Noise(_) => false,
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.uses_input() || b.uses_input(),
            Expr::Neg(a)
            | Expr::PowInt(a, _)
            | Expr::Exp(a)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Tanh(a)
            | Expr::Abs(a) => a.uses_input(),
        }
    }

    /// True when the tree contains only nodes expressible as polynomials
    /// (plus division), i.e. no transcendental or piecewise nodes.
    pub fn is_polynomial(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::State(_) | Expr::Input(_) | Expr::Noise(_) => true,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.is_polynomial() && b.is_polynomial()
            }
            Expr::Neg(a) | Expr::PowInt(a, _) => a.is_polynomial(),
            Expr::Exp(_)
            | Expr::Sin(_)
            | Expr::Cos(_)
            | Expr::Tanh(_)
            | Expr::Abs(_)
            | Expr::Min(_, _)
            | Expr::Max(_, _) => false,
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(_, _) | Expr::Sub(_, _) => 1,
            Expr::Mul(_, _) | Expr::Div(_, _) => 2,
            Expr::Neg(_) => 3,
            Expr::PowInt(_, _) => 4,
            _ => 5,
        }
    }

    fn fmt_child(&self, child: &Expr, min_prec: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let _ = self;
        if child.precedence() < min_prec {
            write!(f, "({child})")
        } else {
            write!(f, "{child}")
        }
    }
}


impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    // Render through the grammar's unary minus.
                    write!(f, "-{}", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::State(i) => write!(f, "x{}", i + 1),
            Expr::Input(j) => write!(f, "u{}", j + 1),
            Expr::Noise(k) => write!(f, "w{}", k + 1),
            Expr::Add(a, b) => {
                self.fmt_child(a, 1, f)?;
                write!(f, " + ")?;
                self.fmt_child(b, 2, f)
            }
            Expr::Sub(a, b) => {
                self.fmt_child(a, 1, f)?;
                write!(f, " - ")?;
                self.fmt_child(b, 2, f)
            }
            Expr::Mul(a, b) => {
                self.fmt_child(a, 2, f)?;
                write!(f, "*")?;
                self.fmt_child(b, 3, f)
            }
            Expr::Div(a, b) => {
                self.fmt_child(a, 2, f)?;
                write!(f, "/")?;
                self.fmt_child(b, 3, f)
            }
            Expr::Neg(a) => {
                write!(f, "-")?;
                // Grammar: '-' applies to an atom, binding tighter than '^'.
                if a.precedence() == 5 {
                    write!(f, "{a}")
                } else {
                    write!(f, "({a})")
                }
            }
            Expr::PowInt(a, p) => {
                if a.precedence() == 5 {
                    write!(f, "{a}^{p}")
                } else {
                    write!(f, "({a})^{p}")
                }
            }
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Tanh(a) => write!(f, "tanh({a})"),
            Expr::Abs(a) => write!(f, "abs({a})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
        }
    }
}
