//! Outward-rounded interval arithmetic.
//!
//! Every arithmetic operation pads its computed bounds by [`PAD_ULPS`] ulps
//! in the outward direction, so enclosures stay sound without touching the
//! FPU rounding mode. Exact operations (negation, abs, min, max) are not
//! padded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of ulps each computed bound is pushed outward.
pub const PAD_ULPS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntervalError {
    #[error("interval division by an interval containing zero: [{0}, {1}]")]
    DivisionByZero(f64, f64),
    #[error("non-finite interval bound: [{0}, {1}]")]
    NonFiniteBound(f64, f64),
    #[error("invalid interval: lo {0} > hi {1}")]
    Malformed(f64, f64),
}

/// A closed interval `[lo, hi]` with finite bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

fn pad_down(mut x: f64) -> f64 {
    for _ in 0..PAD_ULPS {
        x = x.next_down();
    }
    x
}

fn pad_up(mut x: f64) -> f64 {
    for _ in 0..PAD_ULPS {
        x = x.next_up();
    }
    x
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, IntervalError> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(IntervalError::NonFiniteBound(lo, hi));
        }
        if lo > hi {
            return Err(IntervalError::Malformed(lo, hi));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(x: f64) -> Result<Self, IntervalError> {
        Self::new(x, x)
    }

    /// Construct with outward padding applied to both bounds.
    fn padded(lo: f64, hi: f64) -> Result<Self, IntervalError> {
        Self::new(pad_down(lo), pad_up(hi))
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn add(&self, o: &Interval) -> Result<Interval, IntervalError> {
        Interval::padded(self.lo + o.lo, self.hi + o.hi)
    }

    pub fn sub(&self, o: &Interval) -> Result<Interval, IntervalError> {
        Interval::padded(self.lo - o.hi, self.hi - o.lo)
    }

    pub fn neg(&self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }

    pub fn mul(&self, o: &Interval) -> Result<Interval, IntervalError> {
        let products = [
            self.lo * o.lo,
            self.lo * o.hi,
            self.hi * o.lo,
            self.hi * o.hi,
        ];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in products {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        Interval::padded(lo, hi)
    }

    pub fn scale(&self, c: f64) -> Result<Interval, IntervalError> {
        if c >= 0.0 {
            Interval::padded(self.lo * c, self.hi * c)
        } else {
            Interval::padded(self.hi * c, self.lo * c)
        }
    }

    pub fn div(&self, o: &Interval) -> Result<Interval, IntervalError> {
        if o.lo <= 0.0 && o.hi >= 0.0 {
            return Err(IntervalError::DivisionByZero(o.lo, o.hi));
        }
        let quotients = [
            self.lo / o.lo,
            self.lo / o.hi,
            self.hi / o.lo,
            self.hi / o.hi,
        ];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for q in quotients {
            lo = lo.min(q);
            hi = hi.max(q);
        }
        Interval::padded(lo, hi)
    }

    /// `self^p` for integer exponent `p >= 0`, using the even-power rule for
    /// sign-crossing intervals.
    pub fn pow_int(&self, p: u32) -> Result<Interval, IntervalError> {
        if p == 0 {
            return Interval::point(1.0);
        }
        let (lo, hi) = if p % 2 == 1 {
            (self.lo.powi(p as i32), self.hi.powi(p as i32))
        } else if self.lo >= 0.0 {
            (self.lo.powi(p as i32), self.hi.powi(p as i32))
        } else if self.hi <= 0.0 {
            (self.hi.powi(p as i32), self.lo.powi(p as i32))
        } else {
            (0.0, self.lo.abs().max(self.hi.abs()).powi(p as i32))
        };
        Interval::padded(lo, hi)
    }

    pub fn exp(&self) -> Result<Interval, IntervalError> {
        Interval::padded(self.lo.exp(), self.hi.exp())
    }

    pub fn tanh(&self) -> Result<Interval, IntervalError> {
        let iv = Interval::padded(self.lo.tanh(), self.hi.tanh())?;
        Ok(iv.clamp_to(-1.0, 1.0))
    }

    pub fn abs(&self) -> Interval {
        if self.lo >= 0.0 {
            *self
        } else if self.hi <= 0.0 {
            self.neg()
        } else {
            Interval {
                lo: 0.0,
                hi: (-self.lo).max(self.hi),
            }
        }
    }

    pub fn min(&self, o: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(o.lo),
            hi: self.hi.min(o.hi),
        }
    }

    pub fn max(&self, o: &Interval) -> Interval {
        Interval {
            lo: self.lo.max(o.lo),
            hi: self.hi.max(o.hi),
        }
    }

    pub fn sin(&self) -> Result<Interval, IntervalError> {
        self.trig(0.0)
    }

    pub fn cos(&self) -> Result<Interval, IntervalError> {
        // cos(x) = sin(x + pi/2); shift extremum detection instead of the
        // argument so no rounding enters the evaluation path.
        self.trig(std::f64::consts::FRAC_PI_2)
    }

    /// Shared sin/cos kernel. `phase` is 0 for sin, pi/2 for cos; extrema of
    /// sin(x + phase) sit at x = pi/2 - phase + k*pi.
    fn trig(&self, phase: f64) -> Result<Interval, IntervalError> {
        let f = |x: f64| (x + phase).sin();
        if self.width() >= 2.0 * std::f64::consts::PI {
            return Ok(Interval { lo: -1.0, hi: 1.0 });
        }
        let mut lo = f(self.lo).min(f(self.hi));
        let mut hi = f(self.lo).max(f(self.hi));
        // Conservatively scan candidate extrema x = pi/2 - phase + k*pi with
        // one extra k on each side to absorb rounding in the k range.
        let pi = std::f64::consts::PI;
        let base = std::f64::consts::FRAC_PI_2 - phase;
        let k_lo = ((self.lo - base) / pi).floor() as i64 - 1;
        let k_hi = ((self.hi - base) / pi).ceil() as i64 + 1;
        for k in k_lo..=k_hi {
            let x = base + (k as f64) * pi;
            if x >= self.lo && x <= self.hi {
                let v = f(x);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let iv = Interval::padded(lo, hi)?;
        Ok(iv.clamp_to(-1.0, 1.0))
    }

    fn clamp_to(&self, lo: f64, hi: f64) -> Interval {
        Interval {
            lo: self.lo.max(lo),
            hi: self.hi.min(hi),
        }
    }
}

/// An axis-aligned box: one interval per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperbox {
    dims: Vec<Interval>,
}

impl Hyperbox {
    pub fn new(dims: Vec<Interval>) -> Self {
        Self { dims }
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self, IntervalError> {
        let dims = bounds
            .iter()
            .map(|&(lo, hi)| Interval::new(lo, hi))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { dims })
    }

    pub fn empty() -> Self {
        Self { dims: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.dims
    }

    pub fn interval(&self, i: usize) -> &Interval {
        &self.dims[i]
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.dims).all(|(&v, iv)| iv.contains(v))
    }

    pub fn contains_box(&self, other: &Hyperbox) -> bool {
        other.dim() == self.dim()
            && self
                .dims
                .iter()
                .zip(&other.dims)
                .all(|(a, b)| a.contains_interval(b))
    }

    pub fn intersects(&self, other: &Hyperbox) -> bool {
        other.dim() == self.dim()
            && self
                .dims
                .iter()
                .zip(&other.dims)
                .all(|(a, b)| a.intersects(b))
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.dims.iter().map(|iv| iv.midpoint()).collect()
    }

    pub fn max_width(&self) -> f64 {
        self.dims.iter().map(|iv| iv.width()).fold(0.0, f64::max)
    }

    /// Index of the widest dimension; ties broken by lowest index.
    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        let mut w = f64::NEG_INFINITY;
        for (i, iv) in self.dims.iter().enumerate() {
            if iv.width() > w {
                w = iv.width();
                best = i;
            }
        }
        best
    }

    /// Bisect along `axis` at the midpoint.
    pub fn bisect(&self, axis: usize) -> (Hyperbox, Hyperbox) {
        let mid = self.dims[axis].midpoint();
        let mut left = self.clone();
        let mut right = self.clone();
        left.dims[axis] = Interval {
            lo: self.dims[axis].lo,
            hi: mid,
        };
        right.dims[axis] = Interval {
            lo: mid,
            hi: self.dims[axis].hi,
        };
        (left, right)
    }
}
