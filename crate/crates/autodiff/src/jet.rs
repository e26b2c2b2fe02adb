//! First-order spatial jets: a value plus its three partial derivatives
//! with respect to a 3D evaluation point.
//!
//! Jets propagate spatial derivatives forward through arbitrary smooth
//! operations. The tape records jet-valued nodes, so reverse passes over
//! jet quantities yield mixed second derivatives (parameter gradients of
//! spatial gradients).

use std::ops::{Add, Div, Mul, Neg, Sub};

/// A scalar carrying forward-mode partials along the three spatial axes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d: [f64; 3],
}

impl Jet {
    pub const ZERO: Jet = Jet { v: 0.0, d: [0.0; 3] };

    /// A constant (zero spatial derivative).
    #[inline]
    pub fn constant(v: f64) -> Self {
        Jet { v, d: [0.0; 3] }
    }

    /// A coordinate seeded along `axis`, i.e. d(x_axis)/d(x_axis) = 1.
    #[inline]
    pub fn seeded(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Jet { v, d }
    }

    #[inline]
    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.d.iter().all(|x| x.is_finite())
    }

    /// Apply a smooth unary function given its value and first derivative
    /// at `self.v`.
    #[inline]
    pub fn lift(self, value: f64, deriv: f64) -> Jet {
        Jet {
            v: value,
            d: [deriv * self.d[0], deriv * self.d[1], deriv * self.d[2]],
        }
    }

    #[inline]
    pub fn sin(self) -> Jet {
        self.lift(self.v.sin(), self.v.cos())
    }

    #[inline]
    pub fn cos(self) -> Jet {
        self.lift(self.v.cos(), -self.v.sin())
    }

    #[inline]
    pub fn exp(self) -> Jet {
        let e = self.v.exp();
        self.lift(e, e)
    }

    #[inline]
    pub fn sqrt(self) -> Jet {
        let r = self.v.sqrt();
        self.lift(r, 0.5 / r)
    }

    #[inline]
    pub fn abs(self) -> Jet {
        self.lift(self.v.abs(), if self.v >= 0.0 { 1.0 } else { -1.0 })
    }

    /// Numerically stable softplus of sharpness `beta`.
    #[inline]
    pub fn softplus(self, beta: f64) -> Jet {
        self.lift(softplus(self.v, beta), sigmoid(beta * self.v))
    }

    #[inline]
    pub fn sigmoid(self) -> Jet {
        let s = sigmoid(self.v);
        self.lift(s, s * (1.0 - s))
    }

    #[inline]
    pub fn scale(self, k: f64) -> Jet {
        Jet {
            v: k * self.v,
            d: [k * self.d[0], k * self.d[1], k * self.d[2]],
        }
    }

    /// max(self, k): derivative 1 on the active branch, 0 otherwise.
    #[inline]
    pub fn max_const(self, k: f64) -> Jet {
        if self.v >= k {
            self
        } else {
            Jet::constant(k)
        }
    }
}

/// softplus(x) = ln(1 + e^(beta x)) / beta, evaluated without overflow.
#[inline]
pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 0.0 {
        x + (-bx).exp().ln_1p() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Add for Jet {
    type Output = Jet;
    #[inline]
    fn add(self, rhs: Jet) -> Jet {
        Jet {
            v: self.v + rhs.v,
            d: [
                self.d[0] + rhs.d[0],
                self.d[1] + rhs.d[1],
                self.d[2] + rhs.d[2],
            ],
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    #[inline]
    fn sub(self, rhs: Jet) -> Jet {
        Jet {
            v: self.v - rhs.v,
            d: [
                self.d[0] - rhs.d[0],
                self.d[1] - rhs.d[1],
                self.d[2] - rhs.d[2],
            ],
        }
    }
}

impl Mul for Jet {
    type Output = Jet;
    #[inline]
    fn mul(self, rhs: Jet) -> Jet {
        Jet {
            v: self.v * rhs.v,
            d: [
                self.v * rhs.d[0] + self.d[0] * rhs.v,
                self.v * rhs.d[1] + self.d[1] * rhs.v,
                self.v * rhs.d[2] + self.d[2] * rhs.v,
            ],
        }
    }
}

impl Div for Jet {
    type Output = Jet;
    #[inline]
    fn div(self, rhs: Jet) -> Jet {
        let v = self.v / rhs.v;
        Jet {
            v,
            d: [
                (self.d[0] - v * rhs.d[0]) / rhs.v,
                (self.d[1] - v * rhs.d[1]) / rhs.v,
                (self.d[2] - v * rhs.d[2]) / rhs.v,
            ],
        }
    }
}

impl Neg for Jet {
    type Output = Jet;
    #[inline]
    fn neg(self) -> Jet {
        Jet {
            v: -self.v,
            d: [-self.d[0], -self.d[1], -self.d[2]],
        }
    }
}
