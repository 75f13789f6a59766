//! Minimal scalar abstraction so the pose-interpolation math can run either on
//! plain `f64` (hot rendering path) or on forward-mode dual numbers (exact
//! derivatives of the small, branchy pose/trajectory chains where hand-derived
//! Jacobians would be error-prone).

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar operations needed by the interpolation and trajectory code.
///
/// Implemented for `f64` and [`Dual`]. Comparisons look only at the value
/// part, so branches taken under dual evaluation match the `f64` evaluation
/// at the same point.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    /// Value part (drops any derivative information).
    fn val(self) -> f64;
    /// True only when the scalars are interchangeable — equal value AND equal
    /// derivative content. Gates exact-shortcut branches (a value-only check
    /// would silently drop derivatives seeded through one of the operands).
    fn identical(self, other: Self) -> bool;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    /// Four-quadrant arctangent; `self` is `y`, the argument is `x`.
    fn atan2(self, x: Self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn identical(self, other: Self) -> bool {
        self == other
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
}

/// First-order dual number: carries a value and the derivative of that value
/// with respect to one seed direction. Seeding `dx = 1` on an input and
/// reading `dx` of the output gives the exact partial derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub x: f64,
    pub dx: f64,
}

impl Dual {
    #[inline]
    pub fn new(x: f64, dx: f64) -> Self {
        Dual { x, dx }
    }

    /// Constant (zero derivative).
    #[inline]
    pub fn c(x: f64) -> Self {
        Dual { x, dx: 0.0 }
    }

    /// Seeded variable (unit derivative).
    #[inline]
    pub fn var(x: f64) -> Self {
        Dual { x, dx: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, r: Dual) -> Dual {
        Dual::new(self.x + r.x, self.dx + r.dx)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, r: Dual) -> Dual {
        Dual::new(self.x - r.x, self.dx - r.dx)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, r: Dual) -> Dual {
        Dual::new(self.x * r.x, self.dx * r.x + self.x * r.dx)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, r: Dual) -> Dual {
        Dual::new(self.x / r.x, (self.dx * r.x - self.x * r.dx) / (r.x * r.x))
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.x, -self.dx)
    }
}

impl Real for Dual {
    #[inline]
    fn cst(x: f64) -> Self {
        Dual::c(x)
    }
    #[inline]
    fn val(self) -> f64 {
        self.x
    }
    #[inline]
    fn identical(self, other: Self) -> bool {
        self.x == other.x && self.dx == other.dx
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.x.sqrt();
        // Derivative blows up at 0; callers guard against sqrt at exactly 0.
        Dual::new(s, self.dx / (2.0 * s))
    }
    #[inline]
    fn sin(self) -> Self {
        Dual::new(self.x.sin(), self.dx * self.x.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        Dual::new(self.x.cos(), -self.dx * self.x.sin())
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.x.exp();
        Dual::new(e, self.dx * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.x.ln(), self.dx / self.x)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        let denom = self.x * self.x + x.x * x.x;
        Dual::new(
            self.x.atan2(x.x),
            (self.dx * x.x - self.x * x.dx) / denom,
        )
    }
}
