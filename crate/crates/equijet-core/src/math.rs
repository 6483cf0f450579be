//! Scalar math shims: std intrinsics when available, `libm` otherwise.
//!
//! Everything is `f64`. Keeping the indirection in one place lets the rest of
//! the crate stay oblivious to whether it is built against std.

#![allow(dead_code)]

#[cfg(feature = "std")]
mod imp {
    pub fn sqrt(x: f64) -> f64 {
        x.sqrt()
    }
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
    pub fn ln(x: f64) -> f64 {
        x.ln()
    }
    pub fn ln_1p(x: f64) -> f64 {
        x.ln_1p()
    }
    pub fn sin(x: f64) -> f64 {
        x.sin()
    }
    pub fn cos(x: f64) -> f64 {
        x.cos()
    }
    pub fn atan2(y: f64, x: f64) -> f64 {
        y.atan2(x)
    }
    pub fn abs(x: f64) -> f64 {
        x.abs()
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn ln_1p(x: f64) -> f64 {
        libm::log1p(x)
    }
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    pub fn atan2(y: f64, x: f64) -> f64 {
        libm::atan2(y, x)
    }
    pub fn abs(x: f64) -> f64 {
        libm::fabs(x)
    }
}

pub use imp::*;

/// Inverse function of sinh, `ln(x + sqrt(x^2 + 1))`.
pub fn asinh(x: f64) -> f64 {
    // Route through the magnitude so the log argument never cancels.
    let a = abs(x);
    let r = ln_1p(a + a * a / (sqrt(a * a + 1.0) + 1.0));
    if x < 0.0 {
        -r
    } else {
        r
    }
}

/// Hyperbolic sine via exponentials; adequate for the small arguments used here.
pub fn sinh(x: f64) -> f64 {
    0.5 * (exp(x) - exp(-x))
}
