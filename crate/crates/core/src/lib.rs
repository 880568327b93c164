//! Control-variate corrected approximate convolution.
//!
//! Approximate 8-bit MAC arithmetic where the multiplier skips the `m`
//! least-significant partial products of the activation operand
//! (partial product perforation), and where the resulting convolution error
//! is corrected with a control variate `V = C * sum(x_j)`, `C` being the mean
//! of the filter weights.
//!
//! The crate is organised as:
//!
//! - [`quant`]: quantized tensors, models and the accurate integer reference path.
//! - [`perforation`]: the perforated multiplier and closed-form error moments.
//! - [`cvconv`]: the control-variate convolution and approximate model forward pass.
//! - [`systolic`]: a functional and cycle model of the MAC array (MAC* / MAC+ units).
//! - [`cost`]: the full-adder cost model.
//! - [`stats`]: Monte Carlo and exhaustive verification of the error moments.
//! - [`io`] and [`fixture`]: model / dataset files, reports and the synthetic fixture.

pub mod cost;
pub mod cvconv;
mod error;
pub mod fixture;
pub mod io;
pub mod perforation;
pub mod quant;
pub mod stats;
pub mod systolic;

pub use error::{Error, Result};

/// Exact rational number used for all closed-form statistics.
pub type Rational = num_rational::Ratio<i128>;

/// Lossy conversion of a [`Rational`] to `f64`.
pub fn rational_to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Renders a rational as `p` or `p/q`.
pub fn rational_to_string(r: &Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}
