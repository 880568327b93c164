//! Partial product perforation of the activation operand.
//!
//! Skipping the `m` least-significant partial products of `w * a` is the same
//! as multiplying by `a` with its `m` low bits cleared, so the multiplication
//! error is `w * x` with `x = a mod 2^m`. With `x` uniform on `[0, 2^m - 1]`
//! the error moments have closed forms, computed here in exact rationals.

use serde::{Deserialize, Serialize};

use crate::{Error, Rational, Result};

pub const MAX_PERFORATION: u32 = 7;

/// Perforation depth and control-variate switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerforationConfig {
    m: u32,
    control_variate: bool,
}

impl PerforationConfig {
    pub fn new(m: u32, control_variate: bool) -> Result<Self> {
        if m > MAX_PERFORATION {
            return Err(Error::Config(format!(
                "perforation depth {m} outside [0, {MAX_PERFORATION}]"
            )));
        }
        Ok(PerforationConfig { m, control_variate })
    }

    /// No perforation; the approximate path is then exact.
    pub fn exact() -> Self {
        PerforationConfig {
            m: 0,
            control_variate: false,
        }
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn control_variate(&self) -> bool {
        self.control_variate
    }
}

/// Moments of the dropped activation bits `x ~ U{0, .., 2^m - 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultErrorModel {
    pub expected_x: Rational,
    pub var_x: Rational,
}

impl MultErrorModel {
    pub fn new(m: u32) -> Self {
        assert!(m <= MAX_PERFORATION);
        let p = 1i128 << m;
        MultErrorModel {
            expected_x: Rational::new(p - 1, 2),
            var_x: Rational::new((p - 1) * (p + 1), 12),
        }
    }
}

/// Mean and variance of a convolution error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Moments {
    pub mean: Rational,
    pub variance: Rational,
}

/// Splits `a` into its kept high part and the `m` perforated low bits:
/// `a == a_hi * 2^m + x`.
pub fn perforate(a: u8, m: u32) -> (u8, u8) {
    assert!(m <= MAX_PERFORATION);
    let x = a & ((1u8 << m) - 1);
    (a >> m, x)
}

/// `w * (a - a mod 2^m)`.
pub fn perforated_mul(w: i8, a: u8, m: u32) -> i32 {
    let (hi, _) = perforate(a, m);
    (w as i32 * hi as i32) << m
}

/// `w * (a mod 2^m)`, the amount [`perforated_mul`] falls short of `w * a`.
pub fn mul_error(w: i8, a: u8, m: u32) -> i32 {
    let (_, x) = perforate(a, m);
    w as i32 * x as i32
}

fn require_weights(weights: &[i8]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Config("filter needs at least one weight".into()));
    }
    Ok(())
}

/// Error moments of `sum(W_j * x_j)` without correction.
pub fn predicted_stats_no_cv(weights: &[i8], m: u32) -> Result<Moments> {
    require_weights(weights)?;
    let model = MultErrorModel::new(m);
    let sum: i128 = weights.iter().map(|&w| w as i128).sum();
    let sum_sq: i128 = weights.iter().map(|&w| (w as i128).pow(2)).sum();
    Ok(Moments {
        mean: model.expected_x * sum,
        variance: model.var_x * sum_sq,
    })
}

/// Error moments of `sum(x_j * (W_j - c))`, the residual after adding
/// `V = c * sum(x_j)`.
pub fn predicted_stats_cv(weights: &[i8], c: Rational, m: u32) -> Result<Moments> {
    require_weights(weights)?;
    let model = MultErrorModel::new(m);
    let (sum, sum_sq) = weights
        .iter()
        .fold((Rational::from_integer(0), Rational::from_integer(0)), |(s, sq), &w| {
            let d = Rational::from_integer(w as i128) - c;
            (s + d, sq + d * d)
        });
    Ok(Moments {
        mean: model.expected_x * sum,
        variance: model.var_x * sum_sq,
    })
}

/// Variance-minimising control constant: the exact mean of the weights.
pub fn optimal_c(weights: &[i8]) -> Result<Rational> {
    require_weights(weights)?;
    let sum: i128 = weights.iter().map(|&w| w as i128).sum();
    Ok(Rational::new(sum, weights.len() as i128))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn perforate_examples() {
        assert_eq!(perforate(7, 2), (1, 3));
        assert_eq!(perforate(255, 7), (1, 127));
        for a in 0..=255u8 {
            assert_eq!(perforate(a, 0), (a, 0));
        }
    }

    #[test]
    fn perforated_mul_examples() {
        assert_eq!(perforated_mul(3, 7, 2), 12);
        assert_eq!(perforated_mul(-2, 5, 1), -8);
        assert_eq!(perforated_mul(-77, 201, 0), -77 * 201);
    }

    #[test]
    fn mul_error_examples() {
        assert_eq!(mul_error(3, 7, 2), 9);
        assert_eq!(mul_error(-128, 255, 3), -896);
        assert_eq!(mul_error(100, 255, 0), 0);
    }

    #[test]
    fn error_model_moments() {
        let m0 = MultErrorModel::new(0);
        assert_eq!(m0.expected_x, r(0, 1));
        assert_eq!(m0.var_x, r(0, 1));
        let m1 = MultErrorModel::new(1);
        assert_eq!(m1.expected_x, r(1, 2));
        assert_eq!(m1.var_x, r(1, 4));
        let m2 = MultErrorModel::new(2);
        assert_eq!(m2.expected_x, r(3, 2));
        assert_eq!(m2.var_x, r(5, 4));
    }

    #[test]
    fn no_cv_examples() {
        let s = predicted_stats_no_cv(&[4, -2], 1).unwrap();
        assert_eq!((s.mean, s.variance), (r(1, 1), r(5, 1)));
        let s = predicted_stats_no_cv(&[9, -100, 3], 0).unwrap();
        assert_eq!((s.mean, s.variance), (r(0, 1), r(0, 1)));
        let s = predicted_stats_no_cv(&[1; 12], 2).unwrap();
        assert_eq!((s.mean, s.variance), (r(18, 1), r(15, 1)));
    }

    #[test]
    fn cv_examples() {
        let s = predicted_stats_cv(&[4, -2], r(1, 1), 1).unwrap();
        assert_eq!((s.mean, s.variance), (r(0, 1), r(9, 2)));
        let s = predicted_stats_cv(&[5, 5, 5], r(5, 1), 3).unwrap();
        assert_eq!((s.mean, s.variance), (r(0, 1), r(0, 1)));
    }

    #[test]
    fn optimal_c_examples() {
        assert_eq!(optimal_c(&[1, 2, 3, 6]).unwrap(), r(3, 1));
        assert_eq!(optimal_c(&[-17]).unwrap(), r(-17, 1));
        assert_eq!(optimal_c(&[-1, 1]).unwrap(), r(0, 1));
        assert!(optimal_c(&[]).is_err());
    }

    #[test]
    fn config_rejects_deep_perforation() {
        assert!(PerforationConfig::new(7, true).is_ok());
        assert!(PerforationConfig::new(8, true).is_err());
    }

    /// Mean and population variance of `sum(x_j * (W_j - c))` by enumerating
    /// every x-tuple, one rational per tuple.
    fn enumerate_moments(weights: &[i8], c: Rational, m: u32) -> (Rational, Rational) {
        let levels = 1usize << m;
        let total = levels.pow(weights.len() as u32);
        let mut values = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rest = idx;
            let mut e = Rational::from_integer(0);
            for &w in weights {
                let x = (rest % levels) as i128;
                rest /= levels;
                e += (Rational::from_integer(w as i128) - c) * x;
            }
            values.push(e);
        }
        let n = Rational::from_integer(total as i128);
        let mean = values.iter().fold(Rational::from_integer(0), |a, v| a + v) / n;
        let var = values
            .iter()
            .fold(Rational::from_integer(0), |a, v| a + (v - mean) * (v - mean))
            / n;
        (mean, var)
    }

    #[test]
    fn closed_forms_match_enumeration() {
        let cases: &[&[i8]] = &[&[4, -2], &[1, 2, 3], &[-128, 127, 5, 0], &[7], &[3, 3, -9, 100]];
        for &w in cases {
            for m in 0..=3 {
                let (mean, var) = enumerate_moments(w, Rational::from_integer(0), m);
                let s = predicted_stats_no_cv(w, m).unwrap();
                assert_eq!((s.mean, s.variance), (mean, var), "no-cv {w:?} m={m}");
                let c = optimal_c(w).unwrap();
                let (mean, var) = enumerate_moments(w, c, m);
                let s = predicted_stats_cv(w, c, m).unwrap();
                assert_eq!((s.mean, s.variance), (mean, var), "cv {w:?} m={m}");
                assert_eq!(s.mean, Rational::from_integer(0));
            }
        }
    }

    proptest! {
        #[test]
        fn products_decompose_exactly(w in any::<i8>(), a in any::<u8>(), m in 0u32..=7) {
            prop_assert_eq!(w as i32 * a as i32, perforated_mul(w, a, m) + mul_error(w, a, m));
            let (hi, x) = perforate(a, m);
            prop_assert_eq!(a as u32, ((hi as u32) << m) + x as u32);
        }

        #[test]
        fn optimal_c_minimises_variance(
            w in proptest::collection::vec(any::<i8>(), 1..32),
            m in 1u32..=7,
        ) {
            let c = optimal_c(&w).unwrap();
            let at = predicted_stats_cv(&w, c, m).unwrap().variance;
            let one = Rational::from_integer(1);
            prop_assert!(at <= predicted_stats_cv(&w, c + one, m).unwrap().variance);
            prop_assert!(at <= predicted_stats_cv(&w, c - one, m).unwrap().variance);
            prop_assert_eq!(predicted_stats_cv(&w, c, m).unwrap().mean, Rational::from_integer(0));
        }

        #[test]
        fn variance_grows_with_m(w in proptest::collection::vec(any::<i8>(), 1..32), m in 0u32..7) {
            let c = optimal_c(&w).unwrap();
            prop_assert!(
                predicted_stats_no_cv(&w, m).unwrap().variance
                    <= predicted_stats_no_cv(&w, m + 1).unwrap().variance
            );
            prop_assert!(
                predicted_stats_cv(&w, c, m).unwrap().variance
                    <= predicted_stats_cv(&w, c, m + 1).unwrap().variance
            );
        }
    }
}
