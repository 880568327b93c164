//! Full-adder cost model of the approximate MAC array.
//!
//! Half adders count as 0.5 full adders. Per MAC* unit the perforated
//! multiplier saves `8m` full adders and the partial-sum adder `m`, while the
//! `sumX` adder costs `ceil(log2(N(2^m - 1))) - 1` full adders plus one half
//! adder. Each MAC+ unit carries a `ceil(log2(N(2^m - 1))) x 8` multiplier
//! and a full-width final adder.

use serde::Serialize;

use crate::systolic::ceil_log2;
use crate::{Error, Rational, Result};

fn sum_x_adder_bits(n: u64, m: u32) -> i128 {
    ceil_log2(n * ((1u64 << m) - 1)) as i128
}

fn check(n: u64, m: u32) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("array dimension {n} must be >= 2")));
    }
    if m > 7 {
        return Err(Error::Config(format!("perforation depth {m} outside [0, 7]")));
    }
    Ok(())
}

/// Full adders saved by one MAC* unit: `9m - ceil(log2(N(2^m - 1))) + 0.5`.
/// Zero when nothing is perforated.
pub fn fa_decrease_per_macstar(n: u64, m: u32) -> Result<Rational> {
    check(n, m)?;
    if m == 0 {
        return Ok(Rational::from_integer(0));
    }
    Ok(Rational::from_integer(9 * m as i128 - sum_x_adder_bits(n, m)) + Rational::new(1, 2))
}

/// Full adders added by one MAC+ unit:
/// `7 * ceil(log2(N(2^m - 1))) - 0.5 + ceil(log2(N(2^16 - 1)))`.
pub fn fa_increase_per_macplus(n: u64, m: u32) -> Result<Rational> {
    check(n, m)?;
    if m == 0 {
        return Ok(Rational::from_integer(0));
    }
    let adder = ceil_log2(n * 65535) as i128;
    Ok(Rational::from_integer(7 * sum_x_adder_bits(n, m) + adder) - Rational::new(1, 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub n: u64,
    pub m: u32,
    pub fa_decrease_per_macstar: Rational,
    pub fa_increase_per_macplus: Rational,
    /// `N^2` MAC* units.
    pub total_macstar_decrease: Rational,
    /// `N` MAC+ units.
    pub total_macplus_increase: Rational,
    pub net_decrease: Rational,
}

impl CostReport {
    /// MAC* savings over MAC+ overhead; `None` when there is no overhead.
    pub fn ratio(&self) -> Option<f64> {
        if self.total_macplus_increase == Rational::from_integer(0) {
            return None;
        }
        Some(crate::rational_to_f64(
            &(self.total_macstar_decrease / self.total_macplus_increase),
        ))
    }

    pub fn row(&self) -> CostRow {
        CostRow {
            n: self.n,
            m: self.m,
            macstar_decrease: format_count(&self.total_macstar_decrease),
            macplus_increase: format_count(&self.total_macplus_increase),
            net_decrease: format_count(&self.net_decrease),
        }
    }
}

/// CSV row `N,m,macstar_decrease,macplus_increase,net_decrease`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    #[serde(rename = "N")]
    pub n: u64,
    pub m: u32,
    pub macstar_decrease: String,
    pub macplus_increase: String,
    pub net_decrease: String,
}

/// Integers print bare; half-adder halves print as `x.5`.
fn format_count(r: &Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}", crate::rational_to_f64(r))
    }
}

pub fn cost_report(n: u64, m: u32) -> Result<CostReport> {
    let dec = fa_decrease_per_macstar(n, m)?;
    let inc = fa_increase_per_macplus(n, m)?;
    let units = n as i128;
    let total_dec = dec * (units * units);
    let total_inc = inc * units;
    Ok(CostReport {
        n,
        m,
        fa_decrease_per_macstar: dec,
        fa_increase_per_macplus: inc,
        total_macstar_decrease: total_dec,
        total_macplus_increase: total_inc,
        net_decrease: total_dec - total_inc,
    })
}

/// Reference configurations: N in {16, 32, 48, 64}, m in {1, 2}.
pub const TABLE_CONFIGS: [(u64, u32); 8] = [(16, 1), (32, 1), (48, 1), (64, 1), (16, 2), (32, 2), (48, 2), (64, 2)];

pub fn table_reports() -> Vec<CostReport> {
    TABLE_CONFIGS
        .iter()
        .map(|&(n, m)| cost_report(n, m).expect("table configurations are valid"))
        .collect()
}
