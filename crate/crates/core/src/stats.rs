//! Empirical verification of the convolution error moments.
//!
//! Errors are measured through the implementation (`accurate - approximate`)
//! and compared with the closed forms of [`crate::perforation`]. With an exact
//! rational control constant `c = p/q` the error `q * eps` is integral, so
//! all moment sums are accumulated exactly in `i128`; partial sums merge by
//! plain addition and results do not depend on how trials are split across
//! threads.
//!
//! Random source: ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`. Trials are cut into chunks of [`CHUNK_TRIALS`];
//! chunk `i` uses stream id `i` of that key. Uniform windows draw one byte
//! per activation with `Rng::random::<u8>()`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvconv::conv_approx;
use crate::io::{digest, Dataset};
use crate::perforation::{perforate, predicted_stats_cv, predicted_stats_no_cv, Moments, PerforationConfig};
use crate::quant::{conv_accurate, ConvFilter};
use crate::{rational_to_f64, rational_to_string, Error, Rational, Result};

pub const CHUNK_TRIALS: u64 = 1 << 14;

/// Largest state space [`exhaustive_conv_error`] enumerates.
pub const EXHAUSTIVE_LIMIT: u128 = 1 << 24;

/// Which control constant corrects the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CMode {
    /// Exact rational mean of the weights.
    ExactRational,
    /// 8-bit rounded mean, as used at inference.
    Quantized8,
}

/// Source of activation windows.
#[derive(Debug, Clone, Copy)]
pub enum ActivationDist<'a> {
    Uniform,
    /// Contiguous windows cut from random samples of a dataset.
    FromDataset(&'a Dataset),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub trials: u64,
    pub empirical_mean: f64,
    /// Unbiased (n - 1) estimate for Monte Carlo runs; the exact population
    /// variance for exhaustive runs.
    pub empirical_variance: f64,
    pub predicted_mean: Rational,
    pub predicted_variance: Rational,
    pub seed: u64,
    /// Exact moments, present for exhaustive runs.
    pub exact: Option<Moments>,
}

/// How each trial's error is formed.
struct ErrorForm {
    filter: ConvFilter,
    cfg: PerforationConfig,
    /// Numerator and denominator of the control constant applied on top of
    /// the uncorrected approximate result, or `None` to use the engine's own
    /// result.
    rational_c: Option<(i128, i128)>,
}

impl ErrorForm {
    fn new(weights: &[i8], bias: i32, cfg: PerforationConfig, c_mode: CMode) -> Result<Self> {
        let filter = ConvFilter::new(weights.to_vec(), bias)?;
        let rational_c = match (cfg.control_variate(), c_mode) {
            (true, CMode::ExactRational) => {
                let c = filter.c_exact();
                Some((*c.numer(), *c.denom()))
            }
            _ => None,
        };
        Ok(ErrorForm {
            filter,
            cfg,
            rational_c,
        })
    }

    fn scale(&self) -> i128 {
        self.rational_c.map_or(1, |(_, q)| q)
    }

    /// `scale * (accurate - approximate)` for one window.
    fn scaled_error(&self, window: &[u8]) -> Result<i128> {
        let exact = conv_accurate(&self.filter, window)? as i128;
        match self.rational_c {
            None => Ok(exact - conv_approx(&self.filter, window, self.cfg)?.g_star as i128),
            Some((p, q)) => {
                let plain = PerforationConfig::new(self.cfg.m(), false)?;
                let approx = conv_approx(&self.filter, window, plain)?.g_star as i128;
                let sum_x: i128 = window.iter().map(|&a| perforate(a, self.cfg.m()).1 as i128).sum();
                Ok(q * (exact - approx) - p * sum_x)
            }
        }
    }

    fn predicted(&self, c_mode: CMode) -> Result<Moments> {
        let weights = self.filter.weights();
        if !self.cfg.control_variate() {
            return predicted_stats_no_cv(weights, self.cfg.m());
        }
        let c = match c_mode {
            CMode::ExactRational => self.filter.c_exact(),
            CMode::Quantized8 => Rational::from_integer(self.filter.c_quantized() as i128),
        };
        predicted_stats_cv(weights, c, self.cfg.m())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    n: u64,
    sum: i128,
    sum_sq: i128,
}

impl Sums {
    fn push(&mut self, e: i128) {
        self.n += 1;
        self.sum += e;
        self.sum_sq += e * e;
    }

    fn merge(self, other: Sums) -> Sums {
        Sums {
            n: self.n + other.n,
            sum: self.sum + other.sum,
            sum_sq: self.sum_sq + other.sum_sq,
        }
    }
}

fn draw_window(rng: &mut ChaCha8Rng, dist: ActivationDist<'_>, window: &mut [u8]) {
    match dist {
        ActivationDist::Uniform => window.iter_mut().for_each(|a| *a = rng.random()),
        ActivationDist::FromDataset(ds) => {
            let sample = &ds.samples()[rng.random_range(0..ds.len())];
            let offset = rng.random_range(0..=ds.sample_len() - window.len());
            window.copy_from_slice(&sample.data[offset..offset + window.len()]);
        }
    }
}

/// Monte Carlo estimate of the convolution error moments.
#[allow(clippy::too_many_arguments)]
pub fn mc_conv_error(
    weights: &[i8],
    bias: i32,
    cfg: PerforationConfig,
    c_mode: CMode,
    dist: ActivationDist<'_>,
    trials: u64,
    seed: u64,
) -> Result<ErrorStats> {
    if trials < 2 {
        return Err(Error::Config(format!("need at least 2 trials, got {trials}")));
    }
    if let ActivationDist::FromDataset(ds) = dist {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if ds.sample_len() < weights.len() {
            return Err(Error::Shape(format!(
                "dataset samples hold {} activations, windows need {}",
                ds.sample_len(),
                weights.len()
            )));
        }
    }
    let form = ErrorForm::new(weights, bias, cfg, c_mode)?;
    let predicted = form.predicted(c_mode)?;
    let chunks = trials.div_ceil(CHUNK_TRIALS);
    let sums = (0..chunks)
        .into_par_iter()
        .map(|chunk| -> Result<Sums> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let count = CHUNK_TRIALS.min(trials - chunk * CHUNK_TRIALS);
            let mut window = vec![0u8; weights.len()];
            let mut sums = Sums::default();
            for _ in 0..count {
                draw_window(&mut rng, dist, &mut window);
                sums.push(form.scaled_error(&window)?);
            }
            Ok(sums)
        })
        .try_reduce(Sums::default, |a, b| Ok(a.merge(b)))?;

    let n = sums.n as i128;
    let s = form.scale();
    let mean = sums.sum as f64 / (n * s) as f64;
    let spread = (n * sums.sum_sq - sums.sum * sums.sum) as f64;
    let variance = spread / ((n * (n - 1)) as f64 * (s * s) as f64);
    Ok(ErrorStats {
        trials: sums.n,
        empirical_mean: mean,
        empirical_variance: variance,
        predicted_mean: predicted.mean,
        predicted_variance: predicted.variance,
        seed,
        exact: None,
    })
}

/// Exact error moments by enumerating every tuple of dropped bits.
///
/// Each tuple `x` is fed through the engines as the activation window
/// `A_j = x_j`; the error depends on the low bits only.
pub fn exhaustive_conv_error(weights: &[i8], cfg: PerforationConfig, c_mode: CMode) -> Result<ErrorStats> {
    let form = ErrorForm::new(weights, 0, cfg, c_mode)?;
    let predicted = form.predicted(c_mode)?;
    let m = cfg.m();
    let bits = m as u128 * weights.len() as u128;
    if bits > 24 {
        return Err(Error::StateSpace {
            states: if bits >= 127 { u128::MAX } else { 1u128 << bits },
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let states = 1u64 << bits;
    let mask = (1u64 << m) - 1;
    let mut window = vec![0u8; weights.len()];
    let mut sums = Sums::default();
    for idx in 0..states {
        for (j, a) in window.iter_mut().enumerate() {
            *a = ((idx >> (m as usize * j)) & mask) as u8;
        }
        sums.push(form.scaled_error(&window)?);
    }
    let n = states as i128;
    let s = form.scale();
    let mean = Rational::new(sums.sum, n * s);
    let variance = Rational::new(sums.sum_sq, n * s * s) - mean * mean;
    Ok(ErrorStats {
        trials: states,
        empirical_mean: rational_to_f64(&mean),
        empirical_variance: rational_to_f64(&variance),
        predicted_mean: predicted.mean,
        predicted_variance: predicted.variance,
        seed: 0,
        exact: Some(Moments { mean, variance }),
    })
}

/// JSON stats report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub weights_digest: String,
    pub k: usize,
    pub m: u32,
    pub cv: bool,
    pub c_mode: CMode,
    pub trials: u64,
    pub seed: u64,
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    pub predicted_mean: f64,
    pub predicted_variance: f64,
    pub predicted_mean_exact: String,
    pub predicted_variance_exact: String,
}

impl ErrorStats {
    pub fn report(&self, weights: &[i8], cfg: PerforationConfig, c_mode: CMode) -> StatsReport {
        let bytes: Vec<u8> = weights.iter().map(|&w| w as u8).collect();
        StatsReport {
            weights_digest: digest(&bytes),
            k: weights.len(),
            m: cfg.m(),
            cv: cfg.control_variate(),
            c_mode,
            trials: self.trials,
            seed: self.seed,
            empirical_mean: self.empirical_mean,
            empirical_variance: self.empirical_variance,
            predicted_mean: rational_to_f64(&self.predicted_mean),
            predicted_variance: rational_to_f64(&self.predicted_variance),
            predicted_mean_exact: rational_to_string(&self.predicted_mean),
            predicted_variance_exact: rational_to_string(&self.predicted_variance),
        }
    }

    /// Four standard errors of the mean under the predicted variance.
    pub fn mean_tolerance(&self) -> f64 {
        4.0 * (rational_to_f64(&self.predicted_variance) / self.trials as f64).sqrt()
    }

    /// Checks the empirical moments against the predictions: the mean within
    /// `max(4 standard errors, 1% of the predicted mean)` and the variance
    /// within 2%. Returns the list of violated bounds.
    pub fn check_bounds(&self) -> Vec<String> {
        let mut failures = Vec::new();
        let pm = rational_to_f64(&self.predicted_mean);
        let pv = rational_to_f64(&self.predicted_variance);
        let mean_tol = self.mean_tolerance().max(0.01 * pm.abs());
        if (self.empirical_mean - pm).abs() > mean_tol {
            failures.push(format!(
                "empirical mean {} differs from predicted {pm} by more than {mean_tol}",
                self.empirical_mean
            ));
        }
        let var_tol = 0.02 * pv;
        if (self.empirical_variance - pv).abs() > var_tol {
            failures.push(format!(
                "empirical variance {} differs from predicted {pv} by more than 2%",
                self.empirical_variance
            ));
        }
        failures
    }
}
