//! Control-variate corrected approximate convolution.
//!
//! `G* = B + sum(W_j * A_j|approx) + V` with `V = C_q * sum(x_j)`, where
//! `C_q` is the filter's 8-bit control constant. The residual error is
//! `sum(x_j * (W_j - C_q))`.

use std::collections::BTreeMap;

use crate::perforation::{perforate, PerforationConfig};
use crate::quant::{conv_accurate, run_model, ConvFilter, Inference, MacEngine, Patches, QTensor, QuantModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApproxConvResult {
    pub g_star: i32,
    /// Exact result, present when instrumented.
    pub g_accurate: Option<i32>,
    /// `g_accurate - g_star`, present when instrumented.
    pub epsilon: Option<i32>,
}

fn approx_sum(filter: &ConvFilter, window: &[u8], cfg: PerforationConfig) -> Result<i32> {
    if window.len() != filter.k() {
        return Err(Error::Shape(format!(
            "window of {} activations for a filter of {}",
            window.len(),
            filter.k()
        )));
    }
    let m = cfg.m();
    let mut acc = filter.bias();
    let mut sum_x: i32 = 0;
    for (&w, &a) in filter.weights().iter().zip(window) {
        let (hi, x) = perforate(a, m);
        acc = acc
            .checked_add((w as i32 * hi as i32) << m)
            .ok_or(Error::Overflow("approximate convolution"))?;
        sum_x += x as i32;
    }
    if cfg.control_variate() {
        let v = filter.c_quantized() as i32 * sum_x;
        acc = acc.checked_add(v).ok_or(Error::Overflow("approximate convolution"))?;
    }
    Ok(acc)
}

/// Approximate convolution of one window.
pub fn conv_approx(filter: &ConvFilter, window: &[u8], cfg: PerforationConfig) -> Result<ApproxConvResult> {
    Ok(ApproxConvResult {
        g_star: approx_sum(filter, window, cfg)?,
        g_accurate: None,
        epsilon: None,
    })
}

/// [`conv_approx`] that also records the accurate result and the error.
pub fn conv_approx_instrumented(
    filter: &ConvFilter,
    window: &[u8],
    cfg: PerforationConfig,
) -> Result<ApproxConvResult> {
    let g_star = approx_sum(filter, window, cfg)?;
    let g_accurate = conv_accurate(filter, window)?;
    let epsilon = g_accurate
        .checked_sub(g_star)
        .ok_or(Error::Overflow("convolution error"))?;
    Ok(ApproxConvResult {
        g_star,
        g_accurate: Some(g_accurate),
        epsilon: Some(epsilon),
    })
}

/// Functional approximate engine for conv2d / dense layers.
#[derive(Debug, Clone, Copy)]
pub struct ApproxEngine {
    pub cfg: PerforationConfig,
}

impl MacEngine for ApproxEngine {
    fn compute(&self, filters: &[ConvFilter], patches: &Patches) -> Result<Vec<i32>> {
        let mut out = Vec::with_capacity(patches.count() * filters.len());
        for window in patches.iter() {
            for filter in filters {
                out.push(approx_sum(filter, window, self.cfg)?);
            }
        }
        Ok(out)
    }
}

pub fn run_model_approx(model: &QuantModel, input: &QTensor, cfg: PerforationConfig) -> Result<Inference> {
    run_model(model, input, &ApproxEngine { cfg })
}

/// One histogram bin covering `[lo, hi]` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct HistogramBin {
    pub bin_lo: i32,
    pub bin_hi: i32,
    pub count: usize,
}

/// Weight histogram over bins of `bin_width` starting at -128.
///
/// Only non-empty bins are returned, in ascending order.
pub fn weight_histogram(filter: &ConvFilter, bin_width: u32) -> Result<Vec<HistogramBin>> {
    if bin_width == 0 {
        return Err(Error::Config("histogram bin width must be >= 1".into()));
    }
    let width = bin_width as i32;
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &w in filter.weights() {
        let bin = (w as i32 + 128) / width;
        *counts.entry(bin).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(bin, count)| {
            let lo = -128 + bin * width;
            HistogramBin {
                bin_lo: lo,
                bin_hi: (lo + width - 1).min(127),
                count,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perforation::mul_error;
    use crate::quant::{run_model_accurate, Layer, Padding};
    use proptest::prelude::*;

    fn filter(w: &[i8], b: i32) -> ConvFilter {
        ConvFilter::new(w.to_vec(), b).unwrap()
    }

    fn cfg(m: u32, cv: bool) -> PerforationConfig {
        PerforationConfig::new(m, cv).unwrap()
    }

    #[test]
    fn hand_evaluated_windows() {
        let f = filter(&[4, -2], 0);
        assert_eq!(f.c_quantized(), 1);
        let r = conv_approx_instrumented(&f, &[5, 3], cfg(1, true)).unwrap();
        assert_eq!((r.g_star, r.g_accurate, r.epsilon), (14, Some(14), Some(0)));
        let r = conv_approx_instrumented(&f, &[5, 4], cfg(1, true)).unwrap();
        assert_eq!((r.g_star, r.g_accurate, r.epsilon), (9, Some(12), Some(3)));
        let plain = conv_approx(&f, &[5, 4], cfg(1, true)).unwrap();
        assert_eq!(plain.g_star, 9);
        assert_eq!(plain.g_accurate, None);
    }

    #[test]
    fn m_zero_is_exact_in_both_modes() {
        let f = filter(&[-128, 127, 3, 0, -9], 1234);
        let a = [255, 255, 17, 3, 200];
        let exact = conv_accurate(&f, &a).unwrap();
        for cv in [false, true] {
            assert_eq!(conv_approx(&f, &a, cfg(0, cv)).unwrap().g_star, exact);
        }
    }

    #[test]
    fn histogram_examples() {
        let h = weight_histogram(&filter(&[1, 1, 2], 0), 1).unwrap();
        assert_eq!(
            h,
            vec![
                HistogramBin {
                    bin_lo: 1,
                    bin_hi: 1,
                    count: 2
                },
                HistogramBin {
                    bin_lo: 2,
                    bin_hi: 2,
                    count: 1
                },
            ]
        );
        let h = weight_histogram(&filter(&[-128, 127], 0), 256).unwrap();
        assert_eq!(
            h,
            vec![HistogramBin {
                bin_lo: -128,
                bin_hi: 127,
                count: 2
            }]
        );
        let h = weight_histogram(&filter(&[-128, 127], 0), 100).unwrap();
        assert_eq!(h.last().unwrap().bin_hi, 127);
        assert!(weight_histogram(&filter(&[0], 0), 0).is_err());
    }

    #[test]
    fn equal_weight_model_is_exact_with_cv() {
        let layers = vec![
            Layer::Conv2d {
                kernel: [2, 2],
                stride: 1,
                padding: Padding::Same,
                shift: Some(3),
                filters: vec![filter(&[3; 4], 5), filter(&[-2; 4], 100)],
            },
            Layer::Dense {
                shift: None,
                filters: vec![filter(&[7; 18], 0), filter(&[1; 18], 3)],
            },
        ];
        let model = QuantModel::new(vec![3, 3, 1], layers).unwrap();
        let input = QTensor::from_activations(vec![3, 3, 1], &[13, 250, 7, 99, 31, 64, 255, 1, 128]).unwrap();
        let exact = run_model_accurate(&model, &input).unwrap();
        for m in 0..=7 {
            assert_eq!(run_model_approx(&model, &input, cfg(m, true)).unwrap(), exact);
        }
    }

    proptest! {
        #[test]
        fn residual_error_identities(
            pairs in proptest::collection::vec((any::<i8>(), any::<u8>()), 1..40),
            bias in -100_000i32..100_000,
            m in 0u32..=7,
        ) {
            let (w, a): (Vec<i8>, Vec<u8>) = pairs.into_iter().unzip();
            let f = filter(&w, bias);
            let cq = f.c_quantized() as i32;
            let exact = conv_accurate(&f, &a).unwrap();
            let on = conv_approx(&f, &a, cfg(m, true)).unwrap().g_star;
            let off = conv_approx(&f, &a, cfg(m, false)).unwrap().g_star;
            let xs: Vec<i32> = a.iter().map(|&v| perforate(v, m).1 as i32).collect();
            let cv_residual: i32 = w.iter().zip(&xs).map(|(&w, &x)| x * (w as i32 - cq)).sum();
            let plain_residual: i32 = w.iter().zip(&a).map(|(&w, &a)| mul_error(w, a, m)).sum();
            prop_assert_eq!(exact - on, cv_residual);
            prop_assert_eq!(exact - off, plain_residual);
            prop_assert_eq!(on - off, cq * xs.iter().sum::<i32>());
        }

        #[test]
        fn equal_weights_cancel_every_window(
            w in any::<i8>(),
            a in proptest::collection::vec(any::<u8>(), 1..40),
            m in 0u32..=7,
        ) {
            let f = filter(&vec![w; a.len()], -7);
            prop_assert_eq!(
                conv_approx(&f, &a, cfg(m, true)).unwrap().g_star,
                conv_accurate(&f, &a).unwrap()
            );
        }
    }
}
