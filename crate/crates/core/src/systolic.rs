//! Functional and cycle model of the weight-stationary MAC array.
//!
//! Each array row holds one filter (output channel) and each column one
//! receptive-field position. Partial sums travel along a row; activations
//! enter a column and are shared by every row. In the approximate array the
//! `N x N` grid uses MAC* units (perforated product plus a side sum of the
//! dropped bits `x_j`) and an extra column of MAC+ units adds
//! `V = C_q * sumX` and re-attaches the low bias bits.
//!
//! Receptive fields longer than `N` are split into `ceil(k / N)` passes whose
//! partial sums are carried at 32 bits; `V` is applied once after the last
//! pass. Filter sets wider than `N` are split into row tiles.
//!
//! Timing: a tile streaming `P` windows through the array takes
//! `2N + P - 2` cycles (skewed fill across rows and columns, then one window
//! per cycle). Tiles run back to back. The MAC+ column adds one cycle per
//! layer, the stage of earlier tiles overlapping the next tile's fill.

use serde::Serialize;

use crate::perforation::{perforate, PerforationConfig, MAX_PERFORATION};
use crate::quant::{
    apply_layer, assemble_mac_output, layer_patches, run_model, ConvFilter, Inference, Layer, MacEngine, Patches,
    QTensor, QuantModel,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayMode {
    /// `N x N` accurate MAC units.
    Accurate,
    /// MAC* units without the MAC+ column; low bias bits are concatenated.
    Perforated,
    /// MAC* units plus the MAC+ column.
    ApproxCv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ArrayConfig {
    n: usize,
    m: u32,
    mode: ArrayMode,
}

impl ArrayConfig {
    pub fn new(n: usize, m: u32, mode: ArrayMode) -> Result<Self> {
        if !(4..=256).contains(&n) {
            return Err(Error::Config(format!("array dimension {n} outside [4, 256]")));
        }
        if m > MAX_PERFORATION {
            return Err(Error::Config(format!("perforation depth {m} outside [0, 7]")));
        }
        if mode == ArrayMode::Accurate && m != 0 {
            return Err(Error::Config("accurate array cannot perforate".into()));
        }
        Ok(ArrayConfig { n, m, mode })
    }

    /// Array that realises `cfg`: accurate for `m = 0` without the control
    /// variate, MAC+ column whenever the control variate is on.
    pub fn for_perforation(n: usize, cfg: PerforationConfig) -> Result<Self> {
        let mode = match (cfg.m(), cfg.control_variate()) {
            (_, true) => ArrayMode::ApproxCv,
            (0, false) => ArrayMode::Accurate,
            (_, false) => ArrayMode::Perforated,
        };
        Self::new(n, cfg.m(), mode)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn mode(&self) -> ArrayMode {
        self.mode
    }

    fn unit(&self) -> &'static str {
        match self.mode {
            ArrayMode::Accurate => "MAC",
            _ => "MAC*",
        }
    }
}

/// `ceil(log2(v))` for `v >= 1`.
pub fn ceil_log2(v: u64) -> u32 {
    assert!(v >= 1);
    if v == 1 {
        0
    } else {
        64 - (v - 1).leading_zeros()
    }
}

/// Accurate MAC adder width, `ceil(log2(N * (2^16 - 1)))`.
pub fn accumulator_bits(n: usize) -> u32 {
    ceil_log2(n as u64 * 65535)
}

/// MAC* partial-sum width: the accurate width less the `m` dropped bits.
pub fn sum_bits(n: usize, m: u32) -> u32 {
    accumulator_bits(n) - m
}

/// Width of the MAC* side sum, enough to hold `N * (2^m - 1)`.
pub fn sum_x_bits(n: usize, m: u32) -> u32 {
    let max = n as u64 * ((1u64 << m) - 1);
    64 - max.leading_zeros()
}

fn fits_signed(v: i64, bits: u32) -> bool {
    let half = 1i64 << (bits - 1);
    (-half..half).contains(&v)
}

/// One MAC* step: `sum + w * a[7:m]` and `sumX + a[m-1:0]`. With `m = 0`
/// this is the accurate MAC.
pub fn mac_star_step(cfg: &ArrayConfig, w: i8, a: u8, sum_in: i64, sum_x_in: u32) -> Result<(i64, u32)> {
    mac_star_at(cfg, w, a, sum_in, sum_x_in, 0, 0)
}

fn mac_star_at(
    cfg: &ArrayConfig,
    w: i8,
    a: u8,
    sum_in: i64,
    sum_x_in: u32,
    row: usize,
    col: usize,
) -> Result<(i64, u32)> {
    let (hi, x) = perforate(a, cfg.m);
    let sum = sum_in + w as i64 * hi as i64;
    let bits = sum_bits(cfg.n, cfg.m);
    if !fits_signed(sum, bits) {
        return Err(Error::Width {
            unit: cfg.unit(),
            row,
            col,
            value: sum,
            bits,
        });
    }
    let sum_x = sum_x_in + x as u32;
    let x_bits = sum_x_bits(cfg.n, cfg.m);
    if (sum_x as u64) >> x_bits != 0 {
        return Err(Error::Width {
            unit: "MAC* sumX",
            row,
            col,
            value: sum_x as i64,
            bits: x_bits,
        });
    }
    Ok((sum, sum_x))
}

/// Final MAC+ stage: `{sum_N, B[m-1:0]} + C_q * sumX_N`, checked against the
/// accurate adder width.
pub fn mac_plus(cfg: &ArrayConfig, sum_n: i64, sum_x_n: u32, c_q: i8, bias: i32) -> Result<i64> {
    mac_plus_at(cfg, sum_n, sum_x_n, c_q, bias, accumulator_bits(cfg.n), 0)
}

fn mac_plus_at(
    cfg: &ArrayConfig,
    sum_n: i64,
    sum_x_n: u32,
    c_q: i8,
    bias: i32,
    adder_bits: u32,
    row: usize,
) -> Result<i64> {
    let low = bias as i64 & ((1i64 << cfg.m) - 1);
    let g = (sum_n << cfg.m) + low + c_q as i64 * sum_x_n as i64;
    if !fits_signed(g, adder_bits) {
        return Err(Error::Width {
            unit: "MAC+",
            row,
            col: cfg.n,
            value: g,
            bits: adder_bits,
        });
    }
    Ok(g)
}

/// Timing of one simulated layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    /// Total cycles, overhead included.
    pub cycles: u64,
    /// Cycles attributable to the MAC+ column.
    pub overhead_cycles: u64,
    pub tiles: u64,
}

/// A single unit update, for `--trace` style output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub cycle: u64,
    pub row: usize,
    pub col: usize,
    pub unit: &'static str,
    pub sum: i64,
    #[serde(rename = "sumX")]
    pub sum_x: u32,
}

/// Runs every (window, filter) product of a layer through the array.
///
/// The output is window-major like [`MacEngine::compute`].
pub fn simulate_products(
    cfg: &ArrayConfig,
    filters: &[ConvFilter],
    patches: &Patches,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> Result<(Vec<i32>, CycleReport)> {
    let n = cfg.n;
    let m = cfg.m;
    let k = patches.k();
    let windows = patches.count();
    let filter_count = filters.len();
    for (f, filter) in filters.iter().enumerate() {
        if filter.k() != k {
            return Err(Error::Shape(format!(
                "filter {f} has {} weights, windows have {k}",
                filter.k()
            )));
        }
    }
    let passes = k.div_ceil(n);
    let row_tiles = filter_count.div_ceil(n);
    let tile_cycles = (2 * n + windows).saturating_sub(2) as u64;
    // Multi-pass results leave the array and are reassembled at 32 bits.
    let final_bits = if passes == 1 { accumulator_bits(n) } else { 32 };

    let mut out = vec![0i32; windows * filter_count];
    for tile in 0..row_tiles {
        let rows = (filter_count - tile * n).min(n);
        let mut carry = vec![(0i64, 0u32); windows * rows];
        for pass in 0..passes {
            let start = (tile * passes + pass) as u64 * tile_cycles;
            let cols = (k - pass * n).min(n);
            for p in 0..windows {
                let window = &patches.window(p)[pass * n..pass * n + cols];
                for r in 0..rows {
                    let filter = &filters[tile * n + r];
                    let weights = &filter.weights()[pass * n..pass * n + cols];
                    let mut sum = if pass == 0 { (filter.bias() >> m) as i64 } else { 0 };
                    if !fits_signed(sum, sum_bits(n, m)) {
                        return Err(Error::Width {
                            unit: "bias seed",
                            row: r,
                            col: 0,
                            value: sum,
                            bits: sum_bits(n, m),
                        });
                    }
                    let mut sum_x = 0u32;
                    for c in 0..cols {
                        (sum, sum_x) = mac_star_at(cfg, weights[c], window[c], sum, sum_x, r, c)?;
                        if let Some(t) = trace.as_deref_mut() {
                            t.push(TraceEvent {
                                cycle: start + (p + r + c) as u64,
                                row: r,
                                col: c,
                                unit: cfg.unit(),
                                sum,
                                sum_x,
                            });
                        }
                    }
                    let slot = &mut carry[p * rows + r];
                    slot.0 += sum;
                    slot.1 += sum_x;
                    if slot.0 < i32::MIN as i64 || slot.0 > i32::MAX as i64 {
                        return Err(Error::Overflow("systolic partial-sum carry"));
                    }
                    if pass + 1 < passes {
                        continue;
                    }
                    let (total, total_x) = *slot;
                    let g = match cfg.mode {
                        ArrayMode::Accurate => total,
                        ArrayMode::Perforated => mac_plus_at(cfg, total, 0, 0, filter.bias(), final_bits, r)?,
                        ArrayMode::ApproxCv => {
                            let g =
                                mac_plus_at(cfg, total, total_x, filter.c_quantized(), filter.bias(), final_bits, r)?;
                            if let Some(t) = trace.as_deref_mut() {
                                t.push(TraceEvent {
                                    cycle: start + (p + r + n) as u64,
                                    row: r,
                                    col: n,
                                    unit: "MAC+",
                                    sum: g,
                                    sum_x: total_x,
                                });
                            }
                            g
                        }
                    };
                    out[p * filter_count + tile * n + r] =
                        i32::try_from(g).map_err(|_| Error::Overflow("systolic output"))?;
                }
            }
        }
    }

    let tiles = (row_tiles * passes) as u64;
    let overhead_cycles = u64::from(cfg.mode == ArrayMode::ApproxCv);
    Ok((
        out,
        CycleReport {
            cycles: tiles * tile_cycles + overhead_cycles,
            overhead_cycles,
            tiles,
        },
    ))
}

/// Simulates one conv2d or dense layer; the output tensor matches
/// [`apply_layer`] with the equivalent functional engine.
pub fn simulate_layer(
    cfg: &ArrayConfig,
    layer: &Layer,
    input: &QTensor,
    trace: Option<&mut Vec<TraceEvent>>,
) -> Result<(QTensor, CycleReport)> {
    let filters = layer
        .filters()
        .ok_or_else(|| Error::Shape(format!("{} layer cannot run on the MAC array", layer.kind())))?;
    let patches = layer_patches(layer, input)?;
    let (out, report) = simulate_products(cfg, filters, &patches, trace)?;
    Ok((assemble_mac_output(layer, input, out)?, report))
}

/// [`MacEngine`] backed by the array model.
#[derive(Debug, Clone, Copy)]
pub struct SystolicEngine {
    pub cfg: ArrayConfig,
}

impl MacEngine for SystolicEngine {
    fn compute(&self, filters: &[ConvFilter], patches: &Patches) -> Result<Vec<i32>> {
        simulate_products(&self.cfg, filters, patches, None).map(|(out, _)| out)
    }
}

pub fn run_model_systolic(model: &QuantModel, input: &QTensor, cfg: &ArrayConfig) -> Result<Inference> {
    run_model(model, input, &SystolicEngine { cfg: *cfg })
}

/// Per-layer cycle reports for a whole model, MAC layers only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCycles {
    pub index: usize,
    pub kind: &'static str,
    #[serde(flatten)]
    pub report: CycleReport,
}

/// Forward pass through the array, returning the inference and the timing
/// of every conv2d / dense layer.
pub fn simulate_model(
    cfg: &ArrayConfig,
    model: &QuantModel,
    input: &QTensor,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> Result<(Inference, Vec<LayerCycles>)> {
    if input.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    let mut current = input.clone();
    let mut reports = Vec::new();
    for (index, layer) in model.layers().iter().enumerate() {
        current = if layer.is_mac_layer() {
            let (next, report) = simulate_layer(cfg, layer, &current, trace.as_deref_mut())?;
            reports.push(LayerCycles {
                index,
                kind: layer.kind(),
                report,
            });
            next
        } else {
            apply_layer(layer, &current, &crate::quant::AccurateEngine)?
        };
    }
    let logits = current.elems().to_vec();
    let label = crate::quant::argmax(&logits);
    Ok((Inference { logits, label }, reports))
}
