//! Deterministic synthetic fixture: a small quantized CNN and a labelled
//! dataset of oriented bars.
//!
//! Each 12x12 grayscale sample is uniform background noise with one bright
//! bar drawn across it; the label is the bar orientation (horizontal,
//! vertical, diagonal, anti-diagonal). Bar contrast is drawn per sample, so
//! faint samples sit close to the decision boundary.
//!
//! The network is hand-constructed rather than trained:
//!
//! 1. `conv2d` 3x3, 1 -> 4 channels: one oriented line detector per class.
//!    Every filter carries its own positive weight offset, the way trained
//!    filters cluster around a non-zero mean. The bias cancels the response
//!    to the mean background and adds a threshold proportional to the
//!    filter's response to background noise.
//! 2. `maxpool` 2x2.
//! 3. `conv2d` 3x3, 4 -> 4 channels: pools each orientation channel over its
//!    neighbourhood, with small cross-channel weights.
//! 4. `dense` 36 -> 4: class `c` scores channel `c` against the others.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{digest, encode_dataset, model_to_json, Dataset, Sample};
use crate::quant::{evaluate, AccurateEngine, ConvFilter, Layer, Padding, QuantModel};
use crate::Result;

pub const DEFAULT_SEED: u64 = 2021;
pub const MODEL_FILE: &str = "model.json";
pub const DATASET_FILE: &str = "dataset.qds";
pub const MANIFEST_FILE: &str = "manifest.json";

const SIDE: usize = 12;
const CLASSES: usize = 4;

/// Knobs of the fixture construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureParams {
    pub samples: usize,
    pub background: (u8, u8),
    pub contrast: (u8, u8),
    pub line_weight: i8,
    pub off_line_weight: i8,
    /// Per-filter weight offsets of the first conv layer.
    pub conv0_offsets: [i8; CLASSES],
    /// First-layer threshold in standard deviations of the background
    /// response, folded into the bias.
    pub noise_threshold: f64,
    pub conv0_shift: u32,
    pub conv1_own: i8,
    pub conv1_cross: i8,
    pub conv1_shift: u32,
    pub dense_own: i8,
    pub dense_other: i8,
}

impl Default for FixtureParams {
    fn default() -> Self {
        FixtureParams {
            samples: 1000,
            background: (70, 110),
            contrast: (16, 50),
            line_weight: 24,
            off_line_weight: -12,
            conv0_offsets: [14, 6, 18, 10],
            noise_threshold: 3.5,
            conv0_shift: 4,
            conv1_own: 8,
            conv1_cross: 1,
            conv1_shift: 5,
            dense_own: 12,
            dense_other: -4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub filters: usize,
    pub weights: usize,
}

/// Digests and accurate-path metrics recorded at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub model_file: String,
    pub model_digest: String,
    pub dataset_file: String,
    pub dataset_digest: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub samples: usize,
    pub weight_count: usize,
    pub layers: Vec<ManifestLayer>,
    pub accurate_top1: f64,
    pub sample0_label: u8,
    pub sample0_accurate_label: usize,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: QuantModel,
    pub dataset: Dataset,
    pub manifest: Manifest,
}

impl Fixture {
    pub fn model_json(&self) -> String {
        model_to_json(&self.model)
    }

    pub fn dataset_bytes(&self) -> Vec<u8> {
        encode_dataset(&self.dataset)
    }

    pub fn manifest_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        text
    }

    /// Writes model, dataset and manifest into `dir`, returning the paths.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let paths = [dir.join(MODEL_FILE), dir.join(DATASET_FILE), dir.join(MANIFEST_FILE)];
        fs::write(&paths[0], self.model_json())?;
        fs::write(&paths[1], self.dataset_bytes())?;
        fs::write(&paths[2], self.manifest_json())?;
        Ok(paths)
    }
}

/// Pixels covered by a bar of class `class` at `offset`.
fn on_bar(class: usize, offset: isize, y: usize, x: usize) -> bool {
    let (y, x) = (y as isize, x as isize);
    match class {
        0 => y == offset,
        1 => x == offset,
        2 => x - y == offset,
        _ => x + y == offset,
    }
}

fn bar_offset(rng: &mut ChaCha8Rng, class: usize) -> isize {
    let s = SIDE as i64;
    let offset = match class {
        0 | 1 => rng.random_range(2..s - 2),
        2 => rng.random_range(-3..=3),
        _ => rng.random_range(s - 4..=s + 2),
    };
    offset as isize
}

fn generate_samples(rng: &mut ChaCha8Rng, p: &FixtureParams) -> Vec<Sample> {
    (0..p.samples)
        .map(|i| {
            let class = i % CLASSES;
            let offset = bar_offset(rng, class);
            let contrast = rng.random_range(p.contrast.0..=p.contrast.1) as u16;
            let mut data = Vec::with_capacity(SIDE * SIDE);
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let mut v = rng.random_range(p.background.0..=p.background.1) as u16;
                    if on_bar(class, offset, y, x) {
                        v += contrast;
                    }
                    data.push(v.min(255) as u8);
                }
            }
            Sample {
                data,
                label: class as u8,
            }
        })
        .collect()
}

/// 3x3 mask of the line through the kernel centre for `class`.
fn line_kernel(class: usize) -> [bool; 9] {
    let centre = [1, 1, 0, 2][class];
    let mut k = [false; 9];
    for dy in 0..3 {
        for dx in 0..3 {
            k[dy * 3 + dx] = on_bar(class, centre, dy, dx);
        }
    }
    k
}

fn jitter(rng: &mut ChaCha8Rng, base: i32, spread: i32) -> i8 {
    (base + rng.random_range(-spread..=spread)).clamp(-128, 127) as i8
}

fn build_model(rng: &mut ChaCha8Rng, p: &FixtureParams) -> Result<QuantModel> {
    let mean_bg = (p.background.0 as i32 + p.background.1 as i32) / 2;
    let sd_bg = (p.background.1 - p.background.0) as f64 / 12f64.sqrt();
    let conv0 = (0..CLASSES)
        .map(|c| {
            let kernel = line_kernel(c);
            let offset = p.conv0_offsets[c] as i32;
            let weights: Vec<i8> = kernel
                .iter()
                .map(|&on| {
                    let base = if on { p.line_weight } else { p.off_line_weight } as i32;
                    jitter(rng, base + offset, 2)
                })
                .collect();
            let sum: i32 = weights.iter().map(|&w| w as i32).sum();
            let norm = weights.iter().map(|&w| (w as f64).powi(2)).sum::<f64>().sqrt();
            let threshold = (p.noise_threshold * norm * sd_bg).round() as i32;
            ConvFilter::new(weights, -sum * mean_bg - threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let conv1 = (0..CLASSES)
        .map(|c| {
            let weights = (0..9 * CLASSES)
                .map(|j| {
                    let base = if j % CLASSES == c { p.conv1_own } else { p.conv1_cross } as i32;
                    jitter(rng, base, 1)
                })
                .collect();
            ConvFilter::new(weights, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    let dense = (0..CLASSES)
        .map(|c| {
            let weights = (0..9 * CLASSES)
                .map(|j| {
                    let base = if j % CLASSES == c { p.dense_own } else { p.dense_other } as i32;
                    jitter(rng, base, 1)
                })
                .collect();
            ConvFilter::new(weights, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    QuantModel::new(
        vec![SIDE, SIDE, 1],
        vec![
            Layer::Conv2d {
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Valid,
                shift: Some(p.conv0_shift),
                filters: conv0,
            },
            Layer::MaxPool { window: 2, stride: 2 },
            Layer::Conv2d {
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Valid,
                shift: Some(p.conv1_shift),
                filters: conv1,
            },
            Layer::Dense {
                shift: None,
                filters: dense,
            },
        ],
    )
}

pub fn generate_fixture(seed: u64) -> Result<Fixture> {
    generate_fixture_with(seed, &FixtureParams::default())
}

pub fn generate_fixture_with(seed: u64, params: &FixtureParams) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = build_model(&mut rng, params)?;
    let dataset = Dataset::new(SIDE * SIDE, generate_samples(&mut rng, params))?;
    let eval = evaluate(&model, &dataset, &AccurateEngine)?;
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| ManifestLayer {
            kind: layer.kind().to_string(),
            output_shape: model.output_shape(i).to_vec(),
            filters: layer.filters().map_or(0, |f| f.len()),
            weights: layer.filters().map_or(0, |f| f.iter().map(|f| f.k()).sum()),
        })
        .collect::<Vec<_>>();
    let manifest = Manifest {
        seed,
        model_file: MODEL_FILE.into(),
        model_digest: digest(model_to_json(&model).as_bytes()),
        dataset_file: DATASET_FILE.into(),
        dataset_digest: digest(&encode_dataset(&dataset)),
        input_shape: model.input_shape().to_vec(),
        classes: model.class_count(),
        samples: dataset.len(),
        weight_count: layers.iter().map(|l| l.weights).sum(),
        layers,
        accurate_top1: eval.top1(),
        sample0_label: dataset.samples()[0].label,
        sample0_accurate_label: eval.predictions[0],
    };
    Ok(Fixture {
        model,
        dataset,
        manifest,
    })
}
