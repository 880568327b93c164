//! Model, dataset and report files.
//!
//! Model file: one JSON document,
//!
//! ```json
//! {"input_shape":[12,12,1],
//!  "layers":[{"kind":"conv2d","kernel":[3,3],"stride":1,"padding":"valid","shift":6,
//!             "filters":[{"weights":[1,-2,...],"bias":0}, ...]},
//!            {"kind":"maxpool","window":2,"stride":2},
//!            {"kind":"dense","filters":[...]}]}
//! ```
//!
//! Layer kinds are `conv2d`, `dense`, `relu`, `maxpool` and `requantize`.
//! Conv weights are flattened in `(kernel_row, kernel_col, channel)` order.
//! [`model_to_json`] writes the canonical compact form, so
//! `model_to_json(parse_model(s))` is byte-stable.
//!
//! Weights file: `{"weights":[...]}` with i8 values, one filter.
//!
//! Dataset file (little-endian): magic `QDS1`, `u32` sample count, `u32`
//! sample length, then per sample `sample_len` activation bytes and one
//! label byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::quant::{ConvFilter, Layer, Padding, QuantModel};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    input_shape: Vec<usize>,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerFile {
    Conv2d {
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<u32>,
        filters: Vec<FilterFile>,
    },
    Dense {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<u32>,
        filters: Vec<FilterFile>,
    },
    Relu,
    Maxpool {
        window: usize,
        stride: usize,
    },
    Requantize {
        shift: u32,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterFile {
    weights: Vec<i64>,
    bias: i64,
}

fn filters_from_file(filters: Vec<FilterFile>, layer: usize) -> Result<Vec<ConvFilter>> {
    filters
        .into_iter()
        .enumerate()
        .map(|(f, file)| {
            let weights = file
                .weights
                .iter()
                .enumerate()
                .map(|(j, &w)| {
                    i8::try_from(w).map_err(|_| Error::Range {
                        what: "weight",
                        path: format!("layers[{layer}].filters[{f}].weights[{j}]"),
                        value: w,
                    })
                })
                .collect::<Result<Vec<i8>>>()?;
            let bias = i32::try_from(file.bias).map_err(|_| Error::Range {
                what: "bias",
                path: format!("layers[{layer}].filters[{f}].bias"),
                value: file.bias,
            })?;
            ConvFilter::new(weights, bias).map_err(|_| Error::Schema {
                path: format!("layers[{layer}].filters[{f}].weights"),
                message: "filter needs at least one weight".into(),
            })
        })
        .collect()
}

fn filters_to_file(filters: &[ConvFilter]) -> Vec<FilterFile> {
    filters
        .iter()
        .map(|f| FilterFile {
            weights: f.weights().iter().map(|&w| w as i64).collect(),
            bias: f.bias() as i64,
        })
        .collect()
}

/// Parses and validates a model document. Either the whole model is
/// returned or an error naming the offending field.
pub fn parse_model(text: &str) -> Result<QuantModel> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ModelFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, layer)| {
            Ok(match layer {
                LayerFile::Conv2d {
                    kernel,
                    stride,
                    padding,
                    shift,
                    filters,
                } => Layer::Conv2d {
                    kernel,
                    stride,
                    padding,
                    shift,
                    filters: filters_from_file(filters, i)?,
                },
                LayerFile::Dense { shift, filters } => Layer::Dense {
                    shift,
                    filters: filters_from_file(filters, i)?,
                },
                LayerFile::Relu => Layer::Relu,
                LayerFile::Maxpool { window, stride } => Layer::MaxPool { window, stride },
                LayerFile::Requantize { shift } => Layer::Requantize { shift },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantModel::new(file.input_shape, layers)
}

/// Canonical compact JSON for `model`, newline terminated.
pub fn model_to_json(model: &QuantModel) -> String {
    let layers = model
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Conv2d {
                kernel,
                stride,
                padding,
                shift,
                filters,
            } => LayerFile::Conv2d {
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
                shift: *shift,
                filters: filters_to_file(filters),
            },
            Layer::Dense { shift, filters } => LayerFile::Dense {
                shift: *shift,
                filters: filters_to_file(filters),
            },
            Layer::Relu => LayerFile::Relu,
            Layer::MaxPool { window, stride } => LayerFile::Maxpool {
                window: *window,
                stride: *stride,
            },
            Layer::Requantize { shift } => LayerFile::Requantize { shift: *shift },
        })
        .collect();
    let file = ModelFile {
        input_shape: model.input_shape().to_vec(),
        layers,
    };
    let mut text = serde_json::to_string(&file).expect("model serialization cannot fail");
    text.push('\n');
    text
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    weights: Vec<i64>,
}

/// Parses a single filter's weights.
pub fn parse_weights(text: &str) -> Result<Vec<i8>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: WeightsFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if file.weights.is_empty() {
        return Err(Error::Schema {
            path: "weights".into(),
            message: "at least one weight is required".into(),
        });
    }
    file.weights
        .iter()
        .enumerate()
        .map(|(j, &w)| {
            i8::try_from(w).map_err(|_| Error::Range {
                what: "weight",
                path: format!("weights[{j}]"),
                value: w,
            })
        })
        .collect()
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<i8>> {
    parse_weights(&fs::read_to_string(path)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<QuantModel> {
    parse_model(&fs::read_to_string(path)?)
}

pub fn save_model(path: impl AsRef<Path>, model: &QuantModel) -> Result<()> {
    fs::write(path, model_to_json(model))?;
    Ok(())
}

const DATASET_MAGIC: &[u8; 4] = b"QDS1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub data: Vec<u8>,
    pub label: u8,
}

/// Labelled activation samples of a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    sample_len: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(sample_len: usize, samples: Vec<Sample>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| s.data.len() != sample_len) {
            return Err(Error::Shape(format!(
                "sample {i} has {} bytes, expected {sample_len}",
                samples[i].data.len()
            )));
        }
        Ok(Dataset { sample_len, samples })
    }

    pub fn sample_len(&self) -> usize {
        self.sample_len
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + dataset.len() * (dataset.sample_len + 1));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.sample_len as u32).to_le_bytes());
    for sample in dataset {
        out.extend_from_slice(&sample.data);
        out.push(sample.label);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!("{} byte header, need 12", bytes.len())));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Schema {
            path: "magic".into(),
            message: format!("expected QDS1, found {:?}", String::from_utf8_lossy(&bytes[..4])),
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let sample_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let record = sample_len + 1;
    let body = &bytes[12..];
    let expected = count as u128 * record as u128;
    if (body.len() as u128) < expected {
        return Err(Error::Truncated(format!(
            "header announces {count} samples of {sample_len} bytes, only {} body bytes present",
            body.len()
        )));
    }
    if body.len() as u128 > expected {
        return Err(Error::Schema {
            path: "records".into(),
            message: format!("{} trailing bytes after {count} samples", body.len() as u128 - expected),
        });
    }
    let samples = body
        .chunks_exact(record)
        .map(|r| Sample {
            data: r[..sample_len].to_vec(),
            label: r[sample_len],
        })
        .collect();
    Dataset::new(sample_len, samples)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(dataset))?;
    Ok(())
}

/// Writes `rows` as CSV with a header taken from the row's field names.
pub fn write_csv<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_report<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    write_csv(fs::File::create(path)?, rows)
}

/// Hex SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
