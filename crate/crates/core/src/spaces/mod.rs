//! Supernet builders.
//!
//! [`fbnet_space`] expands a macro-architecture, whose searchable rows each
//! become `repeat` layers carrying every micro candidate, into a
//! [`SuperNet`]. [`mixed_precision_space`] wraps each block of a small
//! residual backbone in one candidate per bit-width. Both can be described
//! by a versioned JSON [`SpaceFile`].

mod blocks;
mod precision;

pub use blocks::{build_block, build_shift_block, MicroBlockSpec};
pub use precision::{mixed_precision_space, PrecisionSpec, ResidualBackbone, StageSpec};

use serde::{Deserialize, Serialize};

use crate::cost::BlockKey;
use crate::error::{Error, Result};
use crate::quant::{QuantConfig, FULL_PRECISION};
use crate::rng::Rng;
use crate::supernet::{CandidateBlock, Layer, ParamStore, Residual, Shape3, StageBuilder, SuperNet};

/// Version of the space definition format.
pub const SPACE_SCHEMA: u32 = 1;

/// One row of a macro-architecture. Within a row the first repeat carries
/// the stride and later repeats use stride 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum MacroRow {
    /// Fixed `K×K` conv, batch norm, ReLU.
    Conv {
        kernel: usize,
        channels: usize,
        #[serde(default = "one")]
        repeat: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    /// Searchable layers.
    Tbs {
        channels: usize,
        repeat: usize,
        stride: usize,
    },
    /// Global average pooling.
    Avgpool,
    /// Bias-free classifier.
    Fc { classes: usize },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroSpec {
    pub input: Shape3,
    pub rows: Vec<MacroRow>,
}

impl MacroSpec {
    /// The 22-layer ImageNet macro-architecture, for shape and counting
    /// checks; far too large to train here.
    pub fn imagenet() -> Self {
        let tbs = |channels, repeat, stride| MacroRow::Tbs { channels, repeat, stride };
        Self {
            input: (3, 224, 224),
            rows: vec![
                MacroRow::Conv {
                    kernel: 3,
                    channels: 16,
                    repeat: 1,
                    stride: 2,
                },
                tbs(16, 1, 1),
                tbs(24, 4, 2),
                tbs(32, 4, 2),
                tbs(64, 4, 2),
                tbs(112, 4, 1),
                tbs(184, 4, 2),
                tbs(352, 1, 1),
                MacroRow::Conv {
                    kernel: 1,
                    channels: 1984,
                    repeat: 1,
                    stride: 1,
                },
                MacroRow::Avgpool,
                MacroRow::Fc { classes: 1000 },
            ],
        }
    }

    /// CPU-sized default: 32×32 input, stem of 8 channels, three searchable
    /// stages of 16, 24 and 32 channels with two layers each.
    pub fn desk(classes: usize) -> Self {
        let tbs = |channels, stride| MacroRow::Tbs {
            channels,
            repeat: 2,
            stride,
        };
        Self {
            input: (3, 32, 32),
            rows: vec![
                MacroRow::Conv {
                    kernel: 3,
                    channels: 8,
                    repeat: 1,
                    stride: 2,
                },
                tbs(16, 1),
                tbs(24, 2),
                tbs(32, 2),
                MacroRow::Conv {
                    kernel: 1,
                    channels: 64,
                    repeat: 1,
                    stride: 1,
                },
                MacroRow::Avgpool,
                MacroRow::Fc { classes },
            ],
        }
    }

    /// Smallest useful space: a strided stem, `layers` searchable layers at
    /// constant width, then the usual head.
    pub fn toy(input: Shape3, width: usize, layers: usize, classes: usize) -> Self {
        Self {
            input,
            rows: vec![
                MacroRow::Conv {
                    kernel: 3,
                    channels: width,
                    repeat: 1,
                    stride: 2,
                },
                MacroRow::Tbs {
                    channels: width,
                    repeat: layers,
                    stride: 1,
                },
                MacroRow::Conv {
                    kernel: 1,
                    channels: 2 * width,
                    repeat: 1,
                    stride: 1,
                },
                MacroRow::Avgpool,
                MacroRow::Fc { classes },
            ],
        }
    }
}

/// `ceil(f·scale)` rounded up to a multiple of `multiple`.
pub fn width_scale(f: usize, scale: f64, multiple: usize) -> usize {
    let m = multiple.max(1);
    let scaled = (f as f64 * scale).ceil().max(1.0) as usize;
    scaled.div_ceil(m) * m
}

fn fixed_conv(store: &mut ParamStore, rng: &mut Rng, name: &str, input: Shape3, out: usize, kernel: usize, stride: usize) -> Result<CandidateBlock> {
    let mut b = StageBuilder::new(store, rng, name, input);
    b.conv(out, kernel, stride, 1, FULL_PRECISION)?.bn()?.relu()?;
    let key = BlockKey::new(format!("conv{kernel}x{kernel}"), input, out).stride(stride).kernel(kernel);
    CandidateBlock::new(key, b.finish(), Residual::None, vec![], input, QuantConfig::FULL)
}

pub(crate) fn avgpool_block(input: Shape3) -> Result<CandidateBlock> {
    let key = BlockKey::new("avgpool", input, input.0).kernel(input.1);
    CandidateBlock::new(key, vec![crate::supernet::Stage::GlobalAvgPool], Residual::None, vec![], input, QuantConfig::FULL)
}

pub(crate) fn fc_block(store: &mut ParamStore, rng: &mut Rng, name: &str, input: Shape3, classes: usize) -> Result<CandidateBlock> {
    let mut b = StageBuilder::new(store, rng, name, input);
    b.fc(classes, FULL_PRECISION)?;
    let key = BlockKey::new("fc", input, classes);
    CandidateBlock::new(key, b.finish(), Residual::None, vec![], input, QuantConfig::FULL)
}

/// Builds the layer-wise space. Skip candidates are dropped on layers that
/// change shape; every searchable layer must keep at least two candidates.
pub fn fbnet_space(spec: &MacroSpec, micro: &[MicroBlockSpec], scale: f64, rng: &mut Rng) -> Result<SuperNet> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidSpace(format!("width scale must be positive, got {scale}")));
    }
    if micro.is_empty() {
        return Err(Error::InvalidSpace("no candidate blocks".into()));
    }
    let multiple = micro.iter().map(MicroBlockSpec::groups).max().unwrap_or(1);
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut shape = spec.input;
    let mut stage = 0;
    for (r, row) in spec.rows.iter().enumerate() {
        match *row {
            MacroRow::Conv {
                kernel,
                channels,
                repeat,
                stride,
            } => {
                let out = width_scale(channels, scale, multiple);
                for j in 0..repeat {
                    let name = if repeat == 1 { format!("r{r}_conv") } else { format!("r{r}_conv{j}") };
                    let s = if j == 0 { stride } else { 1 };
                    let block = fixed_conv(&mut store, rng, &name, shape, out, kernel, s)?;
                    shape = block.output;
                    layers.push(Layer::Fixed { name, block });
                }
            }
            MacroRow::Tbs { channels, repeat, stride } => {
                if !(1..=2).contains(&stride) {
                    return Err(Error::InvalidSpace(format!("row {r}: stride must be 1 or 2, got {stride}")));
                }
                stage += 1;
                let out = width_scale(channels, scale, multiple);
                for j in 0..repeat {
                    let name = format!("s{stage}_l{j}");
                    let s = if j == 0 { stride } else { 1 };
                    let keeps_shape = s == 1 && shape.0 == out;
                    let mut candidates = Vec::new();
                    for spec in micro {
                        if spec.is_skip() && !keeps_shape {
                            continue;
                        }
                        let prefix = format!("{name}.{}", spec.name());
                        candidates.push(build_block(spec, &mut store, rng, &prefix, shape, out, s)?);
                    }
                    if candidates.len() < 2 {
                        return Err(Error::InvalidSpace(format!("{name}: fewer than two legal candidates")));
                    }
                    shape = candidates[0].output;
                    let k = candidates.len();
                    layers.push(Layer::Searchable {
                        name,
                        candidates,
                        theta: vec![0.0; k],
                    });
                }
            }
            MacroRow::Avgpool => {
                let block = avgpool_block(shape)?;
                shape = block.output;
                layers.push(Layer::Fixed {
                    name: format!("r{r}_avgpool"),
                    block,
                });
            }
            MacroRow::Fc { classes } => {
                let name = format!("r{r}_fc");
                let block = fc_block(&mut store, rng, &name, shape, classes)?;
                shape = block.output;
                layers.push(Layer::Fixed { name, block });
            }
        }
    }
    SuperNet::new(spec.input, layers, store)
}

/// A space and how to build it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceDef {
    Fbnet {
        #[serde(rename = "macro")]
        macro_spec: MacroSpec,
        micro: Vec<MicroBlockSpec>,
        #[serde(default = "unit_scale")]
        width_scale: f64,
    },
    MixedPrecision {
        backbone: ResidualBackbone,
        precision: PrecisionSpec,
    },
}

fn unit_scale() -> f64 {
    1.0
}

impl SpaceDef {
    pub fn build(&self, rng: &mut Rng) -> Result<SuperNet> {
        match self {
            SpaceDef::Fbnet {
                macro_spec,
                micro,
                width_scale,
            } => fbnet_space(macro_spec, micro, *width_scale, rng),
            SpaceDef::MixedPrecision { backbone, precision } => mixed_precision_space(backbone, precision, rng),
        }
    }
}

/// Versioned on-disk space definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceFile {
    pub schema: u32,
    pub space: SpaceDef,
}

impl SpaceFile {
    pub fn new(space: SpaceDef) -> Self {
        Self {
            schema: SPACE_SCHEMA,
            space,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SpaceFile = serde_json::from_str(text)?;
        if f.schema != SPACE_SCHEMA {
            return Err(Error::InvalidSpace(format!("unsupported space schema {}, expected {SPACE_SCHEMA}", f.schema)));
        }
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("space files serialize");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests;
