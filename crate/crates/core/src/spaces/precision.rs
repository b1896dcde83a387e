use serde::{Deserialize, Serialize};

use super::{avgpool_block, fc_block, fixed_conv};
use crate::cost::BlockKey;
use crate::error::{Error, Result};
use crate::quant::{check_bits, QuantConfig, FULL_PRECISION};
use crate::rng::Rng;
use crate::supernet::{CandidateBlock, Layer, ParamStore, Residual, Shape3, StageBuilder, SuperNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Small residual ConvNet: a 3×3 stem, stages of basic blocks, global
/// pooling and a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualBackbone {
    pub input: Shape3,
    pub classes: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl ResidualBackbone {
    /// Three stages of two blocks at widths 8, 16, 32.
    pub fn toy(input: Shape3, classes: usize) -> Self {
        Self {
            input,
            classes,
            stem_channels: 8,
            stages: vec![
                StageSpec {
                    channels: 8,
                    blocks: 2,
                    stride: 1,
                },
                StageSpec {
                    channels: 16,
                    blocks: 2,
                    stride: 2,
                },
                StageSpec {
                    channels: 32,
                    blocks: 2,
                    stride: 2,
                },
            ],
        }
    }
}

/// Candidate bit-widths per searchable block. A weight width of 0 means
/// "skip the block".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PrecisionSpec {
    /// Quantize weights only; activations stay full precision.
    WeightOnly(Vec<u32>),
    /// `(weight, activation)` pairs.
    Joint(Vec<(u32, u32)>),
}

impl PrecisionSpec {
    fn pairs(&self) -> Vec<(u32, u32)> {
        match self {
            PrecisionSpec::WeightOnly(ws) => ws.iter().map(|&w| (w, FULL_PRECISION)).collect(),
            PrecisionSpec::Joint(p) => p.clone(),
        }
    }
}

/// Basic residual block with DoReFa weights and, below 32 bits, PACT on the
/// inputs of each convolution.
fn basic_block(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    input: Shape3,
    out: usize,
    stride: usize,
    (wb, ab): (u32, u32),
) -> Result<CandidateBlock> {
    let mut b = StageBuilder::new(store, rng, prefix, input);
    b.act_quant(ab)?.conv(out, 3, stride, 1, wb)?.bn()?.relu()?;
    b.act_quant(ab)?.conv(out, 3, 1, 1, wb)?.bn()?;
    let body = b.finish();
    let residual = if stride == 1 && input.0 == out {
        Residual::Identity
    } else {
        let mut s = StageBuilder::new(store, rng, format!("{prefix}.short"), input);
        s.act_quant(ab)?.conv(out, 1, stride, 1, wb)?.bn()?;
        Residual::Project(s.finish())
    };
    let post = vec![crate::supernet::Stage::Relu];
    let key = BlockKey::new("basic", input, out).stride(stride).kernel(3).precision(wb, ab);
    CandidateBlock::new(key, body, residual, post, input, QuantConfig { weight_bits: wb, act_bits: ab })
}

/// One searchable layer per backbone block, one candidate per precision.
/// The stem and classifier stay at full precision.
pub fn mixed_precision_space(backbone: &ResidualBackbone, prec: &PrecisionSpec, rng: &mut Rng) -> Result<SuperNet> {
    let pairs = prec.pairs();
    if pairs.len() < 2 {
        return Err(Error::InvalidSpace("need at least two precision candidates".into()));
    }
    for &(w, a) in &pairs {
        if w != 0 {
            check_bits(w)?;
            check_bits(a)?;
        }
    }
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let stem = fixed_conv(&mut store, rng, "stem", backbone.input, backbone.stem_channels, 3, 1)?;
    let mut shape = stem.output;
    layers.push(Layer::Fixed {
        name: "stem".into(),
        block: stem,
    });
    for (si, stage) in backbone.stages.iter().enumerate() {
        for j in 0..stage.blocks {
            let name = format!("s{}_b{j}", si + 1);
            let stride = if j == 0 { stage.stride } else { 1 };
            let mut candidates = Vec::new();
            for &(w, a) in &pairs {
                if w == 0 {
                    if stride != 1 || shape.0 != stage.channels {
                        return Err(Error::InvalidSpace(format!(
                            "{name}: precision 0 (skip) on a block that changes shape"
                        )));
                    }
                    let key = BlockKey::new("skip", shape, shape.0);
                    candidates.push(CandidateBlock::identity(key, shape));
                    continue;
                }
                let prefix = format!("{name}.w{w}a{a}");
                candidates.push(basic_block(&mut store, rng, &prefix, shape, stage.channels, stride, (w, a))?);
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
    let pool = avgpool_block(shape)?;
    shape = pool.output;
    layers.push(Layer::Fixed {
        name: "avgpool".into(),
        block: pool,
    });
    let fc = fc_block(&mut store, rng, "fc", shape, backbone.classes)?;
    layers.push(Layer::Fixed {
        name: "fc".into(),
        block: fc,
    });
    SuperNet::new(backbone.input, layers, store)
}
