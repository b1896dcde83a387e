use serde::{Deserialize, Serialize};

use super::params::{Init, ParamId, ParamRole, ParamStore, StatsId};
use crate::autodiff::{BatchStats, Tape, Var};
use crate::cost::{BlockKey, LayerConfig, LayerKind, LayerMetrics};
use crate::error::{Error, Result};
use crate::quant::{QuantConfig, FULL_PRECISION, PACT_ALPHA_INIT};
use crate::rng::Rng;

/// `(channels, height, width)` of one sample.
pub type Shape3 = (usize, usize, usize);

pub const BN_EPS: f64 = 1e-5;

/// One primitive step of a block's forward graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    Conv {
        weight: ParamId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        weight_bits: u32,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        stats: StatsId,
        channels: usize,
    },
    Relu,
    Shift {
        kernel: usize,
    },
    Shuffle {
        groups: usize,
    },
    /// PACT clip and quantize with a learnable level.
    ActQuant {
        alpha: ParamId,
        bits: u32,
    },
    MaxPool2,
    GlobalAvgPool,
    /// Bias-free fully connected layer; weight is `[in, out]`.
    Fc {
        weight: ParamId,
        in_features: usize,
        out_features: usize,
        weight_bits: u32,
    },
    Scale(f64),
}

impl Stage {
    pub fn out_shape(&self, (c, h, w): Shape3) -> Result<Shape3> {
        let bad = |detail: String| Error::InvalidShape { op: "block", detail };
        match *self {
            Stage::Conv { out_channels, kernel, stride, pad, groups, .. } => {
                if groups == 0 || c % groups != 0 || out_channels % groups != 0 {
                    return Err(Error::Divisibility {
                        what: "conv channels",
                        value: c,
                        divisor: groups,
                    });
                }
                let size = |n: usize| {
                    let padded = n + 2 * pad;
                    if padded < kernel || stride == 0 {
                        Err(bad(format!("kernel {kernel} does not fit input {n} with pad {pad}")))
                    } else {
                        Ok((padded - kernel) / stride + 1)
                    }
                };
                Ok((out_channels, size(h)?, size(w)?))
            }
            Stage::BatchNorm { channels, .. } => {
                if channels != c {
                    return Err(bad(format!("batchnorm over {channels} channels applied to {c}")));
                }
                Ok((c, h, w))
            }
            Stage::Shuffle { groups } => {
                if groups == 0 || c % groups != 0 {
                    return Err(Error::Divisibility {
                        what: "shuffle channels",
                        value: c,
                        divisor: groups,
                    });
                }
                Ok((c, h, w))
            }
            Stage::Shift { kernel } => {
                if kernel % 2 == 0 {
                    return Err(bad(format!("shift kernel must be odd, got {kernel}")));
                }
                Ok((c, h, w))
            }
            Stage::Relu | Stage::ActQuant { .. } | Stage::Scale(_) => Ok((c, h, w)),
            Stage::MaxPool2 => {
                if h < 2 || w < 2 {
                    return Err(bad(format!("maxpool2 on {h}x{w}")));
                }
                Ok((c, h / 2, w / 2))
            }
            Stage::GlobalAvgPool => Ok((c, 1, 1)),
            Stage::Fc { in_features, out_features, .. } => {
                if in_features != c * h * w {
                    return Err(bad(format!("fc expects {in_features} features, got {}", c * h * w)));
                }
                Ok((out_features, 1, 1))
            }
        }
    }

    /// Analytic layer description, for stages that count as layers.
    pub fn layer_config(&self, (c, _, _): Shape3, (n, f, _): Shape3) -> Option<LayerConfig> {
        let cfg = match *self {
            Stage::Conv { kernel, groups, .. } => {
                let kind = if groups > 1 && groups == c && groups == n {
                    LayerKind::Depthwise
                } else if groups > 1 {
                    LayerKind::Group
                } else if kernel == 1 {
                    LayerKind::Pointwise
                } else {
                    LayerKind::Spatial
                };
                LayerConfig::new(kind, c as u64, n as u64, kernel as u64, f as u64).with_groups(groups as u64)
            }
            Stage::Shift { kernel } => LayerConfig::new(LayerKind::Shift, c as u64, n as u64, kernel as u64, f as u64),
            Stage::MaxPool2 => LayerConfig::new(LayerKind::Maxpool, c as u64, n as u64, 2, f as u64),
            Stage::GlobalAvgPool => LayerConfig::new(LayerKind::Avgpool, c as u64, n as u64, 1, f as u64),
            Stage::Fc { in_features, out_features, .. } => {
                LayerConfig::new(LayerKind::Fc, in_features as u64, out_features as u64, 1, 1)
            }
            _ => return None,
        };
        Some(cfg)
    }

    fn weight_bits(&self) -> u32 {
        match *self {
            Stage::Conv { weight_bits, .. } | Stage::Fc { weight_bits, .. } => weight_bits,
            _ => FULL_PRECISION,
        }
    }

    fn params(&self) -> Vec<ParamId> {
        match *self {
            Stage::Conv { weight, .. } | Stage::Fc { weight, .. } => vec![weight],
            Stage::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            Stage::ActQuant { alpha, .. } => vec![alpha],
            _ => vec![],
        }
    }
}

/// How batch normalization behaves in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; optionally report them for running averages.
    Train { update_stats: bool },
    /// Running statistics.
    Eval,
}

/// Binds store parameters to tape leaves during one forward pass.
pub(crate) struct Binder<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub grad: bool,
    pub bn: BnMode,
    pub bound: Vec<Option<Var>>,
    pub updates: Vec<(StatsId, BatchStats)>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, grad: bool, bn: BnMode) -> Self {
        Self {
            tape,
            store,
            grad,
            bn,
            bound: vec![None; store.len()],
            updates: Vec::new(),
        }
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.grad {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters that became tape leaves, in id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    fn stage(&mut self, stage: &Stage, x: Var) -> Result<Var> {
        match *stage {
            Stage::Conv { weight, stride, pad, groups, weight_bits, .. } => {
                let mut w = self.param(weight);
                if weight_bits != FULL_PRECISION {
                    w = self.tape.dorefa_weights(w, weight_bits)?;
                }
                self.tape.conv2d(x, w, stride, pad, groups)
            }
            Stage::BatchNorm { gamma, beta, stats, .. } => {
                let (g, b) = (self.param(gamma), self.param(beta));
                match self.bn {
                    BnMode::Train { update_stats } => {
                        let (y, batch) = self.tape.batchnorm_train(x, g, b, BN_EPS)?;
                        if update_stats {
                            self.updates.push((stats, batch));
                        }
                        Ok(y)
                    }
                    BnMode::Eval => {
                        let s = self.store.stats(stats);
                        self.tape.batchnorm_eval(x, g, b, &s.mean, &s.var, BN_EPS)
                    }
                }
            }
            Stage::Relu => self.tape.relu(x),
            Stage::Shift { kernel } => self.tape.shift(x, kernel),
            Stage::Shuffle { groups } => self.tape.channel_shuffle(x, groups),
            Stage::ActQuant { alpha, bits } => {
                let a = self.param(alpha);
                let y = self.tape.pact_clip(x, a)?;
                self.tape.pact_quantize(y, a, bits)
            }
            Stage::MaxPool2 => self.tape.maxpool2(x),
            Stage::GlobalAvgPool => self.tape.global_avgpool(x),
            Stage::Fc { weight, weight_bits, .. } => {
                let mut w = self.param(weight);
                if weight_bits != FULL_PRECISION {
                    w = self.tape.dorefa_weights(w, weight_bits)?;
                }
                let x = if self.tape.value(x).shape().len() == 4 {
                    self.tape.flatten(x)?
                } else {
                    x
                };
                self.tape.matmul(x, w)
            }
            Stage::Scale(c) => self.tape.scale(x, c),
        }
    }

    fn stages(&mut self, stages: &[Stage], mut x: Var) -> Result<Var> {
        for s in stages {
            x = self.stage(s, x)?;
        }
        Ok(x)
    }

    pub fn block(&mut self, block: &CandidateBlock, x: Var) -> Result<Var> {
        let body = self.stages(&block.body, x)?;
        let merged = match &block.residual {
            Residual::None => body,
            Residual::Identity => self.tape.add(body, x)?,
            Residual::Project(stages) => {
                let short = self.stages(stages, x)?;
                self.tape.add(body, short)?
            }
        };
        self.stages(&block.post, merged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Residual {
    None,
    Identity,
    Project(Vec<Stage>),
}

/// A candidate operator `b_{l,i}`: body, optional skip path, and stages
/// applied after the merge. Owns private parameters in the shared store.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBlock {
    pub key: BlockKey,
    pub body: Vec<Stage>,
    pub residual: Residual,
    pub post: Vec<Stage>,
    pub input: Shape3,
    pub output: Shape3,
    pub quant: QuantConfig,
}

fn propagate(stages: &[Stage], mut shape: Shape3) -> Result<Shape3> {
    for s in stages {
        shape = s.out_shape(shape)?;
    }
    Ok(shape)
}

fn configs(stages: &[Stage], mut shape: Shape3, out: &mut Vec<(LayerConfig, u32)>) {
    for s in stages {
        let next = s.out_shape(shape).expect("shapes checked at construction");
        if let Some(cfg) = s.layer_config(shape, next) {
            out.push((cfg, s.weight_bits()));
        }
        shape = next;
    }
}

impl CandidateBlock {
    /// Checks the shape algebra symbolically and fills in the output shape.
    pub fn new(key: BlockKey, body: Vec<Stage>, residual: Residual, post: Vec<Stage>, input: Shape3, quant: QuantConfig) -> Result<Self> {
        let merged = propagate(&body, input)?;
        let short = match &residual {
            Residual::None => None,
            Residual::Identity => Some(input),
            Residual::Project(stages) => Some(propagate(stages, input)?),
        };
        if let Some(s) = short {
            if s != merged {
                return Err(Error::InvalidShape {
                    op: "block",
                    detail: format!("{key}: body gives {merged:?} but skip path gives {s:?}"),
                });
            }
        }
        let output = propagate(&post, merged)?;
        Ok(Self {
            key,
            body,
            residual,
            post,
            input,
            output,
            quant,
        })
    }

    /// The pure identity.
    pub fn identity(key: BlockKey, input: Shape3) -> Self {
        Self {
            key,
            body: vec![],
            residual: Residual::None,
            post: vec![],
            input,
            output: input,
            quant: QuantConfig::FULL,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.body.is_empty() && self.residual == Residual::None && self.post.is_empty()
    }

    fn all_stages(&self) -> impl Iterator<Item = &Stage> {
        let short: &[Stage] = match &self.residual {
            Residual::Project(s) => s,
            _ => &[],
        };
        self.body.iter().chain(short).chain(&self.post)
    }

    /// Counted layers with their weight bit-widths, in execution order.
    pub fn layer_configs(&self) -> Vec<(LayerConfig, u32)> {
        let mut out = Vec::new();
        configs(&self.body, self.input, &mut out);
        if let Residual::Project(s) = &self.residual {
            configs(s, self.input, &mut out);
        }
        let merged = propagate(&self.body, self.input).expect("shapes checked at construction");
        configs(&self.post, merged, &mut out);
        out
    }

    pub fn metrics(&self) -> LayerMetrics {
        self.layer_configs().iter().map(|(c, _)| c.metrics()).sum()
    }

    /// `Σ params · weight_bits` over the block's layers.
    pub fn size_bits(&self) -> f64 {
        self.layer_configs().iter().map(|(c, b)| c.params() as f64 * *b as f64).sum()
    }

    /// `Σ MACs · weight_bits · act_bits` over the block's layers.
    pub fn flop_bits(&self) -> f64 {
        let a = self.quant.act_bits as f64;
        self.layer_configs().iter().map(|(c, b)| c.macs() as f64 * *b as f64 * a).sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.all_stages().flat_map(Stage::params).collect()
    }

    /// Learnable scalars owned by this block, normalization included.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).numel()).sum()
    }
}

/// Appends stages while registering their parameters and tracking shape.
pub struct StageBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
    shape: Shape3,
    stages: Vec<Stage>,
}

impl<'a> StageBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng, prefix: impl Into<String>, input: Shape3) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.into(),
            shape: input,
            stages: Vec::new(),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    fn name(&self, what: &str) -> String {
        format!("{}.{}.{what}", self.prefix, self.stages.len())
    }

    fn push(&mut self, stage: Stage) -> Result<&mut Self> {
        self.shape = stage.out_shape(self.shape)?;
        self.stages.push(stage);
        Ok(self)
    }

    pub fn conv(&mut self, out_channels: usize, kernel: usize, stride: usize, groups: usize, weight_bits: u32) -> Result<&mut Self> {
        let c = self.shape.0;
        if groups == 0 || c % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Divisibility {
                what: "conv channels",
                value: c,
                divisor: groups,
            });
        }
        let fan_in = c / groups * kernel * kernel;
        let name = self.name("conv");
        let weight = self.store.add(
            name,
            &[out_channels, c / groups, kernel, kernel],
            Init::Kaiming { fan_in },
            ParamRole::Weight,
            self.rng,
        );
        self.push(Stage::Conv {
            weight,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            groups,
            weight_bits,
        })
    }

    pub fn bn(&mut self) -> Result<&mut Self> {
        let c = self.shape.0;
        let gamma = self.store.add(self.name("bn.gamma"), &[c], Init::Constant(1.0), ParamRole::BnScale, self.rng);
        let beta = self.store.add(self.name("bn.beta"), &[c], Init::Constant(0.0), ParamRole::BnShift, self.rng);
        let stats = self.store.add_stats(c);
        self.push(Stage::BatchNorm {
            gamma,
            beta,
            stats,
            channels: c,
        })
    }

    pub fn relu(&mut self) -> Result<&mut Self> {
        self.push(Stage::Relu)
    }

    pub fn shift(&mut self, kernel: usize) -> Result<&mut Self> {
        self.push(Stage::Shift { kernel })
    }

    pub fn shuffle(&mut self, groups: usize) -> Result<&mut Self> {
        self.push(Stage::Shuffle { groups })
    }

    /// PACT activation quantization; a no-op at full precision.
    pub fn act_quant(&mut self, bits: u32) -> Result<&mut Self> {
        if bits == FULL_PRECISION {
            return Ok(self);
        }
        crate::quant::check_bits(bits)?;
        let alpha = self.store.add(self.name("pact.alpha"), &[1], Init::Constant(PACT_ALPHA_INIT), ParamRole::PactAlpha, self.rng);
        self.push(Stage::ActQuant { alpha, bits })
    }

    pub fn maxpool2(&mut self) -> Result<&mut Self> {
        self.push(Stage::MaxPool2)
    }

    pub fn global_avgpool(&mut self) -> Result<&mut Self> {
        self.push(Stage::GlobalAvgPool)
    }

    pub fn fc(&mut self, out_features: usize, weight_bits: u32) -> Result<&mut Self> {
        let (c, h, w) = self.shape;
        let in_features = c * h * w;
        let name = self.name("fc");
        let weight = self.store.add(name, &[in_features, out_features], Init::Kaiming { fan_in: in_features }, ParamRole::Weight, self.rng);
        self.push(Stage::Fc {
            weight,
            in_features,
            out_features,
            weight_bits,
        })
    }

    pub fn scale(&mut self, c: f64) -> Result<&mut Self> {
        self.push(Stage::Scale(c))
    }

    pub fn finish(self) -> Vec<Stage> {
        self.stages
    }
}
