use serde::{Deserialize, Serialize};

use crate::cost::BlockKey;
use crate::error::{Error, Result};
use crate::quant::{QuantConfig, FULL_PRECISION};
use crate::rng::Rng;
use crate::supernet::{CandidateBlock, ParamStore, Residual, Shape3, StageBuilder};

/// One candidate configuration of a searchable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MicroBlockSpec {
    /// Inverted residual: grouped 1×1 expansion, `K×K` depthwise, grouped
    /// 1×1 projection.
    Mbconv {
        expansion: usize,
        kernel: usize,
        #[serde(default = "one")]
        groups: usize,
    },
    /// Conv-shift-conv with a 3×3 shift.
    Shift { expansion: usize },
    /// Identity.
    Skip,
}

fn one() -> usize {
    1
}

impl MicroBlockSpec {
    pub const fn mbconv(expansion: usize, kernel: usize, groups: usize) -> Self {
        MicroBlockSpec::Mbconv {
            expansion,
            kernel,
            groups,
        }
    }

    /// The nine layer-wise candidates: `k3_e1, k3_e1_g2, k3_e3, k3_e6,
    /// k5_e1, k5_e1_g2, k5_e3, k5_e6, skip`.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::mbconv(1, 3, 1),
            Self::mbconv(1, 3, 2),
            Self::mbconv(3, 3, 1),
            Self::mbconv(6, 3, 1),
            Self::mbconv(1, 5, 1),
            Self::mbconv(1, 5, 2),
            Self::mbconv(3, 5, 1),
            Self::mbconv(6, 5, 1),
            MicroBlockSpec::Skip,
        ]
    }

    /// Preset by name, e.g. `k5_e6`, `k3_e1_g2`, `shift_e3`, `skip`.
    pub fn preset(name: &str) -> Result<Self> {
        let bad = || Error::InvalidSpace(format!("unknown block preset '{name}'"));
        if name == "skip" {
            return Ok(MicroBlockSpec::Skip);
        }
        if let Some(e) = name.strip_prefix("shift_e") {
            return Ok(MicroBlockSpec::Shift {
                expansion: e.parse().map_err(|_| bad())?,
            });
        }
        let rest = name.strip_prefix('k').ok_or_else(bad)?;
        let mut parts = rest.split('_');
        let kernel = parts.next().and_then(|k| k.parse().ok()).ok_or_else(bad)?;
        let expansion = parts
            .next()
            .and_then(|e| e.strip_prefix('e'))
            .and_then(|e| e.parse().ok())
            .ok_or_else(bad)?;
        let groups = match parts.next() {
            None => 1,
            Some(g) => g.strip_prefix('g').and_then(|g| g.parse().ok()).ok_or_else(bad)?,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self::mbconv(expansion, kernel, groups))
    }

    pub fn name(&self) -> String {
        match *self {
            MicroBlockSpec::Mbconv {
                expansion,
                kernel,
                groups,
            } => {
                if groups > 1 {
                    format!("k{kernel}_e{expansion}_g{groups}")
                } else {
                    format!("k{kernel}_e{expansion}")
                }
            }
            MicroBlockSpec::Shift { expansion } => format!("shift_e{expansion}"),
            MicroBlockSpec::Skip => "skip".into(),
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, MicroBlockSpec::Skip)
    }

    pub fn groups(&self) -> usize {
        match *self {
            MicroBlockSpec::Mbconv { groups, .. } => groups,
            _ => 1,
        }
    }
}

/// Builds one candidate. Blocks add their input back iff stride is 1 and
/// channels are unchanged; no activation follows the last 1×1 conv.
pub fn build_block(
    spec: &MicroBlockSpec,
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    input: Shape3,
    out: usize,
    stride: usize,
) -> Result<CandidateBlock> {
    let c = input.0;
    let same = stride == 1 && c == out;
    let key = BlockKey::new(spec.name(), input, out).stride(stride);
    match *spec {
        MicroBlockSpec::Skip => {
            if !same {
                return Err(Error::InvalidSpace(format!(
                    "{prefix}: skip needs matching shapes, got {c} -> {out} channels at stride {stride}"
                )));
            }
            Ok(CandidateBlock::identity(key, input))
        }
        MicroBlockSpec::Mbconv {
            expansion,
            kernel,
            groups,
        } => {
            if kernel % 2 == 0 || expansion == 0 {
                return Err(Error::InvalidSpace(format!("{prefix}: need odd kernel and positive expansion")));
            }
            let mid = expansion * c;
            let mut b = StageBuilder::new(store, rng, prefix, input);
            b.conv(mid, 1, 1, groups, FULL_PRECISION)?;
            if groups > 1 {
                b.shuffle(groups)?;
            }
            b.bn()?.relu()?;
            b.conv(mid, kernel, stride, mid, FULL_PRECISION)?.bn()?.relu()?;
            b.conv(out, 1, 1, groups, FULL_PRECISION)?;
            if groups > 1 {
                b.shuffle(groups)?;
            }
            b.bn()?;
            let residual = if same { Residual::Identity } else { Residual::None };
            let key = key.expansion(expansion).kernel(kernel).groups(groups);
            CandidateBlock::new(key, b.finish(), residual, vec![], input, QuantConfig::FULL)
        }
        MicroBlockSpec::Shift { expansion } => build_shift_block(store, rng, prefix, input, out, stride, expansion),
    }
}

/// Conv-shift-conv: BN, ReLU, 1×1 expansion, BN, ReLU, 3×3 shift, then a
/// 1×1 projection carrying the stride.
pub fn build_shift_block(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    input: Shape3,
    out: usize,
    stride: usize,
    expansion: usize,
) -> Result<CandidateBlock> {
    if expansion == 0 {
        return Err(Error::InvalidSpace(format!("{prefix}: expansion must be positive")));
    }
    let c = input.0;
    let mut b = StageBuilder::new(store, rng, prefix, input);
    b.bn()?.relu()?;
    b.conv(expansion * c, 1, 1, 1, FULL_PRECISION)?.bn()?.relu()?;
    b.shift(3)?;
    b.conv(out, 1, stride, 1, FULL_PRECISION)?;
    let residual = if stride == 1 && c == out {
        Residual::Identity
    } else {
        Residual::None
    };
    let key = BlockKey::new(format!("shift_e{expansion}"), input, out)
        .stride(stride)
        .expansion(expansion)
        .kernel(3);
    CandidateBlock::new(key, b.finish(), residual, vec![], input, QuantConfig::FULL)
}
