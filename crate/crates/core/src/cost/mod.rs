//! Hardware-agnostic cost accounting and latency lookup tables.
//!
//! A [`LayerConfig`] describes one layer by its input channels `M`, output
//! channels `N`, kernel size `K`, output spatial size `F`, batch `B` and
//! group count `G`. From it:
//!
//! | variant             | params      | MACs              |
//! |---------------------|-------------|-------------------|
//! | spatial             | `MNK²`      | `B·F²·MNK²`       |
//! | spatially separable | `MNK`       | `B·F²·MNK`        |
//! | pointwise           | `MN`        | `B·F²·MN`         |
//! | group               | `MNK²/G`    | `B·F²·MNK²/G`     |
//! | depthwise           | `MK²`       | `B·F²·MK²`        |
//! | shift, pooling      | 0           | 0                 |
//! | fully connected     | `MN`        | `B·MN`            |
//!
//! Activations are `B(M+N)F²` and arithmetic intensity is
//! `MACs / (params + activations)`. MACs are reported as FLOPs.

mod lut;
mod objective;
mod report;

pub use lut::{synth_lut, BlockKey, LatencyEntry, LatencyModel, LatencyTable};
pub use objective::{cost_weighting, expected_cost, mask_weighted_sum, CostCoefficients};
pub use report::{reference_layer_table, CostReport, CostRow, CostTotals, ReferenceRow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Spatial,
    SpatiallySeparable,
    Pointwise,
    Group,
    Depthwise,
    Shift,
    Maxpool,
    Avgpool,
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kind: LayerKind,
    /// Input channels.
    pub m: u64,
    /// Output channels.
    pub n: u64,
    /// Kernel size.
    pub k: u64,
    /// Output spatial size.
    pub f: u64,
    /// Batch size.
    #[serde(default = "one")]
    pub b: u64,
    /// Group count.
    #[serde(default = "one")]
    pub g: u64,
}

fn one() -> u64 {
    1
}

/// Per-layer metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub params: u64,
    pub macs: u64,
    pub activation_elems: u64,
}

impl LayerMetrics {
    pub fn arithmetic_intensity(&self) -> f64 {
        ratio(self.macs, self.params + self.activation_elems)
    }
}

impl std::ops::Add for LayerMetrics {
    type Output = LayerMetrics;
    fn add(self, o: LayerMetrics) -> LayerMetrics {
        LayerMetrics {
            params: self.params + o.params,
            macs: self.macs + o.macs,
            activation_elems: self.activation_elems + o.activation_elems,
        }
    }
}

impl std::iter::Sum for LayerMetrics {
    fn sum<I: Iterator<Item = LayerMetrics>>(iter: I) -> Self {
        iter.fold(LayerMetrics::default(), |a, b| a + b)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if num == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl LayerConfig {
    pub fn new(kind: LayerKind, m: u64, n: u64, k: u64, f: u64) -> Self {
        Self { kind, m, n, k, f, b: 1, g: 1 }
    }

    pub fn with_batch(mut self, b: u64) -> Self {
        self.b = b;
        self
    }

    pub fn with_groups(mut self, g: u64) -> Self {
        self.g = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [("M", self.m), ("N", self.n), ("K", self.k), ("F", self.f), ("B", self.b), ("G", self.g)] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        match self.kind {
            LayerKind::Pointwise if self.k != 1 => problems.push("pointwise layers need K = 1".into()),
            LayerKind::Depthwise if self.n != self.m || self.g != self.m => {
                problems.push("depthwise layers need N = M and G = M".into())
            }
            LayerKind::Group if self.g > 0 && (self.m % self.g != 0 || self.n % self.g != 0) => {
                problems.push(format!("group count {} must divide M = {} and N = {}", self.g, self.m, self.n))
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    pub fn params(&self) -> u64 {
        let (m, n, k) = (self.m, self.n, self.k);
        match self.kind {
            LayerKind::Spatial => m * n * k * k,
            LayerKind::SpatiallySeparable => m * n * k,
            LayerKind::Pointwise | LayerKind::Fc => m * n,
            LayerKind::Group => m * n * k * k / self.g,
            LayerKind::Depthwise => m * k * k,
            LayerKind::Shift | LayerKind::Maxpool | LayerKind::Avgpool => 0,
        }
    }

    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Fc => self.b * self.m * self.n,
            _ => self.b * self.f * self.f * self.params(),
        }
    }

    pub fn activation_elems(&self) -> u64 {
        let plane = match self.kind {
            LayerKind::Fc => 1,
            _ => self.f * self.f,
        };
        self.b * (self.m + self.n) * plane
    }

    pub fn arithmetic_intensity(&self) -> f64 {
        self.metrics().arithmetic_intensity()
    }

    pub fn metrics(&self) -> LayerMetrics {
        LayerMetrics {
            params: self.params(),
            macs: self.macs(),
            activation_elems: self.activation_elems(),
        }
    }
}

pub fn params_of(layer: &LayerConfig) -> u64 {
    layer.params()
}

pub fn macs_of(layer: &LayerConfig) -> u64 {
    layer.macs()
}

pub fn activation_elems(layer: &LayerConfig) -> u64 {
    layer.activation_elems()
}

pub fn arithmetic_intensity(layer: &LayerConfig) -> f64 {
    layer.arithmetic_intensity()
}

/// Sum of table entries for a sequence of blocks.
pub fn net_latency<'a>(keys: impl IntoIterator<Item = &'a BlockKey>, table: &LatencyTable) -> Result<f64> {
    keys.into_iter().map(|k| table.lookup(k)).sum()
}
