use serde::{Deserialize, Serialize};

use crate::autodiff::BatchStats;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Momentum of batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StatsId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `N(0, 2 / fan_in)`.
    Kaiming { fan_in: usize },
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    BnScale,
    BnShift,
    /// PACT clipping level, kept at or above its floor.
    PactAlpha,
}

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub name: String,
    pub value: Tensor,
    pub init: Init,
    pub role: ParamRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// All learnable tensors and normalization state of a supernet. Ids are
/// stable indices in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<RunningStats>,
}

fn draw(init: Init, shape: &[usize], rng: &mut Rng) -> Tensor {
    match init {
        Init::Constant(c) => Tensor::full(shape, c),
        Init::Kaiming { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.normal() * std).collect();
            Tensor::new(shape.to_vec(), data).expect("kaiming draws are finite")
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, role: ParamRole, rng: &mut Rng) -> ParamId {
        let value = draw(init, shape, rng);
        self.params.push(Param {
            name: name.into(),
            value,
            init,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, channels: usize) -> StatsId {
        self.stats.push(RunningStats::fresh(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.params[id.0].role
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_stats(&mut self, id: StatsId, batch: &BatchStats) {
        let s = &mut self.stats[id.0];
        for (r, b) in s.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in s.var.iter_mut().zip(&batch.unbiased_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }

    /// Redraws every parameter from its initializer, in registration order,
    /// and resets running statistics.
    pub fn reinit(&mut self, rng: &mut Rng) {
        for p in &mut self.params {
            p.value = draw(p.init, p.value.shape(), rng);
        }
        for s in &mut self.stats {
            *s = RunningStats::fresh(s.mean.len());
        }
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            params: self.params.iter().map(|p| p.value.data().to_vec()).collect(),
            stats: self.stats.clone(),
        }
    }

    pub fn restore(&mut self, snap: &StoreSnapshot) -> Result<()> {
        let bad = |what: &str| Error::Checkpoint(format!("snapshot does not match this network: {what}"));
        if snap.params.len() != self.params.len() || snap.stats.len() != self.stats.len() {
            return Err(bad("tensor count"));
        }
        for (p, v) in self.params.iter().zip(&snap.params) {
            if p.value.numel() != v.len() {
                return Err(bad(&p.name));
            }
        }
        for (s, v) in self.stats.iter().zip(&snap.stats) {
            if s.mean.len() != v.mean.len() || s.var.len() != v.var.len() {
                return Err(bad("running statistics"));
            }
        }
        for (p, v) in self.params.iter_mut().zip(&snap.params) {
            p.value = Tensor::new(p.value.shape().to_vec(), v.clone())?;
        }
        self.stats = snap.stats.clone();
        Ok(())
    }
}

/// Plain numeric state of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub params: Vec<Vec<f64>>,
    pub stats: Vec<RunningStats>,
}
