//! The stochastic supernet.
//!
//! A [`SuperNet`] is a chain of layers. A [`Layer::Fixed`] layer always runs
//! its one block; a [`Layer::Searchable`] layer holds candidate blocks
//! `b_{l,i}` and logits `θ_l`. A soft forward runs every candidate and mixes
//! the outputs with a Gumbel-Softmax mask,
//! `x_{l+1} = Σ_i m_{l,i}·b_{l,i}(x_l)`, summed in candidate order; a hard
//! forward runs only the selected candidates. The classifier head is the
//! trailing run of fixed layers.
//!
//! Each candidate owns private weights and normalization statistics in the
//! shared [`ParamStore`].

mod block;
mod mask;
mod params;

pub use block::{BnMode, CandidateBlock, Residual, Shape3, Stage, StageBuilder, BN_EPS};
pub use mask::{
    argmax, gumbel_argmax, gumbel_soft_mask, gumbel_softmax, theta_probs, theta_snapshot_id, ArchitectureSample,
    Choice,
};
pub use params::{Init, ParamId, ParamRole, ParamStore, RunningStats, StatsId, StoreSnapshot, BN_MOMENTUM};

use block::Binder;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::cost::{BlockKey, CostCoefficients, CostReport, LatencyTable, LayerMetrics};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Fixed {
        name: String,
        block: CandidateBlock,
    },
    Searchable {
        name: String,
        candidates: Vec<CandidateBlock>,
        theta: Vec<f64>,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Fixed { name, .. } | Layer::Searchable { name, .. } => name,
        }
    }

    pub fn input(&self) -> Shape3 {
        match self {
            Layer::Fixed { block, .. } => block.input,
            Layer::Searchable { candidates, .. } => candidates[0].input,
        }
    }

    pub fn output(&self) -> Shape3 {
        match self {
            Layer::Fixed { block, .. } => block.output,
            Layer::Searchable { candidates, .. } => candidates[0].output,
        }
    }
}

/// What a forward pass differentiates and how it normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub bn: BnMode,
    pub grad_weights: bool,
    pub grad_theta: bool,
}

impl ForwardOptions {
    /// Weight step: gradients for weights, running statistics updated.
    pub fn train_weights() -> Self {
        Self {
            bn: BnMode::Train { update_stats: true },
            grad_weights: true,
            grad_theta: false,
        }
    }

    /// Logit step: gradients for θ only, batch statistics without updates.
    pub fn train_theta() -> Self {
        Self {
            bn: BnMode::Train { update_stats: false },
            grad_weights: false,
            grad_theta: true,
        }
    }

    /// Both gradient sets, batch statistics without updates.
    pub fn train_all() -> Self {
        Self {
            bn: BnMode::Train { update_stats: false },
            grad_weights: true,
            grad_theta: true,
        }
    }

    /// Inference with running statistics.
    pub fn eval() -> Self {
        Self {
            bn: BnMode::Eval,
            grad_weights: false,
            grad_theta: false,
        }
    }
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// One mask per searchable layer (empty for hard passes).
    pub masks: Vec<Var>,
    /// θ leaves, one per searchable layer (empty for hard passes).
    pub theta: Vec<Var>,
    /// Store parameters bound as tape leaves.
    pub params: Vec<(ParamId, Var)>,
    pub bn_updates: Vec<(StatsId, BatchStats)>,
}

#[derive(Debug, Clone)]
pub struct SuperNet {
    input: Shape3,
    layers: Vec<Layer>,
    store: ParamStore,
}

impl SuperNet {
    /// Validates the chain: every searchable layer has at least two
    /// candidates with matching shapes and a logit per candidate, layers
    /// connect, and the last layer emits class scores `(classes, 1, 1)`.
    pub fn new(input: Shape3, layers: Vec<Layer>, store: ParamStore) -> Result<Self> {
        let mut shape = input;
        for layer in &layers {
            let name = layer.name();
            let blocks: Vec<&CandidateBlock> = match layer {
                Layer::Fixed { block, .. } => vec![block],
                Layer::Searchable { candidates, theta, .. } => {
                    if candidates.len() < 2 {
                        return Err(Error::InvalidSpace(format!("{name}: searchable layers need at least 2 candidates")));
                    }
                    if theta.len() != candidates.len() {
                        return Err(Error::InvalidSpace(format!(
                            "{name}: {} logits for {} candidates",
                            theta.len(),
                            candidates.len()
                        )));
                    }
                    candidates.iter().collect()
                }
            };
            for b in &blocks {
                if b.input != shape || b.output != blocks[0].output {
                    return Err(Error::InvalidSpace(format!(
                        "{name}: candidate {} maps {:?} -> {:?}, layer expects {:?} -> {:?}",
                        b.key, b.input, b.output, shape, blocks[0].output
                    )));
                }
            }
            shape = blocks[0].output;
        }
        if layers.is_empty() || shape.1 != 1 || shape.2 != 1 {
            return Err(Error::InvalidSpace(format!("network must end in class scores, ends in {shape:?}")));
        }
        Ok(Self { input, layers, store })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("validated non-empty").output().0
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn searchable(&self) -> impl Iterator<Item = (&str, &[CandidateBlock], &[f64])> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Searchable { name, candidates, theta } => Some((name.as_str(), candidates.as_slice(), theta.as_slice())),
            Layer::Fixed { .. } => None,
        })
    }

    pub fn searchable_count(&self) -> usize {
        self.searchable().count()
    }

    pub fn candidate_counts(&self) -> Vec<usize> {
        self.searchable().map(|(_, c, _)| c.len()).collect()
    }

    /// Number of distinct architectures, as a float since it overflows
    /// integers for realistic spaces.
    pub fn search_space_size(&self) -> f64 {
        self.candidate_counts().iter().map(|&k| k as f64).product()
    }

    pub fn theta(&self) -> Vec<Vec<f64>> {
        self.searchable().map(|(_, _, t)| t.to_vec()).collect()
    }

    pub fn set_theta(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.searchable_count() {
            return Err(Error::InvalidArchitecture(format!(
                "{} logit vectors for {} searchable layers",
                values.len(),
                self.searchable_count()
            )));
        }
        let mut it = values.iter();
        for layer in &mut self.layers {
            if let Layer::Searchable { name, theta, .. } = layer {
                let v = it.next().expect("length checked");
                if v.len() != theta.len() || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidArchitecture(format!("{name}: bad logit vector {v:?}")));
                }
                theta.copy_from_slice(v);
            }
        }
        Ok(())
    }

    pub fn theta_probs(&self) -> Vec<Vec<f64>> {
        self.searchable().map(|(_, _, t)| theta_probs(t)).collect()
    }

    /// Fresh Gumbel noise for every candidate of every searchable layer.
    pub fn draw_gumbel(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        self.searchable()
            .map(|(_, c, _)| (0..c.len()).map(|_| rng.gumbel()).collect())
            .collect()
    }

    /// Plain soft masks for given noise.
    pub fn soft_masks(&self, tau: f64, noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_rows(noise, "noise")?;
        self.searchable().zip(noise).map(|((_, _, t), g)| gumbel_softmax(t, g, tau)).collect()
    }

    fn check_rows(&self, rows: &[Vec<f64>], what: &str) -> Result<()> {
        let counts = self.candidate_counts();
        if rows.len() != counts.len() || rows.iter().zip(&counts).any(|(r, &k)| r.len() != k) {
            return Err(Error::InvalidShape {
                op: "supernet",
                detail: format!("{what} rows do not match candidate counts {counts:?}"),
            });
        }
        Ok(())
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        let (c, h, w) = self.input;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::InvalidShape {
                op: "supernet",
                detail: format!("input {shape:?} does not match [B, {c}, {h}, {w}]"),
            });
        }
        Ok(())
    }

    /// Runs every layer; `mask_for(l)` yields the mask leaf of the l-th
    /// searchable layer.
    fn run_mixed(&self, b: &mut Binder, x: Var, masks: &[Var]) -> Result<Var> {
        let mut x = x;
        let mut l = 0;
        for layer in &self.layers {
            x = match layer {
                Layer::Fixed { block, .. } => b.block(block, x)?,
                Layer::Searchable { candidates, .. } => {
                    let ys = candidates.iter().map(|c| b.block(c, x)).collect::<Result<Vec<_>>>()?;
                    let m = masks[l];
                    l += 1;
                    b.tape.mix(&ys, m)?
                }
            };
        }
        Ok(x)
    }

    /// Gumbel-Softmax forward: `m_l = softmax((θ_l + g_l) / τ)` with `g`
    /// treated as a constant, every candidate executed.
    pub fn forward_soft(&self, tape: &mut Tape, x: Var, tau: f64, noise: &[Vec<f64>], opts: ForwardOptions) -> Result<Forward> {
        mask::check_tau(tau)?;
        self.check_rows(noise, "noise")?;
        self.check_input(tape, x)?;
        let mut theta = Vec::new();
        let mut masks = Vec::new();
        for ((_, _, t), g) in self.searchable().zip(noise) {
            let tv = Tensor::from_vec(t.to_vec());
            let th = if opts.grad_theta { tape.param(tv) } else { tape.constant(tv) };
            let gv = tape.constant(Tensor::new(vec![g.len()], g.clone())?);
            let z = tape.add(th, gv)?;
            let z = tape.scale(z, 1.0 / tau)?;
            masks.push(tape.softmax(z)?);
            theta.push(th);
        }
        let mut b = Binder::new(tape, &self.store, opts.grad_weights, opts.bn);
        let logits = self.run_mixed(&mut b, x, &masks)?;
        Ok(Forward {
            logits,
            masks,
            theta,
            params: b.bound_params(),
            bn_updates: b.updates,
        })
    }

    /// Soft forward with caller-supplied masks held constant.
    pub fn forward_masks(&self, tape: &mut Tape, x: Var, masks: &[Vec<f64>], opts: ForwardOptions) -> Result<Forward> {
        self.check_rows(masks, "mask")?;
        self.check_input(tape, x)?;
        let mvars = masks
            .iter()
            .map(|m| Ok(tape.constant(Tensor::new(vec![m.len()], m.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let mut b = Binder::new(tape, &self.store, opts.grad_weights, opts.bn);
        let logits = self.run_mixed(&mut b, x, &mvars)?;
        Ok(Forward {
            logits,
            masks: mvars,
            theta: vec![],
            params: b.bound_params(),
            bn_updates: b.updates,
        })
    }

    /// Runs only the selected candidate of each searchable layer.
    pub fn forward_hard(&self, tape: &mut Tape, x: Var, indices: &[usize], opts: ForwardOptions) -> Result<Forward> {
        self.check_indices(indices)?;
        self.check_input(tape, x)?;
        let blocks = self.selected_blocks(indices)?;
        let mut b = Binder::new(tape, &self.store, opts.grad_weights, opts.bn);
        let mut x = x;
        for block in blocks {
            x = b.block(block, x)?;
        }
        Ok(Forward {
            logits: x,
            masks: vec![],
            theta: vec![],
            params: b.bound_params(),
            bn_updates: b.updates,
        })
    }

    pub fn check_indices(&self, indices: &[usize]) -> Result<()> {
        let counts = self.candidate_counts();
        if indices.len() != counts.len() {
            return Err(Error::InvalidArchitecture(format!(
                "{} selections for {} searchable layers",
                indices.len(),
                counts.len()
            )));
        }
        for (l, (&i, &k)) in indices.iter().zip(&counts).enumerate() {
            if i >= k {
                return Err(Error::InvalidArchitecture(format!("layer {l}: index {i} out of {k} candidates")));
            }
        }
        Ok(())
    }

    /// Indices of `arch`, after checking its keys belong to this network.
    pub fn resolve(&self, arch: &ArchitectureSample) -> Result<Vec<usize>> {
        let indices = arch.indices();
        self.check_indices(&indices)?;
        for ((name, cands, _), c) in self.searchable().zip(&arch.layers) {
            if cands[c.index].key != c.key {
                return Err(Error::InvalidArchitecture(format!(
                    "{name}: candidate {} is {}, sample says {}",
                    c.index, cands[c.index].key, c.key
                )));
            }
        }
        Ok(indices)
    }

    /// Every block an architecture executes, fixed layers included.
    pub fn selected_blocks(&self, indices: &[usize]) -> Result<Vec<&CandidateBlock>> {
        self.check_indices(indices)?;
        let mut it = indices.iter();
        Ok(self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Fixed { block, .. } => block,
                Layer::Searchable { candidates, .. } => &candidates[*it.next().expect("length checked")],
            })
            .collect())
    }

    pub fn arch_from_indices(&self, indices: &[usize], seed: u64) -> Result<ArchitectureSample> {
        self.check_indices(indices)?;
        let layers = self
            .searchable()
            .zip(indices)
            .map(|((_, c, _), &i)| Choice {
                index: i,
                key: c[i].key.clone(),
            })
            .collect();
        Ok(ArchitectureSample {
            layers,
            theta_snapshot: theta_snapshot_id(&self.theta()),
            seed,
        })
    }

    /// Draws each layer from `softmax(θ_l)` by Gumbel-argmax.
    pub fn sample_arch(&self, rng: &mut Rng) -> ArchitectureSample {
        let seed = rng.seed();
        let idx: Vec<usize> = self.searchable().map(|(_, _, t)| gumbel_argmax(t, rng)).collect();
        self.arch_from_indices(&idx, seed).expect("sampled indices are in range")
    }

    /// Largest logit per layer, ties to the lowest index.
    pub fn argmax_arch(&self, seed: u64) -> ArchitectureSample {
        let idx: Vec<usize> = self.searchable().map(|(_, _, t)| argmax(t)).collect();
        self.arch_from_indices(&idx, seed).expect("argmax indices are in range")
    }

    /// Fixed blocks and all candidates, in layer order.
    pub fn all_blocks(&self) -> impl Iterator<Item = &CandidateBlock> {
        self.layers.iter().flat_map(|l| match l {
            Layer::Fixed { block, .. } => std::slice::from_ref(block).iter(),
            Layer::Searchable { candidates, .. } => candidates.iter(),
        })
    }

    pub fn block_metrics(&self) -> Vec<(BlockKey, LayerMetrics)> {
        self.all_blocks().map(|b| (b.key.clone(), b.metrics())).collect()
    }

    /// Per-candidate table latencies; fixed layers keep their position.
    pub fn latency_coefficients(&self, table: &LatencyTable) -> Result<CostCoefficients> {
        let mut fixed = Vec::new();
        let mut per_layer = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Fixed { block, .. } => fixed.push((per_layer.len(), table.lookup(&block.key)?)),
                Layer::Searchable { candidates, .. } => {
                    per_layer.push(candidates.iter().map(|c| table.lookup(&c.key)).collect::<Result<Vec<_>>>()?)
                }
            }
        }
        Ok(CostCoefficients { per_layer, fixed })
    }

    /// `params · weight_bits` per candidate. Fixed layers are excluded.
    pub fn size_coefficients(&self) -> CostCoefficients {
        CostCoefficients::new(self.searchable().map(|(_, c, _)| c.iter().map(|b| b.size_bits()).collect()).collect())
    }

    /// `MACs · weight_bits · act_bits` per candidate. Fixed layers are
    /// excluded.
    pub fn flop_coefficients(&self) -> CostCoefficients {
        CostCoefficients::new(self.searchable().map(|(_, c, _)| c.iter().map(|b| b.flop_bits()).collect()).collect())
    }

    /// Table latency of an architecture, fixed layers included.
    pub fn net_latency(&self, indices: &[usize], table: &LatencyTable) -> Result<f64> {
        let blocks = self.selected_blocks(indices)?;
        crate::cost::net_latency(blocks.iter().map(|b| &b.key), table)
    }

    /// One row per executed layer.
    pub fn cost_report(&self, indices: &[usize], table: Option<&LatencyTable>) -> Result<CostReport> {
        let blocks = self.selected_blocks(indices)?;
        let rows = self
            .layers
            .iter()
            .zip(blocks)
            .map(|(l, b)| {
                let lat = table.map(|t| t.lookup(&b.key)).transpose()?;
                Ok((l.name().to_string(), Some(b.key.to_string()), b.metrics(), lat))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CostReport::from_metrics(rows))
    }

    pub fn apply_bn_updates(&mut self, updates: &[(StatsId, BatchStats)]) {
        for (id, stats) in updates {
            self.store.update_stats(*id, stats);
        }
    }

    /// A copy with every weight redrawn and running statistics reset.
    pub fn reinitialized(&self, rng: &mut Rng) -> SuperNet {
        let mut net = self.clone();
        net.store.reinit(rng);
        net
    }
}

#[cfg(test)]
mod tests;
