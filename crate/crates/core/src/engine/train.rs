//! Fixed-architecture training and evaluation, shared by the search loop,
//! finalization and the command line.

use serde::{Deserialize, Serialize};

use super::config::SgdConfig;
use super::optim::sgd_momentum_step;
use crate::autodiff::{Gradients, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::quant::PACT_ALPHA_MIN;
use crate::rng::Rng;
use crate::supernet::{argmax, ForwardOptions, ParamId, ParamRole, SuperNet};

/// Shuffled index chunks covering `0..n`; the last chunk may be short.
pub fn minibatches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// In-order index chunks covering `0..n`.
pub fn sequential_batches(n: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Non-finite intermediate values during training mean the run diverged.
pub(crate) fn as_divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        e => e,
    }
}

/// Momentum buffers for every store parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOptimizer {
    pub cfg: SgdConfig,
    pub velocity: Vec<Vec<f64>>,
}

impl WeightOptimizer {
    pub fn new(net: &SuperNet, cfg: SgdConfig) -> Self {
        let store = net.store();
        Self {
            cfg,
            velocity: store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect(),
        }
    }

    /// One SGD step on every bound parameter; PACT levels are then kept at
    /// or above [`PACT_ALPHA_MIN`].
    pub fn step(&mut self, net: &mut SuperNet, bound: &[(ParamId, Var)], grads: &Gradients) {
        let store = net.store_mut();
        for &(id, var) in bound {
            let n = store.value(id).numel();
            let g = grads.get_or_zero(var, n);
            sgd_momentum_step(store.value_mut(id).data_mut(), &g, &mut self.velocity[id.index()], &self.cfg);
            if store.role(id) == ParamRole::PactAlpha {
                for a in store.value_mut(id).data_mut() {
                    *a = a.max(PACT_ALPHA_MIN);
                }
            }
        }
    }
}

/// Accuracy and mean cross-entropy of one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub ce: f64,
}

/// Number of rows of `logits` whose argmax equals the label.
pub fn count_correct(logits: &[f64], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len().max(1);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&logits[i * k..(i + 1) * k]) == y)
        .count()
}

/// Trains the selected candidates of `net` with plain cross-entropy.
/// Returns the mean training loss of each epoch.
pub fn train_architecture(
    net: &mut SuperNet,
    indices: &[usize],
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    sgd: SgdConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    net.check_indices(indices)?;
    let mut opt = WeightOptimizer::new(net, sgd);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for batch in minibatches(data.len(), batch_size, rng) {
            let (x, y) = data.batch(&batch);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = net
                .forward_hard(&mut tape, xv, indices, ForwardOptions::train_weights())
                .map_err(|e| as_divergence(e, epoch))?;
            let ce = tape.softmax_cross_entropy(fwd.logits, &y).map_err(|e| as_divergence(e, epoch))?;
            let l = tape.value(ce).item();
            if !l.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += l * batch.len() as f64;
            let grads = tape.backward(ce)?;
            opt.step(net, &fwd.params, &grads);
            net.apply_bn_updates(&fwd.bn_updates);
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Inference with running batch-norm statistics.
pub fn evaluate(net: &SuperNet, indices: &[usize], data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let mut correct = 0;
    let mut ce_sum = 0.0;
    for batch in sequential_batches(data.len(), batch_size) {
        let (x, y) = data.batch(&batch);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = net.forward_hard(&mut tape, xv, indices, ForwardOptions::eval())?;
        correct += count_correct(tape.value(fwd.logits).data(), &y);
        let ce = tape.softmax_cross_entropy(fwd.logits, &y)?;
        ce_sum += tape.value(ce).item() * batch.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        ce: ce_sum / data.len() as f64,
    })
}
