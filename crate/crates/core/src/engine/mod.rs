//! The search loop.
//!
//! Each epoch `e` uses temperature `τ = T0·exp(−η·e)`. It first trains the
//! supernet weights for one pass over the weight split with SGD, θ held
//! fixed; after `warmup` epochs it then trains θ for one pass over the θ
//! split with Adam, weights held fixed. Both passes minimize the same
//! loss: cross-entropy times a cost factor, where the cost is the
//! mask-weighted expectation of the chosen cost model. When the epochs run
//! out, architectures are drawn from `softmax(θ)`, retrained from scratch
//! and scored.

mod config;
mod optim;
mod search;
mod train;

pub use config::{config_hash, AdamConfig, LossMode, SearchConfig, SgdConfig};
pub use optim::{adam_step, sgd_momentum_step, AdamMoments, AdamState};
pub use search::{
    cost_coefficients, dedupe_archs, finalize, finish_search, run_dnas, run_jobs, trace_csv, Checkpoint,
    FinalizeConfig, ScoredSample, Search, SearchResult, SearchSplits, TraceRow, CHECKPOINT_VERSION,
};
pub use train::{
    count_correct, evaluate, minibatches, sequential_batches, train_architecture, Evaluation, WeightOptimizer,
};

use crate::autodiff::{Tape, Var};
use crate::cost::cost_weighting;
use crate::error::{Error, Result};

/// `T0 · exp(−η · epoch)`.
pub fn temperature(epoch: usize, t0: f64, eta: f64) -> f64 {
    t0 * (-eta * epoch as f64).exp()
}

fn check_above_one(what: &str, v: f64) -> Result<()> {
    if v > 1.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be finite and > 1, got {v}")))
    }
}

/// `ce · α · ln(lat)^β`.
pub fn latency_loss_value(ce: f64, lat_us: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_above_one("latency", lat_us)?;
    Ok(ce * alpha * lat_us.ln().powf(beta))
}

/// `ce · β · ln(cost)^γ`.
pub fn quant_loss_value(ce: f64, cost: f64, beta: f64, gamma: f64) -> Result<f64> {
    Ok(ce * cost_weighting(cost, beta, gamma)?)
}

/// Tape form of [`latency_loss_value`], differentiable in both `ce` and
/// `lat`.
pub fn latency_loss(tape: &mut Tape, ce: Var, lat: Var, alpha: f64, beta: f64) -> Result<Var> {
    check_above_one("latency", tape.value(lat).item())?;
    let l = tape.ln(lat)?;
    let p = tape.powf(l, beta)?;
    let f = tape.scale(p, alpha)?;
    tape.mul(ce, f)
}

/// Tape form of [`quant_loss_value`].
pub fn quant_loss(tape: &mut Tape, ce: Var, cost: Var, beta: f64, gamma: f64) -> Result<Var> {
    check_above_one("cost", tape.value(cost).item())?;
    if !(beta > 0.0 && gamma >= 0.0) {
        return Err(Error::Domain(format!("need beta > 0 and gamma >= 0, got {beta}, {gamma}")));
    }
    let l = tape.ln(cost)?;
    let p = tape.powf(l, gamma)?;
    let f = tape.scale(p, beta)?;
    tape.mul(ce, f)
}
