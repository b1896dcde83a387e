use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LossMode, SearchConfig, SgdConfig};
use super::optim::{adam_step, AdamState};
use super::train::{as_divergence, evaluate, minibatches, sequential_batches, train_architecture, WeightOptimizer};
use super::{latency_loss, quant_loss, temperature};
use crate::autodiff::{Tape, Var};
use crate::cost::{expected_cost, CostCoefficients, LatencyTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{Rng, RngState, RNG_ALGORITHM};
use crate::supernet::{ArchitectureSample, BnMode, ForwardOptions, StoreSnapshot, SuperNet};

/// Version of the checkpoint container.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One row per epoch. `ce` and `loss` are means over the θ split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub tau: f64,
    pub ce: f64,
    pub expected_cost: f64,
    pub loss: f64,
}

/// CSV with header `epoch,tau,ce,expected_cost,loss`; floats use the
/// shortest representation that reads back exactly.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("epoch,tau,ce,expected_cost,loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.tau, r.ce, r.expected_cost, r.loss));
    }
    s
}

/// The two disjoint search splits: weights train on `w`, θ on `theta`.
#[derive(Debug, Clone, Copy)]
pub struct SearchSplits<'a> {
    pub w: &'a Dataset,
    pub theta: &'a Dataset,
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub rng_algorithm: String,
    pub rng: RngState,
    pub store: StoreSnapshot,
    pub theta: Vec<Vec<f64>>,
    pub weight_optimizer: WeightOptimizer,
    pub theta_optimizer: AdamState,
    pub loss_beta: f64,
    pub trace: Vec<TraceRow>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}, expected {CHECKPOINT_VERSION}",
                c.version
            )));
        }
        Ok(c)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A running search: alternates weight epochs and θ epochs.
#[derive(Debug, Clone)]
pub struct Search<'a> {
    cfg: SearchConfig,
    hash: String,
    net: SuperNet,
    costs: CostCoefficients,
    loss_beta: f64,
    splits: SearchSplits<'a>,
    rng: Rng,
    wopt: WeightOptimizer,
    adam: AdamState,
    epoch: usize,
    trace: Vec<TraceRow>,
}

/// Cost coefficients the loss mode asks for.
pub fn cost_coefficients(net: &SuperNet, mode: &LossMode, lut: Option<&LatencyTable>) -> Result<CostCoefficients> {
    match mode {
        LossMode::Latency { .. } => {
            let table = lut.ok_or_else(|| Error::InvalidConfig(vec!["latency loss needs a latency table".into()]))?;
            net.latency_coefficients(table)
        }
        LossMode::QuantSize { .. } => Ok(net.size_coefficients()),
        LossMode::QuantFlop { .. } => Ok(net.flop_coefficients()),
    }
}

fn check_split(net: &SuperNet, d: &Dataset, what: &str) -> Result<()> {
    if d.sample_shape() != net.input_shape() || d.classes() != net.classes() {
        return Err(Error::Dataset(format!(
            "{what} split has samples {:?} and {} classes; the net expects {:?} and {}",
            d.sample_shape(),
            d.classes(),
            net.input_shape(),
            net.classes()
        )));
    }
    Ok(())
}

impl<'a> Search<'a> {
    pub fn new(net: SuperNet, splits: SearchSplits<'a>, cfg: SearchConfig, lut: Option<&LatencyTable>) -> Result<Self> {
        cfg.validate()?;
        check_split(&net, splits.w, "weight")?;
        check_split(&net, splits.theta, "theta")?;
        let costs = cost_coefficients(&net, &cfg.loss, lut)?;
        let loss_beta = match cfg.loss {
            LossMode::Latency { beta, .. } => beta,
            LossMode::QuantSize { gamma, beta } | LossMode::QuantFlop { gamma, beta } => match beta {
                Some(b) => b,
                None => {
                    let c0 = costs.expected(&net.theta_probs());
                    if c0 <= 1.0 {
                        return Err(Error::Domain(format!("initial cost {c0} must exceed 1 to calibrate beta")));
                    }
                    c0.ln().powf(-gamma)
                }
            },
        };
        let sizes = net.candidate_counts();
        Ok(Self {
            hash: cfg.hash(),
            wopt: WeightOptimizer::new(&net, cfg.w_optimizer),
            adam: AdamState::new(&sizes),
            rng: Rng::new(cfg.seed),
            cfg,
            net,
            costs,
            loss_beta,
            splits,
            epoch: 0,
            trace: Vec::new(),
        })
    }

    /// Rebuilds a search from `ckpt`. `net` must be built the same way as
    /// the one that was checkpointed and `cfg` must hash identically.
    pub fn resume(
        net: SuperNet,
        splits: SearchSplits<'a>,
        cfg: SearchConfig,
        lut: Option<&LatencyTable>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut s = Search::new(net, splits, cfg, lut)?;
        if ckpt.config_hash != s.hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match {}",
                ckpt.config_hash, s.hash
            )));
        }
        if ckpt.rng_algorithm != RNG_ALGORITHM {
            return Err(Error::Checkpoint(format!("checkpoint rng `{}` is not {RNG_ALGORITHM}", ckpt.rng_algorithm)));
        }
        if ckpt.epoch > s.cfg.epochs || ckpt.trace.len() != ckpt.epoch {
            return Err(Error::Checkpoint(format!(
                "checkpoint at epoch {} with {} trace rows",
                ckpt.epoch,
                ckpt.trace.len()
            )));
        }
        if ckpt.weight_optimizer.velocity.len() != s.wopt.velocity.len()
            || ckpt.theta_optimizer.moments.len() != s.adam.moments.len()
        {
            return Err(Error::Checkpoint("optimizer state does not match the network".into()));
        }
        s.net.store_mut().restore(&ckpt.store)?;
        s.net.set_theta(&ckpt.theta)?;
        s.rng = Rng::from_state(&ckpt.rng)?;
        s.wopt = ckpt.weight_optimizer.clone();
        s.adam = ckpt.theta_optimizer.clone();
        s.loss_beta = ckpt.loss_beta;
        s.epoch = ckpt.epoch;
        s.trace = ckpt.trace.clone();
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config_hash: self.hash.clone(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            rng: self.rng.state(),
            store: self.net.store().snapshot(),
            theta: self.net.theta(),
            weight_optimizer: self.wopt.clone(),
            theta_optimizer: self.adam.clone(),
            loss_beta: self.loss_beta,
            trace: self.trace.clone(),
        }
    }

    pub fn net(&self) -> &SuperNet {
        &self.net
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn costs(&self) -> &CostCoefficients {
        &self.costs
    }

    /// The multiplier in front of the cost factor: `β` of the loss.
    pub fn loss_beta(&self) -> f64 {
        self.loss_beta
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// Expected cost under `softmax(θ)`.
    pub fn expected_cost(&self) -> f64 {
        self.costs.expected(&self.net.theta_probs())
    }

    fn assemble(&self, tape: &mut Tape, ce: Var, cost: Var) -> Result<Var> {
        match self.cfg.loss {
            LossMode::Latency { alpha, beta } => latency_loss(tape, ce, cost, alpha, beta),
            LossMode::QuantSize { gamma, .. } | LossMode::QuantFlop { gamma, .. } => {
                quant_loss(tape, ce, cost, self.loss_beta, gamma)
            }
        }
    }

    /// Soft forward of one batch; returns the tape, the forward record and
    /// the `(ce, loss)` vars. Any non-finite value aborts the epoch.
    fn batch_loss(&mut self, batch: &[usize], data: &Dataset, tau: f64, opts: ForwardOptions) -> Result<(Tape, crate::supernet::Forward, Var, Var)> {
        let epoch = self.epoch;
        self.batch_loss_inner(batch, data, tau, opts).map_err(|e| as_divergence(e, epoch))
    }

    fn batch_loss_inner(&mut self, batch: &[usize], data: &Dataset, tau: f64, opts: ForwardOptions) -> Result<(Tape, crate::supernet::Forward, Var, Var)> {
        let (x, y) = data.batch(batch);
        let noise = self.net.draw_gumbel(&mut self.rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fwd = self.net.forward_soft(&mut tape, xv, tau, &noise, opts)?;
        let ce = tape.softmax_cross_entropy(fwd.logits, &y)?;
        let cost = expected_cost(&mut tape, &fwd.masks, &self.costs)?;
        let loss = self.assemble(&mut tape, ce, cost)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Diverged { epoch: self.epoch });
        }
        Ok((tape, fwd, ce, loss))
    }

    fn weight_epoch(&mut self, tau: f64) -> Result<()> {
        let data = self.splits.w;
        for batch in minibatches(data.len(), self.cfg.batch_size, &mut self.rng) {
            let (tape, fwd, _, loss) = self.batch_loss(&batch, data, tau, ForwardOptions::train_weights())?;
            let grads = tape.backward(loss)?;
            self.wopt.step(&mut self.net, &fwd.params, &grads);
            self.net.apply_bn_updates(&fwd.bn_updates);
        }
        Ok(())
    }

    /// Returns mean `(ce, loss)` over the θ split.
    fn theta_epoch(&mut self, tau: f64, train: bool) -> Result<(f64, f64)> {
        let data = self.splits.theta;
        let opts = if train {
            ForwardOptions::train_theta()
        } else {
            ForwardOptions {
                bn: BnMode::Train { update_stats: false },
                grad_weights: false,
                grad_theta: false,
            }
        };
        let batches = if train {
            minibatches(data.len(), self.cfg.batch_size, &mut self.rng)
        } else {
            sequential_batches(data.len(), self.cfg.batch_size)
        };
        let (mut ce_sum, mut loss_sum) = (0.0, 0.0);
        for batch in batches {
            let (tape, fwd, ce, loss) = self.batch_loss(&batch, data, tau, opts)?;
            let n = batch.len() as f64;
            ce_sum += tape.value(ce).item() * n;
            loss_sum += tape.value(loss).item() * n;
            if train {
                let grads = tape.backward(loss)?;
                let mut theta = self.net.theta();
                self.adam.step += 1;
                for (l, (row, &tv)) in theta.iter_mut().zip(&fwd.theta).enumerate() {
                    let g = grads.get_or_zero(tv, row.len());
                    adam_step(row, &g, &mut self.adam.moments[l], self.adam.step, &self.cfg.theta_optimizer);
                }
                self.net.set_theta(&theta)?;
            }
        }
        let n = data.len() as f64;
        Ok((ce_sum / n, loss_sum / n))
    }

    /// One weight epoch, then a θ epoch once warmup is over (during warmup
    /// the θ split is only scored). Appends and returns the trace row.
    pub fn step_epoch(&mut self) -> Result<TraceRow> {
        if self.is_done() {
            return Err(Error::InvalidConfig(vec![format!("search already ran {} epochs", self.epoch)]));
        }
        let epoch = self.epoch;
        let tau = temperature(epoch, self.cfg.t0, self.cfg.eta);
        self.weight_epoch(tau)?;
        let train_theta = epoch >= self.cfg.warmup_epochs();
        let (ce, loss) = self.theta_epoch(tau, train_theta)?;
        let row = TraceRow {
            epoch,
            tau,
            ce,
            expected_cost: self.expected_cost(),
            loss,
        };
        self.trace.push(row);
        self.epoch += 1;
        Ok(row)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step_epoch()?;
        }
        Ok(())
    }

    /// The argmax architecture followed by `samples_to_draw` draws from
    /// `softmax(θ)`.
    pub fn draw_samples(&mut self) -> Vec<ArchitectureSample> {
        let mut out = vec![self.net.argmax_arch(self.cfg.seed)];
        for _ in 0..self.cfg.samples_to_draw {
            out.push(self.net.sample_arch(&mut self.rng));
        }
        out
    }

    pub fn into_net(self) -> SuperNet {
        self.net
    }
}

/// Training recipe used for every finalized architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalizeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl From<&SearchConfig> for FinalizeConfig {
    fn from(c: &SearchConfig) -> Self {
        Self {
            epochs: c.finalize_epochs,
            batch_size: c.batch_size,
            sgd: c.w_optimizer,
        }
    }
}

/// A finalized architecture with its held-out score and costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub arch: ArchitectureSample,
    pub accuracy: f64,
    pub test_ce: f64,
    pub final_train_loss: Option<f64>,
    pub latency_us: Option<f64>,
    pub size_bits: f64,
    pub flop_bits: f64,
}

/// Keeps the first architecture of each distinct block-key sequence.
pub fn dedupe_archs(archs: &[ArchitectureSample]) -> Vec<ArchitectureSample> {
    let mut seen = HashSet::new();
    archs
        .iter()
        .filter(|a| seen.insert(a.keys().into_iter().map(ToString::to_string).collect::<Vec<_>>()))
        .cloned()
        .collect()
}

/// Retrains each distinct architecture from fresh weights on `train` and
/// scores it on `test`. Each architecture gets its own generator forked
/// from `rng` in order, so results do not depend on `threads`.
pub fn finalize(
    net: &SuperNet,
    archs: &[ArchitectureSample],
    train: &Dataset,
    test: &Dataset,
    recipe: FinalizeConfig,
    lut: Option<&LatencyTable>,
    rng: &mut Rng,
    threads: usize,
) -> Result<Vec<ScoredSample>> {
    let archs = dedupe_archs(archs);
    let jobs: Vec<(Vec<usize>, Rng)> = archs
        .iter()
        .map(|a| Ok((net.resolve(a)?, rng.fork())))
        .collect::<Result<_>>()?;
    let size = net.size_coefficients();
    let flop = net.flop_coefficients();
    let score = |idx: &[usize], mut r: Rng| -> Result<(f64, f64, Option<f64>)> {
        let mut fresh = net.reinitialized(&mut r);
        let losses = train_architecture(&mut fresh, idx, train, recipe.epochs, recipe.batch_size, recipe.sgd, &mut r)?;
        let ev = evaluate(&fresh, idx, test, recipe.batch_size)?;
        Ok((ev.accuracy, ev.ce, losses.last().copied()))
    };
    let results = run_jobs(&jobs, threads, |(idx, r)| score(idx, r.clone()));
    archs
        .into_iter()
        .zip(jobs.iter().zip(results))
        .map(|(arch, ((idx, _), res))| {
            let (accuracy, test_ce, final_train_loss) = res?;
            Ok(ScoredSample {
                latency_us: lut.map(|t| net.net_latency(idx, t)).transpose()?,
                size_bits: size.hard(idx)?,
                flop_bits: flop.hard(idx)?,
                arch,
                accuracy,
                test_ce,
                final_train_loss,
            })
        })
        .collect()
}

/// Maps `f` over `jobs` on up to `threads` scoped threads, keeping order.
pub fn run_jobs<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<T>> = std::iter::repeat_with(|| None).take(jobs.len()).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || {
                    jobs.iter()
                        .enumerate()
                        .skip(t)
                        .step_by(threads)
                        .map(|(i, j)| (i, f(j)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every job ran")).collect()
}

/// Output of [`run_dnas`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: SearchConfig,
    pub config_hash: String,
    pub loss_beta: f64,
    pub theta: Vec<Vec<f64>>,
    pub theta_probs: Vec<Vec<f64>>,
    pub trace: Vec<TraceRow>,
    pub samples: Vec<ScoredSample>,
}

impl SearchResult {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }
}

/// Full pipeline: search, draw architectures, retrain each on
/// `w ∪ theta`, score on `test`.
pub fn run_dnas(
    net: SuperNet,
    splits: SearchSplits<'_>,
    test: &Dataset,
    cfg: SearchConfig,
    lut: Option<&LatencyTable>,
    threads: usize,
) -> Result<(SearchResult, SuperNet)> {
    let mut search = Search::new(net, splits, cfg, lut)?;
    search.run()?;
    finish_search(search, test, lut, threads)
}

/// Sampling and finalization after the last epoch.
pub fn finish_search(
    mut search: Search<'_>,
    test: &Dataset,
    lut: Option<&LatencyTable>,
    threads: usize,
) -> Result<(SearchResult, SuperNet)> {
    let archs = search.draw_samples();
    let train = Dataset::concat(search.splits.w, search.splits.theta)?;
    let recipe = FinalizeConfig::from(&search.cfg);
    let samples = finalize(&search.net, &archs, &train, test, recipe, lut, &mut search.rng, threads)?;
    let result = SearchResult {
        config: search.cfg.clone(),
        config_hash: search.hash.clone(),
        loss_beta: search.loss_beta,
        theta: search.net.theta(),
        theta_probs: search.net.theta_probs(),
        trace: search.trace.clone(),
        samples,
    };
    Ok((result, search.into_net()))
}
