//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value and enough saved state to run its backward rule.
//! [`Var`] is a cheap handle to a node. Leaves are created with
//! [`Tape::param`] (gradient tracked) or [`Tape::constant`] (not tracked);
//! a node tracks gradients iff one of its inputs does.
//!
//! [`Tape::backward`] walks the nodes once, in reverse recording order, and
//! returns a [`Gradients`] table. The tape itself is left untouched, so
//! `backward` may be called again (each call starts from zero), and
//! [`Tape::clear`] drops all nodes for reuse.
//!
//! ```
//! use dnasforge::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

pub mod conv;
mod norm;
pub mod spatial;

use std::rc::Rc;

pub use conv::ConvGeom;
pub use norm::BatchStats;
pub use spatial::Offset;

use crate::error::{Error, Result};
use crate::quant;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Shift {
        x: Var,
        offsets: Rc<Vec<Offset>>,
    },
    Permute {
        x: Var,
        src: Vec<usize>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar {
        x: Var,
        s: Var,
    },
    Scale(Var, f64),
    Mix {
        ys: Vec<Var>,
        m: Var,
    },
    Sum(Var),
    Ln(Var),
    Powf(Var, f64),
    Softmax(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Dorefa {
        w: Var,
        tanh: Vec<f64>,
        max: f64,
        argmax: usize,
    },
    PactClip {
        x: Var,
        alpha: Var,
    },
    PactQuantize {
        y: Var,
    },
    Zero,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// How quantizers round on this tape.
///
/// `Record` and `Replay` exist for gradient checking: a recorded forward
/// stores each quantizer's rounding offset `q(y) - y`, and a replayed
/// forward computes `y + offset` instead, which is exactly the smooth
/// function the straight-through estimator differentiates.
#[derive(Debug, Clone, Default)]
enum Rounding {
    #[default]
    Nearest,
    Record(Vec<Vec<f64>>),
    Replay { offsets: Vec<Vec<f64>>, next: usize },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    rounding: Rounding,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// track gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but yields zeros for untouched vars.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Switches quantizers to record their rounding offsets.
    pub fn record_quant_offsets(&mut self) {
        self.rounding = Rounding::Record(Vec::new());
    }

    /// Offsets captured since [`record_quant_offsets`](Self::record_quant_offsets).
    pub fn take_quant_offsets(&mut self) -> Vec<Vec<f64>> {
        match std::mem::take(&mut self.rounding) {
            Rounding::Record(o) => o,
            _ => Vec::new(),
        }
    }

    /// Makes quantizers add previously recorded offsets instead of rounding.
    pub fn replay_quant_offsets(&mut self, offsets: Vec<Vec<f64>>) {
        self.rounding = Rounding::Replay { offsets, next: 0 };
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Grouped 2-D cross-correlation; `w` is `[N, M/G, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom {
            stride,
            pad,
            groups,
        };
        let y = conv::forward(self.value(x), self.value(w), geom)?;
        self.push(y, Op::Conv2d { x, w, geom }, &[x, w], "conv2d")
    }

    /// Shift with the canonical row-major group assignment.
    pub fn shift(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let c = self.value(x).dims4("shift")?.1;
        let offsets = spatial::shift_offsets(c, kernel)?;
        self.shift_by(x, offsets)
    }

    /// Shift with explicit per-channel offsets.
    pub fn shift_by(&mut self, x: Var, offsets: Vec<Offset>) -> Result<Var> {
        let y = spatial::shift(self.value(x), &offsets)?;
        let offsets = Rc::new(offsets);
        self.push(y, Op::Shift { x, offsets }, &[x], "shift")
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (_, c, _, _) = xv.dims4("channel_shuffle")?;
        let src = spatial::shuffle_permutation(c, groups)?;
        let y = spatial::permute_channels(xv.data(), xv.shape(), &src);
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        self.push(y, Op::Permute { x, src }, &[x], "channel_shuffle")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        self.push(y, Op::Relu(x), &[x], "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let y = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::from_parts(av.shape().to_vec(), y);
        self.push(y, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let y = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::from_parts(av.shape().to_vec(), y);
        self.push(y, Op::Mul(a, b), &[a, b], "mul")
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::InvalidShape {
                op: "mul_scalar",
                detail: format!("scale must have one element, got {:?}", sv.shape()),
            });
        }
        let c = sv.item();
        let xv = self.value(x);
        let y = xv.data().iter().map(|v| v * c).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        self.push(y, Op::MulScalar { x, s }, &[x, s], "mul_scalar")
    }

    /// `x · c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.data().iter().map(|v| v * c).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        self.push(y, Op::Scale(x, c), &[x], "scale")
    }

    /// `Σ_i m[i]·ys[i]` over equal-shaped `ys`, accumulated in index order.
    pub fn mix(&mut self, ys: &[Var], m: Var) -> Result<Var> {
        let mv = self.value(m);
        if mv.numel() != ys.len() || ys.is_empty() {
            return Err(Error::InvalidShape {
                op: "mix",
                detail: format!("{} weights for {} inputs", mv.numel(), ys.len()),
            });
        }
        let first = self.value(ys[0]);
        let mut acc = vec![0.0; first.numel()];
        for (i, &y) in ys.iter().enumerate() {
            let yv = self.value(y);
            same_shape("mix", first, yv)?;
            let c = mv.data()[i];
            if i == 0 {
                acc.iter_mut().zip(yv.data()).for_each(|(a, v)| *a = c * v);
            } else {
                acc.iter_mut().zip(yv.data()).for_each(|(a, v)| *a += c * v);
            }
        }
        let y = Tensor::from_parts(first.shape().to_vec(), acc);
        let mut inputs = ys.to_vec();
        inputs.push(m);
        self.push(y, Op::Mix { ys: ys.to_vec(), m }, &inputs, "mix")
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("ln of a non-positive value".into()));
        }
        let y = xv.data().iter().map(|v| v.ln()).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        self.push(y, Op::Ln(x), &[x], "ln")
    }

    /// Elementwise `x^p`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.data().iter().map(|v| v.powf(p)).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        self.push(y, Op::Powf(x, p), &[x], "powf")
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("tensors have at least one axis");
        let mut y = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(last) {
            y.extend(softmax_row(row));
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        self.push(y, Op::Softmax(x), &[x], "softmax")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push(y, Op::Reshape(x), &[x], "reshape")
    }

    /// `[B, C, H, W] -> [B, C·H·W]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("flatten")?;
        self.reshape(x, vec![b, c * h * w])
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let y = spatial::global_avgpool(self.value(x))?;
        self.push(y, Op::GlobalAvgPool(x), &[x], "global_avgpool")
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = spatial::maxpool2(self.value(x))?;
        self.push(y, Op::MaxPool2 { x, argmax }, &[x], "maxpool2")
    }

    /// Training-mode batch normalization. Statistics are taken over
    /// `(B, H, W)` per channel; the biased batch variance normalizes and the
    /// returned [`BatchStats`] carry what a running average needs.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let out = norm::train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
            batch_stats: true,
        };
        let v = self.push(out.y, op, &[x, gamma, beta], "batchnorm")?;
        Ok((v, out.stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let out = norm::eval_forward(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
            batch_stats: false,
        };
        self.push(out.y, op, &[x, gamma, beta], "batchnorm")
    }

    /// Mean cross-entropy of `logits [B, C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = match *lv.shape() {
            [b, c] => (b, c),
            _ => {
                return Err(Error::InvalidShape {
                    op: "softmax_cross_entropy",
                    detail: format!("expected [B, C] logits, got {:?}", lv.shape()),
                })
            }
        };
        if labels.len() != b {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for a batch of {b}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in lv.data().chunks(c).zip(labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let op = Op::SoftmaxCe {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.push(Tensor::scalar(loss / b as f64), op, &[logits], "softmax_cross_entropy")
    }

    /// DoReFa weight quantization with a straight-through rounding step.
    /// `bits = 32` returns `w` itself.
    pub fn dorefa_weights(&mut self, w: Var, bits: u32) -> Result<Var> {
        quant::check_bits(bits)?;
        if bits == quant::FULL_PRECISION {
            return Ok(w);
        }
        let wv = self.value(w);
        let shape = wv.shape().to_vec();
        let Some(pre) = quant::dorefa_pre(wv.data()) else {
            return self.push(Tensor::zeros(&shape), Op::Zero, &[], "dorefa_weights");
        };
        let q = self.round_scaled(&pre.unit, bits, 1.0)?;
        let y = q.iter().map(|v| 2.0 * v - 1.0).collect();
        let op = Op::Dorefa {
            w,
            tanh: pre.tanh,
            max: pre.max,
            argmax: pre.argmax,
        };
        self.push(Tensor::from_parts(shape, y), op, &[w], "dorefa_weights")
    }

    /// PACT clipping `clamp(x, 0, α)` with learnable one-element `α`.
    pub fn pact_clip(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let a = self.value(alpha);
        if !a.is_scalar() || !(a.item() > 0.0) {
            return Err(Error::Domain(format!("PACT alpha must be a positive scalar, got {:?}", a.data())));
        }
        let a = a.item();
        let xv = self.value(x);
        let y = xv.data().iter().map(|&v| quant::pact_clip(v, a)).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        self.push(y, Op::PactClip { x, alpha }, &[x, alpha], "pact_clip")
    }

    /// `Q_k(y/α)·α` with a straight-through gradient in `y`.
    pub fn pact_quantize(&mut self, y: Var, alpha: Var, bits: u32) -> Result<Var> {
        quant::check_bits(bits)?;
        let a = self.value(alpha);
        if !a.is_scalar() || !(a.item() > 0.0) {
            return Err(Error::Domain(format!("PACT alpha must be a positive scalar, got {:?}", a.data())));
        }
        if bits == quant::FULL_PRECISION {
            return Ok(y);
        }
        let a = a.item();
        let yv = self.value(y);
        let shape = yv.shape().to_vec();
        let unit: Vec<f64> = yv.data().iter().map(|v| v / a).collect();
        let out = self.round_scaled(&unit, bits, a)?;
        self.push(Tensor::from_parts(shape, out), Op::PactQuantize { y }, &[y], "pact_quantize")
    }

    /// `Q_k(u)·scale` for each entry, honouring the tape's rounding mode.
    /// Offsets are kept in the output domain so a replayed quantizer is
    /// `u·scale + offset`, whose derivative is exactly the straight-through
    /// rule (no dependence on `scale` beyond `u·scale`).
    fn round_scaled(&mut self, unit: &[f64], bits: u32, scale: f64) -> Result<Vec<f64>> {
        match &mut self.rounding {
            Rounding::Nearest => unit
                .iter()
                .map(|&u| Ok(quant::quantize_unit(u, bits)? * scale))
                .collect(),
            Rounding::Record(store) => {
                let q: Vec<f64> = unit
                    .iter()
                    .map(|&u| Ok(quant::quantize_unit(u, bits)? * scale))
                    .collect::<Result<_>>()?;
                store.push(q.iter().zip(unit).map(|(q, u)| q - u * scale).collect());
                Ok(q)
            }
            Rounding::Replay { offsets, next } => {
                let off = offsets.get(*next).ok_or_else(|| {
                    Error::Domain("quantizer replay ran past the recorded offsets".into())
                })?;
                if off.len() != unit.len() {
                    return Err(Error::Domain("quantizer replay offset length mismatch".into()));
                }
                *next += 1;
                Ok(unit.iter().zip(off).map(|(u, o)| u * scale + o).collect())
            }
        }
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Zero => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if needs(*a) {
                    // g [m,n] · bᵀ [n,k]
                    let bt = transpose(bv.data(), k, n);
                    accumulate(&mut grads[a.0], matmul_raw(g, &bt, m, n, k));
                }
                if needs(*b) {
                    let at = transpose(av.data(), m, k);
                    accumulate(&mut grads[b.0], matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv::backward(val(*x), val(*w), g, *geom, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::Shift { x, offsets } => {
                if needs(*x) {
                    let inv: Vec<Offset> = offsets.iter().map(|&(a, b)| (-a, -b)).collect();
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                    let dx = spatial::shift(&gt, &inv).expect("shape validated in forward");
                    accumulate(&mut grads[x.0], dx.into_data());
                }
            }
            Op::Permute { x, src } => {
                if needs(*x) {
                    let inv = spatial::inverse_permutation(src);
                    accumulate(&mut grads[x.0], spatial::permute_channels(g, node.value.shape(), &inv));
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let dx = val(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = val(*b).data().iter().zip(g).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if needs(*b) {
                    let d = val(*a).data().iter().zip(g).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::MulScalar { x, s } => {
                if needs(*x) {
                    let c = val(*s).item();
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * c).collect());
                }
                if needs(*s) {
                    let d: f64 = val(*x).data().iter().zip(g).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads[s.0], vec![d]);
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::Mix { ys, m } => {
                let mv = val(*m).data();
                for (i, y) in ys.iter().enumerate() {
                    if needs(*y) {
                        accumulate(&mut grads[y.0], g.iter().map(|v| v * mv[i]).collect());
                    }
                }
                if needs(*m) {
                    let d = ys
                        .iter()
                        .map(|y| val(*y).data().iter().zip(g).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[m.0], d);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], vec![g[0]; val(*x).numel()]);
                }
            }
            Op::Ln(x) => {
                if needs(*x) {
                    let d = val(*x).data().iter().zip(g).map(|(v, gv)| gv / v).collect();
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Powf(x, p) => {
                if needs(*x) {
                    let d = val(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(v, gv)| if *p == 0.0 { 0.0 } else { gv * p * v.powf(p - 1.0) })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    let last = *node.value.shape().last().unwrap();
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(last).zip(g.chunks(last)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
            }
            Op::GlobalAvgPool(x) => {
                if needs(*x) {
                    let (_, _, h, w) = val(*x).dims4("global_avgpool").unwrap();
                    let plane = h * w;
                    let mut d = Vec::with_capacity(val(*x).numel());
                    for gv in g {
                        d.extend(std::iter::repeat(gv / plane as f64).take(plane));
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if needs(*x) {
                    let mut d = vec![0.0; val(*x).numel()];
                    for (&i, gv) in argmax.iter().zip(g) {
                        d[i] += gv;
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = val(*x).shape();
                let back = norm::backward(shape, val(*gamma).data(), xhat, inv_std, g, *batch_stats, needs(*x));
                if let Some(dx) = back.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*gamma) {
                    accumulate(&mut grads[gamma.0], back.dgamma);
                }
                if needs(*beta) {
                    accumulate(&mut grads[beta.0], back.dbeta);
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                if needs(*logits) {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &l) in labels.iter().enumerate() {
                        d[row * c + l] -= scale;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
            }
            Op::Dorefa { w, tanh, max, argmax } => {
                if needs(*w) {
                    // out = 2·u + const (straight-through), u = t/(2M) + 0.5
                    let du: Vec<f64> = g.iter().map(|gv| 2.0 * gv).collect();
                    let mut dt: Vec<f64> = du.iter().map(|d| d / (2.0 * max)).collect();
                    let dmax: f64 = -du.iter().zip(tanh).map(|(d, t)| d * t).sum::<f64>() / (2.0 * max * max);
                    dt[*argmax] += dmax * tanh[*argmax].signum();
                    let dw = dt.iter().zip(tanh).map(|(d, t)| d * (1.0 - t * t)).collect();
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::PactClip { x, alpha } => {
                let a = val(*alpha).item();
                let xs = val(*x).data();
                if needs(*x) {
                    let d = xs
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 && v < a { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                if needs(*alpha) {
                    let d: f64 = xs.iter().zip(g).filter(|(&v, _)| v >= a).map(|(_, gv)| gv).sum();
                    accumulate(&mut grads[alpha.0], vec![d]);
                }
            }
            Op::PactQuantize { y } => {
                if needs(*y) {
                    accumulate(&mut grads[y.0], g.to_vec());
                }
            }
        }
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}
