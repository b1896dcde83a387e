//! Fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use dnasforge::cost::{synth_lut, LatencyModel, LatencyTable};
use dnasforge::data::{split_dataset, synth_blobs, Dataset};
use dnasforge::spaces::{fbnet_space, MacroSpec, MicroBlockSpec};
use dnasforge::supernet::SuperNet;
use dnasforge::{Rng, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so every
/// output entry influences the loss differently.
pub fn probe(tape: &mut Tape, y: Var) -> Var {
    let n = tape.value(y).numel();
    let shape = tape.value(y).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0 + 0.05).collect();
    let wv = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p).unwrap()
}

/// Worst `|analytic - numeric| / max(1, |analytic|)` over every entry of
/// every input, using central differences.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check(inputs, f, false)
}

/// [`grad_check`] for graphs with quantizers. The rounding offsets of the
/// analytic pass are replayed in every perturbed pass, which turns each
/// quantizer into its straight-through surrogate `x + const`; the numeric
/// derivative of that surrogate is what the analytic gradient must match.
pub fn grad_check_replay<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check(inputs, f, true)
}

fn check<F>(inputs: &[Tensor], f: F, replay: bool) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    if replay {
        tape.record_quant_offsets();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let offsets = tape.take_quant_offsets();
    let grads = tape.backward(loss).unwrap();
    let eval = |probe: &[Tensor]| {
        let mut t = Tape::new();
        if replay {
            t.replay_quant_offsets(offsets.clone());
        }
        let vs: Vec<Var> = probe.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[k], input.numel());
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
        }
    }
    worst
}

/// Direct seven-loop convolution with zero padding and groups.
pub fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (n, cg, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let ng = n / groups;
    let mut out = vec![0.0; b * n * oh * ow];
    for bi in 0..b {
        for o in 0..n {
            let g = o / ng;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cg {
                        let cin = g * cg + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + cin) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cg + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * n + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, n, oh, ow], out).unwrap()
}

/// Upper tail of the chi-square distribution with two degrees of freedom.
pub fn chi2_sf_2dof(x: f64) -> f64 {
    (-x / 2.0).exp()
}

/// Standard layer-wise toy: 8×8 grey input, a strided 3×3 stem at width 4,
/// three searchable layers of {k3_e1, k3_e3, skip}, 1×1 head conv, pool,
/// classifier.
pub fn toy3x3_net(classes: usize, seed: u64) -> SuperNet {
    let micro = [MicroBlockSpec::mbconv(1, 3, 1), MicroBlockSpec::mbconv(3, 3, 1), MicroBlockSpec::Skip];
    fbnet_space(&MacroSpec::toy((1, 8, 8), 4, 3, classes), &micro, 1.0, &mut Rng::new(seed)).unwrap()
}

/// Synthetic table for every block of `net`, with every candidate whose
/// block type is `slow_type` made 100× slower.
pub fn slow_lut(net: &SuperNet, slow_type: &str) -> LatencyTable {
    let base = synth_lut(net.block_metrics(), LatencyModel::AnalyticMacs, "desk").unwrap();
    let entries: Vec<_> = base
        .entries()
        .map(|(k, v)| (k.clone(), if k.block_type == slow_type { 100.0 * v } else { v }))
        .collect();
    LatencyTable::new("desk-slow", Some(format!("{slow_type} x100")), entries).unwrap()
}

/// Every index vector of a space with the given candidate counts, in
/// lexicographic order.
pub fn all_architectures(counts: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &k in counts {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    out
}

pub struct Splits {
    pub w: Dataset,
    pub theta: Dataset,
    pub test: Dataset,
}

/// Blobs split 80:20 into weight and θ sets, plus an independent test set.
pub fn blob_splits(n: usize, n_test: usize, classes: usize, size: usize, noise: f64, seed: u64) -> Splits {
    let d = synth_blobs(n, classes, size, noise, seed).unwrap();
    let (w, theta) = split_dataset(&d, 0.8, seed ^ 0x5eed).unwrap();
    let test = synth_blobs(n_test, classes, size, noise, seed.wrapping_add(1_000_003)).unwrap();
    Splits { w, theta, test }
}

/// Median of a non-empty slice.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
