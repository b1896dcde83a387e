//! Fake quantization for mixed-precision search.
//!
//! Values stay `f64`; quantizers snap them onto k-bit grids and pass
//! gradients straight through the rounding step. A bit-width of 32 means
//! "leave unquantized".
//!
//! The differentiable tape versions live on [`Tape`](crate::Tape):
//! [`Tape::dorefa_weights`](crate::Tape::dorefa_weights),
//! [`Tape::pact_clip`](crate::Tape::pact_clip) and
//! [`Tape::pact_quantize`](crate::Tape::pact_quantize).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit-width meaning "no quantization".
pub const FULL_PRECISION: u32 = 32;

/// Lower bound `α` is projected onto after every optimizer step.
pub const PACT_ALPHA_MIN: f64 = 1e-3;

/// Initial value of the learnable PACT clipping level.
pub const PACT_ALPHA_INIT: f64 = 10.0;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl QuantConfig {
    pub const FULL: QuantConfig = QuantConfig {
        weight_bits: FULL_PRECISION,
        act_bits: FULL_PRECISION,
    };

    pub fn new(weight_bits: u32, act_bits: u32) -> Result<Self> {
        check_bits(weight_bits)?;
        check_bits(act_bits)?;
        Ok(Self {
            weight_bits,
            act_bits,
        })
    }

    pub fn weight_only(weight_bits: u32) -> Result<Self> {
        Self::new(weight_bits, FULL_PRECISION)
    }
}

pub fn check_bits(k: u32) -> Result<()> {
    if (1..=8).contains(&k) || k == FULL_PRECISION {
        Ok(())
    } else {
        Err(Error::Domain(format!("bit-width must be 1..=8 or 32, got {k}")))
    }
}

/// Number of grid intervals, `2^k - 1`.
#[inline]
pub fn levels(k: u32) -> f64 {
    ((1u32 << k) - 1) as f64
}

/// `Q_k`: snaps `x ∈ [0, 1]` to the nearest point of `{i / (2^k - 1)}`.
/// Ties round half away from zero on `i = x·(2^k - 1)`.
pub fn quantize_unit(x: f64, k: u32) -> Result<f64> {
    if !(1..=8).contains(&k) {
        return Err(Error::Domain(format!("q_k needs 1 <= k <= 8, got {k}")));
    }
    if !(-UNIT_TOLERANCE..=1.0 + UNIT_TOLERANCE).contains(&x) {
        return Err(Error::Domain(format!("q_k input {x} outside [0, 1]")));
    }
    let n = levels(k);
    let i = (x.clamp(0.0, 1.0) * n).round();
    Ok(i / n)
}

/// The `[0, 1]`-normalized DoReFa pre-image `tanh(w) / (2 max|tanh W|) + 0.5`,
/// along with `tanh(w)`, the maximum and its index. `None` when every
/// `tanh(w)` is zero.
pub(crate) struct DorefaPre {
    pub tanh: Vec<f64>,
    pub unit: Vec<f64>,
    pub max: f64,
    pub argmax: usize,
}

pub(crate) fn dorefa_pre(w: &[f64]) -> Option<DorefaPre> {
    let tanh: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
    let (argmax, max) = tanh
        .iter()
        .map(|t| t.abs())
        .enumerate()
        .fold((0, 0.0), |best, (i, a)| if a > best.1 { (i, a) } else { best });
    if max == 0.0 {
        return None;
    }
    let unit = tanh
        .iter()
        .map(|t| (t / (2.0 * max) + 0.5).clamp(0.0, 1.0))
        .collect();
    Some(DorefaPre {
        tanh,
        unit,
        max,
        argmax,
    })
}

/// DoReFa weight quantization on plain values:
/// `2·Q_k(tanh(w) / (2 max|tanh W|) + 0.5) - 1`. All-zero input maps to
/// all-zero output.
pub fn dorefa_weights(w: &[f64], k: u32) -> Result<Vec<f64>> {
    check_bits(k)?;
    if k == FULL_PRECISION {
        return Ok(w.to_vec());
    }
    match dorefa_pre(w) {
        None => Ok(vec![0.0; w.len()]),
        Some(pre) => pre
            .unit
            .iter()
            .map(|&u| Ok(2.0 * quantize_unit(u, k)? - 1.0))
            .collect(),
    }
}

/// `0.5(|x| - |x - α| + α)`, i.e. `clamp(x, 0, α)`.
pub fn pact_clip(x: f64, alpha: f64) -> f64 {
    x.clamp(0.0, alpha)
}

/// `Q_k(y / α)·α` for `y ∈ [0, α]`.
pub fn pact_quantize(y: f64, alpha: f64, k: u32) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("PACT alpha must be positive, got {alpha}")));
    }
    check_bits(k)?;
    if k == FULL_PRECISION {
        return Ok(y);
    }
    Ok(quantize_unit(y / alpha, k)? * alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_nearest(x: f64, k: u32) -> f64 {
        // enumerate the grid; on equal distance prefer the larger point
        let n = levels(k) as usize;
        let mut best = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..=n {
            let g = i as f64 / n as f64;
            let d = (x - g).abs();
            if d <= best_d {
                best = g;
                best_d = d;
            }
        }
        best
    }

    #[test]
    fn q_k_examples() {
        assert_eq!(quantize_unit(0.7, 1).unwrap(), 1.0);
        assert_eq!(quantize_unit(0.4, 2).unwrap(), 1.0 / 3.0);
        assert_eq!(quantize_unit(0.5, 2).unwrap(), 2.0 / 3.0);
        for k in 1..=8 {
            assert_eq!(quantize_unit(0.0, k).unwrap(), 0.0);
            assert_eq!(quantize_unit(1.0, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn q_k_matches_enumeration() {
        for k in 1..=8 {
            for s in 0..=1000 {
                let x = s as f64 / 1000.0;
                let got = quantize_unit(x, k).unwrap();
                let want = grid_nearest(x, k);
                assert!((got - want).abs() < 1e-12, "k={k} x={x}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn q_k_rejects_out_of_range() {
        assert!(quantize_unit(1.1, 3).is_err());
        assert!(quantize_unit(-0.01, 3).is_err());
        assert!(quantize_unit(1.0 + 1e-10, 3).is_ok());
        assert!(quantize_unit(0.5, 0).is_err());
        assert!(quantize_unit(0.5, 9).is_err());
    }

    #[test]
    fn dorefa_examples() {
        assert_eq!(dorefa_weights(&[0.37], 3).unwrap(), vec![1.0]);
        assert_eq!(dorefa_weights(&[-0.8, 0.8], 2).unwrap(), vec![-1.0, 1.0]);
        let out = dorefa_weights(&[0.0, 1.0], 2).unwrap();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(out[1], 1.0);
        assert_eq!(dorefa_weights(&[0.0, 0.0], 4).unwrap(), vec![0.0, 0.0]);
        assert_eq!(dorefa_weights(&[0.3, -2.0], 32).unwrap(), vec![0.3, -2.0]);
    }

    #[test]
    fn pact_examples() {
        assert_eq!(pact_clip(-3.0, 6.0), 0.0);
        assert_eq!(pact_clip(8.0, 6.0), 6.0);
        assert_eq!(pact_clip(3.0, 6.0), 3.0);
        assert_eq!(pact_quantize(6.0, 6.0, 3).unwrap(), 6.0);
        assert_eq!(pact_quantize(0.0, 6.0, 3).unwrap(), 0.0);
        assert_eq!(pact_quantize(3.0, 6.0, 2).unwrap(), 4.0);
        assert!(pact_quantize(1.0, 0.0, 2).is_err());
    }

    #[test]
    fn pact_clip_matches_closed_form() {
        for &(x, a) in &[(-3.0, 6.0), (8.0, 6.0), (3.0, 6.0), (0.1, 0.2), (-0.5, 0.01)] {
            let closed = 0.5 * (f64::abs(x) - f64::abs(x - a) + a);
            assert!((pact_clip(x, a) - closed).abs() < 1e-15);
        }
    }
}
