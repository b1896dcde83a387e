use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::softmax_row;
use crate::cost::BlockKey;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `softmax(θ)` with max-subtraction.
pub fn theta_probs(theta: &[f64]) -> Vec<f64> {
    softmax_row(theta)
}

/// `softmax((θ + g) / τ)` on plain values, computed as `(θ + g)·(1/τ)` to
/// match the tape version bit for bit.
pub fn gumbel_softmax(theta: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if theta.len() != noise.len() {
        return Err(Error::InvalidShape {
            op: "gumbel_softmax",
            detail: format!("{} logits, {} noise draws", theta.len(), noise.len()),
        });
    }
    let inv = 1.0 / tau;
    let z: Vec<f64> = theta.iter().zip(noise).map(|(t, g)| (t + g) * inv).collect();
    Ok(softmax_row(&z))
}

/// One Gumbel-Softmax mask with fresh noise.
pub fn gumbel_soft_mask(theta: &[f64], tau: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let noise: Vec<f64> = theta.iter().map(|_| rng.gumbel()).collect();
    gumbel_softmax(theta, &noise, tau)
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Categorical draw from `softmax(θ)` via `argmax(θ + g)`.
pub fn gumbel_argmax(theta: &[f64], rng: &mut Rng) -> usize {
    let z: Vec<f64> = theta.iter().map(|t| t + rng.gumbel()).collect();
    argmax(&z)
}

/// Short content hash of a set of logit vectors.
pub fn theta_snapshot_id(theta: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for layer in theta {
        h.update((layer.len() as u64).to_le_bytes());
        for v in layer {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Choice {
    pub index: usize,
    pub key: BlockKey,
}

/// One concrete selection per searchable layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSample {
    pub layers: Vec<Choice>,
    pub theta_snapshot: String,
    pub seed: u64,
}

impl ArchitectureSample {
    pub fn indices(&self) -> Vec<usize> {
        self.layers.iter().map(|c| c.index).collect()
    }

    pub fn keys(&self) -> Vec<&BlockKey> {
        self.layers.iter().map(|c| &c.key).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("samples serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
