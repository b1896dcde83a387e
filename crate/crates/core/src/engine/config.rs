use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SGD with momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How cross-entropy and cost combine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossMode {
    /// `CE · α · ln(LAT)^β`, with `LAT` the expected table latency.
    Latency {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    /// `CE · β · ln(size)^γ` with `size = Σ params · weight_bits`. Leaving
    /// `beta` unset calibrates it to `ln(size₀)^(-γ)` at the initial θ, so
    /// the starting weight is 1.
    QuantSize {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        beta: Option<f64>,
    },
    /// As `quant_size` with `flops = Σ MACs · weight_bits · act_bits`.
    QuantFlop {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        beta: Option<f64>,
    },
}

fn default_alpha() -> f64 {
    0.2
}

fn default_beta() -> f64 {
    0.6
}

fn default_gamma() -> f64 {
    1.0
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode::Latency {
            alpha: default_alpha(),
            beta: default_beta(),
        }
    }
}

impl LossMode {
    pub fn needs_lut(&self) -> bool {
        matches!(self, LossMode::Latency { .. })
    }
}

/// Every knob of a search. Missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    /// Epochs that train weights only; `None` means `ceil(0.1 · epochs)`.
    pub warmup: Option<usize>,
    pub t0: f64,
    pub eta: f64,
    pub w_optimizer: SgdConfig,
    pub theta_optimizer: AdamConfig,
    pub loss: LossMode,
    pub batch_size: usize,
    pub seed: u64,
    /// Architectures drawn from `softmax(θ)` after the search, on top of
    /// the argmax architecture.
    pub samples_to_draw: usize,
    pub finalize_epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup: None,
            t0: 5.0,
            eta: 0.065,
            w_optimizer: SgdConfig::default(),
            theta_optimizer: AdamConfig::default(),
            loss: LossMode::default(),
            batch_size: 32,
            seed: 0,
            samples_to_draw: 4,
            finalize_epochs: 10,
        }
    }
}

impl SearchConfig {
    pub fn warmup_epochs(&self) -> usize {
        self.warmup.unwrap_or_else(|| self.epochs.div_ceil(10))
    }

    /// Checks every constraint and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.epochs >= 1, format!("epochs must be >= 1, got {}", self.epochs));
        let w = self.warmup_epochs();
        need(w < self.epochs, format!("warmup ({w}) must be < epochs ({})", self.epochs));
        need(self.t0 > 0.0 && self.t0.is_finite(), format!("t0 must be positive, got {}", self.t0));
        need(self.eta >= 0.0 && self.eta.is_finite(), format!("eta must be >= 0, got {}", self.eta));
        let sgd = &self.w_optimizer;
        need(sgd.lr > 0.0 && sgd.lr.is_finite(), format!("w_optimizer.lr must be positive, got {}", sgd.lr));
        need(
            (0.0..1.0).contains(&sgd.momentum),
            format!("w_optimizer.momentum must be in [0, 1), got {}", sgd.momentum),
        );
        let adam = &self.theta_optimizer;
        need(adam.lr > 0.0 && adam.lr.is_finite(), format!("theta_optimizer.lr must be positive, got {}", adam.lr));
        need((0.0..1.0).contains(&adam.beta1), format!("theta_optimizer.beta1 must be in [0, 1), got {}", adam.beta1));
        need((0.0..1.0).contains(&adam.beta2), format!("theta_optimizer.beta2 must be in [0, 1), got {}", adam.beta2));
        need(adam.eps > 0.0, format!("theta_optimizer.eps must be positive, got {}", adam.eps));
        match self.loss {
            LossMode::Latency { alpha, beta } => {
                need(alpha > 0.0 && alpha.is_finite(), format!("loss.alpha must be positive, got {alpha}"));
                need(beta >= 0.0 && beta.is_finite(), format!("loss.beta must be >= 0, got {beta}"));
            }
            LossMode::QuantSize { gamma, beta } | LossMode::QuantFlop { gamma, beta } => {
                need(gamma >= 0.0 && gamma.is_finite(), format!("loss.gamma must be >= 0, got {gamma}"));
                if let Some(b) = beta {
                    need(b > 0.0 && b.is_finite(), format!("loss.beta must be positive, got {b}"));
                }
            }
        }
        need(self.batch_size >= 1, format!("batch_size must be >= 1, got {}", self.batch_size));
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// SHA-256 of the compact JSON encoding, as lowercase hex.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("configs serialize");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
