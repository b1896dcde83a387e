//! Differentiable neural architecture search on a self-contained `f64`
//! tensor engine.
//!
//! The crate trains a stochastic supernet whose per-layer candidate blocks
//! are mixed through Gumbel-Softmax masks, and optimizes the architecture
//! logits jointly against cross-entropy and a hardware cost: a latency
//! lookup table, model size in bits, or bit-weighted MACs.
//!
//! Layout:
//!
//! - [`autodiff`]: tensors, the recording [`Tape`] and every operator the
//!   search spaces need.
//! - [`quant`]: DoReFa / PACT fake quantization.
//! - [`cost`]: analytic layer metrics, latency tables and the
//!   differentiable cost objectives.
//! - [`supernet`]: candidate blocks, architecture logits, mask sampling.
//! - [`spaces`]: builders for the layer-wise ConvNet space and the
//!   mixed-precision space.
//! - [`engine`]: the alternating weight/logit optimization, checkpoints and
//!   finalization.
//! - [`data`]: synthetic blobs, CIFAR-10 binary records, splits.

pub mod autodiff;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod quant;
pub mod rng;
pub mod spaces;
pub mod supernet;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/quantization.md")]
    struct Quantization;
    #[doc = include_str!("../../../book/src/cost-model.md")]
    struct CostModel;
    #[doc = include_str!("../../../book/src/supernet.md")]
    struct Supernet;
    #[doc = include_str!("../../../book/src/spaces.md")]
    struct Spaces;
    #[doc = include_str!("../../../book/src/search.md")]
    struct Search;
    #[doc = include_str!("../../../book/src/workbench.md")]
    struct Workbench;
}
