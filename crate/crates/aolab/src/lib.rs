//! Any-order autoregressive character modeling at toy scale.
//!
//! The crate trains and probes two parameterizations of the same
//! masked-language-modeling problem on character data:
//!
//! - a causal decoder that generates tokens in a random permutation order,
//!   with rotary embeddings decoupled into lagging (key) and leading (query)
//!   semantic positions, so each step knows *where* it must predict without
//!   seeing *what* is there;
//! - a bidirectional masked-diffusion encoder baseline.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors with a reverse-mode tape and Adam.
//! - [`ordering`]: permutation sampling, generation-order plans, and the
//!   exact adjacent-distance enumeration.
//! - [`rope`]: rotary tables, standard and decoupled rotary scores.
//! - [`model`]: the transformer in both modes, KV-cached incremental
//!   decoding, and checkpoint I/O.
//! - [`train`]: objectives, the training loop, and validation NLL.
//! - [`sampling`]: cached any-order decoding and iterative unmasking.
//! - [`eval`]: coherence/diversity metrics and frontier sweeps.
//! - [`data`]: the 29-symbol alphabet, corpus loading, and batch streams.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ordering;
pub mod rng;
pub mod rope;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
