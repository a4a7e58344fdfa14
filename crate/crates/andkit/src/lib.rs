//! Anchor neighbourhood discovery (AND) for unsupervised representation learning.
//!
//! The crate trains a small MLP encoder with hand-derived gradients. Training
//! starts with instance discrimination against a memory bank, then runs a
//! number of curriculum rounds. Each round rebuilds k-nearest-neighbour
//! anchor neighbourhoods from the bank, ranks them by the entropy of their
//! similarity distribution, and trains the lowest-entropy fraction with a
//! neighbourhood loss while the rest keep the instance loss.
//!
//! Module map:
//! - [`numerics`]: dense vectors/matrices, stable softmax, seeded RNG
//! - [`dataio`]: synthetic blobs, CSV/binary dataset files, batching
//! - [`memory_bank`]: the per-sample feature memory with EMA updates
//! - [`affinity`]: similarity distributions, neighbourhoods, entropy
//! - [`objective`]: instance / neighbourhood losses and their gradients
//! - [`encoder`]: MLP forward/backward and Nesterov SGD
//! - [`pipeline`]: curriculum planning, the training loop, checkpoints
//! - [`evaluation`]: weighted kNN, linear probe, neighbourhood consistency
//! - [`cli`]: the `andkit` command line

pub mod affinity;
pub mod cli;
pub mod dataio;
pub mod encoder;
mod error;
pub mod evaluation;
pub mod memory_bank;
pub mod numerics;
pub mod objective;
pub mod pipeline;

pub use error::{Error, Result};
