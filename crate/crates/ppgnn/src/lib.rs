//! Pre-propagation GNN training stack.
//!
//! Feature aggregation happens once, up front: the graph's normalized
//! adjacency is applied R times to the node features, and training then sees
//! only dense per-node hop features. This crate implements that full stack at
//! desk scale:
//!
//! - [`graph`] / [`propagation`]: CSR graphs, normalized diffusion operators,
//!   and the one-time hop-feature propagation.
//! - [`store`]: chunked, hop-split, 4096-aligned binary feature files for
//!   storage-tier training.
//! - [`sampler`]: row-level (SGD-RR) and chunk-level (SGD-CR) reshuffling
//!   schedules.
//! - [`loader`]: batch assembly against resident, staged, and storage tiers,
//!   with a double-buffered prefetch pipeline and transfer accounting.
//! - [`models`]: SGC, SIGN, and HOGA forward/backward passes with
//!   cross-entropy loss and Adam, all hand-differentiated.
//! - [`trainer`]: the training loop, evaluation, convergence metric, and
//!   epoch-time decomposition profiling.
//! - [`planner`]: capacity-based data placement (fast tier / bulk tier /
//!   storage) plus peak-memory probing.
//! - [`synth`] / [`dataset`]: a stochastic block model generator and the
//!   on-disk dataset layout with its preprocessing step.

pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod loader;
pub mod matrix;
pub mod models;
pub mod planner;
pub mod propagation;
pub mod sampler;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
