//! Analytics for language-associated units in multilingual language models.
//!
//! The engine consumes per-language activation counts written by a model-side
//! harness and runs the downstream studies on them:
//!
//! - [`selection`]: LAPE (raw neurons) and SAE-LAPE (sparse latents) identification
//! - [`setlab`]: Jaccard overlap, condition partitions, degree-k regions, layer alignment
//! - [`perturb`]: word-order shuffling and diacritic stripping of corpora
//! - [`probe`]: univariate ridge probes against typology vectors with cross-validation
//! - [`stats`]: matched random controls, perplexity ratios/deltas, paired t-tests
//! - [`pipeline`]: config-driven orchestration and report bundles
//!
//! [`store`] defines the on-disk formats shared with the harness.

pub mod config;
pub mod pipeline;
pub mod perturb;
pub mod probe;
pub mod rng;
pub mod selection;
pub mod setlab;
pub mod stats;
pub mod store;

pub use selection::{SelectionConfig, SelectionResult};
pub use store::{ActivationAggregate, RunManifest, UnitId, UnitKind};
