//! Simulation of federated matrix-factorization recommendation under
//! Byzantine model poisoning.
//!
//! Item embeddings are aggregated *sparsely*: every item is its own
//! aggregation unit and only receives gradients from the clients that touched
//! it in the current round. This crate runs that training loop end to end,
//! injects the omniscient/limited and dense/sparse attack family together with
//! the usual baseline attacks, applies robust aggregators per item, and
//! evaluates ranking quality with the leave-one-out / 100-negative protocol.
//!
//! The [`analysis`] module predicts, from a power-law fit of item degrees, the
//! fraction of items a robust aggregator can no longer protect, and counts it
//! empirically.

pub mod aggregation;
pub mod analysis;
pub mod attacks;
pub mod dataset;
pub mod evaluation;
pub mod federation;
pub mod model;
pub mod rng;

pub use aggregation::{AggregateError, AggregatorKind, AggregatorSpec, SparseRoundUpdate};
pub use analysis::{BreakdownQuery, PowerLawFit};
pub use attacks::{AttackConfig, AttackKind, AttackPlan};
pub use dataset::{Interaction, InteractionDataset, SyntheticSpec};
pub use evaluation::EpochReport;
pub use federation::{FederationConfig, RoundState};
pub use model::{EmbeddingState, Embeddings, SparseGradient};

/// Index of a client. Benign clients share the user index; injected
/// malicious clients are numbered from `n_users` upward.
pub type ClientId = usize;
