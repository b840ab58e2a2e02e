//! Forward-backward (FB) representation learning with ensemble-based
//! epistemic exploration, on finite MDPs small enough that everything the
//! learner estimates can be checked against exact tabular computations.
//!
//! The crate is organized around that split:
//!
//! - [`env`] — finite MDPs (four-room gridworld, chain, seeded random MDPs),
//!   episode simulation, and optional reward-feature maps.
//! - [`oracle`] — exact successor measures, policy evaluation, and value
//!   iteration used as ground truth.
//! - [`nn`] — a minimal owned MLP kernel: forward, reverse-mode gradients,
//!   Adam, Polyak-averaged target copies.
//! - [`fb`] — the FB factorization itself: an ensemble of forward nets, one
//!   backward net, the TD loss with orthonormality regularization, and
//!   policy extraction.
//! - [`uncertainty`] — ensemble posterior statistics over the forward map
//!   and its projection to Q-value variance.
//! - [`explore`] — exploration strategies (uncertainty sampling over reward
//!   embeddings and baselines), the replay buffer, and the collection loop.
//! - [`zeroshot`] — task inference from rewards or goals and evaluation
//!   against exact optimal returns.
//!
//! Everything is deterministic given a seed; see [`seeding`] for how
//! per-subsystem RNG streams are derived from one master seed.

pub mod env;
pub mod explore;
pub mod fb;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod seeding;
pub mod testkit;
pub mod uncertainty;
pub mod zeroshot;


pub use env::{DiscreteMdp, Environment, EnvSpec, EpisodeSpec, FeatureMap, Transition};
pub use fb::{FbEnsemble, FbHyper, FbLossReport, FbTrainer, RewardEmbedding};
pub use oracle::{SuccessorMeasure, TabularPolicy};

