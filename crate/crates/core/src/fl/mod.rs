//! Federated rounds: local training, weighted aggregation, simulated secure
//! aggregation, and the centralized / local-only baselines.

mod aggregate;
mod config;
mod engine;
mod local;
pub mod secure;

pub use aggregate::{aggregate, aggregated_segments, apply_delta, RoundUpdate};
pub use config::{LrDecay, Method, TrainConfig};
pub use engine::{
    run_federated, run_method, train_centralized, train_local_only, RunInputs, RunOutput,
};
pub use local::{local_train, sgd_epochs, LocalResult, Sgd, TrainSite};
pub use secure::{secure_aggregate, MaskedUpdate, PairwiseSeeds};
