//! Federated simulation: LoRA-only exchange with weighted averaging.

mod aggregate;
mod client;
mod server;
mod state;

pub use aggregate::fedavg;
pub use client::{partition_clients, Client, ClientPartition};
pub use server::{
    read_history, run_federation, train_centralized, validate_global, write_history, ClientRound, Federation,
    FederationConfig, FederationOutcome, RoundRecord, ValidationSummary, THREADS_ENV,
};
pub use state::{AdapterPair, LoraStateDict, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
