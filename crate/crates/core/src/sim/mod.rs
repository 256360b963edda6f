//! Synthetic two-system marketplace with known click probabilities.

mod catalog;
mod io;
mod sessions;

pub use catalog::{generate_catalog, true_ctr, AdProfile, Catalog, CatalogConfig, Context, ItemProfile, Subject, UserProfile};
pub use io::{log_paths, read_catalog, read_log, write_catalog, write_log};
pub use sessions::{
    display_counts, impression_ratio, ir_group_partition, mechanism_flip_rate, rank_candidates, run_sessions, ImpressionLog,
    ImpressionRecord, NoisyOracle, Policy, ScoringFn, SessionCandidates, SessionConfig, Source,
};
