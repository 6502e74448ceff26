//! Multistage contrastive learning: repeated cluster-then-contrast rounds,
//! each yielding a new set of feed-forward weights.

pub mod clusters;
pub mod kmeans;
pub mod loss;
pub mod stage;

pub use clusters::{accumulate_clusters, key_ids, ClusterAssignment};
pub use kmeans::{kmeans, KmeansResult};
pub use loss::{infonce, masked_infonce, masked_infonce_value, same_key_mask};
pub use stage::{run_mcl, run_mcl_stage, train_contrastive, MclOutcome, StageConfig, StageOutcome};
