//! Ranking reinforcement-learning policies from a fixed offline dataset.
//!
//! The pipeline: cluster the dataset's states, encode each policy's actions
//! on sampled state subsets with a hierarchical set encoder, train the
//! encoder on pairwise order labels between policies with known returns,
//! then rank unseen policies by their mean score over the same subsets.

pub mod bench;
pub mod clustering;
pub mod data;
pub mod metrics;
pub mod model;
pub mod numgrad;
pub mod policy;
pub mod seeds;
pub mod training;

pub use bench::{BenchManifest, EnvSpec, PolicyFamily};
pub use clustering::ClusterModel;
pub use data::{StateDataset, SubsetPlan, Trajectory};
pub use metrics::RankedResult;
pub use model::{ScorerConfig, ScoringModel};
pub use numgrad::{Tape, Tensor, Var};
pub use policy::PolicySpec;
pub use training::{SubsetPool, TrainConfig, TrainReport};
