//! The run configuration file: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use soprt_core::bench::EnvSpec;
use soprt_core::{ScorerConfig, TrainConfig};

use crate::commands::CliError;

/// Everything a run needs. Each field has a default, so `{}` is a valid
/// config; unknown keys are rejected. Command-line flags override the
/// matching fields after the file is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    /// Output root; each subcommand writes under its own subdirectory.
    pub out: PathBuf,
    /// Cap on worker threads; absent means one per core.
    pub threads: Option<usize>,
    pub env: EnvSpec,
    pub bench: BenchSection,
    pub model: ScorerConfig,
    pub train: TrainConfig,
    pub rank: RankSection,
    pub distance: DistanceSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            threads: None,
            env: EnvSpec::pointreach2d(),
            bench: BenchSection::default(),
            model: ScorerConfig::default(),
            train: TrainConfig::default(),
            rank: RankSection::default(),
            distance: DistanceSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Benchmark generation sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Policies whose returns supervise training.
    pub n_train: usize,
    /// Held-out policies used for early stopping.
    pub n_validation: usize,
    /// Held-out policies reported at evaluation time.
    pub n_test: usize,
    /// Quality interpolation range of the candidate family.
    pub quality_range: [f64; 2],
    /// Behavior policies mixed to log the offline data.
    pub n_behavior: usize,
    /// Quality interpolation range of the behavior family.
    pub behavior_quality: [f64; 2],
    /// Logged trajectories.
    pub n_trajectories: usize,
    /// Monte-Carlo rollouts per policy when estimating true returns.
    pub n_rollouts: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            n_train: 30,
            n_validation: 10,
            n_test: 10,
            quality_range: [0.0, 1.0],
            n_behavior: 2,
            behavior_quality: [0.3, 0.7],
            n_trajectories: 40,
            n_rollouts: 200,
        }
    }
}

/// Ranking and report knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankSection {
    /// Subsets averaged at inference; absent means the whole pool.
    pub n_eval_subsets: Option<usize>,
    /// Cutoffs reported as top-k regret when truth is available.
    pub regret_ks: Vec<usize>,
    /// Also render reports as SVG.
    pub svg: bool,
}

impl Default for RankSection {
    fn default() -> Self {
        Self {
            n_eval_subsets: None,
            regret_ks: vec![1, 3, 5],
            svg: true,
        }
    }
}

/// Policy-set distance knobs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceSection {
    /// Cap on logged states entering the distance; absent means all.
    pub max_states: Option<usize>,
}

/// Artifact locations. Absent paths are derived from `out`, so a whole
/// pipeline runs from one config without naming any files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Offline trajectories (JSONL); default `<out>/bench/data.jsonl`.
    pub data: Option<PathBuf>,
    /// Benchmark manifest; default `<out>/bench/manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Trained scorer; default `<out>/train/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Ranked result; default `<out>/rank/ranked.json`.
    pub ranked: Option<PathBuf>,
    /// Policies to rank; empty means the manifest's test section.
    pub policies: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn bench_dir(&self) -> PathBuf {
        self.out.join("bench")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out.join("train")
    }

    pub fn rank_dir(&self) -> PathBuf {
        self.out.join("rank")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn distance_dir(&self) -> PathBuf {
        self.out.join("distance")
    }

    pub fn data_path(&self) -> PathBuf {
        self.paths
            .data
            .clone()
            .unwrap_or_else(|| self.bench_dir().join("data.jsonl"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.bench_dir().join("manifest.json"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.train_dir().join("model.ckpt"))
    }

    pub fn ranked_path(&self) -> PathBuf {
        self.paths
            .ranked
            .clone()
            .unwrap_or_else(|| self.rank_dir().join("ranked.json"))
    }

    pub fn validate_common(&self) -> Result<(), CliError> {
        if self.threads == Some(0) {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        self.env
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if self.rank.regret_ks.iter().any(|&k| k == 0) {
            return Err(CliError::Usage("regret_ks entries must be at least 1".into()));
        }
        if self.rank.n_eval_subsets == Some(0) {
            return Err(CliError::Usage(
                "n_eval_subsets must be at least 1 when given".into(),
            ));
        }
        Ok(())
    }
}
