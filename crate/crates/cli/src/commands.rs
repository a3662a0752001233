//! The five subcommands and their error-to-exit-code mapping.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use soprt_core::bench::{
    self, BenchError, BenchManifest, ManifestEntry, McReturn,
};
use soprt_core::data::{load_trajectories, save_trajectories, StateDataset};
use soprt_core::metrics::{
    policy_set_distance, ranked_result_table, render_rank_report_svg, MetricError, RankedResult,
};
use soprt_core::model::{load_checkpoint, save_checkpoint};
use soprt_core::policy::{load_policy, rank_labels, save_policy, PolicySpec};
use soprt_core::seeds::{derive_seed, tag};
use soprt_core::training::{infer_scores, train, SubsetPool};
use soprt_core::training::TrainError;
use soprt_core::ScoringModel;

use crate::config::RunConfig;

/// Failures sorted by exit status: 1 usage or config, 2 unreadable or
/// inconsistent artifacts, 3 numerical breakdown.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) | TrainError::Cluster(_) | TrainError::Model(_) => {
                CliError::Usage(e.to_string())
            }
            TrainError::NonFiniteLoss { .. } | TrainError::Numgrad(_) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Data(_) | TrainError::Policy(_) | TrainError::Io { .. } => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match &e {
            MetricError::BadK { .. } => CliError::Usage(e.to_string()),
            MetricError::NonFinite { .. } | MetricError::Degenerate { .. } => {
                CliError::Numeric(e.to_string())
            }
            MetricError::TooFew { .. }
            | MetricError::LengthMismatch { .. }
            | MetricError::DimMismatch(_)
            | MetricError::Policy(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match &e {
            BenchError::Env(_)
            | BenchError::FamilyTooSmall(_)
            | BenchError::QualityRange { .. }
            | BenchError::ZeroRollouts
            | BenchError::NoBehavior
            | BenchError::SplitTooLarge { .. } => CliError::Usage(e.to_string()),
            BenchError::Width { .. }
            | BenchError::NonFinite { .. }
            | BenchError::Policy(_)
            | BenchError::Data(_) => CliError::Data(e.to_string()),
        }
    }
}

fn data_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| data_err(&format!("cannot create {}", parent.display()), e))?;
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| data_err(&format!("cannot serialize {}", path.display()), e))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| data_err(&format!("cannot write {}", path.display()), e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| data_err(&format!("cannot read {what} {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| data_err(&format!("bad {what} {}", path.display()), e))
}

#[derive(Serialize)]
struct RunInfo<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
}

/// Drops the resolved config and tool version next to a stage's outputs.
fn write_run_info(dir: &Path, config: &RunConfig, command: &str) -> Result<(), CliError> {
    write_json(
        &dir.join("run.json"),
        &RunInfo {
            tool: "soprt",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
        },
    )
}

fn load_manifest(config: &RunConfig) -> Result<(BenchManifest, PathBuf), CliError> {
    let path = config.manifest_path();
    let manifest: BenchManifest = read_json(&path, "manifest")?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, dir))
}

fn load_section(
    dir: &Path,
    entries: &[ManifestEntry],
) -> Result<(Vec<PolicySpec>, Vec<f64>), CliError> {
    let mut policies = Vec::with_capacity(entries.len());
    let mut returns = Vec::with_capacity(entries.len());
    for entry in entries {
        let path = dir.join(&entry.path);
        let policy =
            load_policy(&path).map_err(|e| data_err(&format!("policy {}", entry.id), e))?;
        policies.push(policy);
        returns.push(entry.true_return);
    }
    Ok((policies, returns))
}

fn load_dataset(config: &RunConfig) -> Result<StateDataset, CliError> {
    let path = config.data_path();
    let trajectories = load_trajectories(&path).map_err(|e| data_err("offline data", e))?;
    if trajectories.is_empty() {
        return Err(CliError::Data(format!(
            "offline data {} holds no trajectories",
            path.display()
        )));
    }
    Ok(StateDataset::from_trajectories(&trajectories))
}

/// Generates the environment's policy families, estimates their true
/// returns, logs offline data, and writes the manifest tying it together.
pub fn cmd_gen_bench(config: &RunConfig) -> Result<(), CliError> {
    let env = &config.env;
    let b = &config.bench;
    let total = b.n_train + b.n_validation + b.n_test;

    let family = bench::gen_policy_family(env, total, b.quality_range, config.seed)?;
    let behavior_family = bench::gen_policy_family(
        env,
        b.n_behavior,
        b.behavior_quality,
        derive_seed(config.seed, &[tag::BEHAVIOR_FAMILY]),
    )?;
    let behavior: Vec<PolicySpec> = behavior_family
        .members
        .into_iter()
        .map(|m| m.policy)
        .collect();
    let data = bench::collect_offline_data(env, &behavior, b.n_trajectories, config.seed)?;

    let returns: Vec<McReturn> = family
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            bench::monte_carlo_return(
                env,
                &m.policy,
                b.n_rollouts,
                env.gamma,
                derive_seed(config.seed, &[tag::ROLLOUTS, i as u64]),
            )
        })
        .collect::<Result<_, _>>()?;

    let groups = bench::split_indices(total, &[b.n_train, b.n_validation, b.n_test], config.seed)?;

    let dir = config.bench_dir();
    std::fs::create_dir_all(dir.join("policies"))
        .map_err(|e| data_err(&format!("cannot create {}", dir.display()), e))?;
    save_trajectories(&dir.join("data.jsonl"), &data).map_err(|e| data_err("offline data", e))?;

    let mut sections = Vec::with_capacity(3);
    for (name, group) in ["train", "validation", "test"].iter().zip(&groups) {
        let mut entries = Vec::with_capacity(group.len());
        for (j, &i) in group.iter().enumerate() {
            let id = format!("{name}-{j:02}");
            let rel = format!("policies/{id}.json");
            save_policy(&dir.join(&rel), &family.members[i].policy)
                .map_err(|e| data_err(&format!("policy {id}"), e))?;
            entries.push(ManifestEntry {
                id,
                path: rel,
                alpha: family.members[i].alpha,
                true_return: returns[i].mean,
                std_error: returns[i].std_error,
            });
        }
        sections.push(entries);
    }
    let test = sections.pop().expect("three sections");
    let validation = sections.pop().expect("three sections");
    let train_section = sections.pop().expect("three sections");

    let manifest = BenchManifest {
        env: env.clone(),
        seed: config.seed,
        n_rollouts: b.n_rollouts,
        data_path: "data.jsonl".into(),
        train: train_section,
        validation,
        test,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_run_info(&dir, config, "gen-bench")?;

    println!(
        "wrote {} ({} train / {} validation / {} test policies, {} trajectories)",
        dir.join("manifest.json").display(),
        manifest.train.len(),
        manifest.validation.len(),
        manifest.test.len(),
        b.n_trajectories,
    );
    Ok(())
}

/// Trains the scorer on the manifest's training policies and saves the
/// best checkpoint plus the training report.
pub fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    config
        .model
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    config.train.validate(config.model.k)?;

    let dataset = load_dataset(config)?;
    let (manifest, manifest_dir) = load_manifest(config)?;
    let (train_policies, train_returns) = load_section(&manifest_dir, &manifest.train)?;
    if train_policies.len() < 2 {
        return Err(CliError::Data(format!(
            "manifest holds {} training policies; pairwise training needs at least 2",
            train_policies.len()
        )));
    }
    check_policy_dims(config, &dataset, &train_policies)?;

    let labels = rank_labels(&train_returns, config.train.eps_tie)
        .map_err(|e| data_err("training returns", e))?;
    let (val_policies, val_returns) = load_section(&manifest_dir, &manifest.validation)?;
    let validation = if val_policies.is_empty() {
        None
    } else {
        Some((val_policies.as_slice(), val_returns.as_slice()))
    };

    let mut model = ScoringModel::init(
        config.model.clone(),
        derive_seed(config.seed, &[tag::MODEL_INIT]),
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;

    let dir = config.train_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| data_err(&format!("cannot create {}", dir.display()), e))?;
    let mut train_config = config.train.clone();
    train_config.seed = config.seed;
    if train_config.checkpoint_dir.is_none() {
        train_config.checkpoint_dir = Some(dir.join("checkpoints"));
    }

    let (report, _pool) = train(
        &mut model,
        &train_policies,
        &labels,
        validation,
        &dataset,
        &train_config,
    )?;

    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &model).map_err(|e| data_err("checkpoint", e))?;
    write_json(&dir.join("report.json"), &report)?;
    write_run_info(&dir, config, "train")?;

    let last_loss = report.iteration_losses.last().copied().unwrap_or(f64::NAN);
    let best = report
        .best_epoch
        .map(|e| format!("best epoch {e}"))
        .unwrap_or_else(|| "no validation ranking".into());
    println!(
        "trained {} epochs ({} iterations, final loss {last_loss:.6}, {best}); checkpoint {}",
        report.epochs_run,
        report.iteration_losses.len(),
        ckpt.display(),
    );
    Ok(())
}

fn check_policy_dims(
    config: &RunConfig,
    dataset: &StateDataset,
    policies: &[PolicySpec],
) -> Result<(), CliError> {
    let state_dim = dataset.dim();
    for p in policies {
        if p.state_dim != state_dim {
            return Err(CliError::Data(format!(
                "policy expects {}-wide states but the logged data is {}-wide",
                p.state_dim, state_dim
            )));
        }
    }
    let action_dim = policies[0].action_dim;
    if policies.iter().any(|p| p.action_dim != action_dim) {
        return Err(CliError::Data(
            "policies disagree on action width".into(),
        ));
    }
    let want = state_dim + action_dim;
    if config.model.d_in != want {
        return Err(CliError::Usage(format!(
            "model.d_in is {} but states ({}) plus actions ({}) need {}",
            config.model.d_in, state_dim, action_dim, want
        )));
    }
    Ok(())
}

/// Scores policies with a trained checkpoint and writes the ranking.
pub fn cmd_rank(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    policy_paths: &[PathBuf],
) -> Result<(), CliError> {
    let ckpt_path = checkpoint.unwrap_or_else(|| config.checkpoint_path());
    let model = load_checkpoint(&ckpt_path).map_err(|e| data_err("checkpoint", e))?;
    let dataset = load_dataset(config)?;

    let explicit: Vec<PathBuf> = if policy_paths.is_empty() {
        config.paths.policies.clone()
    } else {
        policy_paths.to_vec()
    };
    let (ids, policies) = if explicit.is_empty() {
        let (manifest, manifest_dir) = load_manifest(config)?;
        if manifest.test.is_empty() {
            return Err(CliError::Usage(
                "no policies given and the manifest's test section is empty".into(),
            ));
        }
        let ids = manifest.test.iter().map(|e| e.id.clone()).collect();
        let (policies, _) = load_section(&manifest_dir, &manifest.test)?;
        (ids, policies)
    } else {
        let mut ids = Vec::with_capacity(explicit.len());
        let mut policies = Vec::with_capacity(explicit.len());
        for path in &explicit {
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            policies
                .push(load_policy(path).map_err(|e| data_err(&format!("policy {id}"), e))?);
            ids.push(id);
        }
        (ids, policies)
    };

    let pool = SubsetPool::build(
        &dataset,
        config.train.subset_size,
        config.train.n_subsets,
        model.config().k,
        config.train.kmeans_iters,
        config.seed,
    )?;
    let n_eval = config.rank.n_eval_subsets.unwrap_or_else(|| pool.len());
    let inference = infer_scores(&model, &policies, &pool, n_eval)?;
    let ranked = RankedResult::new(ids, inference.mean_scores.clone(), None, &[])?;

    let dir = config.rank_dir();
    write_json(&config.ranked_path(), &ranked)?;
    write_json(&dir.join("scores.json"), &inference)?;
    if config.rank.svg {
        let svg = render_rank_report_svg(&ranked);
        std::fs::create_dir_all(&dir)
            .map_err(|e| data_err(&format!("cannot create {}", dir.display()), e))?;
        std::fs::write(dir.join("ranked.svg"), svg)
            .map_err(|e| data_err("rank report", e))?;
    }
    write_run_info(&dir, config, "rank")?;

    println!(
        "ranked {} policies over {} subsets; wrote {}",
        ranked.policy_ids.len(),
        n_eval,
        config.ranked_path().display()
    );
    print!("{}", ranked_result_table(&ranked));
    Ok(())
}

fn section<'a>(
    manifest: &'a BenchManifest,
    name: &str,
) -> Result<&'a [ManifestEntry], CliError> {
    match name {
        "train" => Ok(&manifest.train),
        "validation" => Ok(&manifest.validation),
        "test" => Ok(&manifest.test),
        other => Err(CliError::Usage(format!(
            "unknown manifest section {other:?}; use train, validation, or test"
        ))),
    }
}

/// Joins a ranked result with ground-truth returns and reports
/// Spearman correlation and top-k regret.
pub fn cmd_eval(
    config: &RunConfig,
    ranked_path: Option<PathBuf>,
    manifest_path: Option<PathBuf>,
    section_name: &str,
    ks: &[usize],
) -> Result<(), CliError> {
    let ranked_path = ranked_path.unwrap_or_else(|| config.ranked_path());
    let ranked: RankedResult = read_json(&ranked_path, "ranked result")?;
    let mut scoped = config.clone();
    if let Some(p) = manifest_path {
        scoped.paths.manifest = Some(p);
    }
    let (manifest, _) = load_manifest(&scoped)?;
    let entries = section(&manifest, section_name)?;

    let mut ranked_ids: Vec<&str> = ranked.policy_ids.iter().map(String::as_str).collect();
    let mut truth_ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
    ranked_ids.sort_unstable();
    truth_ids.sort_unstable();
    if ranked_ids != truth_ids {
        return Err(CliError::Data(format!(
            "ranked result and manifest section {section_name:?} disagree on policy ids: \
             ranked {ranked_ids:?} vs manifest {truth_ids:?}"
        )));
    }

    let ks = if ks.is_empty() {
        config.rank.regret_ks.clone()
    } else {
        ks.to_vec()
    };
    let scored = bench::rescore_against_manifest(&ranked, entries, &ks)?;

    let dir = config.eval_dir();
    write_json(&dir.join("eval.json"), &scored)?;
    if config.rank.svg {
        std::fs::write(dir.join("eval.svg"), render_rank_report_svg(&scored))
            .map_err(|e| data_err("eval report", e))?;
    }
    write_run_info(&dir, config, "eval")?;
    print!("{}", ranked_result_table(&scored));
    Ok(())
}

#[derive(Serialize)]
struct DistanceReport {
    distance: f64,
    n_reference: usize,
    n_candidates: usize,
    n_states: usize,
    max_states: Option<usize>,
}

/// Mean over candidate policies of the closest reference policy's mean
/// squared action gap on the logged states.
pub fn cmd_distance(config: &RunConfig, max_states: Option<usize>) -> Result<(), CliError> {
    let (manifest, manifest_dir) = load_manifest(config)?;
    let (reference, _) = load_section(&manifest_dir, &manifest.train)?;
    let (candidates, _) = load_section(&manifest_dir, &manifest.test)?;
    let dataset = load_dataset(config)?;
    let max_states = max_states.or(config.distance.max_states);

    let distance = policy_set_distance(&reference, &candidates, &dataset, max_states)?;

    let dir = config.distance_dir();
    let report = DistanceReport {
        distance,
        n_reference: reference.len(),
        n_candidates: candidates.len(),
        n_states: dataset.n(),
        max_states,
    };
    write_json(&dir.join("distance.json"), &report)?;
    write_run_info(&dir, config, "distance")?;
    println!(
        "policy-set distance {distance:.6} ({} candidates against {} references)",
        report.n_candidates, report.n_reference
    );
    Ok(())
}
