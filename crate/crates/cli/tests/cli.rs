//! End-to-end subprocess tests of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::LazyLock;

use serde_json::{json, Value};
use soprt_core::bench::{gen_policy_family, monte_carlo_return, BenchManifest, EnvSpec};
use soprt_core::metrics::{spearman, RankedResult};
use soprt_core::seeds::{derive_seed, tag};
use tempfile::TempDir;

fn soprt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soprt"))
        .args(args)
        .output()
        .expect("spawn soprt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn base_config(out_dir: &Path) -> Value {
    json!({
        "seed": 11,
        "out": out_dir,
        "env": {"name": "pointreach2d", "noise_std": 0.05, "horizon": 8},
        "bench": {
            "n_train": 6, "n_validation": 2, "n_test": 4,
            "n_trajectories": 10, "n_rollouts": 30
        },
        "model": {
            "d_in": 4, "d_low": 8, "d_high": 16, "k": 4,
            "low": {"n_layers": 1, "n_heads": 2, "d_ff": 32, "dropout": 0.1},
            "high": {"n_layers": 1, "n_heads": 2, "d_ff": 32, "dropout": 0.1}
        },
        "train": {"subset_size": 32, "n_subsets": 6, "epochs": 2, "lr": 0.002},
        "rank": {"regret_ks": [1, 2]}
    })
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// One generated-and-trained benchmark shared by the read-only tests.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn artifact_paths(&self) -> Value {
        json!({
            "data": self.root.join("bench/data.jsonl"),
            "manifest": self.root.join("bench/manifest.json"),
            "checkpoint": self.root.join("train/model.ckpt")
        })
    }

    /// A config whose inputs come from the fixture but whose outputs go
    /// to a fresh directory.
    fn scoped_config(&self, dir: &Path, name: &str) -> PathBuf {
        let mut value = base_config(&dir.join("run"));
        value["paths"] = self.artifact_paths();
        write_config(dir, name, &value)
    }

    fn manifest(&self) -> BenchManifest {
        let text = std::fs::read_to_string(self.root.join("bench/manifest.json")).unwrap();
        serde_json::from_str(&text).unwrap()
    }

    fn policy_path(&self, id: &str) -> PathBuf {
        self.root.join("bench/policies").join(format!("{id}.json"))
    }
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(|| {
    let dir = TempDir::new().unwrap();
    let root = dir.path().join("run");
    let config = write_config(dir.path(), "config.json", &base_config(&root));
    let config = config.to_str().unwrap();
    for cmd in ["gen-bench", "train"] {
        let out = soprt(&[cmd, "--config", config]);
        assert_eq!(code(&out), 0, "{cmd} failed: {}", stderr(&out));
    }
    Fixture { _dir: dir, root }
});

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&soprt(&["--help"])), 0);
    assert_eq!(code(&soprt(&["--version"])), 0);
    assert_eq!(code(&soprt(&["rank", "--help"])), 0);
}

#[test]
fn bad_flags_and_bad_configs_exit_one() {
    assert_eq!(code(&soprt(&["no-such-command"])), 1);
    assert_eq!(code(&soprt(&["rank", "--no-such-flag"])), 1);

    let dir = TempDir::new().unwrap();
    let bogus = write_config(dir.path(), "bogus.json", &json!({"bogus": 1}));
    let out = soprt(&["gen-bench", "--config", bogus.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));

    let missing = dir.path().join("nope.json");
    assert_eq!(
        code(&soprt(&["gen-bench", "--config", missing.to_str().unwrap()])),
        1
    );

    let zero_gamma = write_config(
        dir.path(),
        "gamma.json",
        &json!({"env": {"name": "pointreach2d", "gamma": 0.0}}),
    );
    assert_eq!(
        code(&soprt(&["gen-bench", "--config", zero_gamma.to_str().unwrap()])),
        1
    );
}

#[test]
fn missing_artifacts_exit_two() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "c.json", &base_config(&dir.path().join("empty")));
    let out = soprt(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn gen_bench_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let config = write_config(
            dir.path(),
            &format!("{name}.json"),
            &base_config(&out_dir),
        );
        let out = soprt(&["gen-bench", "--config", config.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        bytes.push((
            std::fs::read(out_dir.join("bench/manifest.json")).unwrap(),
            std::fs::read(out_dir.join("bench/data.jsonl")).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn gen_bench_accepts_the_minimum_family() {
    let dir = TempDir::new().unwrap();
    let mut value = base_config(&dir.path().join("tiny"));
    value["bench"]["n_train"] = json!(2);
    value["bench"]["n_validation"] = json!(0);
    value["bench"]["n_test"] = json!(0);
    let config = write_config(dir.path(), "tiny.json", &value);
    let out = soprt(&["gen-bench", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: BenchManifest = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("tiny/bench/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest.train.len(), 2);
    assert!(manifest.validation.is_empty() && manifest.test.is_empty());
}

#[test]
fn manifest_returns_match_recomputation() {
    let manifest = FIXTURE.manifest();
    let env = EnvSpec {
        noise_std: 0.05,
        horizon: 8,
        ..EnvSpec::pointreach2d()
    };
    let family = gen_policy_family(&env, 12, [0.0, 1.0], 11).unwrap();
    for entry in manifest.entries() {
        let spec = soprt_core::policy::load_policy(&FIXTURE.root.join("bench").join(&entry.path))
            .unwrap();
        let index = family
            .members
            .iter()
            .position(|m| m.policy == spec)
            .expect("manifest policy regenerates");
        let mc = monte_carlo_return(
            &env,
            &spec,
            manifest.n_rollouts,
            env.gamma,
            derive_seed(11, &[tag::ROLLOUTS, index as u64]),
        )
        .unwrap();
        assert_eq!(mc.mean, entry.true_return, "{}", entry.id);
        assert_eq!(mc.std_error, entry.std_error, "{}", entry.id);
    }
}

fn read_ranked(path: &Path) -> RankedResult {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn rank_and_eval_agree_with_recomputed_metrics() {
    let dir = TempDir::new().unwrap();
    let config = FIXTURE.scoped_config(dir.path(), "c.json");
    let config = config.to_str().unwrap();

    let out = soprt(&["rank", "--config", config]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ranked = read_ranked(&dir.path().join("run/rank/ranked.json"));
    assert_eq!(ranked.policy_ids.len(), 4);
    assert!(ranked.true_returns.is_none());

    let out = soprt(&["eval", "--config", config]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let scored = read_ranked(&dir.path().join("run/eval/eval.json"));

    let manifest = FIXTURE.manifest();
    let truth: Vec<f64> = scored
        .policy_ids
        .iter()
        .map(|id| {
            manifest
                .test
                .iter()
                .find(|e| &e.id == id)
                .unwrap()
                .true_return
        })
        .collect();
    let rho = spearman(&truth, &scored.mean_scores).unwrap();
    assert_eq!(scored.spearman, Some(rho));
    assert_eq!(scored.mean_scores, ranked.mean_scores);
    assert_eq!(scored.regret_at_k.len(), 2);
}

#[test]
fn rank_is_deterministic_and_thread_count_independent() {
    let dir = TempDir::new().unwrap();
    let mut bytes = Vec::new();
    for (name, threads) in [("a", None), ("b", None), ("c", Some("1"))] {
        let sub = dir.path().join(name);
        std::fs::create_dir_all(&sub).unwrap();
        let config = FIXTURE.scoped_config(&sub, "c.json");
        let mut args = vec!["rank", "--config", config.to_str().unwrap()];
        if let Some(t) = threads {
            args.extend(["--threads", t]);
        }
        let out = soprt(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        bytes.push(std::fs::read(sub.join("run/rank/ranked.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(bytes[0], bytes[2]);
}

#[test]
fn single_policy_rank_yields_one_row() {
    let dir = TempDir::new().unwrap();
    let config = FIXTURE.scoped_config(dir.path(), "c.json");
    let policy = FIXTURE.policy_path("test-00");
    let out = soprt(&[
        "rank",
        "--config",
        config.to_str().unwrap(),
        "--policy",
        policy.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ranked = read_ranked(&dir.path().join("run/rank/ranked.json"));
    assert_eq!(ranked.policy_ids, vec!["test-00".to_string()]);
    assert_eq!(ranked.ranking, vec![0]);
}

#[test]
fn duplicated_policy_gets_equal_scores() {
    let dir = TempDir::new().unwrap();
    let config = FIXTURE.scoped_config(dir.path(), "c.json");
    let a = FIXTURE.policy_path("test-00");
    let b = dir.path().join("copy.json");
    std::fs::copy(&a, &b).unwrap();
    let out = soprt(&[
        "rank",
        "--config",
        config.to_str().unwrap(),
        "--policy",
        a.to_str().unwrap(),
        "--policy",
        b.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ranked = read_ranked(&dir.path().join("run/rank/ranked.json"));
    assert_eq!(ranked.mean_scores[0], ranked.mean_scores[1]);
}

#[test]
fn eval_rejects_mismatched_policy_ids() {
    let dir = TempDir::new().unwrap();
    let config = FIXTURE.scoped_config(dir.path(), "c.json");
    let config = config.to_str().unwrap();
    let policy = FIXTURE.policy_path("train-00");
    let out = soprt(&[
        "rank",
        "--config",
        config,
        "--policy",
        policy.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = soprt(&["eval", "--config", config]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("disagree"), "{}", stderr(&out));
}

#[test]
fn distance_reports_a_finite_nonnegative_value() {
    let dir = TempDir::new().unwrap();
    let config = FIXTURE.scoped_config(dir.path(), "c.json");
    let out = soprt(&["distance", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/distance/distance.json")).unwrap(),
    )
    .unwrap();
    let d = report["distance"].as_f64().unwrap();
    assert!(d.is_finite() && d >= 0.0);
    assert_eq!(report["n_reference"], 6);
    assert_eq!(report["n_candidates"], 4);
}

#[test]
fn every_stage_emits_resolved_config_and_version() {
    let dir = TempDir::new().unwrap();
    let config = FIXTURE.scoped_config(dir.path(), "c.json");
    let out = soprt(&["rank", "--config", config.to_str().unwrap(), "--seed", "11"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let info: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/rank/run.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(info["tool"], "soprt");
    assert_eq!(info["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(info["command"], "rank");
    assert_eq!(info["config"]["seed"], 11);
    assert_eq!(info["config"]["model"]["d_low"], 8);
}
