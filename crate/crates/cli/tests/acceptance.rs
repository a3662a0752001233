//! Release gate: every guarantee the toolkit advertises, checked end to end with one verdict line per gate.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{LazyLock, Mutex, MutexGuard, PoisonError};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use soprt_core::bench::{
    collect_offline_data, gen_policy_family, monte_carlo_return, split_indices, EnvSpec,
};
use soprt_core::clustering::kmeans_fit;
use soprt_core::data::{StateDataset, Trajectory};
use soprt_core::metrics::{policy_set_distance, regret_at_k, spearman};
use soprt_core::model::{EncoderConfig, Mode, ModelVariant, ScorerConfig, ScoringModel};
use soprt_core::numgrad::check::{central_diff, max_rel_err_all};
use soprt_core::numgrad::{Tape, Tensor};
use soprt_core::policy::{build_representation, rank_labels, PolicySpec};
use soprt_core::seeds::{self, tag};
use soprt_core::training::{
    infer_scores, pairwise_loss, pairwise_loss_value, train, InferenceResult, TrainConfig,
};
use tempfile::TempDir;

const LN_2: f64 = std::f64::consts::LN_2;

/// Gates run one at a time so each runtime budget is measured without
/// the other gates competing for the thread pool.
static GATE_LOCK: Mutex<()> = Mutex::new(());

fn exclusive() -> MutexGuard<'static, ()> {
    GATE_LOCK.lock().unwrap_or_else(PoisonError::into_inner)
}

fn verdict(number: u32, name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("gate {number:02} {name}: {word} ({detail})");
    assert!(pass, "gate {number:02} {name}: {detail}");
}

fn random_policy(rng: &mut ChaCha8Rng, state_dim: usize, action_dim: usize) -> PolicySpec {
    let weights = (0..action_dim)
        .map(|_| (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let biases = (0..action_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    PolicySpec::linear(weights, biases, None).expect("valid linear policy")
}

fn random_states(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
    (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn pool_of(states: Vec<Vec<f64>>) -> StateDataset {
    let n = states.len();
    StateDataset::from_trajectories(&[Trajectory {
        states,
        actions: vec![vec![0.0]; n],
        rewards: vec![0.0; n],
    }])
}

// ── gate 01: analytic gradients ─────────────────────────────────────────

fn gradient_config(variant: ModelVariant) -> ScorerConfig {
    ScorerConfig {
        d_in: 4,
        d_low: 8,
        d_high: 16,
        low: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
        },
        high: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
        },
        k: 3,
        variant,
    }
}

fn gradient_case(variant: ModelVariant, seed: u64) -> f64 {
    let config = gradient_config(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state_dim = 3;
    let n_states = 12;
    let states = random_states(&mut rng, n_states, state_dim);
    let assignments: Vec<usize> = (0..n_states)
        .map(|i| {
            if i < config.k {
                i
            } else {
                rng.random_range(0..config.k)
            }
        })
        .collect();
    let policies: Vec<PolicySpec> =
        (0..6).map(|_| random_policy(&mut rng, state_dim, 1)).collect();
    let reprs: Vec<Tensor> = policies
        .iter()
        .map(|p| build_representation(p, &states, state_dim).unwrap())
        .collect();

    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..policies.len() {
        for j in (i + 1)..policies.len() {
            pairs.push((i, j, [0.0, 0.5, 1.0][rng.random_range(0..3)]));
        }
    }
    pairs.shuffle(&mut rng);
    pairs.truncate(12);

    let model = ScoringModel::init(config.clone(), seed).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let scores: Vec<_> = reprs
        .iter()
        .map(|r| {
            model
                .score(&mut tape, &bound, r, &assignments, &mut Mode::Eval)
                .unwrap()
        })
        .collect();
    let (i0, j0, y0) = pairs[0];
    let mut total = pairwise_loss(&mut tape, scores[i0], scores[j0], y0).unwrap();
    for &(i, j, y) in &pairs[1..] {
        let term = pairwise_loss(&mut tape, scores[i], scores[j], y).unwrap();
        total = tape.add(total, term).unwrap();
    }
    let mean = tape.scale(total, 1.0 / pairs.len() as f64).unwrap();
    let grads = tape.backward(mean).unwrap();
    let params = model.param_tensors();
    let analytic: Vec<Tensor> = bound
        .param_vars()
        .iter()
        .zip(&params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let numeric = central_diff(&params, 1e-5, |perturbed| {
        let mut probe = ScoringModel::init(config.clone(), 0).unwrap();
        probe.set_params(perturbed.to_vec()).unwrap();
        let values: Vec<f64> = reprs
            .iter()
            .map(|r| probe.score_value(r, &assignments).unwrap())
            .collect();
        Ok(pairs
            .iter()
            .map(|&(i, j, y)| pairwise_loss_value(values[i], values[j], y))
            .sum::<f64>()
            / pairs.len() as f64)
    })
    .unwrap();
    max_rel_err_all(&analytic, &numeric)
}

#[test]
fn gate_01_analytic_gradients_match_central_differences() {
    let _serial = exclusive();
    let start = Instant::now();
    let cases: Vec<(ModelVariant, u64)> = [ModelVariant::Transformer, ModelVariant::Mlp]
        .into_iter()
        .flat_map(|v| (0..5u64).map(move |s| (v, s)))
        .collect();
    let worst = cases
        .par_iter()
        .map(|&(v, s)| gradient_case(v, s))
        .reduce(|| 0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "analytic gradients vs central differences",
        worst <= 1e-4 && secs < 30.0,
        &format!("max rel err {worst:.2e} over 10 runs, {secs:.1} s"),
    );
}

// ── gate 02: score order invariance ─────────────────────────────────────

fn invariance_case(case: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let state_dim = rng.random_range(2..=4);
    let action_dim = rng.random_range(1..=2);
    let k = rng.random_range(2..=5);
    let config = ScorerConfig {
        d_in: state_dim + action_dim,
        d_low: [4, 8][rng.random_range(0..2)],
        d_high: [8, 16][rng.random_range(0..2)],
        low: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            dropout: 0.2,
        },
        high: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            dropout: 0.2,
        },
        k,
        variant: ModelVariant::Transformer,
    };
    let model = ScoringModel::init(config, case.wrapping_add(1000)).unwrap();
    let n = rng.random_range(6..=20);
    let states = random_states(&mut rng, n, state_dim);
    let assignments: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let policy = random_policy(&mut rng, state_dim, action_dim);
    let repr = build_representation(&policy, &states, state_dim).unwrap();
    let base = model.score_value(&repr, &assignments).unwrap();

    let mut order: Vec<usize> = (0..n).collect();
    for c in 0..k {
        let positions: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
        let mut shuffled = positions.clone();
        shuffled.shuffle(&mut rng);
        for (&p, &q) in positions.iter().zip(&shuffled) {
            order[p] = q;
        }
    }
    let mut permuted_states = Vec::with_capacity(n * state_dim);
    for &q in &order {
        permuted_states.extend_from_slice(&states[q * state_dim..(q + 1) * state_dim]);
    }
    let permuted_repr = build_representation(&policy, &permuted_states, state_dim).unwrap();
    let within = model.score_value(&permuted_repr, &assignments).unwrap();

    let mut relabel: Vec<usize> = (0..k).collect();
    relabel.shuffle(&mut rng);
    let relabeled: Vec<usize> = assignments.iter().map(|&c| relabel[c]).collect();
    let blocks = model.score_value(&repr, &relabeled).unwrap();

    (within - base).abs().max((blocks - base).abs())
}

#[test]
fn gate_02_scores_ignore_token_and_cluster_order() {
    let _serial = exclusive();
    let worst = (0..100u64)
        .into_par_iter()
        .map(invariance_case)
        .reduce(|| 0.0, f64::max);
    verdict(
        2,
        "score order invariance",
        worst <= 1e-9,
        &format!("max |score change| {worst:.2e} over 100 cases"),
    );
}

// ── gate 03: pairwise loss identities ───────────────────────────────────

#[test]
fn gate_03_pairwise_loss_identities() {
    let _serial = exclusive();
    let mut worst_tie = 0.0f64;
    for y in [0.0, 0.5, 1.0] {
        for s in [-3.25, 0.0, 1.75] {
            worst_tie = worst_tie.max((pairwise_loss_value(s, s, y) - LN_2).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_swap = 0.0f64;
    for _ in 0..1000 {
        let a = rng.random_range(-5.0..5.0);
        let b = rng.random_range(-5.0..5.0);
        let y = rng.random::<f64>();
        let gap = (pairwise_loss_value(a, b, y) - pairwise_loss_value(b, a, 1.0 - y)).abs();
        worst_swap = worst_swap.max(gap);
    }
    verdict(
        3,
        "pairwise loss identities",
        worst_tie <= 1e-12 && worst_swap <= 1e-12,
        &format!("tie loss off ln 2 by {worst_tie:.1e}, worst swap asymmetry {worst_swap:.1e}"),
    );
}

// ── gate 04: metric oracles ─────────────────────────────────────────────

#[test]
fn gate_04_ranking_metric_oracles() {
    let _serial = exclusive();
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 3.0, 5.0, 4.0]).unwrap();
    let rho_exact = rho == 0.8;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut regret_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (1..=n)
            .map(|k| regret_at_k(&truth, &scores, k).unwrap())
            .collect();
        regret_ok &= values.windows(2).all(|w| w[1] <= w[0]);
        regret_ok &= *values.last().unwrap() == 0.0;
    }

    let mut worst_gap = 0.0f64;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + case);
        let sd = rng.random_range(1..=3);
        let ad = rng.random_range(1..=2);
        let reference: Vec<PolicySpec> = (0..rng.random_range(1..=4))
            .map(|_| random_policy(&mut rng, sd, ad))
            .collect();
        let candidates: Vec<PolicySpec> = (0..rng.random_range(1..=4))
            .map(|_| random_policy(&mut rng, sd, ad))
            .collect();
        let n_states = rng.random_range(3..=12);
        let rows: Vec<Vec<f64>> = (0..n_states)
            .map(|_| (0..sd).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let fast =
            policy_set_distance(&reference, &candidates, &pool_of(rows.clone()), None).unwrap();

        let mut total = 0.0;
        for candidate in &candidates {
            let mut nearest = f64::INFINITY;
            for anchor in &reference {
                let mut sum = 0.0;
                for state in &rows {
                    let a = candidate.act(state).unwrap();
                    let b = anchor.act(state).unwrap();
                    sum += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                }
                nearest = nearest.min(sum / n_states as f64);
            }
            total += nearest;
        }
        let brute = total / candidates.len() as f64;
        worst_gap = worst_gap.max((fast - brute).abs());
    }

    verdict(
        4,
        "ranking metric oracles",
        rho_exact && regret_ok && worst_gap <= 1e-9,
        &format!(
            "spearman {rho} on the textbook pair, regret cutoffs monotone over 1000 draws, \
             distance off brute force by {worst_gap:.1e} over 50 set pairs"
        ),
    );
}

// ── gate 05: k-means behavior ───────────────────────────────────────────

fn exhaustive_two_cluster_inertia(pts: &[f64], dim: usize) -> f64 {
    let n = pts.len() / dim;
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let mut inertia = 0.0;
        for cluster in 0..2u32 {
            let members: Vec<usize> =
                (0..n).filter(|&i| (mask >> i) & 1 == cluster).collect();
            if members.is_empty() {
                continue;
            }
            let mut centroid = vec![0.0; dim];
            for &i in &members {
                for d in 0..dim {
                    centroid[d] += pts[i * dim + d];
                }
            }
            for c in &mut centroid {
                *c /= members.len() as f64;
            }
            for &i in &members {
                for d in 0..dim {
                    let diff = pts[i * dim + d] - centroid[d];
                    inertia += diff * diff;
                }
            }
        }
        best = best.min(inertia);
    }
    best
}

#[test]
fn gate_05_kmeans_descends_and_finds_small_optima() {
    let _serial = exclusive();
    let mut monotone = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(20..=50);
        let dim = rng.random_range(1..=3);
        let k = rng.random_range(2..=6);
        let pts: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fit = kmeans_fit(&pts, dim, k, 60, seed).unwrap();
        monotone &= fit.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    }

    let mut optimal = 0;
    let mut near = true;
    let mut worst_ratio = 1.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let pts: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let best = exhaustive_two_cluster_inertia(&pts, 2);
        let fit = kmeans_fit(&pts, 2, 2, 100, seed).unwrap();
        let got = *fit.inertia_history.last().unwrap();
        if (got - best).abs() <= 1e-9 * best.max(1.0) {
            optimal += 1;
        } else {
            near &= got <= best * 1.05;
            worst_ratio = worst_ratio.max(got / best);
        }
    }

    verdict(
        5,
        "k-means descent and small-case optimality",
        monotone && optimal >= 95 && near,
        &format!(
            "inertia monotone in 100/100 runs, exhaustive optimum hit {optimal}/100, \
             worst miss ratio {worst_ratio:.3}"
        ),
    );
}

// ── gates 06 to 08: full pipeline on the synthetic benchmark ────────────

struct Benchmark {
    train_policies: Vec<PolicySpec>,
    train_returns: Vec<f64>,
    val_policies: Vec<PolicySpec>,
    val_returns: Vec<f64>,
    test_policies: Vec<PolicySpec>,
    test_returns: Vec<f64>,
    dataset: StateDataset,
}

fn build_benchmark(seed: u64) -> Benchmark {
    let mut env = EnvSpec::pointreach2d();
    env.noise_std = 0.05;
    let family = gen_policy_family(&env, 50, [0.0, 1.0], seed).unwrap();
    let returns: Vec<f64> = family
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mc = monte_carlo_return(
                &env,
                &m.policy,
                200,
                env.gamma,
                seeds::derive_seed(seed, &[tag::ROLLOUTS, i as u64]),
            )
            .unwrap();
            mc.mean
        })
        .collect();
    let splits = split_indices(family.members.len(), &[30, 10, 10], seed).unwrap();
    let pick = |idx: &[usize]| -> (Vec<PolicySpec>, Vec<f64>) {
        (
            idx.iter().map(|&i| family.members[i].policy.clone()).collect(),
            idx.iter().map(|&i| returns[i]).collect(),
        )
    };
    let (train_policies, train_returns) = pick(&splits[0]);
    let (val_policies, val_returns) = pick(&splits[1]);
    let (test_policies, test_returns) = pick(&splits[2]);

    let behavior = gen_policy_family(
        &env,
        2,
        [0.3, 0.7],
        seeds::derive_seed(seed, &[tag::BEHAVIOR_FAMILY]),
    )
    .unwrap();
    let behavior: Vec<PolicySpec> = behavior.members.into_iter().map(|m| m.policy).collect();
    let trajectories = collect_offline_data(&env, &behavior, 40, seed).unwrap();

    Benchmark {
        train_policies,
        train_returns,
        val_policies,
        val_returns,
        test_policies,
        test_returns,
        dataset: StateDataset::from_trajectories(&trajectories),
    }
}

fn pipeline_model_config(variant: ModelVariant) -> ScorerConfig {
    ScorerConfig {
        d_in: 4,
        d_low: 16,
        d_high: 32,
        low: EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            dropout: 0.1,
        },
        high: EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.1,
        },
        k: 8,
        variant,
    }
}

struct PipelineRun {
    test_returns: Vec<f64>,
    inference: InferenceResult,
    spearman: f64,
    regret3: f64,
}

fn run_pipeline(bench: &Benchmark, seed: u64, variant: ModelVariant) -> PipelineRun {
    let mut model = ScoringModel::init(
        pipeline_model_config(variant),
        seeds::derive_seed(seed, &[tag::MODEL_INIT]),
    )
    .unwrap();
    let labels = rank_labels(&bench.train_returns, 1.0).unwrap();
    let config = TrainConfig {
        subset_size: 256,
        n_subsets: 50,
        epochs: 16,
        lr: 1e-3,
        seed,
        eps_tie: 1.0,
        ..TrainConfig::default()
    };
    let (_, pool) = train(
        &mut model,
        &bench.train_policies,
        &labels,
        Some((&bench.val_policies, &bench.val_returns)),
        &bench.dataset,
        &config,
    )
    .unwrap();
    let inference = infer_scores(&model, &bench.test_policies, &pool, pool.len()).unwrap();
    let rho = spearman(&bench.test_returns, &inference.mean_scores).unwrap();
    let regret3 = regret_at_k(&bench.test_returns, &inference.mean_scores, 3).unwrap();
    PipelineRun {
        test_returns: bench.test_returns.clone(),
        inference,
        spearman: rho,
        regret3,
    }
}

struct Pipeline {
    transformer: Vec<PipelineRun>,
    mlp: Vec<PipelineRun>,
    transformer_secs: f64,
}

static PIPELINE: LazyLock<Pipeline> = LazyLock::new(|| {
    let mut transformer = Vec::new();
    let mut mlp = Vec::new();
    let mut transformer_secs = 0.0;
    for seed in 0..3u64 {
        let start = Instant::now();
        let bench = build_benchmark(seed);
        transformer.push(run_pipeline(&bench, seed, ModelVariant::Transformer));
        transformer_secs += start.elapsed().as_secs_f64();
        mlp.push(run_pipeline(&bench, seed, ModelVariant::Mlp));
    }
    Pipeline {
        transformer,
        mlp,
        transformer_secs,
    }
});

#[test]
fn gate_06_pipeline_recovers_test_ranking() {
    let _serial = exclusive();
    let p = &*PIPELINE;
    let good = p
        .transformer
        .iter()
        .filter(|r| r.spearman >= 0.8 && r.regret3 == 0.0)
        .count();
    let detail = p
        .transformer
        .iter()
        .enumerate()
        .map(|(s, r)| format!("seed {s}: rho {:.3}, regret@3 {:.3}", r.spearman, r.regret3))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        6,
        "pipeline ranking quality",
        good >= 2 && p.transformer_secs < 600.0,
        &format!("{detail}; {good}/3 seeds good, {:.0} s", p.transformer_secs),
    );
}

#[test]
fn gate_07_attention_scorer_vs_mlp_ablation() {
    let _serial = exclusive();
    let p = &*PIPELINE;
    let t_mean = p.transformer.iter().map(|r| r.spearman).sum::<f64>() / 3.0;
    let m_mean = p.mlp.iter().map(|r| r.spearman).sum::<f64>() / 3.0;
    let holds = t_mean >= m_mean;
    let report = json!({
        "transformer_mean_spearman": t_mean,
        "mlp_mean_spearman": m_mean,
        "per_seed": (0..3)
            .map(|s| json!({
                "seed": s,
                "transformer": p.transformer[s].spearman,
                "mlp": p.mlp[s].spearman,
            }))
            .collect::<Vec<_>>(),
        "transformer_at_least_mlp": holds,
        "flagged": !holds,
    });
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("ablation-report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    let note = if holds {
        String::new()
    } else {
        " FLAGGED: mlp ahead,".to_owned()
    };
    verdict(
        7,
        "attention scorer vs mlp ablation",
        holds,
        &format!("transformer {t_mean:.3} vs mlp {m_mean:.3},{note} report at {}", path.display()),
    );
}

#[test]
fn gate_08_more_eval_subsets_stabilize_spearman() {
    let _serial = exclusive();
    let run = PIPELINE
        .transformer
        .iter()
        .min_by(|a, b| a.spearman.total_cmp(&b.spearman))
        .unwrap();
    let n_pool = run.inference.per_subset_scores[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut stds = Vec::new();
    for &group in &[1usize, 5, 25] {
        let mut rhos = Vec::new();
        for _ in 0..5 {
            let cols = rand::seq::index::sample(&mut rng, n_pool, group).into_vec();
            let means: Vec<f64> = run
                .inference
                .per_subset_scores
                .iter()
                .map(|row| cols.iter().map(|&t| row[t]).sum::<f64>() / group as f64)
                .collect();
            rhos.push(spearman(&run.test_returns, &means).unwrap());
        }
        let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
        let var = rhos.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
            / (rhos.len() - 1) as f64;
        stds.push(var.sqrt());
    }
    verdict(
        8,
        "eval subset averaging stability",
        stds[2] <= stds[0] + 0.05,
        &format!(
            "spearman std {:.4} with 1 subset, {:.4} with 5, {:.4} with 25",
            stds[0], stds[1], stds[2]
        ),
    );
}

// ── gate 09: run-to-run determinism through the binary ──────────────────

fn soprt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soprt"))
        .args(args)
        .output()
        .expect("spawn soprt")
}

fn determinism_config(out: &Path) -> serde_json::Value {
    json!({
        "seed": 17,
        "out": out,
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
        "train": {"subset_size": 32, "n_subsets": 6, "epochs": 2, "lr": 0.002}
    })
}

#[test]
fn gate_09_repeated_runs_are_byte_identical() {
    let _serial = exclusive();
    let dir = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let config_path = dir.path().join(format!("{run}.json"));
        let text = serde_json::to_string_pretty(&determinism_config(&out)).unwrap();
        std::fs::write(&config_path, text).unwrap();
        let config = config_path.to_str().unwrap().to_owned();
        for cmd in ["gen-bench", "train", "rank"] {
            let result = soprt(&[cmd, "--config", &config]);
            assert_eq!(
                result.status.code(),
                Some(0),
                "{cmd} run {run}: {}",
                String::from_utf8_lossy(&result.stderr)
            );
        }
        outputs.push(std::fs::read(out.join("rank/ranked.json")).unwrap());
    }
    let identical = outputs[0] == outputs[1];
    verdict(
        9,
        "repeated train and rank runs",
        identical,
        &format!("{} ranked bytes compared", outputs[0].len()),
    );
}
