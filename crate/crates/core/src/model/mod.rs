//! The policy scoring model: a hierarchical set encoder over
//! `(state, action)` tokens.
//!
//! Scoring works in five stages. Tokens are projected to a low width,
//! encoded within their state cluster, and average-pooled to one vector
//! per cluster; a bridge projection widens those cluster vectors, a second
//! encoder mixes them, and a final projection of the pooled result yields
//! the scalar score. No positional information enters at any point, so
//! the score depends on the token multiset only. Clusters with no tokens
//! contribute a zero vector at the low width.

mod checkpoint;
mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numgrad::{NumgradError, Tape, Tensor, Var};

/// Epsilon inside every layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numgrad(#[from] NumgradError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("representation shape {got:?} does not match expected token width {want}")]
    ReprShape { want: usize, got: Vec<usize> },
    #[error("{got} cluster assignments for {want} tokens")]
    AssignmentsLen { want: usize, got: usize },
    #[error("cluster index {index} out of range for k = {k}")]
    ClusterRange { index: usize, k: usize },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("corrupt checkpoint {path}: {what}")]
    Corrupt { path: String, what: String },
    #[error("checkpoint tensor {name}: shape {got:?}, expected {want:?}")]
    TensorShape {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
}

type Result<T> = std::result::Result<T, ModelError>;

/// Shape of one encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

/// Token mixer used inside both stacks: self-attention encoder layers or
/// a per-token feedforward baseline of matching depth and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Transformer,
    Mlp,
}

/// Full scorer shape. `d_in` is the token width
/// (`state_dim + action_dim`), `k` the number of state clusters. Every
/// field omitted from a serialized config falls back to the reference
/// configuration for a 4-wide token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub d_in: usize,
    pub d_low: usize,
    pub d_high: usize,
    pub low: EncoderConfig,
    pub high: EncoderConfig,
    pub k: usize,
    pub variant: ModelVariant,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self::standard(4)
    }
}

impl ScorerConfig {
    /// The reference configuration: 64-wide cluster encoder (2 layers,
    /// 2 heads, 128 feedforward), 256-wide cluster mixer (6 layers,
    /// 8 heads, 512 feedforward), 256 clusters, dropout 0.1.
    pub fn standard(d_in: usize) -> Self {
        Self {
            d_in,
            d_low: 64,
            d_high: 256,
            low: EncoderConfig {
                n_layers: 2,
                n_heads: 2,
                d_ff: 128,
                dropout: 0.1,
            },
            high: EncoderConfig {
                n_layers: 6,
                n_heads: 8,
                d_ff: 512,
                dropout: 0.1,
            },
            k: 256,
            variant: ModelVariant::Transformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_in == 0 || self.d_low == 0 || self.d_high == 0 {
            problems.push("widths must be at least 1".to_string());
        }
        if self.k == 0 {
            problems.push("k must be at least 1".to_string());
        }
        for (name, width, enc) in [
            ("low", self.d_low, &self.low),
            ("high", self.d_high, &self.high),
        ] {
            if enc.n_layers == 0 {
                problems.push(format!("{name}: n_layers must be at least 1"));
            }
            if enc.n_heads == 0 {
                problems.push(format!("{name}: n_heads must be at least 1"));
            } else if width % enc.n_heads != 0 {
                problems.push(format!(
                    "{name}: width {width} not divisible by {} heads",
                    enc.n_heads
                ));
            }
            if enc.d_ff == 0 {
                problems.push(format!("{name}: d_ff must be at least 1"));
            }
            if !(0.0..1.0).contains(&enc.dropout) {
                problems.push(format!("{name}: dropout must be in [0, 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }
}

/// Dropout behavior for one forward pass. Training passes a caller-owned
/// stream so identical seeds replay identical masks.
pub enum Mode<'a> {
    Eval,
    Train { dropout_rng: &'a mut ChaCha8Rng },
}

// ── parameter storage ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct EncLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1_g: Tensor,
    ln1_b: Tensor,
    ff1: Linear,
    ff2: Linear,
    ln2_g: Tensor,
    ln2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct MlpLayer {
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
enum Stack {
    Encoder(Vec<EncLayer>),
    Mlp(Vec<MlpLayer>),
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, n_in: usize, n_out: usize) {
    out.push((
        format!("{name}.w"),
        vec![n_in, n_out],
        Init::Xavier {
            fan_in: n_in,
            fan_out: n_out,
        },
    ));
    out.push((format!("{name}.b"), vec![n_out], Init::Zeros));
}

fn push_stack(
    out: &mut Vec<(String, Vec<usize>, Init)>,
    prefix: &str,
    width: usize,
    enc: &EncoderConfig,
    variant: ModelVariant,
) {
    for l in 0..enc.n_layers {
        match variant {
            ModelVariant::Transformer => {
                for part in ["q", "k", "v", "o"] {
                    push_linear(out, &format!("{prefix}.{l}.{part}"), width, width);
                }
                out.push((format!("{prefix}.{l}.ln1.g"), vec![width], Init::Ones));
                out.push((format!("{prefix}.{l}.ln1.b"), vec![width], Init::Zeros));
                push_linear(out, &format!("{prefix}.{l}.ff1"), width, enc.d_ff);
                push_linear(out, &format!("{prefix}.{l}.ff2"), enc.d_ff, width);
                out.push((format!("{prefix}.{l}.ln2.g"), vec![width], Init::Ones));
                out.push((format!("{prefix}.{l}.ln2.b"), vec![width], Init::Zeros));
            }
            ModelVariant::Mlp => {
                push_linear(out, &format!("{prefix}.{l}.ff1"), width, enc.d_ff);
                push_linear(out, &format!("{prefix}.{l}.ff2"), enc.d_ff, width);
            }
        }
    }
}

/// Name, shape, and initializer of every parameter, in the fixed order
/// used everywhere: binding, optimizer updates, and checkpoints.
pub(crate) fn param_layout(config: &ScorerConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    push_linear(&mut out, "input", config.d_in, config.d_low);
    push_stack(&mut out, "low", config.d_low, &config.low, config.variant);
    push_linear(&mut out, "bridge", config.d_low, config.d_high);
    push_stack(&mut out, "high", config.d_high, &config.high, config.variant);
    push_linear(&mut out, "output", config.d_high, 1);
    out
}

fn take_linear(it: &mut impl Iterator<Item = Tensor>) -> Linear {
    Linear {
        w: it.next().expect("layout length checked"),
        b: it.next().expect("layout length checked"),
    }
}

fn take_stack(
    it: &mut impl Iterator<Item = Tensor>,
    enc: &EncoderConfig,
    variant: ModelVariant,
) -> Stack {
    match variant {
        ModelVariant::Transformer => Stack::Encoder(
            (0..enc.n_layers)
                .map(|_| EncLayer {
                    q: take_linear(it),
                    k: take_linear(it),
                    v: take_linear(it),
                    o: take_linear(it),
                    ln1_g: it.next().unwrap(),
                    ln1_b: it.next().unwrap(),
                    ff1: take_linear(it),
                    ff2: take_linear(it),
                    ln2_g: it.next().unwrap(),
                    ln2_b: it.next().unwrap(),
                })
                .collect(),
        ),
        ModelVariant::Mlp => Stack::Mlp(
            (0..enc.n_layers)
                .map(|_| MlpLayer {
                    ff1: take_linear(it),
                    ff2: take_linear(it),
                })
                .collect(),
        ),
    }
}

// ── bound (on-tape) views ───────────────────────────────────────────────

#[derive(Clone, Copy)]
pub(crate) struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

pub(crate) struct BoundEncLayer {
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub o: BoundLinear,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ff1: BoundLinear,
    pub ff2: BoundLinear,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

pub(crate) struct BoundMlpLayer {
    pub ff1: BoundLinear,
    pub ff2: BoundLinear,
}

pub(crate) enum BoundStack {
    Encoder(Vec<BoundEncLayer>),
    Mlp(Vec<BoundMlpLayer>),
}

/// Model parameters registered on one tape, ready for any number of
/// [`ScoringModel::score`] calls; all of them share the same leaves, so
/// one backward pass accumulates gradients across every score.
pub struct BoundModel {
    input: BoundLinear,
    low: BoundStack,
    bridge: BoundLinear,
    high: BoundStack,
    output: BoundLinear,
    /// Leaves in [`param_layout`] order.
    flat: Vec<Var>,
}

impl BoundModel {
    /// Parameter leaves in layout order, aligned with
    /// [`ScoringModel::named_params`].
    pub fn param_vars(&self) -> &[Var] {
        &self.flat
    }
}

struct Binder<'t> {
    tape: &'t mut Tape,
    flat: Vec<Var>,
}

impl Binder<'_> {
    fn leaf(&mut self, t: &Tensor) -> std::result::Result<Var, NumgradError> {
        let v = self.tape.leaf(t.clone())?;
        self.flat.push(v);
        Ok(v)
    }

    fn linear(&mut self, l: &Linear) -> std::result::Result<BoundLinear, NumgradError> {
        Ok(BoundLinear {
            w: self.leaf(&l.w)?,
            b: self.leaf(&l.b)?,
        })
    }

    fn stack(&mut self, s: &Stack) -> std::result::Result<BoundStack, NumgradError> {
        Ok(match s {
            Stack::Encoder(layers) => BoundStack::Encoder(
                layers
                    .iter()
                    .map(|l| {
                        Ok(BoundEncLayer {
                            q: self.linear(&l.q)?,
                            k: self.linear(&l.k)?,
                            v: self.linear(&l.v)?,
                            o: self.linear(&l.o)?,
                            ln1_g: self.leaf(&l.ln1_g)?,
                            ln1_b: self.leaf(&l.ln1_b)?,
                            ff1: self.linear(&l.ff1)?,
                            ff2: self.linear(&l.ff2)?,
                            ln2_g: self.leaf(&l.ln2_g)?,
                            ln2_b: self.leaf(&l.ln2_b)?,
                        })
                    })
                    .collect::<std::result::Result<Vec<_>, NumgradError>>()?,
            ),
            Stack::Mlp(layers) => BoundStack::Mlp(
                layers
                    .iter()
                    .map(|l| {
                        Ok(BoundMlpLayer {
                            ff1: self.linear(&l.ff1)?,
                            ff2: self.linear(&l.ff2)?,
                        })
                    })
                    .collect::<std::result::Result<Vec<_>, NumgradError>>()?,
            ),
        })
    }
}

// ── the model ───────────────────────────────────────────────────────────

/// The scorer's trainable state plus its config.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringModel {
    config: ScorerConfig,
    input: Linear,
    low: Stack,
    bridge: Linear,
    high: Stack,
    output: Linear,
}

impl ScoringModel {
    /// Fresh model with Xavier-uniform weights, zero biases, and unit
    /// layer-norm gains, drawn deterministically from `seed`.
    pub fn init(config: ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = param_layout(&config)
            .into_iter()
            .map(|(_, shape, init)| {
                let numel = shape.iter().product();
                let data = match init {
                    Init::Xavier { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..numel)
                            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
                            .collect()
                    }
                    Init::Zeros => vec![0.0; numel],
                    Init::Ones => vec![1.0; numel],
                };
                Tensor::new_unchecked(shape, data)
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Assembles a model from tensors in [`param_layout`] order.
    pub(crate) fn from_params(config: ScorerConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if params.len() != layout.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::TensorShape {
                    name: name.clone(),
                    want: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        let mut it = params.into_iter().map(Tensor::with_grad);
        let input = take_linear(&mut it);
        let low = take_stack(&mut it, &config.low, config.variant);
        let bridge = take_linear(&mut it);
        let high = take_stack(&mut it, &config.high, config.variant);
        let output = take_linear(&mut it);
        debug_assert!(it.next().is_none());
        Ok(Self {
            config,
            input,
            low,
            bridge,
            high,
            output,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    /// `(name, tensor)` pairs in layout order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let names = param_layout(&self.config);
        let tensors = self.param_refs();
        debug_assert_eq!(names.len(), tensors.len());
        names
            .into_iter()
            .map(|(n, _, _)| n)
            .zip(tensors)
            .collect()
    }

    fn stack_refs<'a>(s: &'a Stack, out: &mut Vec<&'a Tensor>) {
        match s {
            Stack::Encoder(layers) => {
                for l in layers {
                    for lin in [&l.q, &l.k, &l.v, &l.o] {
                        out.push(&lin.w);
                        out.push(&lin.b);
                    }
                    out.push(&l.ln1_g);
                    out.push(&l.ln1_b);
                    out.push(&l.ff1.w);
                    out.push(&l.ff1.b);
                    out.push(&l.ff2.w);
                    out.push(&l.ff2.b);
                    out.push(&l.ln2_g);
                    out.push(&l.ln2_b);
                }
            }
            Stack::Mlp(layers) => {
                for l in layers {
                    out.push(&l.ff1.w);
                    out.push(&l.ff1.b);
                    out.push(&l.ff2.w);
                    out.push(&l.ff2.b);
                }
            }
        }
    }

    fn stack_refs_mut<'a>(s: &'a mut Stack, out: &mut Vec<&'a mut Tensor>) {
        match s {
            Stack::Encoder(layers) => {
                for l in layers {
                    for lin in [&mut l.q, &mut l.k, &mut l.v, &mut l.o] {
                        out.push(&mut lin.w);
                        out.push(&mut lin.b);
                    }
                    out.push(&mut l.ln1_g);
                    out.push(&mut l.ln1_b);
                    out.push(&mut l.ff1.w);
                    out.push(&mut l.ff1.b);
                    out.push(&mut l.ff2.w);
                    out.push(&mut l.ff2.b);
                    out.push(&mut l.ln2_g);
                    out.push(&mut l.ln2_b);
                }
            }
            Stack::Mlp(layers) => {
                for l in layers {
                    out.push(&mut l.ff1.w);
                    out.push(&mut l.ff1.b);
                    out.push(&mut l.ff2.w);
                    out.push(&mut l.ff2.b);
                }
            }
        }
    }

    /// Parameter tensors in layout order.
    pub fn param_refs(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        out.push(&self.input.w);
        out.push(&self.input.b);
        Self::stack_refs(&self.low, &mut out);
        out.push(&self.bridge.w);
        out.push(&self.bridge.b);
        Self::stack_refs(&self.high, &mut out);
        out.push(&self.output.w);
        out.push(&self.output.b);
        out
    }

    /// Mutable parameter tensors in layout order, for the optimizer.
    pub(crate) fn param_refs_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.push(&mut self.input.w);
        out.push(&mut self.input.b);
        Self::stack_refs_mut(&mut self.low, &mut out);
        out.push(&mut self.bridge.w);
        out.push(&mut self.bridge.b);
        Self::stack_refs_mut(&mut self.high, &mut out);
        out.push(&mut self.output.w);
        out.push(&mut self.output.b);
        out
    }

    /// Cloned parameter tensors in layout order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.param_refs().into_iter().cloned().collect()
    }

    /// Replaces all parameters; shapes must match the layout.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        *self = Self::from_params(self.config.clone(), params)?;
        Ok(())
    }

    /// Registers every parameter on `tape`. The returned view can score
    /// any number of policies on that tape; their gradients accumulate
    /// into the same leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let mut b = Binder {
            tape,
            flat: Vec::new(),
        };
        let input = b.linear(&self.input)?;
        let low = b.stack(&self.low)?;
        let bridge = b.linear(&self.bridge)?;
        let high = b.stack(&self.high)?;
        let output = b.linear(&self.output)?;
        Ok(BoundModel {
            input,
            low,
            bridge,
            high,
            output,
            flat: b.flat,
        })
    }

    /// Scores one policy representation on an existing tape.
    ///
    /// `repr` holds one `(state, action)` token per row; `assignments`
    /// gives each token's state cluster. Returns the `[1, 1]` score node.
    pub fn score(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        repr: &Tensor,
        assignments: &[usize],
        mode: &mut Mode,
    ) -> Result<Var> {
        let (n, width) = repr
            .dims2("score")
            .map_err(|_| ModelError::ReprShape {
                want: self.config.d_in,
                got: repr.shape().to_vec(),
            })?;
        if width != self.config.d_in {
            return Err(ModelError::ReprShape {
                want: self.config.d_in,
                got: repr.shape().to_vec(),
            });
        }
        if assignments.len() != n {
            return Err(ModelError::AssignmentsLen {
                want: n,
                got: assignments.len(),
            });
        }
        let k = self.config.k;
        if let Some(&bad) = assignments.iter().find(|&&c| c >= k) {
            return Err(ModelError::ClusterRange { index: bad, k });
        }

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (row, &c) in assignments.iter().enumerate() {
            members[c].push(row);
        }

        let x = tape.constant(repr.clone())?;
        let proj = tape.matmul(x, bound.input.w)?;
        let proj = tape.add_row(proj, bound.input.b)?;

        let mut pooled = Vec::with_capacity(k);
        for rows in &members {
            if rows.is_empty() {
                pooled.push(tape.constant(Tensor::zeros(vec![1, self.config.d_low]))?);
                continue;
            }
            let tokens = tape.gather_rows(proj, rows)?;
            let encoded = encoder::run_stack(
                tape,
                tokens,
                &bound.low,
                &self.config.low,
                mode,
            )?;
            pooled.push(tape.mean_rows(encoded)?);
        }
        let clusters = tape.stack_rows(&pooled)?;

        let bridged = tape.matmul(clusters, bound.bridge.w)?;
        let bridged = tape.add_row(bridged, bound.bridge.b)?;

        let mixed = encoder::run_stack(tape, bridged, &bound.high, &self.config.high, mode)?;
        let summary = tape.mean_rows(mixed)?;

        let out = tape.matmul(summary, bound.output.w)?;
        let out = tape.add_row(out, bound.output.b)?;
        Ok(out)
    }

    /// One-shot eval-mode score on a fresh tape.
    pub fn score_value(&self, repr: &Tensor, assignments: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let s = self.score(&mut tape, &bound, repr, assignments, &mut Mode::Eval)?;
        Ok(tape.value(s).item())
    }
}
