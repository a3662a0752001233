//! Token mixers: multi-head self-attention encoder layers and the
//! per-token feedforward baseline.
//!
//! Layers are post-norm: each sublayer's output is added to its input and
//! then layer-normalized. Attention is scaled dot-product over all tokens
//! in the block with no mask and no positional terms, so a layer commutes
//! with any permutation of its input rows.

use crate::numgrad::{Result, Tape, Var};

use super::{BoundEncLayer, BoundLinear, BoundMlpLayer, BoundStack, EncoderConfig, Mode};

fn linear(tape: &mut Tape, x: Var, l: BoundLinear) -> Result<Var> {
    let y = tape.matmul(x, l.w)?;
    tape.add_row(y, l.b)
}

fn maybe_dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode) -> Result<Var> {
    match mode {
        Mode::Train { dropout_rng } if p > 0.0 => tape.dropout(x, p, &mut **dropout_rng),
        _ => Ok(x),
    }
}

/// Runs all layers of one stack over `x` (`tokens x width`).
pub(crate) fn run_stack(
    tape: &mut Tape,
    x: Var,
    stack: &BoundStack,
    cfg: &EncoderConfig,
    mode: &mut Mode,
) -> Result<Var> {
    let mut h = x;
    match stack {
        BoundStack::Encoder(layers) => {
            for layer in layers {
                h = encoder_layer(tape, h, layer, cfg.n_heads, cfg.dropout, mode)?;
            }
        }
        BoundStack::Mlp(layers) => {
            for layer in layers {
                h = mlp_layer(tape, h, layer, cfg.dropout, mode)?;
            }
        }
    }
    Ok(h)
}

/// One self-attention encoder layer.
fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    l: &BoundEncLayer,
    n_heads: usize,
    dropout: f64,
    mode: &mut Mode,
) -> Result<Var> {
    let (_, d) = tape.value(x).dims2("encoder_layer")?;
    debug_assert_eq!(d % n_heads, 0, "validated in ScorerConfig");
    let dh = d / n_heads;

    let q = linear(tape, x, l.q)?;
    let k = linear(tape, x, l.k)?;
    let v = linear(tape, x, l.v)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax(scores, 1)?;
        let attn = maybe_dropout(tape, attn, dropout, mode)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let proj = linear(tape, merged, l.o)?;
    let proj = maybe_dropout(tape, proj, dropout, mode)?;
    let sum1 = tape.add(x, proj)?;
    let x1 = tape.layer_norm(sum1, l.ln1_g, l.ln1_b, super::LAYER_NORM_EPS)?;

    let h1 = linear(tape, x1, l.ff1)?;
    let h1 = tape.relu(h1)?;
    let h2 = linear(tape, h1, l.ff2)?;
    let h2 = maybe_dropout(tape, h2, dropout, mode)?;
    let sum2 = tape.add(x1, h2)?;
    tape.layer_norm(sum2, l.ln2_g, l.ln2_b, super::LAYER_NORM_EPS)
}

/// One feedforward baseline layer: a two-layer ReLU block applied to each
/// token independently; no attention, residual, or normalization.
fn mlp_layer(
    tape: &mut Tape,
    x: Var,
    l: &BoundMlpLayer,
    dropout: f64,
    mode: &mut Mode,
) -> Result<Var> {
    let h = linear(tape, x, l.ff1)?;
    let h = tape.relu(h)?;
    let h = linear(tape, h, l.ff2)?;
    maybe_dropout(tape, h, dropout, mode)
}
