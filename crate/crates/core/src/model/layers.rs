//! Differentiable building blocks of the network, recorded on a [`Tape`].
//!
//! Layout conventions: the shared timeline is `[d_embed, l]`; a folded scale
//! is segment-major, `[f, d_embed, p]`, so that each of the `f` segments is
//! one convolution input of `p` steps.

use super::params::{Affine, BlockParams, ParamTree};
use super::{BranchMerge, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};
use crate::spectral::PeriodSet;

/// Pointwise linear map over axis 0 (`[d, ...] -> [d_embed, ...]`),
/// optionally followed by GELU.
pub fn embed<T: Real>(tape: &mut Tape<T>, x: Var, p: &Affine<Var>, activate: bool) -> Result<Var> {
    let r = tape.shape(x).len();
    if r < 2 {
        return Err(Error::shape("embedding input needs rank >= 2"));
    }
    let to_last: Vec<usize> = (1..r).chain([0]).collect();
    let back: Vec<usize> = [r - 1].into_iter().chain(0..r - 1).collect();
    let xt = tape.permute(x, &to_last)?;
    let h = tape.matmul(xt, p.weight)?;
    let h = tape.add(h, p.bias)?;
    let h = if activate { tape.gelu(h) } else { h };
    tape.permute(h, &back)
}

/// Folds a `[c, l]` timeline onto `f` segments of `p` steps: `[f, c, p]`.
pub fn fold<T: Real>(tape: &mut Tape<T>, x: Var, frequency: usize, period: usize) -> Result<Var> {
    let [c, l] = *tape.shape(x) else {
        return Err(Error::shape("fold expects a [channels, length] timeline"));
    };
    if period * frequency < l {
        return Err(Error::shape(format!(
            "period {period} x frequency {frequency} does not cover length {l}"
        )));
    }
    let padded = tape.pad(x, 1, 0, period * frequency - l)?;
    let grid = tape.reshape(padded, &[c, frequency, period])?;
    tape.permute(grid, &[1, 0, 2])
}

/// Multi-kernel same-padded convolutions over each segment of `seg[f, D, p]`,
/// merged by elementwise mean (or concatenation plus a 1x1 projection), then
/// GELU.
pub fn local_extract<T: Real>(
    tape: &mut Tape<T>,
    seg: Var,
    block: &BlockParams<Var>,
    merge: BranchMerge,
) -> Result<Var> {
    if block.conv.is_empty() {
        return Err(Error::config("local extractor needs at least one kernel"));
    }
    let branches = block
        .conv
        .iter()
        .map(|c| tape.conv1d(seg, c.weight, c.bias))
        .collect::<Result<Vec<_>>>()?;
    let merged = match (merge, &block.merge) {
        (BranchMerge::Mean, _) => {
            let mut acc = branches[0];
            for &b in &branches[1..] {
                acc = tape.add(acc, b)?;
            }
            tape.scale(acc, T::one() / T::of(branches.len() as f64))
        }
        (BranchMerge::ConcatProject, Some(proj)) => {
            let cat = tape.concat(&branches, 1)?;
            tape.conv1d(cat, proj.weight, proj.bias)?
        }
        (BranchMerge::ConcatProject, None) => {
            return Err(Error::config("concat merge requires projection weights"))
        }
    };
    Ok(tape.gelu(merged))
}

/// Mean over the within-period axis: `[f, D, p] -> [f, D]`.
pub fn segment_pool<T: Real>(tape: &mut Tape<T>, seg: Var) -> Result<Var> {
    if tape.shape(seg).len() != 3 {
        return Err(Error::shape("segment_pool expects [f, D, p]"));
    }
    tape.mean(seg, 2)
}

/// Output of [`global_capture`].
pub struct Captured {
    /// `[f, D]`
    pub features: Var,
    /// `[h, f, f]`, rows sum to one.
    pub attention: Var,
}

/// Multi-head scaled dot-product self-attention over the `f` segment tokens
/// of `tokens[f, D]`.
pub fn global_capture<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    block: &BlockParams<Var>,
    heads: usize,
) -> Result<Captured> {
    let [f, d] = *tape.shape(tokens) else {
        return Err(Error::shape("global_capture expects [f, D] tokens"));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    let dk = d / heads;
    let mut split = |w: Var| -> Result<Var> {
        let proj = tape.matmul(tokens, w)?;
        let r = tape.reshape(proj, &[f, heads, dk])?;
        tape.permute(r, &[1, 0, 2])
    };
    let q = split(block.w_q)?;
    let k = split(block.w_k)?;
    let v = split(block.w_v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::of(dk as f64).sqrt());
    let attention = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(attention, v)?;
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, &[f, d])?;
    let features = tape.matmul(ctx, block.w_o)?;
    Ok(Captured {
        features,
        attention,
    })
}

/// Broadcasts each segment's vector across its `period` steps and trims to
/// `l`: `[f, D] -> [D, l]`.
pub fn scale_broadcast_back<T: Real>(
    tape: &mut Tape<T>,
    g: Var,
    period: usize,
    l: usize,
) -> Result<Var> {
    let [f, d] = *tape.shape(g) else {
        return Err(Error::shape("scale_broadcast_back expects [f, D]"));
    };
    if period * f < l {
        return Err(Error::shape(format!(
            "period {period} x {f} segments does not cover length {l}"
        )));
    }
    let gt = tape.transpose(g)?;
    let col = tape.reshape(gt, &[d, f, 1])?;
    let tiled = tape.broadcast_to(col, &[d, f, period])?;
    let flat = tape.reshape(tiled, &[d, f * period])?;
    tape.narrow(flat, 1, 0, l)
}

/// Unfolds `[f, D, p]` back to the `[D, l]` timeline.
pub fn unfold<T: Real>(tape: &mut Tape<T>, seg: Var, l: usize) -> Result<Var> {
    let [f, d, p] = *tape.shape(seg) else {
        return Err(Error::shape("unfold expects [f, D, p]"));
    };
    let t = tape.permute(seg, &[1, 0, 2])?;
    let flat = tape.reshape(t, &[d, f * p])?;
    tape.narrow(flat, 1, 0, l)
}

/// `sum_i alpha_i * outputs[i]` with `alpha = softmax(amps)`. Returns the
/// weights used.
pub fn aggregate<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[Var],
    amps: &[f64],
) -> Result<(Var, Vec<f64>)> {
    if outputs.is_empty() || outputs.len() != amps.len() {
        return Err(Error::shape(format!(
            "{} scale outputs for {} amplitudes",
            outputs.len(),
            amps.len()
        )));
    }
    let alpha = crate::spectral::amplitude_weights(amps);
    if outputs.len() == 1 {
        return Ok((outputs[0], alpha));
    }
    let mut acc = tape.scale(outputs[0], T::of(alpha[0]));
    for (&o, &a) in outputs[1..].iter().zip(&alpha[1..]) {
        let w = tape.scale(o, T::of(a));
        acc = tape.add(acc, w)?;
    }
    Ok((acc, alpha))
}

/// What a block leaves behind for interpretability.
pub struct BlockTrace {
    pub alpha: Vec<f64>,
    /// Per scale: `[h, f, f]` attention, absent for the no-global variant.
    pub attention: Vec<Option<Var>>,
}

/// One residual periodic block over the `[D, l]` timeline.
pub fn periodic_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    periods: &PeriodSet,
    amps: &[f64],
    block: &BlockParams<Var>,
    cfg: &ModelConfig,
) -> Result<(Var, BlockTrace)> {
    let l = tape.shape(x)[1];
    let mut outs = Vec::with_capacity(periods.k());
    let mut attention = Vec::with_capacity(periods.k());
    for e in &periods.entries {
        let seg = fold(tape, x, e.frequency, e.period)?;
        let local = match cfg.variant {
            Variant::NoLocal => seg,
            _ => local_extract(tape, seg, block, cfg.branch_merge)?,
        };
        let out = match cfg.variant {
            Variant::NoGlobal => {
                attention.push(None);
                unfold(tape, local, l)?
            }
            _ => {
                let tokens = segment_pool(tape, local)?;
                let cap = global_capture(tape, tokens, block, cfg.heads)?;
                attention.push(Some(cap.attention));
                scale_broadcast_back(tape, cap.features, e.period, l)?
            }
        };
        outs.push(out);
    }
    let (z, alpha) = aggregate(tape, &outs, amps)?;
    let y = tape.add(x, z)?;
    Ok((y, BlockTrace { alpha, attention }))
}

/// Global average over time, then the linear head: `[D, l] -> [C]`.
pub fn classify<T: Real>(tape: &mut Tape<T>, z: Var, head: &Affine<Var>) -> Result<Var> {
    let pooled = tape.mean(z, 1)?;
    let d = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, &[1, d])?;
    let logits = tape.matmul(row, head.weight)?;
    let logits = tape.add(logits, head.bias)?;
    let c = tape.shape(logits)[1];
    tape.reshape(logits, &[c])
}

/// Full forward pass for one `[d, l]` sample already on the tape.
pub fn forward_sample<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    amps: &[f64],
    params: &ParamTree<Var>,
    periods: &PeriodSet,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<BlockTrace>)> {
    let mut h = embed(tape, x, &params.embed, true)?;
    let mut traces = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, trace) = periodic_block(tape, h, periods, amps, block, cfg)?;
        h = next;
        traces.push(trace);
    }
    let logits = classify(tape, h, &params.head)?;
    Ok((logits, traces))
}
