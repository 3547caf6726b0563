//! Network pieces expressed on a [`Graph`]. Each takes its parameters from a
//! [`Bound`] map under a name prefix.

use std::sync::Arc;

use indexmap::IndexMap;

use super::config::BlockKind;
use crate::autodiff::{BatchStats, Conv2dSpec, Graph, Var};
use crate::error::{Result, SvtrError};
use crate::tensor::{BoolMask, Element};

pub const NORM_EPS: f64 = 1e-5;

/// Parameter name to graph variable.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn insert(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SvtrError::Contract(format!("parameter {name:?} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Dropout and normalization behaviour for one pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassMode {
    pub training: bool,
    pub dropout: f64,
    pub attn_dropout: f64,
}

impl PassMode {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            attn_dropout: 0.0,
        }
    }
}

fn linear<T: Element>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

fn layernorm<T: Element>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.layernorm(x, w, b, NORM_EPS)
}

fn conv<T: Element>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(b), spec)
}

/// Running statistics of one batchnorm layer.
pub struct RunningStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

/// `[b, 3, H, W]` images to `[b, (H/4)(W/4), D0]` tokens.
///
/// `stats(prefix)` supplies the running statistics of each batchnorm; in
/// training mode the batch statistics are returned under the same prefix.
pub fn patch_embed<'a, T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    stats: &dyn Fn(&str) -> Result<RunningStats<'a, T>>,
    images: Var,
    mode: PassMode,
) -> Result<(Var, Vec<(String, BatchStats)>)> {
    let mut batch_stats = Vec::new();
    let mut x = images;
    for i in 1..=2 {
        x = conv(g, p, &format!("patch_embed.conv{i}"), x, Conv2dSpec::new((2, 2), (1, 1)))?;
        let bn = format!("patch_embed.bn{i}");
        let rs = stats(&bn)?;
        let (gamma, beta) = (p.get(&format!("{bn}.weight"))?, p.get(&format!("{bn}.bias"))?);
        let (y, st) = g.batchnorm2d(x, gamma, beta, rs.mean, rs.var, mode.training, NORM_EPS)?;
        if let Some(st) = st {
            batch_stats.push((bn, st));
        }
        x = g.gelu(y);
    }
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let x = g.transpose(x, 1, 2)?;
    let x = g.add(x, p.get("pos_embed")?)?;
    let x = g.dropout(x, mode.dropout, mode.training)?;
    Ok((x, batch_stats))
}

/// Pre-norm transformer block on `[b, n, d]`. Returns the output and the
/// post-softmax attention `[b, heads, n, n]`.
///
/// Local blocks need a mask; global blocks ignore it.
#[allow(clippy::too_many_arguments)]
pub fn mixing_block<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    kind: BlockKind,
    heads: usize,
    mask: Option<Arc<BoolMask>>,
    mode: PassMode,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(SvtrError::Shape(format!("mixing block needs [b, n, d], got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(SvtrError::Contract(format!("dim {d} not divisible by {heads} heads")));
    }
    let mask = match kind {
        BlockKind::Global => None,
        BlockKind::Local => Some(mask.ok_or_else(|| SvtrError::Contract("local block needs a mask".into()))?),
    };
    let dh = d / heads;

    let h = layernorm(g, p, &format!("{prefix}.norm1"), x)?;
    let qkv = linear(g, p, &format!("{prefix}.attn.qkv"), h)?;
    let mut split = |i: usize, perm: &[usize]| -> Result<Var> {
        let part = g.slice_last(qkv, i * d, d)?;
        let part = g.reshape(part, &[b, n, heads, dh])?;
        g.permute(part, perm)
    };
    let q = split(0, &[0, 2, 1, 3])?;
    let k = split(1, &[0, 2, 3, 1])?;
    let v = split(2, &[0, 2, 1, 3])?;
    let scores = g.matmul(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.masked_softmax(scores, mask)?;
    let dropped = g.dropout(attn, mode.attn_dropout, mode.training)?;
    let ctx = g.matmul(dropped, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, d])?;
    let out = linear(g, p, &format!("{prefix}.attn.proj"), ctx)?;
    let out = g.dropout(out, mode.dropout, mode.training)?;
    let x = g.add(x, out)?;

    let h = layernorm(g, p, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = g.dropout(h, mode.dropout, mode.training)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h)?;
    let h = g.dropout(h, mode.dropout, mode.training)?;
    Ok((g.add(x, h)?, attn))
}

fn to_grid<T: Element>(g: &mut Graph<T>, x: Var, h: usize, w: usize, op: &str) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(SvtrError::Shape(format!("{op} expects [b, {h}*{w}, d], got {s:?}")));
    }
    let x = g.transpose(x, 1, 2)?;
    g.reshape(x, &[s[0], s[2], h, w])
}

/// `[b, h·w, d_in]` to `[b, (h/2)·w, d_out]`: 3×3 conv with stride (2, 1),
/// then layer norm over channels.
pub fn merging<T: Element>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, h: usize, w: usize) -> Result<Var> {
    if !h.is_multiple_of(2) {
        return Err(SvtrError::Geometry(format!("merging needs an even height, got {h}")));
    }
    let grid = to_grid(g, x, h, w, "merging")?;
    let y = conv(g, p, &format!("{prefix}.conv"), grid, Conv2dSpec::new((2, 1), (1, 1)))?;
    let s = g.shape(y).to_vec();
    let y = g.reshape(y, &[s[0], s[1], s[2] * s[3]])?;
    let y = g.transpose(y, 1, 2)?;
    layernorm(g, p, &format!("{prefix}.norm"), y)
}

/// `[b, h·w, d]` to `[b, w, D3]`: mean over height, linear, GELU, dropout.
pub fn combining<T: Element>(g: &mut Graph<T>, p: &Bound, x: Var, h: usize, w: usize, mode: PassMode) -> Result<Var> {
    let grid = to_grid(g, x, h, w, "combining")?;
    let pooled = g.mean_pool_height(grid)?;
    let s = g.shape(pooled).to_vec();
    let seq = g.reshape(pooled, &[s[0], s[1], w])?;
    let seq = g.transpose(seq, 1, 2)?;
    let y = linear(g, p, "combine.fc", seq)?;
    let y = g.gelu(y);
    g.dropout(y, mode.dropout, mode.training)
}

/// Per-position class scores.
pub fn classifier<T: Element>(g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
    linear(g, p, "head", x)
}
