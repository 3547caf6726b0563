//! Parameter and multiply-accumulate accounting.

use indexmap::IndexMap;

use super::config::SvtrConfig;
use super::params::{param_specs, EntryKind, HEAD};

/// Published (parameters in millions, GFLOPs) per preset, classifier excluded.
pub const REFERENCE: [(&str, f64, f64); 4] = [
    ("svtr-t", 4.15, 0.29),
    ("svtr-s", 8.45, 0.63),
    ("svtr-b", 22.66, 3.55),
    ("svtr-l", 38.81, 6.07),
];

pub fn reference(preset: &str) -> Option<(f64, f64)> {
    REFERENCE.iter().find(|r| r.0 == preset).map(|r| (r.1, r.2))
}

/// Trainable scalars per top-level module, in network order, classifier included.
pub fn param_breakdown(cfg: &SvtrConfig) -> IndexMap<String, usize> {
    let mut out = IndexMap::new();
    for s in param_specs(cfg).into_iter().filter(|s| s.kind == EntryKind::Param) {
        *out.entry(s.module.clone()).or_insert(0) += s.numel();
    }
    out
}

/// Trainable scalars excluding the classifier.
pub fn count_params(cfg: &SvtrConfig) -> usize {
    param_breakdown(cfg).iter().filter(|(m, _)| m.as_str() != HEAD).map(|(_, n)| n).sum()
}

pub fn classifier_params(cfg: &SvtrConfig) -> usize {
    param_breakdown(cfg).get(HEAD).copied().unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlopKind {
    Conv,
    Linear,
    /// Score (QKᵀ) and context (AV) products.
    AttentionMatmul,
}

impl FlopKind {
    pub fn name(self) -> &'static str {
        match self {
            FlopKind::Conv => "conv",
            FlopKind::Linear => "linear",
            FlopKind::AttentionMatmul => "attn-matmul",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopEntry {
    pub module: String,
    pub layer: String,
    pub kind: FlopKind,
    pub macs: u64,
}

/// Per-layer MACs for one image at `input_h × input_w`, classifier excluded.
/// Masked attention entries are still counted.
pub fn flop_breakdown(cfg: &SvtrConfig) -> Vec<FlopEntry> {
    let mut out = Vec::new();
    let mut push = |module: &str, layer: String, kind: FlopKind, macs: usize| {
        out.push(FlopEntry {
            module: module.to_string(),
            layer,
            kind,
            macs: macs as u64,
        })
    };
    let d0 = cfg.embed_dims[0];
    let (h1, w1) = (cfg.input_h.div_ceil(2), cfg.input_w.div_ceil(2));
    push("patch_embed", "conv1".into(), FlopKind::Conv, h1 * w1 * (d0 / 2) * 3 * 9);
    let geo = cfg.stage_geometry();
    push("patch_embed", "conv2".into(), FlopKind::Conv, geo[0].tokens() * d0 * (d0 / 2) * 9);
    for s in 0..3 {
        let (n, d) = (geo[s].tokens(), geo[s].dim);
        let hidden = cfg.mlp_hidden(d);
        let module = format!("stage{}", s + 1);
        for j in 0..cfg.depths[s] {
            push(&module, format!("block{j}.qkv"), FlopKind::Linear, n * d * 3 * d);
            push(&module, format!("block{j}.scores"), FlopKind::AttentionMatmul, n * n * d);
            push(&module, format!("block{j}.context"), FlopKind::AttentionMatmul, n * n * d);
            push(&module, format!("block{j}.proj"), FlopKind::Linear, n * d * d);
            push(&module, format!("block{j}.fc1"), FlopKind::Linear, n * d * hidden);
            push(&module, format!("block{j}.fc2"), FlopKind::Linear, n * hidden * d);
        }
        if s < 2 {
            let next = geo[s + 1];
            push(&format!("merge{}", s + 1), "conv".into(), FlopKind::Conv, next.tokens() * next.dim * d * 9);
        }
    }
    push("combine", "fc".into(), FlopKind::Linear, geo[2].w * cfg.embed_dims[2] * cfg.combined_dim);
    out
}

/// Total MACs (one multiply-accumulate counted as one FLOP).
pub fn count_flops(cfg: &SvtrConfig) -> u64 {
    flop_breakdown(cfg).iter().map(|e| e.macs).sum()
}
