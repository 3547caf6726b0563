use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::SvtrConfig;
use crate::error::{Result, SvtrError};
use crate::tensor::{numel, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with σ = 0.02, redrawn beyond 2σ.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trained by the optimizer.
    Param,
    /// Running statistic, saved but never trained.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: EntryKind,
    /// Whether weight decay applies.
    pub decay: bool,
    /// Top-level module for audit breakdowns, e.g. `stage1` or `head`.
    pub module: String,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Name of the classifier module, excluded from audit totals.
pub const HEAD: &str = "head";

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn push(&mut self, module: &str, name: String, shape: &[usize], init: Init, kind: EntryKind, decay: bool) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            kind,
            decay,
            module: module.to_string(),
        });
    }

    fn weight(&mut self, module: &str, name: String, shape: &[usize]) {
        self.push(module, name, shape, Init::TruncNormal, EntryKind::Param, true);
    }

    fn bias(&mut self, module: &str, name: String, len: usize) {
        self.push(module, name, &[len], Init::Zeros, EntryKind::Param, false);
    }

    fn linear(&mut self, module: &str, prefix: &str, d_in: usize, d_out: usize) {
        self.weight(module, format!("{prefix}.weight"), &[d_in, d_out]);
        self.bias(module, format!("{prefix}.bias"), d_out);
    }

    fn conv(&mut self, module: &str, prefix: &str, c_in: usize, c_out: usize) {
        self.weight(module, format!("{prefix}.weight"), &[c_out, c_in, 3, 3]);
        self.bias(module, format!("{prefix}.bias"), c_out);
    }

    fn norm(&mut self, module: &str, prefix: &str, d: usize) {
        self.push(module, format!("{prefix}.weight"), &[d], Init::Ones, EntryKind::Param, false);
        self.push(module, format!("{prefix}.bias"), &[d], Init::Zeros, EntryKind::Param, false);
    }

    fn batchnorm(&mut self, module: &str, prefix: &str, d: usize) {
        self.norm(module, prefix, d);
        self.push(module, format!("{prefix}.running_mean"), &[d], Init::Zeros, EntryKind::Buffer, false);
        self.push(module, format!("{prefix}.running_var"), &[d], Init::Ones, EntryKind::Buffer, false);
    }
}

/// Every tensor the model owns, in construction order.
pub fn param_specs(cfg: &SvtrConfig) -> Vec<ParamSpec> {
    let mut b = SpecBuilder(Vec::new());
    let geo = cfg.stage_geometry();
    let d0 = cfg.embed_dims[0];
    let pe = "patch_embed";
    b.conv(pe, "patch_embed.conv1", 3, d0 / 2);
    b.batchnorm(pe, "patch_embed.bn1", d0 / 2);
    b.conv(pe, "patch_embed.conv2", d0 / 2, d0);
    b.batchnorm(pe, "patch_embed.bn2", d0);
    b.weight("pos_embed", "pos_embed".into(), &[geo[0].tokens(), d0]);
    for s in 0..3 {
        let d = cfg.embed_dims[s];
        let hidden = cfg.mlp_hidden(d);
        let module = format!("stage{}", s + 1);
        for j in 0..cfg.depths[s] {
            let p = block_prefix(s, j);
            b.norm(&module, &format!("{p}.norm1"), d);
            b.linear(&module, &format!("{p}.attn.qkv"), d, 3 * d);
            b.linear(&module, &format!("{p}.attn.proj"), d, d);
            b.norm(&module, &format!("{p}.norm2"), d);
            b.linear(&module, &format!("{p}.mlp.fc1"), d, hidden);
            b.linear(&module, &format!("{p}.mlp.fc2"), hidden, d);
        }
        if s < 2 {
            let module = format!("merge{}", s + 1);
            let p = format!("merges.{s}");
            b.conv(&module, &format!("{p}.conv"), d, cfg.embed_dims[s + 1]);
            b.norm(&module, &format!("{p}.norm"), cfg.embed_dims[s + 1]);
        }
    }
    b.linear("combine", "combine.fc", cfg.embed_dims[2], cfg.combined_dim);
    b.linear(HEAD, "head", cfg.combined_dim, cfg.charset_size);
    b.0
}

pub(crate) fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub tensor: Tensor<T>,
    pub kind: EntryKind,
    pub decay: bool,
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: IndexMap::new() }
    }
}

impl<T: Element> ParamStore<T> {
    /// Allocates and initializes every spec, drawing in spec order.
    pub fn from_specs<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut store = Self::default();
        for s in specs {
            let tensor = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
                Init::TruncNormal => Tensor::from_fn(&s.shape, |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 0.04 {
                        break T::from_f64(v);
                    }
                }),
            };
            store.insert(s.name.clone(), tensor, s.kind, s.decay);
        }
        store
    }

    pub fn insert(&mut self, name: String, tensor: Tensor<T>, kind: EntryKind, decay: bool) {
        self.entries.insert(name, Entry { tensor, kind, decay });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entry(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| SvtrError::Contract(format!("no tensor named {name:?}")))
    }

    pub fn entry(&self, name: &str) -> Result<&Entry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| SvtrError::Contract(format!("no tensor named {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable entries only.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, e)| e.kind == EntryKind::Param).map(|(n, e)| (n, &e.tensor))
    }

    /// Scalar count over trainable entries.
    pub fn num_params(&self) -> usize {
        self.params().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    let entry = Entry {
                        tensor: e.tensor.cast(),
                        kind: e.kind,
                        decay: e.decay,
                    };
                    (k.clone(), entry)
                })
                .collect(),
        }
    }
}
