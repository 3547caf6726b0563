use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{BlockKind, SvtrConfig};
use super::layers::{self, Bound, PassMode, RunningStats};
use super::mask::local_attention_mask;
use super::params::{block_prefix, param_specs, EntryKind, ParamStore};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Result, SvtrError};
use crate::tensor::{BoolMask, Element, Tensor};

/// Running-statistics momentum: `running = m·running + (1 − m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Attention probabilities of one block, `[b, heads, n, n]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub stage: usize,
    pub block: usize,
    pub probs: Var,
}

/// Handles into a recorded forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Trainable parameters as bound into the graph, in store order.
    pub params: Vec<(String, Var)>,
    /// Token count entering each stage.
    pub stage_tokens: [usize; 3],
    pub attention: Vec<AttentionRecord>,
    /// Batch statistics per batchnorm prefix (training mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct SvtrModel<T: Element = f32> {
    config: SvtrConfig,
    store: ParamStore<T>,
    masks: [Option<Arc<BoolMask>>; 3],
    mode: Mode,
}

impl<T: Element> SvtrModel<T> {
    /// Validates `config` and initializes every tensor from `seed`.
    pub fn new(config: SvtrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::from_specs(&param_specs(&config), &mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_store(config, store)
    }

    /// Wraps existing tensors; names and shapes must match `config` exactly.
    pub fn from_store(config: SvtrConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != store.len() {
            return Err(SvtrError::Compatibility(vec![format!(
                "tensor count {} vs expected {}",
                store.len(),
                specs.len()
            )]));
        }
        let mut problems = Vec::new();
        for (spec, (name, entry)) in specs.iter().zip(store.iter()) {
            if spec.name != name || spec.shape != entry.tensor.shape() || spec.kind != entry.kind {
                problems.push(format!(
                    "{name} {:?} vs expected {} {:?}",
                    entry.tensor.shape(),
                    spec.name,
                    spec.shape
                ));
            }
        }
        if !problems.is_empty() {
            return Err(SvtrError::Compatibility(problems));
        }
        let geo = config.stage_geometry();
        let mut masks = [None, None, None];
        for (s, slot) in masks.iter_mut().enumerate() {
            if config.stage_blocks(s).contains(&BlockKind::Local) {
                let m = local_attention_mask(geo[s].h, geo[s].w, config.window.0, config.window.1)?;
                *slot = Some(Arc::new(m));
            }
        }
        Ok(Self {
            config,
            store,
            masks,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &SvtrConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Window mask used by local blocks of `stage`, if any.
    pub fn mask(&self, stage: usize) -> Option<&Arc<BoolMask>> {
        self.masks.get(stage).and_then(|m| m.as_ref())
    }

    pub fn cast<U: Element>(&self) -> SvtrModel<U> {
        SvtrModel {
            config: self.config.clone(),
            store: self.store.cast(),
            masks: self.masks.clone(),
            mode: self.mode,
        }
    }

    fn pass_mode(&self, mode: Mode) -> PassMode {
        match mode {
            Mode::Eval => PassMode::eval(),
            Mode::Train => PassMode {
                training: true,
                dropout: self.config.dropout_rate,
                attn_dropout: self.config.attn_dropout_rate,
            },
        }
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = (self.config.input_h, self.config.input_w);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(SvtrError::Geometry(format!("model expects [b, 3, {h}, {w}] images, got {shape:?}")));
        }
        Ok(())
    }

    /// Records a forward pass of `images: [b, 3, H, W]` into `g`.
    ///
    /// In training mode parameters enter the graph as trainable leaves; in
    /// eval mode they are constants.
    pub fn forward_mode(&self, g: &mut Graph<T>, images: &Tensor<T>, mode: Mode) -> Result<Forward> {
        self.check_images(images.shape())?;
        let pass = self.pass_mode(mode);
        let x = g.input(images.clone());
        let mut bound = Bound::default();
        let mut params = Vec::new();
        for (name, entry) in self.store.iter() {
            if entry.kind != EntryKind::Param {
                continue;
            }
            let v = match mode {
                Mode::Train => g.param(entry.tensor.clone()),
                Mode::Eval => g.input(entry.tensor.clone()),
            };
            bound.insert(name, v);
            params.push((name.to_string(), v));
        }
        let store = &self.store;
        let stats = |prefix: &str| -> Result<RunningStats<'_, T>> {
            Ok(RunningStats {
                mean: store.get(&format!("{prefix}.running_mean"))?.data(),
                var: store.get(&format!("{prefix}.running_var"))?.data(),
            })
        };
        let (mut x, bn_stats) = layers::patch_embed(g, &bound, &stats, x, pass)?;

        let geo = self.config.stage_geometry();
        let mut stage_tokens = [0; 3];
        let mut attention = Vec::new();
        for s in 0..3 {
            stage_tokens[s] = g.shape(x)[1];
            for (j, &kind) in self.config.stage_blocks(s).iter().enumerate() {
                let (y, probs) = layers::mixing_block(
                    g,
                    &bound,
                    &block_prefix(s, j),
                    x,
                    kind,
                    self.config.heads[s],
                    self.masks[s].clone(),
                    pass,
                )?;
                attention.push(AttentionRecord { stage: s, block: j, probs });
                x = y;
            }
            if s < 2 {
                x = layers::merging(g, &bound, &format!("merges.{s}"), x, geo[s].h, geo[s].w)?;
            }
        }
        let x = layers::combining(g, &bound, x, geo[2].h, geo[2].w, pass)?;
        let logits = layers::classifier(g, &bound, x)?;
        Ok(Forward {
            logits,
            params,
            stage_tokens,
            attention,
            bn_stats,
        })
    }

    /// Forward in the model's current mode.
    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>) -> Result<Forward> {
        self.forward_mode(g, images, self.mode)
    }

    /// Folds batch statistics into the running estimates.
    pub fn commit_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, st) in stats {
            for (suffix, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                let t = self.store.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = T::from_f64(BN_MOMENTUM * r.as_f64() + (1.0 - BN_MOMENTUM) * b);
                }
            }
        }
        Ok(())
    }

    /// Eval-mode logits `[b, W/4, N]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.forward_mode(&mut g, images, Mode::Eval)?;
        Ok(g.value(f.logits).clone())
    }

    /// Eval-mode attention of one query over the stage grid, `[h_stage, W/4]`.
    /// `image` is `[3, H, W]` or `[1, 3, H, W]`.
    pub fn export_attention(
        &self,
        image: &Tensor<T>,
        stage: usize,
        block: usize,
        head: usize,
        query: usize,
    ) -> Result<Tensor<T>> {
        if stage >= 3 {
            return Err(SvtrError::Index(format!("stage {stage} out of range 0..3")));
        }
        let depth = self.config.depths[stage];
        if block >= depth {
            return Err(SvtrError::Index(format!("block {block} out of range 0..{depth} in stage {stage}")));
        }
        let heads = self.config.heads[stage];
        if head >= heads {
            return Err(SvtrError::Index(format!("head {head} out of range 0..{heads}")));
        }
        let geo = self.config.stage_geometry()[stage];
        let n = geo.tokens();
        if query >= n {
            return Err(SvtrError::Index(format!("query {query} out of range 0..{n}")));
        }
        let image = match image.rank() {
            3 => image.reshaped(&[1, 3, image.shape()[1], image.shape()[2]])?,
            _ => image.clone(),
        };
        let mut g = Graph::new();
        let f = self.forward_mode(&mut g, &image, Mode::Eval)?;
        let rec = f
            .attention
            .iter()
            .find(|r| r.stage == stage && r.block == block)
            .expect("every block records attention");
        let probs = g.value(rec.probs).data();
        let start = (head * n + query) * n;
        Tensor::new(&[geo.h, geo.w], probs[start..start + n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_logit_shape_and_tokens() {
        let cfg = SvtrConfig::micro();
        let m: SvtrModel = SvtrModel::new(cfg.clone(), 3).unwrap();
        let mut g = Graph::new();
        let f = m.forward_mode(&mut g, &Tensor::zeros(&[2, 3, 16, 64]), Mode::Eval).unwrap();
        assert_eq!(g.shape(f.logits), &[2, 16, 37]);
        assert_eq!(f.stage_tokens, [64, 32, 16]);
    }

    #[test]
    fn wrong_image_size_is_geometry_error() {
        let m: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 3).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 3, 16, 32])).unwrap_err();
        assert_eq!(err.kind(), "geometry");
    }

    #[test]
    fn construct_twice_identical() {
        let a: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 9).unwrap();
        let b: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 9).unwrap();
        assert_eq!(a.store(), b.store());
        let c: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 10).unwrap();
        assert_ne!(a.store(), c.store());
    }

    #[test]
    fn eval_is_deterministic() {
        let m: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 1).unwrap();
        let img = Tensor::from_fn(&[1, 3, 16, 64], |i| ((i * 37) % 101) as f32 / 101.0);
        assert_eq!(m.predict(&img).unwrap(), m.predict(&img).unwrap());
    }

    #[test]
    fn attention_map_sums_to_one_and_respects_window() {
        let m: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 1).unwrap();
        let img = Tensor::from_fn(&[3, 16, 64], |i| (i % 7) as f32 / 7.0);
        // stage 0 is local on a 4x16 grid; query (0, 0)
        let map = m.export_attention(&img, 0, 0, 0, 0).unwrap();
        assert_eq!(map.shape(), &[4, 16]);
        let total: f64 = map.data().iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-5);
        for r in 0..4 {
            for c in 0..16 {
                if r > 3 || c > 5 {
                    assert_eq!(map.data()[r * 16 + c], 0.0);
                }
            }
        }
        assert!(m.export_attention(&img, 0, 1, 0, 0).is_err());
        assert!(m.export_attention(&img, 1, 0, 2, 0).is_err());
    }

    #[test]
    fn stats_move_only_when_committed() {
        let mut m: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 1).unwrap();
        let img = Tensor::from_fn(&[2, 3, 16, 64], |i| (i % 5) as f32 / 5.0);
        let before = m.store().get("patch_embed.bn1.running_mean").unwrap().clone();
        let mut g = Graph::new();
        let f = m.forward_mode(&mut g, &img, Mode::Eval).unwrap();
        assert!(f.bn_stats.is_empty());
        let mut g = Graph::new();
        let f = m.forward_mode(&mut g, &img, Mode::Train).unwrap();
        assert_eq!(f.bn_stats.len(), 2);
        m.commit_stats(&f.bn_stats).unwrap();
        assert_ne!(m.store().get("patch_embed.bn1.running_mean").unwrap(), &before);
    }
}
