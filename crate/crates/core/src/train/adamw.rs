use indexmap::IndexMap;

use crate::error::{Result, SvtrError};
use crate::model::{EntryKind, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub shape: Vec<usize>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-parameter Adam moments and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

/// Gradients keyed by parameter name.
pub type Grads = IndexMap<String, Vec<f64>>;

impl OptimState {
    /// Zero moments shaped like every trainable entry of `store`.
    pub fn new<T: Element>(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let moments = store
            .params()
            .map(|(name, t)| {
                let m = Moments {
                    shape: t.shape().to_vec(),
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                };
                (name.to_string(), m)
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// Decoupled decay, then a bias-corrected Adam update, on every
    /// trainable entry. Entries flagged without decay skip the decay term.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &Grads, lr: f64) -> Result<()> {
        for (name, entry) in store.iter() {
            if entry.kind != EntryKind::Param {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| SvtrError::Contract(format!("missing gradient for parameter {name}")))?;
            if g.len() != entry.tensor.numel() {
                return Err(SvtrError::Shape(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    entry.tensor.numel()
                )));
            }
            if !self.moments.contains_key(name) {
                return Err(SvtrError::Contract(format!("no optimizer state for parameter {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, entry) in store.iter_mut() {
            if entry.kind != EntryKind::Param {
                continue;
            }
            let g = &grads[name];
            let mom = self.moments.get_mut(name).expect("checked above");
            let decay = if entry.decay { 1.0 - lr * c.weight_decay } else { 1.0 };
            for (i, p) in entry.tensor.data_mut().iter_mut().enumerate() {
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g[i];
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (mom.m[i] / bc1) / ((mom.v[i] / bc2).sqrt() + c.eps);
                *p = T::from_f64(p.as_f64() * decay - lr * update);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(value: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.insert("w".into(), Tensor::full(&[1], value), EntryKind::Param, decay);
        s
    }

    fn grads(g: f64) -> Grads {
        [("w".to_string(), vec![g])].into_iter().collect()
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = store(0.7, true);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimState::new(cfg, &s);
        st.step(&mut s, &grads(0.0), 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decay_only_scales() {
        let mut s = store(2.0, true);
        let mut st = OptimState::new(AdamWConfig::default(), &s);
        st.step(&mut s, &grads(0.0), 0.01).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 2.0 * (1.0 - 5e-4));
    }

    #[test]
    fn exempt_entries_do_not_decay() {
        let mut s = store(2.0, false);
        let mut st = OptimState::new(AdamWConfig::default(), &s);
        st.step(&mut s, &grads(0.0), 0.01).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = store(1.0, true);
        let mut st = OptimState::new(AdamWConfig::default(), &s);
        let err = st.step(&mut s, &Grads::new(), 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g: Grads = [("a".to_string(), vec![3.0]), ("b".to_string(), vec![4.0])].into_iter().collect();
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15);
        assert!((g["b"][0] - 0.8).abs() < 1e-15);
    }
}
