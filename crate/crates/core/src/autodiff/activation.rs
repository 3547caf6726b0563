use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Op, Var};
use crate::error::{Result, SvtrError};
use crate::tensor::kernels::for_each_chunk;
use crate::tensor::{BoolMask, Element};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Softmax of one row over the allowed entries; disallowed entries get 0.
fn softmax_row<T: Element>(src: &[T], dst: &mut [T], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, v) in src.iter().enumerate() {
        if ok(j) {
            max = max.max(v.as_f64());
        }
    }
    let mut sum = 0.0;
    let mut exps = vec![0.0; src.len()];
    for (j, v) in src.iter().enumerate() {
        if ok(j) {
            let e = (v.as_f64() - max).exp();
            exps[j] = e;
            sum += e;
        }
    }
    for (d, e) in dst.iter_mut().zip(exps) {
        *d = T::from_f64(e / sum);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

impl<T: Element> Graph<T> {
    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(SvtrError::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        let mut row = vec![T::zero(); len];
        let mut res = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    row[j] = src[(o * len + j) * inner + i];
                }
                softmax_row(&row, &mut res, None);
                for j in 0..len {
                    out[(o * len + j) * inner + i] = res[j];
                }
            }
        }
        self.push(&shape, out, Op::Softmax { a, axis }, &[a])
    }

    /// Softmax over the last axis of `[.., n, n]` scores, restricted to the
    /// entries a query row is allowed to see. `None` allows everything and
    /// runs the same arithmetic as a full mask.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<Arc<BoolMask>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("rank >= 1");
        if let Some(m) = &mask {
            if shape.len() < 2 || shape[shape.len() - 2] != m.side() || n != m.side() {
                return Err(SvtrError::Shape(format!(
                    "mask of side {} does not match scores {shape:?}",
                    m.side()
                )));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        let rows_per_block = shape.get(shape.len().wrapping_sub(2)).copied().unwrap_or(1);
        for_each_chunk(&mut out, n, src.len() * 4, |r, dst| {
            let allowed = mask.as_ref().map(|m| m.row(r % rows_per_block));
            softmax_row(&src[r * n..(r + 1) * n], dst, allowed);
        });
        self.push(&shape, out, Op::MaskedSoftmax { a }, &[a])
    }

    pub(super) fn softmax_backward(&self, node: usize, a: Var, axis: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let y = self.nodes[node].value.to_f64_vec();
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let dot: f64 = (0..len).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                for j in 0..len {
                    dx[idx(j)] = y[idx(j)] * (gout[idx(j)] - dot);
                }
            }
        }
        vec![(a, dx)]
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("rank >= 1");
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| T::from_f64(v.as_f64() - lse)));
        }
        self.push(&shape, out, Op::LogSoftmax { a }, &[a])
    }

    pub(super) fn log_softmax_backward(&self, node: usize, a: Var, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let y = self.nodes[node].value.to_f64_vec();
        let n = *self.shape(a).last().expect("rank >= 1");
        let mut dx = Vec::with_capacity(y.len());
        for (yr, gr) in y.chunks(n).zip(gout.chunks(n)) {
            let s: f64 = gr.iter().sum();
            dx.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * s));
        }
        vec![(a, dx)]
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|v| T::from_f64(gelu(v.as_f64()))).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Gelu { a }, &[a]).expect("shape preserved")
    }

    pub(super) fn gelu_backward(&self, a: Var, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let x = self.data_f64(a);
        vec![(a, x.iter().zip(gout).map(|(x, g)| g * gelu_grad(*x)).collect())]
    }

    /// Inverted dropout. Identity (no node recorded) in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(SvtrError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.next_dropout_seed());
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(&scale)
            .map(|(v, s)| T::from_f64(v.as_f64() * s))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Dropout { a, scale }, &[a])
    }

    /// Mean over the height axis: `[b, c, h, w] -> [b, c, 1, w]`.
    pub fn mean_pool_height(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(SvtrError::Shape(format!("mean_pool_height needs [b,c,h,w], got {shape:?}")));
        }
        let (bc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(bc * w);
        for p in 0..bc {
            for x in 0..w {
                let s: f64 = (0..h).map(|y| src[(p * h + y) * w + x].as_f64()).sum();
                out.push(T::from_f64(s / h as f64));
            }
        }
        self.push(&[shape[0], shape[1], 1, w], out, Op::MeanPoolHeight { a }, &[a])
    }

    pub(super) fn mean_pool_height_backward(&self, a: Var, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let shape = self.shape(a);
        let (bc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let mut dx = vec![0.0; bc * h * w];
        for p in 0..bc {
            for y in 0..h {
                for x in 0..w {
                    dx[(p * h + y) * w + x] = gout[p * w + x] / h as f64;
                }
            }
        }
        vec![(a, dx)]
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.softmax(x, 2), Err(SvtrError::Shape(_))));
    }

    #[test]
    fn softmax_over_first_axis_normalizes_columns() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.5));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        for c in 0..2 {
            let s: f64 = (0..3).map(|r| d[r * 2 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_mask_matches_unmasked_bitwise() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(&[2, 4, 4], |i| ((i * 37) % 11) as f32 * 0.3 - 1.0));
        let a = g.masked_softmax(x, None).unwrap();
        let b = g.masked_softmax(x, Some(Arc::new(BoolMask::full(4)))).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn masked_entries_are_zero() {
        let mut allowed = vec![true; 9];
        allowed[1] = false;
        allowed[2] = false;
        let mask = Arc::new(BoolMask::new(3, allowed).unwrap());
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(&[3, 3], |i| i as f32));
        let y = g.masked_softmax(x, Some(mask)).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[..3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_side_mismatch_is_shape_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[4, 4]));
        let err = g.masked_softmax(x, Some(Arc::new(BoolMask::full(3)))).unwrap_err();
        assert!(matches!(err, SvtrError::Shape(_)));
    }

    #[test]
    fn mean_pool_of_column() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(&[1, 1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mean_pool_height(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(&[10], |i| i as f32));
        assert_eq!(g.dropout(x, 0.0, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false).unwrap(), x);
        assert!(g.dropout(x, 1.0, true).is_err());
    }

    #[test]
    fn dropout_scales_survivors_and_is_seeded() {
        let run = |seed| {
            let mut g = Graph::<f64>::with_seed(seed);
            let x = g.input(Tensor::ones(&[1000]));
            let y = g.dropout(x, 0.25, true).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run(7);
        assert!(a.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let dropped = a.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped), "{dropped}");
        assert_eq!(a, run(7));
        assert_ne!(a, run(8));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
    }
}
