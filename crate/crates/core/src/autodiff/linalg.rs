use super::{Graph, Op, Var};
use crate::error::{Result, SvtrError};
use crate::tensor::broadcast::{broadcast_shapes, reduce_to_input, IndexMap};
use crate::tensor::kernels::{for_each_chunk, gemm};
use crate::tensor::{check_shape, numel, Element};

#[derive(Clone, Debug)]
pub(crate) struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// For each output batch, the source batch in `a` and `b`.
    a_src: Vec<usize>,
    b_src: Vec<usize>,
    a_batches: usize,
    b_batches: usize,
}

impl<T: Element> Graph<T> {
    /// Batched matrix product `[.., m, k] × [.., k, n] -> [.., m, n]`,
    /// broadcasting batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dim_err = || SvtrError::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(dim_err());
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);

        // [.., m, k] × [k, n] folds the batch into the row count.
        let (batch_shape, plan) = if bb.is_empty() {
            let rows = numel(ba) * m;
            (
                ba.to_vec(),
                MatMulPlan {
                    m: rows,
                    k,
                    n,
                    a_src: vec![0],
                    b_src: vec![0],
                    a_batches: 1,
                    b_batches: 1,
                },
            )
        } else {
            let out_batch = broadcast_shapes("matmul", ba, bb).map_err(|_| dim_err())?;
            let nb = numel(&out_batch);
            let ma = IndexMap::build(ba, &out_batch);
            let mb = IndexMap::build(bb, &out_batch);
            (
                out_batch,
                MatMulPlan {
                    m,
                    k,
                    n,
                    a_src: (0..nb).map(|i| if ba.is_empty() { 0 } else { ma.src(i) }).collect(),
                    b_src: (0..nb).map(|i| mb.src(i)).collect(),
                    a_batches: numel(ba),
                    b_batches: numel(bb),
                },
            )
        };

        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        check_shape(&out_shape)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (pm, pk, pn) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let work = pm * pk * pn;
        for_each_chunk(&mut out, pm * pn, work * plan.a_src.len(), |bi, chunk| {
            let abuf = &ad[plan.a_src[bi] * pm * pk..][..pm * pk];
            let bbuf = &bd[plan.b_src[bi] * pk * pn..][..pk * pn];
            gemm(abuf, bbuf, pm, pk, pn, false, false, chunk);
        });
        self.push(&out_shape, out, Op::MatMul { a, b, plan }, &[a, b])
    }

    pub(super) fn matmul_backward(&self, a: Var, b: Var, plan: &MatMulPlan, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut res = Vec::new();
        if self.requires_grad(a) {
            let bd = self.data_f64(b);
            let mut ga = vec![0.0; plan.a_batches * m * k];
            let mut tmp = vec![0.0; m * k];
            for (bi, (&sa, &sb)) in plan.a_src.iter().zip(&plan.b_src).enumerate() {
                gemm(&gout[bi * m * n..][..m * n], &bd[sb * k * n..][..k * n], m, n, k, false, true, &mut tmp);
                ga[sa * m * k..][..m * k].iter_mut().zip(&tmp).for_each(|(g, t)| *g += t);
            }
            res.push((a, ga));
        }
        if self.requires_grad(b) {
            let ad = self.data_f64(a);
            let mut gb = vec![0.0; plan.b_batches * k * n];
            let mut tmp = vec![0.0; k * n];
            for (bi, (&sa, &sb)) in plan.a_src.iter().zip(&plan.b_src).enumerate() {
                gemm(&ad[sa * m * k..][..m * k], &gout[bi * m * n..][..m * n], k, m, n, true, false, &mut tmp);
                gb[sb * k * n..][..k * n].iter_mut().zip(&tmp).for_each(|(g, t)| *g += t);
            }
            res.push((b, gb));
        }
        res
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>, IndexMap, IndexMap)> {
        let out_shape = broadcast_shapes(op_name, self.shape(a), self.shape(b))?;
        check_shape(&out_shape)?;
        let map_a = IndexMap::build(self.shape(a), &out_shape);
        let map_b = IndexMap::build(self.shape(b), &out_shape);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..numel(&out_shape))
            .map(|i| f(ad[map_a.src(i)], bd[map_b.src(i)]))
            .collect();
        Ok((out_shape, out, map_a, map_b))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, map_a, map_b) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(&shape, out, Op::Add { a, b, map_a, map_b }, &[a, b])
    }

    pub(super) fn add_backward(&self, a: Var, b: Var, map_a: &IndexMap, map_b: &IndexMap, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut res = Vec::new();
        if self.requires_grad(a) {
            res.push((a, reduce_to_input(gout, map_a, self.value(a).numel())));
        }
        if self.requires_grad(b) {
            res.push((b, reduce_to_input(gout, map_b, self.value(b).numel())));
        }
        res
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, map_a, map_b) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(&shape, out, Op::Mul { a, b, map_a, map_b }, &[a, b])
    }

    pub(super) fn mul_backward(&self, a: Var, b: Var, map_a: &IndexMap, map_b: &IndexMap, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (ad, bd) = (self.data_f64(a), self.data_f64(b));
        let mut res = Vec::new();
        if self.requires_grad(a) {
            let g: Vec<f64> = gout.iter().enumerate().map(|(i, g)| g * bd[map_b.src(i)]).collect();
            res.push((a, reduce_to_input(&g, map_a, ad.len())));
        }
        if self.requires_grad(b) {
            let g: Vec<f64> = gout.iter().enumerate().map(|(i, g)| g * ad[map_a.src(i)]).collect();
            res.push((b, reduce_to_input(&g, map_b, bd.len())));
        }
        res
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|v| T::from_f64(v.as_f64() * factor))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Scale { a, factor }, &[a])
            .expect("shape preserved")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push(&[1], vec![T::from_f64(s)], Op::Sum { a }, &[a])
            .expect("scalar shape")
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel() as f64;
        self.push(&[1], vec![T::from_f64(s)], Op::Mean { a }, &[a])
            .expect("scalar shape")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != self.value(a).numel() {
            return Err(SvtrError::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        self.push(shape, data, Op::Reshape { a }, &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(SvtrError::Shape(format!(
                "permutation {perm:?} invalid for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = permute_table(&shape, perm);
        let d = self.value(a).data();
        let out = src.iter().map(|&s| d[s]).collect();
        self.push(&out_shape, out, Op::Permute { a, perm: perm.to_vec() }, &[a])
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.value(a).rank();
        if d0 >= rank || d1 >= rank {
            return Err(SvtrError::Shape(format!("transpose axes ({d0}, {d1}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub(super) fn permute_backward(&self, a: Var, perm: &[usize], gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let src = permute_table(self.shape(a), perm);
        let mut g = vec![0.0; gout.len()];
        for (o, &s) in src.iter().enumerate() {
            g[s] = gout[o];
        }
        vec![(a, g)]
    }

    /// `a[..., start..start+len]`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().expect("rank >= 1");
        if len == 0 || start + len > last {
            return Err(SvtrError::Index(format!(
                "slice {start}..{} of last dim {last}",
                start + len
            )));
        }
        let rows = self.value(a).numel() / last;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * last + start..r * last + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = len;
        self.push(&out_shape, out, Op::SliceLast { a, start }, &[a])
    }

    pub(super) fn slice_backward(&self, a: Var, start: usize, out_shape: &[usize], gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let last = *self.shape(a).last().expect("rank >= 1");
        let len = *out_shape.last().expect("rank >= 1");
        let mut g = vec![0.0; self.value(a).numel()];
        for (r, chunk) in gout.chunks(len).enumerate() {
            g[r * last + start..r * last + start + len].copy_from_slice(chunk);
        }
        vec![(a, g)]
    }

    /// `x · w + b` with `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

/// Source flat index in the input for every flat index of the permuted output.
fn permute_table(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut table = Vec::with_capacity(total);
    let mut coord = vec![0usize; rank];
    for _ in 0..total {
        table.push(coord.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    table
}
