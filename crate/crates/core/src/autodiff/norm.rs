use super::{Graph, Op, Var};
use crate::error::{Result, SvtrError};
use crate::tensor::Element;

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `dx` of a normalization over groups where `xhat = (x - mean) * inv_std`.
fn normalized_input_grad<'a>(dxhat: &'a [f64], xhat: &'a [f64], inv_std: f64) -> impl Iterator<Item = f64> + 'a {
    let n = dxhat.len() as f64;
    let sum_d: f64 = dxhat.iter().sum();
    let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum();
    dxhat
        .iter()
        .zip(xhat)
        .map(move |(d, x)| inv_std / n * (n * d - sum_d - x * sum_dx))
}

impl<T: Element> Graph<T> {
    /// Normalizes over the last dimension, then applies `gamma` and `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(SvtrError::Shape(format!(
                "layernorm over last dim {d} of {shape:?} got gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.data_f64(x);
        let (gd, bd) = (self.data_f64(gamma), self.data_f64(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out.push(T::from_f64(h * gd[j] + bd[j]));
            }
        }
        self.push(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub(super) fn layernorm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        gout: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let gd = self.data_f64(gamma);
        let d = gd.len();
        let mut res = Vec::new();
        if self.requires_grad(x) {
            let mut dx = Vec::with_capacity(gout.len());
            let mut dxhat = vec![0.0; d];
            for (r, &is) in inv_std.iter().enumerate() {
                for j in 0..d {
                    dxhat[j] = gout[r * d + j] * gd[j];
                }
                dx.extend(normalized_input_grad(&dxhat, &xhat[r * d..(r + 1) * d], is));
            }
            res.push((x, dx));
        }
        if self.requires_grad(gamma) {
            let mut dg = vec![0.0; d];
            for (i, (g, h)) in gout.iter().zip(xhat).enumerate() {
                dg[i % d] += g * h;
            }
            res.push((gamma, dg));
        }
        if self.requires_grad(beta) {
            let mut db = vec![0.0; d];
            for (i, g) in gout.iter().enumerate() {
                db[i % d] += g;
            }
            res.push((beta, db));
        }
        res
    }

    /// Per-channel normalization of `x: [b, c, h, w]`.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can fold them into its running estimates; otherwise the given
    /// running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        training: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(SvtrError::Shape(format!("batchnorm2d needs [b,c,h,w], got {shape:?}")));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for (name, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(SvtrError::Shape(format!("batchnorm2d {name} has {len} entries for {c} channels")));
            }
        }
        let xd = self.data_f64(x);
        let (gd, bd) = (self.data_f64(gamma), self.data_f64(beta));
        let count = (b * hw) as f64;
        let at = |bi: usize, ch: usize| (bi * c + ch) * hw;

        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            (0..c)
                .map(|ch| {
                    let vals = || (0..b).flat_map(|bi| xd[at(bi, ch)..at(bi, ch) + hw].iter().copied());
                    let m = vals().sum::<f64>() / count;
                    let v = vals().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
                    (m, v)
                })
                .unzip()
        } else {
            (
                running_mean.iter().map(|v| v.as_f64()).collect(),
                running_var.iter().map(|v| v.as_f64()).collect(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                for i in at(bi, ch)..at(bi, ch) + hw {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = T::from_f64(h * gd[ch] + bd[ch]);
                }
            }
        }
        let v = self.push(
            &shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, training.then_some(BatchStats { mean, var })))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn batchnorm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        training: bool,
        gout: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let shape = self.shape(x);
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let gd = self.data_f64(gamma);
        let at = |bi: usize, ch: usize| (bi * c + ch) * hw;
        let channel = |ch: usize, src: &[f64]| -> Vec<f64> {
            (0..b).flat_map(|bi| src[at(bi, ch)..at(bi, ch) + hw].iter().copied()).collect()
        };
        let mut res = Vec::new();
        if self.requires_grad(x) {
            let mut dx = vec![0.0; gout.len()];
            for ch in 0..c {
                let dxhat: Vec<f64> = channel(ch, gout).into_iter().map(|g| g * gd[ch]).collect();
                let grads: Vec<f64> = if training {
                    normalized_input_grad(&dxhat, &channel(ch, xhat), inv_std[ch]).collect()
                } else {
                    dxhat.iter().map(|d| d * inv_std[ch]).collect()
                };
                for bi in 0..b {
                    dx[at(bi, ch)..at(bi, ch) + hw].copy_from_slice(&grads[bi * hw..(bi + 1) * hw]);
                }
            }
            res.push((x, dx));
        }
        if self.requires_grad(gamma) {
            let dg = (0..c)
                .map(|ch| channel(ch, gout).iter().zip(channel(ch, xhat)).map(|(g, h)| g * h).sum())
                .collect();
            res.push((gamma, dg));
        }
        if self.requires_grad(beta) {
            let db = (0..c).map(|ch| channel(ch, gout).iter().sum()).collect();
            res.push((beta, db));
        }
        res
    }
}
