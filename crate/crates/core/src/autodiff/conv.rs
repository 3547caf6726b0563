use super::{Graph, Op, Var};
use crate::error::{Result, SvtrError};
use crate::tensor::kernels::{col2im, gemm, im2col, map_indices, ConvGeom};
use crate::tensor::Element;

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
        }
    }

    /// Output extent along one axis, `None` when it would be empty.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let span = (input + 2 * pad).checked_sub(kernel)?;
        Some(span / stride + 1)
    }
}

impl<T: Element> Graph<T> {
    /// Cross-correlation of `x: [b, c_in, h, w]` with `weight: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(SvtrError::Dimension {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(SvtrError::Dimension {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        if spec.stride_h == 0 || spec.stride_w == 0 {
            return Err(SvtrError::Geometry("conv2d stride must be positive".into()));
        }
        let (batch, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let out_h = Conv2dSpec::out_extent(h, kh, spec.stride_h, spec.pad_h);
        let out_w = Conv2dSpec::out_extent(w, kw, spec.stride_w, spec.pad_w);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(SvtrError::Geometry(format!(
                "conv2d output of input {h}x{w}, kernel {kh}x{kw}, padding ({}, {}) is empty",
                spec.pad_h, spec.pad_w
            )));
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride_h: spec.stride_h,
            stride_w: spec.stride_w,
            pad_h: spec.pad_h,
            pad_w: spec.pad_w,
            out_h,
            out_w,
        };
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = bias.map(|b| self.value(b).data());
        let img = c_in * h * w;
        let work = c_out * geom.patch_len() * geom.out_len();
        let per_image: Vec<Vec<T>> = map_indices(batch, work * batch, |bi| {
            let cols = im2col(&xd[bi * img..(bi + 1) * img], &geom);
            let mut out = vec![T::zero(); c_out * geom.out_len()];
            gemm(wd, &cols, c_out, geom.patch_len(), geom.out_len(), false, false, &mut out);
            if let Some(bd) = bd {
                for (row, &bv) in out.chunks_mut(geom.out_len()).zip(bd) {
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
            out
        });
        let data = per_image.concat();
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            &[batch, c_out, out_h, out_w],
            data,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                batch,
                geom,
            },
            &inputs,
        )
    }

    pub(super) fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        geom: &ConvGeom,
        gout: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let g = *geom;
        let (plen, olen) = (g.patch_len(), g.out_len());
        let img = g.c_in * g.h * g.w;
        let xd = self.data_f64(x);
        let wd = self.data_f64(w);
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let work = g.c_out * plen * olen;
        // per image: (dx, dw); summed over the batch in order afterwards
        let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = map_indices(batch, work * batch, |bi| {
            let go = &gout[bi * g.c_out * olen..(bi + 1) * g.c_out * olen];
            let dx = need_x.then(|| {
                let mut dcols = vec![0.0; plen * olen];
                gemm(&wd, go, plen, g.c_out, olen, true, false, &mut dcols);
                col2im(&dcols, &g)
            });
            let dw = need_w.then(|| {
                let cols = im2col(&xd[bi * img..(bi + 1) * img], &g);
                let mut dw = vec![0.0; g.c_out * plen];
                gemm(go, &cols, g.c_out, olen, plen, false, true, &mut dw);
                dw
            });
            (dx, dw)
        });
        let mut res = Vec::new();
        if need_x {
            let dx: Vec<f64> = parts.iter().flat_map(|(dx, _)| dx.as_ref().expect("computed").iter().copied()).collect();
            res.push((x, dx));
        }
        if need_w {
            let mut dw = vec![0.0; g.c_out * plen];
            for (_, part) in &parts {
                dw.iter_mut().zip(part.as_ref().expect("computed")).for_each(|(a, p)| *a += p);
            }
            res.push((w, dw));
        }
        if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
            let mut db = vec![0.0; g.c_out];
            for bi in 0..batch {
                for (c, d) in db.iter_mut().enumerate() {
                    *d += gout[(bi * g.c_out + c) * olen..][..olen].iter().sum::<f64>();
                }
            }
            res.push((b, db));
        }
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn all_ones_counts_neighbours() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::ones(&[1, 1, 4, 4]));
        let w = g.input(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, Conv2dSpec::new((1, 1), (1, 1))).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        let d = g.value(y).data();
        assert_eq!(d[5], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn stride_two_halves_both_axes() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 3, 32, 128]));
        let w = g.input(Tensor::zeros(&[8, 3, 3, 3]));
        let y = g.conv2d(x, w, None, Conv2dSpec::new((2, 2), (1, 1))).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 16, 64]);
    }

    #[test]
    fn empty_output_is_a_geometry_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.input(Tensor::zeros(&[1, 1, 5, 5]));
        let err = g.conv2d(x, w, None, Conv2dSpec::new((1, 1), (0, 0))).unwrap_err();
        assert!(matches!(err, SvtrError::Geometry(_)));
    }

    #[test]
    fn bias_is_added_per_channel() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 1, 3, 3]));
        let w = g.input(Tensor::zeros(&[2, 1, 3, 3]));
        let b = g.input(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let y = g.conv2d(x, w, Some(b), Conv2dSpec::new((1, 1), (1, 1))).unwrap();
        let d = g.value(y).data();
        assert!(d[..9].iter().all(|&v| v == 1.5));
        assert!(d[9..18].iter().all(|&v| v == -2.0));
    }
}
