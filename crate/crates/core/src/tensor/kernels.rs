//! Raw numeric kernels over flat row-major buffers.
//!
//! With the `parallel` feature, row- and batch-level loops run on the rayon
//! pool. Every output element is still computed by exactly one task in a
//! fixed order, so results are bit-identical to the sequential path.
//! [`set_parallel`] switches to the sequential path at runtime, which the
//! benches use to compare the two.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::Element;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Work (in multiply-accumulates) below which a loop stays sequential.
const PAR_MIN_WORK: usize = 1 << 14;

/// Smallest number of items per task that still carries `PAR_MIN_WORK`.
#[cfg(feature = "parallel")]
fn min_len(items: usize, work: usize) -> usize {
    (PAR_MIN_WORK * items / work.max(1)).max(1)
}

pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::SeqCst)
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= PAR_MIN_WORK && out.len() > chunk {
        let pieces = out.len().div_ceil(chunk);
        out.par_chunks_mut(chunk)
            .with_min_len(min_len(pieces, work))
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, in parallel when enabled. Order is preserved.
pub fn map_indices<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= PAR_MIN_WORK && n > 1 {
        return (0..n).into_par_iter().with_min_len(min_len(n, work)).map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

/// `out[m,n] = op(a) · op(b)` with `f64` accumulation.
///
/// `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let a_at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
    for_each_chunk(out, n, m * k * n, |i, row| {
        if tb {
            for (j, o) in row.iter_mut().enumerate() {
                let bj = &b[j * k..(j + 1) * k];
                let mut acc = 0.0f64;
                for (p, bv) in bj.iter().enumerate() {
                    acc += a_at(i, p).as_f64() * bv.as_f64();
                }
                *o = T::from_f64(acc);
            }
        } else {
            let mut acc = vec![0.0f64; n];
            for p in 0..k {
                let av = a_at(i, p).as_f64();
                if av == 0.0 {
                    continue;
                }
                for (s, bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *s += av * bv.as_f64();
                }
            }
            for (o, s) in row.iter_mut().zip(acc) {
                *o = T::from_f64(s);
            }
        }
    });
}

/// Convolution geometry for a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[c_in, h, w]` image into `[c_in·kh·kw, out_h·out_w]` columns.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_n = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride_h + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride_w + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inverse scatter of [`im2col`]: accumulates columns back into an image.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.out_len();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride_h + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride_w + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
