use crate::error::{Result, SvtrError};
use crate::tensor::BoolMask;

/// Window mask over an `h × w` token grid (row-major tokens). Query `q` sees
/// key `k` iff both lie within the `wh × ww` window centred on `q`; the
/// window is clipped at the grid edges.
pub fn local_attention_mask(h: usize, w: usize, wh: usize, ww: usize) -> Result<BoolMask> {
    if h == 0 || w == 0 || wh == 0 || ww == 0 {
        return Err(SvtrError::Contract(format!("mask sizes must be positive, got grid {h}x{w} window {wh}x{ww}")));
    }
    if wh.is_multiple_of(2) || ww.is_multiple_of(2) {
        return Err(SvtrError::Contract(format!("window {wh}x{ww} must have odd sides")));
    }
    let (rh, rw) = ((wh - 1) / 2, (ww - 1) / 2);
    let n = h * w;
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        let (qr, qc) = (q / w, q % w);
        let row = &mut allowed[q * n..(q + 1) * n];
        for r in qr.saturating_sub(rh)..=(qr + rh).min(h - 1) {
            for c in qc.saturating_sub(rw)..=(qc + rw).min(w - 1) {
                row[r * w + c] = true;
            }
        }
    }
    BoolMask::new(n, allowed)
}
