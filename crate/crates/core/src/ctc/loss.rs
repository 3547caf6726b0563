//! CTC negative log-likelihood by the forward (α) and backward (β)
//! recursions over the blank-interleaved label, in log space.

use super::charset::{LabelSeq, BLANK};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Frames needed for a label of length `len`.
pub fn frames_needed(len: usize) -> usize {
    2 * len + 1
}

/// Negative log-likelihood of `label` under `log_probs` (`frames × classes`,
/// row-major) and its gradient with respect to every log-probability.
///
/// The caller guarantees feasibility and that every label index is a valid
/// non-blank class.
pub fn ctc_nll(log_probs: &[f64], frames: usize, classes: usize, label: &LabelSeq) -> (f64, Vec<f64>) {
    let lab = label.as_slice();
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(lab.iter().flat_map(|&k| [k, BLANK]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    // s may also come from s-2 when it is a symbol differing from the one two back
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }

    // α_t(s)·β_t(s) counts the emission at t twice; divide one out.
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        let mut occupancy = vec![ninf; classes];
        for s in 0..s_len {
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for (k, occ) in occupancy.into_iter().enumerate() {
            if occ != ninf {
                grad[t * classes + k] = -(occ - lp(t, k) - log_p).exp();
            }
        }
    }
    (-log_p, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_single_symbol() {
        let lp = [0.3f64.ln(), 0.7f64.ln()];
        let (nll, _) = ctc_nll(&lp, 1, 2, &LabelSeq::new(vec![1]).unwrap());
        assert!((nll + 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_sum_three_alignments() {
        // p(blank) = 0.4, p(a) = 0.6 at both frames
        let lp = [0.4f64.ln(), 0.6f64.ln(), 0.4f64.ln(), 0.6f64.ln()];
        let (nll, _) = ctc_nll(&lp, 2, 2, &LabelSeq::new(vec![1]).unwrap());
        let want = 0.6 * 0.6 + 0.4 * 0.6 + 0.6 * 0.4;
        assert!((nll + f64::ln(want)).abs() < 1e-12);
    }

    #[test]
    fn empty_label_is_all_blank() {
        let lp = [0.25f64.ln(), 0.75f64.ln(), 0.5f64.ln(), 0.5f64.ln()];
        let (nll, grad) = ctc_nll(&lp, 2, 2, &LabelSeq::empty());
        assert!((nll + (0.25f64 * 0.5).ln()).abs() < 1e-12);
        for (g, want) in grad.iter().zip([-1.0, 0.0, -1.0, 0.0]) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn occupancy_sums_to_one_per_frame() {
        let lp: Vec<f64> = (0..12).map(|i| -((i % 5) as f64) * 0.3 - 0.5).collect();
        let (_, grad) = ctc_nll(&lp, 4, 3, &LabelSeq::new(vec![1, 2]).unwrap());
        for row in grad.chunks(3) {
            assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-12);
        }
    }
}
