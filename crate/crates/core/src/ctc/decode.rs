use super::charset::{LabelSeq, BLANK};
use crate::error::{Result, SvtrError};
use crate::tensor::{Element, Tensor};

/// Per-step argmax; ties go to the lowest class index.
pub fn best_path<T: Element>(scores: &[T], classes: usize) -> Vec<usize> {
    scores
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Merges consecutive repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> LabelSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if prev != Some(k) && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSeq::from_vec_unchecked(out)
}

/// Greedy decoding of `[b, T, N]` scores (logits or log-probabilities).
pub fn greedy_decode<T: Element>(logits: &Tensor<T>) -> Result<Vec<LabelSeq>> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[2] < 2 {
        return Err(SvtrError::Shape(format!("greedy_decode needs [b, T, N >= 2], got {shape:?}")));
    }
    let per_row = shape[1] * shape[2];
    Ok(logits
        .data()
        .chunks(per_row)
        .map(|row| collapse(&best_path(row, shape[2])))
        .collect())
}
