use super::charset::LabelSeq;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditScore {
    pub exact: bool,
    /// `1 - levenshtein / max_len`; two empty sequences score 1.
    pub norm_edit_sim: f64,
}

pub fn levenshtein<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_accuracy(pred: &LabelSeq, truth: &LabelSeq) -> EditScore {
    let max_len = pred.len().max(truth.len());
    let norm_edit_sim = if max_len == 0 {
        1.0
    } else {
        1.0 - levenshtein(pred.as_slice(), truth.as_slice()) as f64 / max_len as f64
    };
    EditScore {
        exact: pred == truth,
        norm_edit_sim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[usize]) -> LabelSeq {
        LabelSeq::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identical() {
        let s = edit_accuracy(&seq(&[1, 2, 3]), &seq(&[1, 2, 3]));
        assert!(s.exact);
        assert_eq!(s.norm_edit_sim, 1.0);
    }

    #[test]
    fn one_substitution() {
        let s = edit_accuracy(&seq(&[1, 2, 3]), &seq(&[1, 2, 4]));
        assert!(!s.exact);
        assert!((s.norm_edit_sim - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty() {
        let s = edit_accuracy(&LabelSeq::empty(), &LabelSeq::empty());
        assert!(s.exact);
        assert_eq!(s.norm_edit_sim, 1.0);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein(b"abc", b""), 3);
    }
}
