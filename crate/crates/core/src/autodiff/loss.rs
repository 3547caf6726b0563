use super::{Graph, Op, Var};
use crate::ctc::{ctc_nll, frames_needed, LabelSeq, BLANK};
use crate::error::{Result, SvtrError};
use crate::tensor::Element;

impl<T: Element> Graph<T> {
    /// Mean CTC negative log-likelihood of `log_probs: [b, T, N]`.
    ///
    /// Every label must satisfy `2·len + 1 <= T`; the first one that does not
    /// is reported by its batch index.
    pub fn ctc_loss(&mut self, log_probs: Var, labels: &[LabelSeq]) -> Result<Var> {
        let shape = self.shape(log_probs).to_vec();
        if shape.len() != 3 || shape[0] != labels.len() {
            return Err(SvtrError::Shape(format!(
                "ctc_loss needs [b, T, N] log-probs with b = {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let (batch, frames, classes) = (shape[0], shape[1], shape[2]);
        for (sample, label) in labels.iter().enumerate() {
            if frames_needed(label.len()) > frames {
                return Err(SvtrError::Feasibility {
                    sample,
                    label_len: label.len(),
                    needed: frames_needed(label.len()),
                    frames,
                });
            }
            if let Some(&bad) = label.as_slice().iter().find(|&&k| k == BLANK || k >= classes) {
                return Err(SvtrError::Index(format!("sample {sample}: class {bad} not in 1..{classes}")));
            }
        }
        let lp = self.data_f64(log_probs);
        let per = frames * classes;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(lp.len());
        for (b, label) in labels.iter().enumerate() {
            let (nll, g) = ctc_nll(&lp[b * per..(b + 1) * per], frames, classes, label);
            total += nll;
            grad.extend(g.into_iter().map(|v| v / batch as f64));
        }
        let loss = T::from_f64(total / batch as f64);
        self.push(&[1], vec![loss], Op::Ctc { a: log_probs, grad }, &[log_probs])
    }
}
