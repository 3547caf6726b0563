//! Connectionist temporal classification: charset, greedy decoding, the
//! training loss and word-level metrics.

mod charset;
mod decode;
mod loss;
mod metrics;

pub use charset::{Charset, LabelSeq, BLANK};
pub use decode::{best_path, collapse, greedy_decode};
pub use loss::{ctc_nll, frames_needed};
pub use metrics::{edit_accuracy, levenshtein, EditScore};
