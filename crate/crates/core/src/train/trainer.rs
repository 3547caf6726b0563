use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adamw::{clip_global_norm, AdamWConfig, Grads, OptimState};
use super::checkpoint::Checkpoint;
use super::schedule::{peak_lr_for_batch, LrSchedule};
use crate::autodiff::Graph;
use crate::ctc::{edit_accuracy, greedy_decode, LabelSeq};
use crate::data::{stack_images, LabeledSample};
use crate::error::{Result, SvtrError};
use crate::model::{Mode, SvtrModel};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Defaults to the batch-size rule in [`peak_lr_for_batch`].
    pub peak_lr: Option<f64>,
    pub warmup_steps: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adamw: AdamWConfig,
    /// Writes `last.ckpt` every epoch and `best.ckpt` on improvement.
    pub checkpoint_dir: Option<PathBuf>,
    /// Appends one line per record.
    pub log_path: Option<PathBuf>,
    /// Stop once the evaluation accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            seed: 42,
            peak_lr: None,
            warmup_steps: 0,
            clip_norm: Some(5.0),
            adamw: AdamWConfig::default(),
            checkpoint_dir: None,
            log_path: None,
            stop_at_accuracy: None,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        loss: f64,
        accuracy: f64,
        norm_edit_sim: f64,
    },
}

impl fmt::Display for LogRecord {
    /// `kind=step step=.. epoch=.. lr=.. loss=.. accuracy=-` or
    /// `kind=epoch epoch=.. lr=.. loss=.. accuracy=.. norm_edit_sim=..`.
    /// Floats are written in shortest round-trip form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogRecord::Step { step, epoch, lr, loss } => {
                write!(f, "kind=step step={step} epoch={epoch} lr={lr:?} loss={loss:?} accuracy=-")
            }
            LogRecord::Epoch {
                epoch,
                lr,
                loss,
                accuracy,
                norm_edit_sim,
            } => write!(
                f,
                "kind=epoch epoch={epoch} lr={lr:?} loss={loss:?} accuracy={accuracy:?} norm_edit_sim={norm_edit_sim:?}"
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LogRecord>,
    pub steps: u64,
    pub epochs_run: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

impl TrainReport {
    pub fn step_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub predicted: LabelSeq,
    pub truth: LabelSeq,
    pub exact: bool,
    pub norm_edit_sim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub word_accuracy: f64,
    pub norm_edit_sim: f64,
    pub records: Vec<SampleRecord>,
    pub warning: Option<String>,
}

/// Greedy-decodes every sample in eval mode. An empty dataset scores 0
/// with a warning.
pub fn evaluate(model: &SvtrModel, dataset: &[LabeledSample], batch_size: usize) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Ok(EvalReport {
            word_accuracy: 0.0,
            norm_edit_sim: 0.0,
            records: Vec::new(),
            warning: Some("empty dataset; accuracy defined as 0".into()),
        });
    }
    let mut records = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(batch_size.max(1)) {
        let logits = model.predict(&stack_images(chunk.iter().map(|s| &s.image))?)?;
        for (s, pred) in chunk.iter().zip(greedy_decode(&logits)?) {
            let score = edit_accuracy(&pred, &s.label);
            records.push(SampleRecord {
                id: s.id.clone(),
                predicted: pred,
                truth: s.label.clone(),
                exact: score.exact,
                norm_edit_sim: score.norm_edit_sim,
            });
        }
    }
    let n = records.len() as f64;
    Ok(EvalReport {
        word_accuracy: records.iter().filter(|r| r.exact).count() as f64 / n,
        norm_edit_sim: records.iter().map(|r| r.norm_edit_sim).sum::<f64>() / n,
        records,
        warning: None,
    })
}

/// Loss and gradients of one batch; does not touch the parameters.
pub fn batch_gradients(model: &SvtrModel, batch: &[&LabeledSample], graph_seed: u64) -> Result<(f64, Grads, Vec<(String, crate::autodiff::BatchStats)>)> {
    let images = stack_images(batch.iter().map(|s| &s.image))?;
    let labels: Vec<LabelSeq> = batch.iter().map(|s| s.label.clone()).collect();
    let mut g = Graph::with_seed(graph_seed);
    let fwd = model.forward_mode(&mut g, &images, Mode::Train)?;
    let lp = g.log_softmax(fwd.logits)?;
    let loss = g.ctc_loss(lp, &labels)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok((value, Grads::new(), fwd.bn_stats));
    }
    g.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .map(|(name, v)| {
            let grad = g.grad(*v).expect("trainable leaves receive gradients");
            (name.clone(), grad.iter().map(|&x| x as f64).collect())
        })
        .collect();
    Ok((value, grads, fwd.bn_stats))
}

fn graph_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Mini-batch AdamW with CTC loss. `eval_set` supplies the per-epoch
/// accuracy (pass the training set to measure fit).
pub fn train(
    model: &mut SvtrModel,
    train_set: &[LabeledSample],
    eval_set: &[LabeledSample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(SvtrError::Contract("training set is empty".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(SvtrError::Config("epochs and batch size must be positive".into()));
    }
    let frames = model.config().frames();
    if let Some((i, s)) = train_set.iter().enumerate().find(|(_, s)| 2 * s.label.len() + 1 > frames) {
        return Err(SvtrError::Feasibility {
            sample: i,
            label_len: s.label.len(),
            needed: 2 * s.label.len() + 1,
            frames,
        });
    }
    let mut log = match &opts.log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| SvtrError::io(p, e))?),
        None => None,
    };
    let mut emit = |rec: &LogRecord, path: &Option<PathBuf>| -> Result<()> {
        if let (Some(f), Some(p)) = (log.as_mut(), path) {
            writeln!(f, "{rec}").map_err(|e| SvtrError::io(p, e))?;
        }
        Ok(())
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| SvtrError::io(dir, e))?;
    }

    let batches_per_epoch = train_set.len().div_ceil(opts.batch_size);
    let total = (opts.epochs * batches_per_epoch) as u64;
    let peak = opts.peak_lr.unwrap_or_else(|| peak_lr_for_batch(opts.batch_size));
    let schedule = LrSchedule::new(peak, opts.warmup_steps.min(total - 1), total)?;
    let mut optim = OptimState::new(opts.adamw, model.store());

    let mut records = Vec::new();
    let mut step = 0u64;
    let (mut best, mut last_acc, mut epochs_run) = (f64::NEG_INFINITY, 0.0, 0);
    for epoch in 0..opts.epochs {
        let order = epoch_order(train_set.len(), opts.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads, stats) = batch_gradients(model, &batch, graph_seed(opts.seed, step))?;
            if !loss.is_finite() {
                return Err(SvtrError::Divergence { step, loss });
            }
            if let Some(max) = opts.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            lr = schedule.lr_at(step)?;
            optim.step(model.store_mut(), &grads, lr)?;
            model.commit_stats(&stats)?;
            let rec = LogRecord::Step { step, epoch, lr, loss };
            emit(&rec, &opts.log_path)?;
            records.push(rec);
            loss_sum += loss;
            step += 1;
        }
        let eval = evaluate(model, eval_set, opts.batch_size.max(32))?;
        last_acc = eval.word_accuracy;
        epochs_run = epoch + 1;
        let rec = LogRecord::Epoch {
            epoch,
            lr,
            loss: loss_sum / batches_per_epoch as f64,
            accuracy: eval.word_accuracy,
            norm_edit_sim: eval.norm_edit_sim,
        };
        emit(&rec, &opts.log_path)?;
        log::info!("{rec}");
        records.push(rec);
        if let Some(dir) = &opts.checkpoint_dir {
            let metrics = vec![
                ("word_accuracy".to_string(), eval.word_accuracy),
                ("norm_edit_sim".to_string(), eval.norm_edit_sim),
            ];
            let ck = Checkpoint::from_model(model, step, metrics);
            ck.save(&dir.join("last.ckpt"))?;
            if eval.word_accuracy > best {
                ck.save(&dir.join("best.ckpt"))?;
            }
        }
        best = best.max(eval.word_accuracy);
        if opts.stop_at_accuracy.is_some_and(|t| eval.word_accuracy >= t) {
            break;
        }
    }
    Ok(TrainReport {
        records,
        steps: step,
        epochs_run,
        final_accuracy: last_acc,
        best_accuracy: best,
    })
}

/// Parses a metrics log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| SvtrError::io(path, e))?;
    let bad = |n: usize, m: &str| SvtrError::Dataset {
        path: path.to_path_buf(),
        line: n + 1,
        message: m.to_string(),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: std::collections::HashMap<&str, &str> = line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let num = |k: &str| -> Result<f64> {
            fields.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, &format!("missing or bad {k}")))
        };
        let rec = match fields.get("kind") {
            Some(&"step") => LogRecord::Step {
                step: num("step")? as u64,
                epoch: num("epoch")? as usize,
                lr: num("lr")?,
                loss: num("loss")?,
            },
            Some(&"epoch") => LogRecord::Epoch {
                epoch: num("epoch")? as usize,
                lr: num("lr")?,
                loss: num("loss")?,
                accuracy: num("accuracy")?,
                norm_edit_sim: num("norm_edit_sim")?,
            },
            _ => return Err(bad(n, "unknown record kind")),
        };
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::Charset;
    use crate::data::{gen_dataset, Style};
    use crate::model::SvtrConfig;

    fn tiny_set(n: usize) -> Vec<LabeledSample> {
        gen_dataset(n, &Charset::english(), 1..=5, 16, 64, &Style::default(), 7).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let data = tiny_set(4);
        let mut m: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 1).unwrap();
        let before = m.store().clone();
        let opts = TrainOptions {
            batch_size: 4,
            peak_lr: Some(0.0),
            ..Default::default()
        };
        let r = train(&mut m, &data, &data, &opts).unwrap();
        assert!(r.step_losses()[0].is_finite());
        for ((n, a), (_, b)) in m.store().params().zip(before.params()) {
            assert_eq!(a, b, "{n}");
        }
    }

    #[test]
    fn empty_eval_warns() {
        let m: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 1).unwrap();
        let r = evaluate(&m, &[], 8).unwrap();
        assert_eq!(r.word_accuracy, 0.0);
        assert!(r.warning.is_some());
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.txt");
        let data = tiny_set(4);
        let mut m: SvtrModel = SvtrModel::new(SvtrConfig::micro(), 1).unwrap();
        let opts = TrainOptions {
            batch_size: 2,
            epochs: 2,
            peak_lr: Some(1e-3),
            log_path: Some(path.clone()),
            ..Default::default()
        };
        let r = train(&mut m, &data, &data, &opts).unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back.len(), r.records.len());
        assert!(matches!(back[2], LogRecord::Epoch { epoch: 0, .. }));
    }
}
