pub mod adamw;
pub mod checkpoint;
pub mod schedule;
pub mod trainer;

pub use adamw::{clip_global_norm, AdamWConfig, Grads, OptimState};
pub use checkpoint::Checkpoint;
pub use schedule::{peak_lr_for_batch, LrSchedule};
pub use trainer::{evaluate, read_log, train, EvalReport, LogRecord, SampleRecord, TrainOptions, TrainReport};
