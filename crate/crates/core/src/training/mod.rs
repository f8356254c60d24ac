//! Optimization, early stopping, checkpoints and transfer chains.

mod chain;
mod checkpoint;
mod early_stop;
mod optim;
mod trainer;

pub use chain::{run_chain, HeadPolicy, Stage, TransferChain};
pub use checkpoint::{
    history_tsv, parse_history_tsv, read_blocks, Block, Checkpoint, FORMAT_VERSION, HISTORY_HEADER, MAGIC,
};
pub use early_stop::{simulate as simulate_early_stopping, EarlyStopping, StopDecision};
pub use optim::{clip_gradients, global_norm, Adam, BETA1, BETA2, EPSILON};
pub use trainer::{evaluate, train, train_with_evaluator, Evaluation, MetricRecord, TrainConfig, LOG_FLOOR};
