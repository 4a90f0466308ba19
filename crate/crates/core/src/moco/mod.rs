//! Momentum-contrast pretraining.

mod config;
mod loss;
mod momentum;
mod queue;
mod train;

pub use config::{lr_at, PretrainConfig};
pub use loss::{cosine_sim, info_nce, info_nce_batch, info_nce_from_sims, info_nce_with_grad};
pub use momentum::momentum_update;
pub use queue::{enqueue_dequeue, KeyQueue};
pub use train::{pretrain, pretrain_scans, pretrain_step, EpochLog, MocoState, PretrainOutcome, PretrainRun};
