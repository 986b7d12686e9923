//! Training-time defenses: label smoothing, logit squeezing, Gaussian noise
//! augmentation and adversarial training, and the loop that applies them.

pub mod config;
pub mod losses;
mod train;

pub use config::{parse_kv, Regime, TrainConfig};
pub use train::{adversarial_objective, batch_objective, train, BatchObjective, LogRecord, LossTerms, TrainLog};
