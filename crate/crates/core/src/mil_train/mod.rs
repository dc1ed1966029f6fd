//! Multiple-instance ranking: loss over bag maxima, pair sampling,
//! optimizers and the training loop.

mod loss;
mod optimizer;
mod sampler;
mod trainer;

pub use loss::{ranking_loss, BagScores, RankingLoss, RankingLossConfig};
pub use optimizer::{Optimizer, OptimizerKind};
pub use sampler::sample_pairs;
pub use trainer::{
    pool_manifest, score_bag, score_maps, score_pooled, train, HeldOut, LogEntry, PairRecord, PooledBag,
    Precision, StepReport, TrainConfig, Trainer, TrainingLog,
};
