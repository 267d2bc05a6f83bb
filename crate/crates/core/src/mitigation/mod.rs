//! Fine-tuning a model toward a desired gender distribution.

mod loss;
mod stats;
mod sweep;
mod train;

pub use loss::{
    adaptive_loss, batch_category, combined_loss, combined_term, lm_term, record_kl, uniform_kl_loss,
    weighted_adaptive_loss, weighted_adaptive_term, LossBreakdown, LossKind,
};
pub use stats::{
    ema_update, stability_weight, var_factor, welford_update, GroupState, StabilityConstants, Welford,
    ALPHA_HIGH_KL, ALPHA_LOW_KL,
};
pub use sweep::{
    drop_percent, evaluate, multi_seed_run, select_hyperparameters, sweep, write_sweep_csv, EvalSet,
    Evaluation, MultiSeedReport, MultiSeedSummary, SeedRun, SweepPoint, SweepRun,
};
pub use train::{
    batch_step, evaluate_models, finetune, make_batches, validation_stats, write_history_csv,
    write_validation_curve_csv, FinetuneData, FinetuneOutcome, HistoryRow, TrainConfig, BATCH_SIZE_GRID,
    BETA_GRID, DEFAULT_SEEDS, GAMMA_GRID,
};
