//! Losses, optimizer, density control and the training schedule.

mod adam;
mod config;
pub mod density;
mod loss;
mod trainer;

pub use adam::{adam_step, adam_step_columns, AdamState, GroupMoments, BETA1, BETA2, EPSILON};
pub use config::TrainConfig;
pub use density::{densify_and_prune, reset_opacity, DensifyReport, DensifyStats};
pub use loss::{
    loss_l1, loss_ssim, ssim, total_loss, LossOutput, MaskPenalty, SSIM_C1, SSIM_C2, SSIM_SIGMA,
    SSIM_WINDOW,
};
pub use trainer::{derive_seed, write_history_csv, HistoryRow, PruneEvent, Trainer, HISTORY_HEADER};
