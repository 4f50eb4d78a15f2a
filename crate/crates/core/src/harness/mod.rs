//! Experiment driver: synthetic task streams, the full lifecycle against
//! baselines, transfer and fidelity probes, and their reports.

mod baselines;
mod config;
mod eval;
mod report;
mod run;
pub mod stream;
mod sweep;
mod transfer;

pub use baselines::fine_tune_full;
pub use config::{Baselines, FineTuneConfig, StreamConfig, SweepConfig, TransferConfig};
pub use eval::{evaluate_routed, RoutedEval};
pub use report::{forgetting, mean, spearman, MethodReport, MultiRunReport, RunReport, TaskRow, Timings};
pub use run::{generate_stream, prepare_backbone, run_cola, run_multi, run_stream, task_order, RunOutput};
pub use sweep::{run_fidelity_sweep, train_stream_adapters, SweepReport, SweepRow};
pub use transfer::{run_transfer_probe, TransferPair, TransferReport};
