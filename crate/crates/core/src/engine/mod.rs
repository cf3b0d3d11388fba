//! The N-worker training protocol.

mod aggregate;
mod config;
mod optim;
mod runner;
mod schedule;
mod trainer;

pub use aggregate::{aggregate, AggregatedGradient};
pub use config::{AlignmentConfig, ExperimentConfig};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use runner::{
    alignment_sweep, execute, execute_with, report, rerun, sweep, write_alignment_csv, RunReport, SweepCell, SweepTable,
    ALIGNMENT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE,
};
pub use schedule::{flop_matched_epochs, flop_matched_steps, lr_at, ScheduleKind, ScheduleSpec};
pub use trainer::{
    assignment_for, seed_stream, CollectObserver, MetricsRecord, Plan, RunObserver, RunSummary, StepOutcome, Trainer, WorkerResult,
    WorkerSampler, METRICS_CSV_HEADER,
};
