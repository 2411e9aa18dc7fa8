//! Optimization and measurement: Adam, plateau scheduling, the training
//! loop, and attention scaling benchmarks.

pub mod adam;
pub mod bench;
pub mod run;
pub mod schedule;

pub use adam::Adam;
pub use bench::{bench_attention, global_attention, loglog_slope, standard_grids, BenchReport};
pub use run::{comparable_log, evaluate, train, EpochLog, EvalReport, RunConfig, TrainReport};
pub use schedule::Plateau;
