//! Desk-scale experiments for Group Muon.

pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod profile;
pub mod quadratic;
pub mod random;
pub mod sweep;
pub mod tasks;
pub mod train;
pub mod verify;

pub use config::{
    GroupTarget, GroupingConfig, OptimizerConfig, OptimizerKind, OutputFormat, RuleKind, RunConfig, WhiteningKind,
};
pub use error::{HarnessError, Result};
pub use metrics::{MetricsRecord, Split, CSV_HEADER};
pub use model::{ParamInfo, Role, ToyModel, ToyModelConfig};
pub use profile::{profile_norm_gap, profile_ranks, NormGapRecord, RankProfile};
pub use quadratic::{bound_holds, verify_one_step, QuadraticProblem};
pub use tasks::{Sample, Task, TaskStream};
pub use train::{run_training, train, TrainOutcome};
pub use sweep::{run_sweep, SweepCell, SweepRow, SweepSpec};
pub use verify::{run_battery, Status, SuiteResult, VerifyReport};
