pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod kernel;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod workbench;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use kernel::{EvalMode, KernelEngine, KernelEval};
pub use oracle::{OracleEval, OracleMixture};
pub use schedule::{Schedule, ScheduleParams};
pub use score::{Regime, ScoreEstimator, ScoreEval};
pub use sampler::{sample, InitNoise, RunRecord, SampleOptions, ScoreSource, SourceTag};
