//! Uniform and fair sampling of quota-compliant panels from a pool, built on
//! exact counting with big integers.

pub mod counting;
pub mod error;
pub mod evaluation;
pub mod instance;
pub mod lottery;
pub mod optimizer;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod verify;

pub use counting::{audit_pruning, build_dp, BigCount, DpOptions, DpTable, PruningAudit, WeightVector};
pub use error::{CountingError, Error, InstanceError, LotteryError, OptimizerError, OracleError, SamplingError};
pub use evaluation::{evaluate, holdout_experiment, EvaluationReport, HoldoutResult};
pub use instance::{parse_instance, FeatureDef, Instance, InstanceSource, PoolMember, Quota};
pub use lottery::{build_lottery, deviation_bound, DrawKey, Lottery};
pub use optimizer::{optimize, OptimizeOutcome, OptimizerConfig, TargetMarginals};
pub use sampler::{PanelSample, PanelSampler, PlanConfig, SamplerPlan};
pub use verify::{verify_instance, VerifyReport};
