//! Hybrid-reward PPO with per-branch value heads and scheduled advantage
//! weighting.
//!
//! The total reward of an environment is split into components, each learned
//! by its own value branch. At every scheduler tick a weight-generation rule is
//! chosen (by a language model, a replayed transcript, a script or a seeded
//! draw) and turns per-branch return statistics into priority weights that
//! scale the branch advantages in the policy gradient.

pub mod envs;
pub mod estimation;
pub mod harness;
pub mod llm_client;
pub mod matrix;
pub mod nets;
pub mod numfmt;
pub mod par;
pub mod reward_dsl;
pub mod rules;
pub mod scheduler;
pub mod trainer;

pub use envs::{env_spec, make_env, Env, EnvSpec, RewardVector};
pub use estimation::{gae, summarize_branches, BranchStats, RolloutBatch, StatsHistory};
pub use harness::{load_config, run_experiment, summarize, RunRecord, SummaryTable};
pub use matrix::Matrix;
pub use rules::{compute_weights, WeightVector};
pub use scheduler::{parse_rule_choice, Scheduler, SelectorKind};
pub use trainer::{train, Algo, EpochMetrics, TrainConfig, Trainer};
