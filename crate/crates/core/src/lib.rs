//! Bayesian team hypothesis testing with L-out-of-N vote fusion.
//!
//! Agents observe conditionally iid private signals, threshold them, and
//! vote; the team decides 1 when at least `L` of the `N` votes are 1. In the
//! parallel scenario the votes are cast in secret. In the sequential scenario
//! each agent also sees its predecessors' votes and may condition its
//! threshold on them. The crate computes exact risks and optimal thresholds
//! for both scenarios, checks numerically that the optimal sequential
//! thresholds never depart from the parallel ones, and cross-validates
//! everything by Monte Carlo simulation.

pub mod error;
pub mod models;
mod scalar;
pub mod optimize;
pub mod team;
pub mod sequential;
pub mod montecarlo;
pub mod cli;

pub use error::{Error, Result};
pub use montecarlo::{simulate_parallel, simulate_sequential, SimReport};
pub use models::{ErrorPair, Hypothesis, LikelihoodModel, SignalModel};
pub use optimize::{optimize_identical_threshold, pbpo_multistart, pbpo_optimize, PbpoMultistart, stationarity_residual, OptimizationResult, Residual};
pub use team::{bayes_risk, global_error_rates, poisson_binomial_tail, two_agent_or_risk, GlobalErrorRates, TeamProblem};
pub use sequential::{
    belief_update, evaluate_policy, fusion_rule_update, optimize_policy, tree_risk, value, verify_secret_ballot, BeliefState,
    History, NodeThreshold, PolicySolution, PolicyStart, SweepResult, refine_policy, myopic_policy, PolicyTree, SecretBallotReport,
};
