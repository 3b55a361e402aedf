//! Tabular simulator for reinforcement learning with verifiable rewards (RLVR)
//! under noisy labels.
//!
//! The policy is a linear-softmax over a finite answer space per prompt, so
//! every quantity the training dynamics depend on (probabilities, score
//! gradients, KL divergences, log-ratios) is exactly computable. On top of
//! that sit:
//!
//! - [`grpo`]: group-relative advantage normalization and the clipped,
//!   KL-regularized policy update.
//! - [`noise`]: construction of inactive (rollout-infeasible) and active
//!   (rollout-feasible) noisy labels, and label classification.
//! - [`olr`]: online label refinement — majority-answer trajectories, the
//!   pass-rate slope criterion, and the historical-consistency criterion.
//! - [`theory`]: measured coupling, advantage magnitudes, critical noise
//!   ratios, drift, and finite-rollout concentration probes.
//! - [`baselines`]: tabular analogs of comparison strategies (majority-vote
//!   pseudo-labels, random/small-loss selection, entropy regularizers).
//! - [`runner`]: the epoch loop, noise-ratio sweeps, and deterministic
//!   CSV/JSON outputs.

pub mod baselines;
pub mod config;
pub mod error;
pub mod grpo;
pub mod model;
pub mod noise;
pub mod olr;
pub mod output;
pub mod rng;
pub mod runner;
pub mod theory;

pub use config::{ActiveMode, NoiseType, RunConfig, Strategy};
pub use error::{SimError, SimResult};
pub use grpo::{
    group_advantages, grpo_update, kl_to_reference, verify_reward, RolloutBatch, UpdateConfig,
};
pub use model::{
    action_probs, generate_dataset, log_prob_grad, sample_rollouts, AnswerId, AnswerSpace,
    FeatureMap, Label, LabeledPrompt, NoiseClass, PolicyParams, PromptId,
};
pub use noise::{
    classify_label, inject_active_noise, inject_inactive_noise, measure_realized_noise,
    refresh_active_labels,
};
pub use olr::{majority_answer, ols_slope, MajorityTrajectory, OlrConfig};
pub use runner::{run_experiment, sweep_phase_diagram, RunOutput};
pub use theory::{critical_ratio, critical_ratio_kl, drift, tolerance_report, TheoryReport};
