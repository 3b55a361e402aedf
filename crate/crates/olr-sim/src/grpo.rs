//! Reward verification, group-relative advantages, and the clipped,
//! KL-regularized policy update.
//!
//! Advantages normalize rewards within each prompt's rollout group:
//! `A_k = (r_k - mean) / (std + adv_eps)` with population statistics. The
//! update ascends the pessimistic clipped surrogate
//! `min(A * ratio, A * clip(ratio, 1 - eps, 1 + eps))` averaged over
//! rollouts, minus `beta` times the exact KL divergence to a reference
//! policy, computed in closed form over the finite answer space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::model::{
    log_prob_grad, logits, AnswerId, AnswerSpace, FeatureMap, Label, LabeledPrompt, PolicyParams,
    PromptId,
};

/// One prompt's sampled group at one epoch, with rewards and advantages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub prompt_id: PromptId,
    pub epoch: u32,
    pub answers: Vec<AnswerId>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutBatch {
    /// Build a batch by scoring `answers` against `effective_label` and
    /// normalizing the rewards within the group.
    pub fn from_rollouts(
        prompt_id: PromptId,
        epoch: u32,
        answers: Vec<AnswerId>,
        effective_label: Label,
        adv_eps: f64,
    ) -> Self {
        let rewards: Vec<f64> = answers
            .iter()
            .map(|&a| verify_reward(a, effective_label))
            .collect();
        let advantages = group_advantages(&rewards, adv_eps);
        Self {
            prompt_id,
            epoch,
            answers,
            rewards,
            advantages,
        }
    }

    pub fn k(&self) -> usize {
        self.answers.len()
    }
}

/// Hyperparameters of the policy update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UpdateConfig {
    /// Learning rate.
    pub eta: f64,
    /// KL penalty weight.
    pub beta: f64,
    /// Clipping half-width of the importance ratio.
    pub clip_eps: f64,
    /// Denominator floor in the advantage normalization.
    pub adv_eps: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            beta: 0.0,
            clip_eps: 0.2,
            adv_eps: 1e-6,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> SimResult<()> {
        // NaN fails every check below.
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(SimError::Config("eta must be > 0".into()));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(SimError::Config("beta must be >= 0".into()));
        }
        if !self.clip_eps.is_finite() || self.clip_eps <= 0.0 {
            return Err(SimError::Config("clip_eps must be > 0".into()));
        }
        if !self.adv_eps.is_finite() || self.adv_eps <= 0.0 {
            return Err(SimError::Config("adv_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Binary verifier: 1 iff the rollout matches the effective label. An
/// infeasible label matches nothing, so every rollout scores 0.
pub fn verify_reward(answer: AnswerId, effective_label: Label) -> f64 {
    match effective_label {
        Label::Answer(l) if l == answer => 1.0,
        _ => 0.0,
    }
}

/// Group-relative advantages with population mean/std. A zero-variance group
/// yields exact zeros.
pub fn group_advantages(rewards: &[f64], adv_eps: f64) -> Vec<f64> {
    let k = rewards.len();
    if k == 0 {
        return Vec::new();
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return vec![0.0; k];
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    rewards
        .iter()
        .map(|r| (r - mean) / (std + adv_eps))
        .collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|v| v - lse).collect()
}

/// Exact KL divergence `sum_y pi(y|x) log(pi(y|x) / pi_ref(y|x))` over the
/// prompt's finite answer space.
pub fn kl_to_reference(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    fm: &FeatureMap,
    space: &AnswerSpace,
) -> f64 {
    let lp = log_softmax(&logits(params, fm, space));
    let lr = log_softmax(&logits(ref_params, fm, space));
    lp.iter().zip(&lr).map(|(&a, &b)| (a.exp()) * (a - b)).sum()
}

/// Gradient of the KL term:
/// `sum_y pi(y) (log pi(y) - log pi_ref(y)) (phi(y) - mean_phi)`.
fn kl_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    fm: &FeatureMap,
    space: &AnswerSpace,
) -> Vec<f64> {
    let lp = log_softmax(&logits(params, fm, space));
    let lr = log_softmax(&logits(ref_params, fm, space));
    let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let dim = fm.dim();
    let mut mean = vec![0.0; dim];
    for (i, &a) in space.answers.iter().enumerate() {
        let f = fm.feature(space.prompt_id, a);
        for (m, x) in mean.iter_mut().zip(f) {
            *m += probs[i] * x;
        }
    }
    let mut grad = vec![0.0; dim];
    for (i, &a) in space.answers.iter().enumerate() {
        let w = probs[i] * (lp[i] - lr[i]);
        if w == 0.0 {
            continue;
        }
        let f = fm.feature(space.prompt_id, a);
        for (g, (x, m)) in grad.iter_mut().zip(f.iter().zip(&mean)) {
            *g += w * (x - m);
        }
    }
    grad
}

/// The clipped surrogate value for one rollout.
fn clip_term(advantage: f64, ratio: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (advantage * ratio).min(advantage * clipped)
}

/// Objective value for one batch: mean clipped surrogate minus the KL
/// penalty. This is the quantity the finite-difference oracle probes.
pub fn batch_objective(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    fm: &FeatureMap,
    space: &AnswerSpace,
    batch: &RolloutBatch,
    cfg: &UpdateConfig,
) -> f64 {
    let lp = log_softmax(&logits(params, fm, space));
    let lo = log_softmax(&logits(old_params, fm, space));
    let index: BTreeMap<AnswerId, usize> = space
        .answers
        .iter()
        .enumerate()
        .map(|(i, &a)| (a, i))
        .collect();
    let mut acc = 0.0;
    for (k, &a) in batch.answers.iter().enumerate() {
        let i = index[&a];
        let ratio = (lp[i] - lo[i]).exp();
        acc += clip_term(batch.advantages[k], ratio, cfg.clip_eps);
    }
    let mut value = acc / batch.k() as f64;
    if cfg.beta > 0.0 {
        value -= cfg.beta * kl_to_reference(params, ref_params, fm, space);
    }
    value
}

/// Ascent gradient of [`batch_objective`] for one batch. The clipped term's
/// gradient is zero where the ratio is clipped against the advantage sign.
pub fn batch_gradient(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    fm: &FeatureMap,
    space: &AnswerSpace,
    batch: &RolloutBatch,
    cfg: &UpdateConfig,
) -> SimResult<Vec<f64>> {
    let lp = log_softmax(&logits(params, fm, space));
    let lo = log_softmax(&logits(old_params, fm, space));
    let index: BTreeMap<AnswerId, usize> = space
        .answers
        .iter()
        .enumerate()
        .map(|(i, &a)| (a, i))
        .collect();
    let dim = fm.dim();
    let mut grad = vec![0.0; dim];
    let k = batch.k() as f64;
    for (j, &a) in batch.answers.iter().enumerate() {
        let adv = batch.advantages[j];
        if adv == 0.0 {
            continue;
        }
        let i = *index.get(&a).ok_or_else(|| {
            SimError::Domain(format!(
                "rollout answer {a} not in answer space of prompt {}",
                batch.prompt_id
            ))
        })?;
        let ratio = (lp[i] - lo[i]).exp();
        let clipped_out =
            (adv > 0.0 && ratio > 1.0 + cfg.clip_eps) || (adv < 0.0 && ratio < 1.0 - cfg.clip_eps);
        if clipped_out {
            continue;
        }
        let score = log_prob_grad(params, fm, space, a)?;
        let w = adv * ratio / k;
        for (g, s) in grad.iter_mut().zip(&score) {
            *g += w * s;
        }
    }
    if cfg.beta > 0.0 {
        let klg = kl_gradient(params, ref_params, fm, space);
        for (g, x) in grad.iter_mut().zip(&klg) {
            *g -= cfg.beta * x;
        }
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(SimError::Update {
            prompt: batch.prompt_id,
            msg: "non-finite gradient".into(),
        });
    }
    Ok(grad)
}

/// One gradient-ascent step of size `eta` on the mean batch objective.
/// Inputs are not mutated; contributions are accumulated in the order the
/// batches are given (callers supply prompt-id order for determinism).
pub fn grpo_update(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    fm: &FeatureMap,
    dataset: &[LabeledPrompt],
    batches: &[RolloutBatch],
    cfg: &UpdateConfig,
) -> SimResult<PolicyParams> {
    if batches.is_empty() {
        return Err(SimError::Config(
            "grpo_update needs at least one batch".into(),
        ));
    }
    let spaces: BTreeMap<PromptId, &AnswerSpace> =
        dataset.iter().map(|p| (p.prompt_id(), &p.space)).collect();
    let dim = fm.dim();
    let mut total = vec![0.0; dim];
    for batch in batches {
        let space = spaces.get(&batch.prompt_id).ok_or_else(|| {
            SimError::Domain(format!(
                "batch references unknown prompt {}",
                batch.prompt_id
            ))
        })?;
        let g = batch_gradient(params, old_params, ref_params, fm, space, batch, cfg)?;
        for (t, x) in total.iter_mut().zip(&g) {
            *t += x;
        }
    }
    let scale = cfg.eta / batches.len() as f64;
    let theta: Vec<f64> = params
        .theta
        .iter()
        .zip(&total)
        .map(|(t, g)| t + scale * g)
        .collect();
    let next = PolicyParams { theta };
    if !next.is_finite() {
        return Err(SimError::Update {
            prompt: batches[0].prompt_id,
            msg: "non-finite parameters after update".into(),
        });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_dataset;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn verifier_matches_equality_and_rejects_infeasible() {
        assert_eq!(verify_reward(3, Label::Answer(3)), 1.0);
        assert_eq!(verify_reward(3, Label::Answer(4)), 0.0);
        assert_eq!(verify_reward(3, Label::Infeasible), 0.0);
    }

    #[test]
    fn zero_variance_group_gives_exact_zeros() {
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0, 1.0], 1e-6), vec![0.0; 4]);
        assert_eq!(group_advantages(&[0.0, 0.0], 1e-6), vec![0.0; 2]);
    }

    #[test]
    fn balanced_group_approaches_unit_advantages() {
        let a = group_advantages(&[1.0, 1.0, 0.0, 0.0], 1e-12);
        for (x, want) in a.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert!((x - want).abs() < 1e-9, "{x} vs {want}");
        }
    }

    #[test]
    fn single_positive_reward_group() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-6);
        // mean 0.25, std sqrt(3)/4
        let sigma = 3.0f64.sqrt() / 4.0;
        assert!((a[0] - 0.75 / (sigma + 1e-6)).abs() < 1e-12);
        for &x in &a[1..] {
            assert!((x + 0.25 / (sigma + 1e-6)).abs() < 1e-12);
        }
        assert!((a[0] - 1.7320).abs() < 1e-3);
        assert!((a[1] + 0.5774).abs() < 1e-4);
    }

    #[test]
    fn mean_centering_sums_to_zero() {
        let rewards = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let a = group_advantages(&rewards, 1e-6);
        let sum: f64 = a.iter().sum();
        assert!(sum.abs() < 1e-9 * rewards.len() as f64);
    }

    #[test]
    fn kl_of_identical_params_is_zero() {
        let (prompts, fm) = generate_dataset(3, 4, 2, 0.5, 8, 1).unwrap();
        let params = PolicyParams {
            theta: vec![0.3; 8],
        };
        for p in &prompts {
            assert_eq!(kl_to_reference(&params, &params, &fm, &p.space), 0.0);
        }
    }

    #[test]
    fn kl_known_value() {
        // pi = (0.75, 0.25) vs ref = (0.5, 0.5)
        let mut fm = FeatureMap::new(1, 0.0);
        fm.set_skill(0, 0);
        fm.insert(0, 0, vec![1.0]);
        fm.insert(0, 1, vec![0.0]);
        let space = AnswerSpace::new(0, vec![0, 1], 0).unwrap();
        let params = PolicyParams {
            theta: vec![3.0f64.ln()],
        };
        let refp = PolicyParams::zeros(1);
        let kl = kl_to_reference(&params, &refp, &fm, &space);
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - want).abs() < 1e-12);
        assert!((kl - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn zero_advantages_leave_params_unchanged() {
        let (prompts, fm) = generate_dataset(2, 3, 1, 0.5, 8, 2).unwrap();
        let params = PolicyParams {
            theta: vec![0.1; 8],
        };
        let cfg = UpdateConfig::default();
        let batches: Vec<RolloutBatch> = prompts
            .iter()
            .map(|p| RolloutBatch {
                prompt_id: p.prompt_id(),
                epoch: 1,
                answers: vec![p.space.true_answer; 4],
                rewards: vec![1.0; 4],
                advantages: vec![0.0; 4],
            })
            .collect();
        let next = grpo_update(&params, &params, &params, &fm, &prompts, &batches, &cfg).unwrap();
        assert_eq!(next.theta, params.theta);
    }

    #[test]
    fn unit_ratio_step_equals_advantage_times_score() {
        let (prompts, fm) = generate_dataset(1, 3, 1, 0.5, 8, 3).unwrap();
        let p = &prompts[0];
        let params = PolicyParams {
            theta: vec![0.2; 8],
        };
        let cfg = UpdateConfig {
            eta: 0.7,
            beta: 0.0,
            ..Default::default()
        };
        let adv = 1.5;
        let batch = RolloutBatch {
            prompt_id: 0,
            epoch: 1,
            answers: vec![p.space.true_answer],
            rewards: vec![1.0],
            advantages: vec![adv],
        };
        let next = grpo_update(&params, &params, &params, &fm, &prompts, &[batch], &cfg).unwrap();
        let score = log_prob_grad(&params, &fm, &p.space, p.space.true_answer).unwrap();
        for ((n, t), s) in next.theta.iter().zip(&params.theta).zip(&score) {
            let want = t + cfg.eta * adv * s;
            assert!((n - want).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_gradient_vanishes_at_reference() {
        let (prompts, fm) = generate_dataset(2, 4, 1, 0.5, 8, 4).unwrap();
        let params = PolicyParams {
            theta: vec![0.5; 8],
        };
        let cfg = UpdateConfig {
            beta: 0.8,
            ..Default::default()
        };
        let batches: Vec<RolloutBatch> = prompts
            .iter()
            .map(|p| RolloutBatch {
                prompt_id: p.prompt_id(),
                epoch: 1,
                answers: vec![p.space.answers[0]; 3],
                rewards: vec![0.0; 3],
                advantages: vec![0.0; 3],
            })
            .collect();
        let next = grpo_update(&params, &params, &params, &fm, &prompts, &batches, &cfg).unwrap();
        assert_eq!(next.theta, params.theta);
    }

    #[test]
    fn clipped_out_rollout_contributes_no_gradient() {
        let (prompts, fm) = generate_dataset(1, 2, 1, 0.0, 4, 9).unwrap();
        let p = &prompts[0];
        // Move theta so the ratio for the true answer far exceeds 1 + eps.
        let old = PolicyParams::zeros(4);
        let dir = fm.feature(0, p.space.true_answer).to_vec();
        let params = PolicyParams {
            theta: dir.iter().map(|x| 2.0 * x).collect(),
        };
        let cfg = UpdateConfig {
            clip_eps: 0.2,
            beta: 0.0,
            ..Default::default()
        };
        let batch = RolloutBatch {
            prompt_id: 0,
            epoch: 1,
            answers: vec![p.space.true_answer],
            rewards: vec![1.0],
            advantages: vec![1.0],
        };
        let g = batch_gradient(&params, &old, &old, &fm, &p.space, &batch, &cfg).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        // Negative advantage on the same over-weighted rollout is unclipped.
        let batch_neg = RolloutBatch {
            advantages: vec![-1.0],
            ..batch
        };
        let g = batch_gradient(&params, &old, &old, &fm, &p.space, &batch_neg, &cfg).unwrap();
        assert!(g.iter().any(|&x| x != 0.0));
    }

    /// Central finite differences of the batch objective.
    #[allow(clippy::too_many_arguments)]
    fn fd_objective_grad(
        params: &PolicyParams,
        old: &PolicyParams,
        refp: &PolicyParams,
        fm: &FeatureMap,
        space: &AnswerSpace,
        batch: &RolloutBatch,
        cfg: &UpdateConfig,
        step: f64,
    ) -> Vec<f64> {
        (0..params.theta.len())
            .map(|i| {
                let mut plus = params.clone();
                plus.theta[i] += step;
                let mut minus = params.clone();
                minus.theta[i] -= step;
                (batch_objective(&plus, old, refp, fm, space, batch, cfg)
                    - batch_objective(&minus, old, refp, fm, space, batch, cfg))
                    / (2.0 * step)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn surrogate_gradient_matches_finite_differences(seed in 0u64..5000) {
            let (prompts, fm) = generate_dataset(2, 4, 2, 0.5, 6, seed).unwrap();
            let mut r = rng::stream(seed, "grpo-fd", &[]);
            let theta: Vec<f64> = (0..6).map(|_| r.random::<f64>() - 0.5).collect();
            let old_theta: Vec<f64> = theta.iter().map(|t| t + 0.02 * (r.random::<f64>() - 0.5)).collect();
            let ref_theta: Vec<f64> = (0..6).map(|_| r.random::<f64>() - 0.5).collect();
            let params = PolicyParams { theta };
            let old = PolicyParams { theta: old_theta };
            let refp = PolicyParams { theta: ref_theta };
            let cfg = UpdateConfig { beta: 0.3, ..Default::default() };
            for p in &prompts {
                let answers = sample_near_uniform(&p.space, &mut r);
                let rewards: Vec<f64> =
                    answers.iter().map(|&a| verify_reward(a, Label::Answer(p.space.true_answer))).collect();
                let advantages = group_advantages(&rewards, cfg.adv_eps);
                let batch = RolloutBatch {
                    prompt_id: p.prompt_id(),
                    epoch: 1,
                    answers,
                    rewards,
                    advantages,
                };
                // Skip instances whose ratios sit near the clip kinks.
                if near_clip_kink(&params, &old, &fm, &p.space, &batch, &cfg) {
                    continue;
                }
                let g = batch_gradient(&params, &old, &refp, &fm, &p.space, &batch, &cfg).unwrap();
                let fd = fd_objective_grad(&params, &old, &refp, &fm, &p.space, &batch, &cfg, 1e-5);
                for i in 0..6 {
                    let denom = fd[i].abs().max(1e-4);
                    prop_assert!((g[i] - fd[i]).abs() / denom < 1e-4,
                        "i={} analytic {} fd {}", i, g[i], fd[i]);
                }
            }
        }

        #[test]
        fn gibbs_inequality(seed in 0u64..2000) {
            let (prompts, fm) = generate_dataset(2, 4, 1, 0.5, 6, seed).unwrap();
            let mut r = rng::stream(seed, "gibbs", &[]);
            let a = PolicyParams { theta: (0..6).map(|_| 3.0 * (r.random::<f64>() - 0.5)).collect() };
            let b = PolicyParams { theta: (0..6).map(|_| 3.0 * (r.random::<f64>() - 0.5)).collect() };
            for p in &prompts {
                prop_assert!(kl_to_reference(&a, &b, &fm, &p.space) >= -1e-12);
            }
        }
    }

    fn sample_near_uniform(space: &AnswerSpace, r: &mut rand_chacha::ChaCha8Rng) -> Vec<AnswerId> {
        (0..6)
            .map(|_| space.answers[r.random_range(0..space.answers.len())])
            .collect()
    }

    fn near_clip_kink(
        params: &PolicyParams,
        old: &PolicyParams,
        fm: &FeatureMap,
        space: &AnswerSpace,
        batch: &RolloutBatch,
        cfg: &UpdateConfig,
    ) -> bool {
        let lp = log_softmax(&logits(params, fm, space));
        let lo = log_softmax(&logits(old, fm, space));
        batch.answers.iter().any(|&a| {
            let i = space.answers.iter().position(|&x| x == a).unwrap();
            let ratio = (lp[i] - lo[i]).exp();
            (ratio - (1.0 - cfg.clip_eps)).abs() < 1e-3
                || (ratio - (1.0 + cfg.clip_eps)).abs() < 1e-3
        })
    }
}
