//! Tabular analogs of the comparison strategies.
//!
//! Token-level methods are approximated at the answer-distribution level
//! because the tabular policy has no token stream; descriptors mark each as
//! an analog so results are never conflated with token-level variants.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::grpo::RolloutBatch;
use crate::model::{
    action_probs, AnswerId, AnswerSpace, FeatureMap, Label, PolicyParams, PromptId,
};
use crate::olr::majority_answer;

/// Majority-vote pseudo-label: the batch's most frequent answer, ignoring
/// the stored training label entirely. Ties break toward the smallest id.
pub fn ttrl_label(batch: &[AnswerId]) -> Label {
    Label::Answer(majority_answer(batch).0)
}

/// Uniform subset of `round(fraction * N)` prompt ids without replacement;
/// callers re-draw each epoch.
pub fn random_select(
    prompt_ids: &[PromptId],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> SimResult<Vec<PromptId>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SimError::Config(format!(
            "selection fraction {fraction} outside (0, 1]"
        )));
    }
    let count = (fraction * prompt_ids.len() as f64).round() as usize;
    let mut ids = prompt_ids.to_vec();
    for i in 0..count.min(ids.len()) {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    let mut chosen = ids[..count.min(prompt_ids.len())].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Keep the `round(fraction * N)` prompts with smallest |surrogate loss|.
/// Zero-variance prompts have loss exactly zero and therefore dominate the
/// kept set; that pathology is what the baseline demonstrates.
pub fn small_loss_select(losses: &[(PromptId, f64)], fraction: f64) -> SimResult<Vec<PromptId>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SimError::Config(format!(
            "selection fraction {fraction} outside (0, 1]"
        )));
    }
    let count = (fraction * losses.len() as f64).round() as usize;
    let mut order: Vec<(PromptId, f64)> = losses.to_vec();
    order.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<PromptId> = order.into_iter().take(count).map(|(id, _)| id).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Policy-gradient surrogate loss of one batch at the sampling policy:
/// `-(1/K) sum_k A_k log pi(y_k | x)`.
pub fn surrogate_loss(
    params: &PolicyParams,
    fm: &FeatureMap,
    space: &AnswerSpace,
    batch: &RolloutBatch,
) -> f64 {
    let probs = action_probs(params, fm, space);
    let mut acc = 0.0;
    for (k, &a) in batch.answers.iter().enumerate() {
        if batch.advantages[k] == 0.0 {
            continue;
        }
        let i = space
            .answers
            .iter()
            .position(|&x| x == a)
            .expect("rollout in space");
        acc += batch.advantages[k] * probs[i].ln();
    }
    -acc / batch.k() as f64
}

/// Reward smoothing `r' = (1 - lambda) r + lambda / n_answers`, applied
/// before group normalization.
pub fn smooth_rewards(rewards: &[f64], lambda: f64, n_answers: usize) -> Vec<f64> {
    rewards
        .iter()
        .map(|r| (1.0 - lambda) * r + lambda / n_answers as f64)
        .collect()
}

/// Gradient of the policy entropy `H(pi(.|x))` with respect to the
/// parameters: `-sum_y pi(y) log pi(y) (phi(y) - mean_phi)`. Zero at the
/// uniform distribution.
pub fn entropy_grad(params: &PolicyParams, fm: &FeatureMap, space: &AnswerSpace) -> Vec<f64> {
    let probs = action_probs(params, fm, space);
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
        let w = -probs[i] * probs[i].ln();
        let f = fm.feature(space.prompt_id, a);
        for (g, (x, m)) in grad.iter_mut().zip(f.iter().zip(&mean)) {
            *g += w * (x - m);
        }
    }
    grad
}

/// Descriptor of one regularizing loss term, recorded in run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub lambda: f64,
    /// Answer-distribution analog of a token-level method.
    pub analog: bool,
}

/// Descriptors for the entropy-based regularizers: a confidence penalty
/// adding `lambda * H(pi)` to the objective, and label smoothing applied to
/// rewards before normalization.
pub fn entropy_regularizers(conf_lambda: f64, smooth_lambda: f64) -> SimResult<Vec<LossTerm>> {
    if conf_lambda < 0.0 || smooth_lambda < 0.0 {
        return Err(SimError::Config(
            "regularizer coefficients must be >= 0".into(),
        ));
    }
    Ok(vec![
        LossTerm {
            name: "confidence_penalty".into(),
            lambda: conf_lambda,
            analog: true,
        },
        LossTerm {
            name: "label_smoothing".into(),
            lambda: smooth_lambda,
            analog: true,
        },
    ])
}
