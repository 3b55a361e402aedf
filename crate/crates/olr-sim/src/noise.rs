//! Construction and maintenance of noisy labels.
//!
//! Inactive noise replaces a label with the out-of-space sentinel, so the
//! policy's probability of producing it is exactly zero and every rollout in
//! the group earns the same reward. Active noise replaces a label with a
//! wrong in-space answer: sampled once from the injecting policy restricted
//! to wrong answers (static mode), or re-set each epoch to the most frequent
//! wrong answer among that epoch's rollouts (dynamic mode), retaining the
//! previous label when all rollouts are correct.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::model::{
    action_probs, AnswerId, AnswerSpace, FeatureMap, Label, LabeledPrompt, NoiseClass,
    PolicyParams, PromptId,
};

/// How active noisy labels are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveMode {
    /// Sample the wrong label once from the initial policy.
    StaticAtStart,
    /// Re-assign the label to the modal wrong rollout every epoch.
    DynamicPerEpoch,
}

impl std::fmt::Display for ActiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActiveMode::StaticAtStart => write!(f, "static_at_start"),
            ActiveMode::DynamicPerEpoch => write!(f, "dynamic_per_epoch"),
        }
    }
}

/// Number of prompts to corrupt: `rho * n` rounded to nearest.
pub fn noisy_count(rho: f64, n: usize) -> usize {
    (rho * n as f64).round() as usize
}

fn check_all_clean(dataset: &[LabeledPrompt]) -> SimResult<()> {
    if dataset.iter().any(|p| p.noise_class != NoiseClass::Clean) {
        return Err(SimError::Config(
            "noise injection requires an all-clean dataset".into(),
        ));
    }
    Ok(())
}

fn check_rho(rho: f64) -> SimResult<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(SimError::Config(format!(
            "noise ratio {rho} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Uniform designation of `count` prompt indices without replacement.
fn designate(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx[..count.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Replace `round(rho * N)` uniformly chosen labels with the infeasible
/// sentinel. Answer spaces, features, and true answers are untouched.
pub fn inject_inactive_noise(
    dataset: &[LabeledPrompt],
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> SimResult<Vec<LabeledPrompt>> {
    check_rho(rho)?;
    check_all_clean(dataset)?;
    let chosen = designate(dataset.len(), noisy_count(rho, dataset.len()), rng);
    let mut out = dataset.to_vec();
    for i in chosen {
        out[i].train_label = Label::Infeasible;
        out[i].noise_class = NoiseClass::Inactive;
    }
    Ok(out)
}

/// Sample a wrong answer from the policy restricted to wrong answers.
fn sample_wrong(
    params: &PolicyParams,
    fm: &FeatureMap,
    space: &AnswerSpace,
    rng: &mut ChaCha8Rng,
) -> SimResult<AnswerId> {
    if space.answers.len() < 2 {
        return Err(SimError::Config(format!(
            "prompt {}: cannot host active noise with a single answer",
            space.prompt_id
        )));
    }
    let probs = action_probs(params, fm, space);
    let mut wrong: Vec<(AnswerId, f64)> = space
        .answers
        .iter()
        .zip(&probs)
        .filter(|(&a, _)| a != space.true_answer)
        .map(|(&a, &p)| (a, p))
        .collect();
    let total: f64 = wrong.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut wrong {
        *p /= total;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in &wrong {
        acc += p;
        if u < acc {
            return Ok(*a);
        }
    }
    Ok(wrong.last().unwrap().0)
}

/// Replace `round(rho * N)` uniformly chosen labels with wrong in-space
/// answers sampled from the injecting policy's wrong-answer conditional.
/// Both modes share this initial assignment; dynamic mode additionally
/// refreshes labels each epoch via [`refresh_active_labels`].
pub fn inject_active_noise(
    dataset: &[LabeledPrompt],
    rho: f64,
    params: &PolicyParams,
    fm: &FeatureMap,
    _mode: ActiveMode,
    rng: &mut ChaCha8Rng,
) -> SimResult<Vec<LabeledPrompt>> {
    check_rho(rho)?;
    check_all_clean(dataset)?;
    let chosen = designate(dataset.len(), noisy_count(rho, dataset.len()), rng);
    let mut out = dataset.to_vec();
    for i in chosen {
        let label = sample_wrong(params, fm, &out[i].space, rng)?;
        out[i].train_label = Label::Answer(label);
        out[i].noise_class = NoiseClass::Active;
    }
    Ok(out)
}

/// Dynamic per-epoch re-assignment: each active prompt's label becomes the
/// most frequent wrong answer in this epoch's rollouts (ties toward the
/// smallest id); if every rollout is correct the previous label is kept.
/// Idempotent for fixed rollouts.
pub fn refresh_active_labels(
    dataset: &[LabeledPrompt],
    rollouts: &BTreeMap<PromptId, Vec<AnswerId>>,
) -> SimResult<Vec<LabeledPrompt>> {
    let mut out = dataset.to_vec();
    for p in &mut out {
        if p.noise_class != NoiseClass::Active {
            continue;
        }
        let batch = rollouts.get(&p.prompt_id()).ok_or_else(|| {
            SimError::State(format!(
                "no rollouts supplied for active prompt {}",
                p.prompt_id()
            ))
        })?;
        let mut counts: BTreeMap<AnswerId, usize> = BTreeMap::new();
        for &a in batch {
            if a != p.space.true_answer {
                *counts.entry(a).or_insert(0) += 1;
            }
        }
        let mut best: Option<(AnswerId, usize)> = None;
        for (&a, &c) in &counts {
            match best {
                None => best = Some((a, c)),
                Some((_, bc)) if c > bc => best = Some((a, c)),
                _ => {}
            }
        }
        if let Some((a, _)) = best {
            p.train_label = Label::Answer(a);
        }
    }
    Ok(out)
}

/// Classify a label by rollout feasibility. The sentinel is the only label
/// the softmax policy cannot produce, so classification is structural.
pub fn classify_label(space: &AnswerSpace, label: Label) -> NoiseClass {
    match label {
        Label::Answer(a) if a == space.true_answer => NoiseClass::Clean,
        Label::Infeasible => NoiseClass::Inactive,
        Label::Answer(_) => NoiseClass::Active,
    }
}

/// Fraction of prompts whose effective label differs from the true answer.
pub fn measure_realized_noise(
    dataset: &[LabeledPrompt],
    effective: &BTreeMap<PromptId, Label>,
) -> SimResult<f64> {
    let mut wrong = 0usize;
    for p in dataset {
        let label = effective.get(&p.prompt_id()).ok_or_else(|| {
            SimError::State(format!("no effective label for prompt {}", p.prompt_id()))
        })?;
        if *label != Label::Answer(p.space.true_answer) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / dataset.len() as f64)
}
