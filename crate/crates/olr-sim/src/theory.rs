//! Measured theory quantities: cross-sample coupling, advantage magnitudes,
//! critical noise ratios, log-ratio dynamics, and finite-rollout
//! concentration probes.
//!
//! The coupling `gamma` is the mean inner product of correct-answer score
//! gradients across (clean, noisy) prompt pairs. With mean clean/noisy
//! advantage magnitudes `G_c`, `G_n` it yields the critical noise ratio
//! `rho_c = gamma G_c / (gamma G_c + G_n)`, its KL-shifted variant
//! `(gamma G_c - beta Delta_ref) / (G_n + gamma G_c)`, and the drift
//! `gamma (1 - rho) G_c - rho G_n`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::grpo::{group_advantages, verify_reward, RolloutBatch};
use crate::model::{
    action_probs, log_prob_grad, logits, sample_rollouts, FeatureMap, Label, LabeledPrompt,
    NoiseClass, PolicyParams, PromptId,
};

/// Per-epoch snapshot of every measured theory quantity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    /// Measured mean coupling over (clean, noisy) pairs.
    pub gamma: f64,
    /// Mean |advantage| over clean prompts.
    pub g_clean: f64,
    /// Mean |advantage| over noisy prompts.
    pub g_noisy: f64,
    /// `gamma G_c / (gamma G_c + G_n)`.
    pub rho_c: f64,
    /// Raw KL-shifted critical ratio (can be negative).
    pub rho_c_kl_raw: f64,
    /// KL-shifted critical ratio clamped to [0, 1].
    pub rho_c_kl: f64,
    /// Reference log-ratio bias, mean over active prompts.
    pub delta_ref: f64,
    /// `gamma (1 - rho) G_c - rho G_n` at the realized noise ratio.
    pub drift: f64,
    /// Log-ratio `log(p(y*) / p(label))` per active prompt.
    pub log_ratios: BTreeMap<PromptId, f64>,
}

impl TheoryReport {
    pub fn mean_log_ratio(&self) -> f64 {
        if self.log_ratios.is_empty() {
            return f64::NAN;
        }
        self.log_ratios.values().sum::<f64>() / self.log_ratios.len() as f64
    }
}

/// Exact log-ratio `log(p(y* | x) / p(label | x))`, computed as a logit
/// difference. Undefined for the infeasible sentinel.
pub fn log_ratio(params: &PolicyParams, fm: &FeatureMap, prompt: &LabeledPrompt) -> SimResult<f64> {
    let label = match prompt.train_label {
        Label::Answer(a) => a,
        Label::Infeasible => return Err(SimError::UndefinedRatio(prompt.prompt_id())),
    };
    let z = logits(params, fm, &prompt.space);
    let idx_of = |a| prompt.space.answers.iter().position(|&x| x == a);
    let it = idx_of(prompt.space.true_answer).expect("true answer in space");
    let il = idx_of(label).ok_or_else(|| {
        SimError::Domain(format!(
            "label {label} not in answer space of prompt {}",
            prompt.prompt_id()
        ))
    })?;
    Ok(z[it] - z[il])
}

/// Mean correct-answer score-gradient inner product over `n_pairs` sampled
/// (clean, noisy) pairs. Returns NaN when either set is empty.
pub fn measure_coupling(
    params: &PolicyParams,
    fm: &FeatureMap,
    clean: &[&LabeledPrompt],
    noisy: &[&LabeledPrompt],
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    if clean.is_empty() || noisy.is_empty() || n_pairs == 0 {
        return f64::NAN;
    }
    let mut cache: BTreeMap<PromptId, Vec<f64>> = BTreeMap::new();
    let mut score = |p: &LabeledPrompt| -> Vec<f64> {
        cache
            .entry(p.prompt_id())
            .or_insert_with(|| {
                log_prob_grad(params, fm, &p.space, p.space.true_answer)
                    .expect("true answer in space")
            })
            .clone()
    };
    let mut sum = 0.0;
    for _ in 0..n_pairs {
        let c = clean[rng.random_range(0..clean.len())];
        let n = noisy[rng.random_range(0..noisy.len())];
        let gc = score(c);
        let gn = score(n);
        sum += gc.iter().zip(&gn).map(|(a, b)| a * b).sum::<f64>();
    }
    sum / n_pairs as f64
}

/// Mean |advantage| per batch, averaged separately over clean and noisy
/// prompts. A side with no prompts reports NaN.
pub fn advantage_magnitudes(batches: &[RolloutBatch], dataset: &[LabeledPrompt]) -> (f64, f64) {
    let class: BTreeMap<PromptId, NoiseClass> = dataset
        .iter()
        .map(|p| (p.prompt_id(), p.noise_class))
        .collect();
    let mut clean = (0.0, 0usize);
    let mut noisy = (0.0, 0usize);
    for b in batches {
        let mean_abs = b.advantages.iter().map(|a| a.abs()).sum::<f64>() / b.k() as f64;
        match class[&b.prompt_id] {
            NoiseClass::Clean => {
                clean.0 += mean_abs;
                clean.1 += 1;
            }
            NoiseClass::Inactive | NoiseClass::Active => {
                noisy.0 += mean_abs;
                noisy.1 += 1;
            }
        }
    }
    let g_c = if clean.1 > 0 {
        clean.0 / clean.1 as f64
    } else {
        f64::NAN
    };
    let g_n = if noisy.1 > 0 {
        noisy.0 / noisy.1 as f64
    } else {
        f64::NAN
    };
    (g_c, g_n)
}

/// Critical noise ratio `gamma G_c / (gamma G_c + G_n)`.
pub fn critical_ratio(gamma: f64, g_clean: f64, g_noisy: f64) -> SimResult<f64> {
    let denom = gamma * g_clean + g_noisy;
    if denom == 0.0 || !denom.is_finite() {
        return Err(SimError::Undefined(format!(
            "critical ratio denominator gamma*G_c + G_n = {denom}"
        )));
    }
    Ok(gamma * g_clean / denom)
}

/// KL-shifted critical ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCriticalRatio {
    /// `(gamma G_c - beta Delta_ref) / (G_n + gamma G_c)`; may leave [0, 1].
    pub raw: f64,
    /// Raw value clamped to [0, 1].
    pub clamped: f64,
}

/// `(gamma G_c - beta Delta_ref) / (G_n + gamma G_c)`, reported raw and
/// clamped so the regime where KL alone defeats all noise tolerance stays
/// visible.
pub fn critical_ratio_kl(
    gamma: f64,
    g_clean: f64,
    g_noisy: f64,
    beta: f64,
    delta_ref: f64,
) -> SimResult<KlCriticalRatio> {
    let denom = g_noisy + gamma * g_clean;
    if !denom.is_finite() || denom <= 0.0 {
        return Err(SimError::Undefined(format!(
            "KL critical ratio denominator G_n + gamma*G_c = {denom}"
        )));
    }
    let raw = (gamma * g_clean - beta * delta_ref) / denom;
    Ok(KlCriticalRatio {
        raw,
        clamped: raw.clamp(0.0, 1.0),
    })
}

/// Mean drift `gamma (1 - rho) G_c - rho G_n`.
pub fn drift(gamma: f64, rho: f64, g_clean: f64, g_noisy: f64) -> f64 {
    gamma * (1.0 - rho) * g_clean - rho * g_noisy
}

/// Noise-tolerance report: effective noise `rho (1 - delta)` and the
/// extended threshold `rho_c / (1 - delta)`. A replacement probability of 1
/// reports an unbounded threshold.
pub fn tolerance_report(rho: f64, delta_hat: f64, rho_c: f64) -> SimResult<(f64, f64)> {
    if !(0.0..=1.0).contains(&delta_hat) {
        return Err(SimError::Config(format!(
            "replacement probability {delta_hat} outside [0, 1]"
        )));
    }
    let rho_eff = rho * (1.0 - delta_hat);
    let rho_c_olr = if delta_hat == 1.0 {
        f64::INFINITY
    } else {
        rho_c / (1.0 - delta_hat)
    };
    Ok((rho_eff, rho_c_olr))
}

/// Monte-Carlo spread of the finite-rollout advantage estimate.
///
/// Per trial, `k` rollouts are drawn, the group advantage of the first
/// rollout is computed from the empirical group statistics, and compared
/// with the advantage under the exact reward distribution. Returns
/// `(k, std of the error)` per requested `k`.
pub fn concentration_probe(
    params: &PolicyParams,
    fm: &FeatureMap,
    prompt: &LabeledPrompt,
    k_values: &[usize],
    trials: usize,
    adv_eps: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, f64)> {
    let probs = action_probs(params, fm, &prompt.space);
    let p_label = match prompt.train_label {
        Label::Answer(l) => prompt
            .space
            .answers
            .iter()
            .zip(&probs)
            .find(|(&a, _)| a == l)
            .map(|(_, &p)| p)
            .unwrap_or(0.0),
        Label::Infeasible => 0.0,
    };
    let exact_sigma = (p_label * (1.0 - p_label)).max(0.0).sqrt();
    let exact_adv = |r: f64| (r - p_label) / (exact_sigma + adv_eps);

    k_values
        .iter()
        .map(|&k| {
            let mut errs = Vec::with_capacity(trials);
            for _ in 0..trials {
                let answers = sample_rollouts(params, fm, &prompt.space, k, rng);
                let rewards: Vec<f64> = answers
                    .iter()
                    .map(|&a| verify_reward(a, prompt.train_label))
                    .collect();
                let advs = group_advantages(&rewards, adv_eps);
                errs.push(advs[0] - exact_adv(rewards[0]));
            }
            let mean = errs.iter().sum::<f64>() / trials as f64;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / trials as f64;
            (k, var.sqrt())
        })
        .collect()
}
