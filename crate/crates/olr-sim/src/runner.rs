//! End-to-end experiment orchestration: dataset generation, noise injection,
//! the per-epoch rollout / refinement / update loop, noise-ratio sweeps, and
//! the replay-grade manifest.
//!
//! Every epoch: sample K rollouts per prompt from the epoch-start policy,
//! refresh dynamic active labels from those rollouts, update majority
//! trajectories, compute strategy-dependent effective labels, verify
//! rewards, normalize advantages within each group, then take one clipped
//! policy-gradient step per prompt batch in prompt-id order (the ratio
//! starts at 1 each epoch and drifts as the parameters move within it).
//! A fixed master seed fans out into per-component streams, so identical
//! configurations produce byte-identical outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    entropy_grad, entropy_regularizers, random_select, small_loss_select, smooth_rewards,
    surrogate_loss, ttrl_label, LossTerm,
};
use crate::config::{ActiveMode, NoiseType, RunConfig, Strategy};
use crate::error::{SimError, SimResult};
use crate::grpo::{batch_gradient, group_advantages, verify_reward, RolloutBatch};
use crate::model::{
    sample_rollouts, AnswerId, AnswerSpace, FeatureMap, Label, LabeledPrompt, NoiseClass,
    PolicyParams, PromptId, SkillId,
};
use crate::noise::{
    inject_active_noise, inject_inactive_noise, measure_realized_noise, noisy_count,
    refresh_active_labels,
};
use crate::olr::MajorityTrajectory;
use crate::rng;
use crate::theory::{
    advantage_magnitudes, critical_ratio, critical_ratio_kl, drift, log_ratio, measure_coupling,
    TheoryReport,
};

/// Sampled (clean, noisy) pairs per epoch for the coupling estimate.
const COUPLING_PAIRS: usize = 512;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub clean_majority_acc: f64,
    pub noisy_majority_acc: f64,
    pub selection_ratio_clean: f64,
    pub selection_ratio_noisy: f64,
    pub selected_majority_acc: f64,
    pub unselected_majority_acc: f64,
    pub realized_noise: f64,
    pub initial_noise: f64,
    pub mean_slope: f64,
    pub mean_l_t: f64,
    pub mean_reward: f64,
}

/// One row of `events.csv`: the per-(epoch, prompt) refinement state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRow {
    pub epoch: u32,
    pub prompt_id: PromptId,
    pub majority: AnswerId,
    pub pass_rate: f64,
    pub slope: f64,
    pub consistent: bool,
    pub selected: bool,
    pub effective_label: Label,
    pub noise_class: NoiseClass,
}

/// Serialized per-(prompt, answer) geometry, enough to rebuild the
/// feature map bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: PromptId,
    pub answers: Vec<AnswerId>,
    pub true_answer: AnswerId,
    pub skill: SkillId,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub coupling_alpha: f64,
    pub dim: usize,
    pub prompts: Vec<PromptRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseAssignment {
    pub prompt_id: PromptId,
    pub class: NoiseClass,
    pub initial_label: Label,
    pub final_label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelChange {
    pub epoch: u32,
    pub label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptLabelHistory {
    pub prompt_id: PromptId,
    pub changes: Vec<LabelChange>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseManifest {
    pub noise_type: NoiseType,
    pub active_mode: ActiveMode,
    pub rho: f64,
    pub noisy_count: usize,
    pub assignments: Vec<NoiseAssignment>,
    /// Per-epoch label changes of dynamically re-assigned active prompts
    /// (epoch 0 is the injected label).
    pub label_history: Vec<PromptLabelHistory>,
}

/// Replayable record of a completed (or aborted) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: RunConfig,
    /// Analog regularizer descriptors, so the answer-level approximations
    /// are never mistaken for token-level methods.
    pub regularizers: Vec<LossTerm>,
    pub dataset: DatasetManifest,
    pub noise: NoiseManifest,
    pub trajectories: Vec<MajorityTrajectory>,
    pub final_theta: Vec<f64>,
}

/// Everything a run produces, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<EpochMetrics>,
    pub theory: Vec<TheoryReport>,
    pub events: Vec<EventRow>,
    /// Per epoch, per prompt (in id order): norm of that prompt's update
    /// step gradient; 0 when the prompt was not selected.
    pub grad_norms: Vec<Vec<(PromptId, f64)>>,
    /// Mean log-ratio over active prompts at the initial policy, before any
    /// update (NaN when no active prompts exist).
    pub initial_mean_log_ratio: f64,
    /// Mean log-ratio over active prompts at the final policy.
    pub final_mean_log_ratio: f64,
    pub manifest: Manifest,
}

fn frac(hits: usize, total: usize) -> f64 {
    if total == 0 {
        f64::NAN
    } else {
        hits as f64 / total as f64
    }
}

fn mean_or_nan(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn dataset_manifest(
    cfg: &RunConfig,
    dataset: &[LabeledPrompt],
    fm: &FeatureMap,
) -> DatasetManifest {
    DatasetManifest {
        seed: cfg.seed,
        coupling_alpha: cfg.coupling_alpha,
        dim: cfg.dim,
        prompts: dataset
            .iter()
            .map(|p| PromptRecord {
                prompt_id: p.prompt_id(),
                answers: p.space.answers.clone(),
                true_answer: p.space.true_answer,
                skill: fm.skill(p.prompt_id()),
                features: p
                    .space
                    .answers
                    .iter()
                    .map(|&a| fm.feature(p.prompt_id(), a).to_vec())
                    .collect(),
            })
            .collect(),
    }
}

/// Rebuild a dataset and feature map from a manifest's records.
pub fn dataset_from_manifest(
    m: &DatasetManifest,
    assignments: &[NoiseAssignment],
) -> SimResult<(Vec<LabeledPrompt>, FeatureMap)> {
    let mut fm = FeatureMap::new(m.dim, m.coupling_alpha);
    let labels: BTreeMap<PromptId, (NoiseClass, Label)> = assignments
        .iter()
        .map(|a| (a.prompt_id, (a.class, a.final_label)))
        .collect();
    let mut dataset = Vec::with_capacity(m.prompts.len());
    for rec in &m.prompts {
        fm.set_skill(rec.prompt_id, rec.skill);
        for (&a, f) in rec.answers.iter().zip(&rec.features) {
            fm.insert(rec.prompt_id, a, f.clone());
        }
        let space = AnswerSpace::new(rec.prompt_id, rec.answers.clone(), rec.true_answer)?;
        let mut prompt = LabeledPrompt::clean(space);
        if let Some(&(class, label)) = labels.get(&rec.prompt_id) {
            prompt.noise_class = class;
            prompt.train_label = label;
        }
        dataset.push(prompt);
    }
    Ok((dataset, fm))
}

fn mean_log_ratio_active(params: &PolicyParams, fm: &FeatureMap, dataset: &[LabeledPrompt]) -> f64 {
    let ratios: Vec<f64> = dataset
        .iter()
        .filter(|p| p.noise_class == NoiseClass::Active)
        .filter_map(|p| log_ratio(params, fm, p).ok())
        .collect();
    mean_or_nan(&ratios)
}

struct EpochState {
    batches: Vec<RolloutBatch>,
    effective: BTreeMap<PromptId, Label>,
    selected: BTreeMap<PromptId, bool>,
}

/// Theory snapshot at the epoch-start policy.
#[allow(clippy::too_many_arguments)]
fn theory_snapshot(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    fm: &FeatureMap,
    dataset: &[LabeledPrompt],
    batches: &[RolloutBatch],
    realized_noise: f64,
    beta: f64,
    seed: u64,
    epoch: u32,
) -> TheoryReport {
    let clean: Vec<&LabeledPrompt> = dataset
        .iter()
        .filter(|p| p.noise_class == NoiseClass::Clean)
        .collect();
    let noisy: Vec<&LabeledPrompt> = dataset
        .iter()
        .filter(|p| p.noise_class != NoiseClass::Clean)
        .collect();
    let gamma = measure_coupling(
        params,
        fm,
        &clean,
        &noisy,
        COUPLING_PAIRS,
        &mut rng::stream(seed, "coupling", &[epoch as u64]),
    );
    let (g_clean, g_noisy) = advantage_magnitudes(batches, dataset);

    let mut log_ratios = BTreeMap::new();
    let mut ref_ratios = Vec::new();
    for p in dataset {
        if p.noise_class != NoiseClass::Active {
            continue;
        }
        if let Ok(l) = log_ratio(params, fm, p) {
            log_ratios.insert(p.prompt_id(), l);
        }
        if let Ok(l) = log_ratio(ref_params, fm, p) {
            ref_ratios.push(l);
        }
    }
    let delta_ref = mean_or_nan(&ref_ratios);

    let all_finite = gamma.is_finite() && g_clean.is_finite() && g_noisy.is_finite();
    let rho_c = if all_finite {
        critical_ratio(gamma, g_clean, g_noisy).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let (rho_c_kl_raw, rho_c_kl) = if all_finite && delta_ref.is_finite() {
        match critical_ratio_kl(gamma, g_clean, g_noisy, beta, delta_ref) {
            Ok(kl) => (kl.raw, kl.clamped),
            Err(_) => (f64::NAN, f64::NAN),
        }
    } else {
        (f64::NAN, f64::NAN)
    };
    let drift_val = if all_finite {
        drift(gamma, realized_noise, g_clean, g_noisy)
    } else {
        f64::NAN
    };

    TheoryReport {
        gamma,
        g_clean,
        g_noisy,
        rho_c,
        rho_c_kl_raw,
        rho_c_kl,
        delta_ref,
        drift: drift_val,
        log_ratios,
    }
}

struct RunState {
    cfg: RunConfig,
    dataset: Vec<LabeledPrompt>,
    fm: FeatureMap,
    params: PolicyParams,
    ref_params: PolicyParams,
    trajectories: Vec<MajorityTrajectory>,
    label_history: BTreeMap<PromptId, Vec<LabelChange>>,
    initial_labels: BTreeMap<PromptId, Label>,
    initial_noise: f64,
    metrics: Vec<EpochMetrics>,
    theory: Vec<TheoryReport>,
    events: Vec<EventRow>,
    grad_norms: Vec<Vec<(PromptId, f64)>>,
    initial_mean_log_ratio: f64,
}

impl RunState {
    fn init(cfg: &RunConfig) -> SimResult<Self> {
        cfg.validate()?;
        let (clean_dataset, fm) = crate::model::generate_dataset(
            cfg.n_prompts,
            cfg.answers_per_prompt,
            cfg.n_skills,
            cfg.coupling_alpha,
            cfg.dim,
            cfg.seed,
        )?;
        let params = PolicyParams::zeros(cfg.dim);
        let ref_params = params.clone();

        let mut noise_rng = rng::stream(cfg.seed, "noise", &[]);
        let dataset = match cfg.noise_type {
            NoiseType::Inactive => inject_inactive_noise(&clean_dataset, cfg.rho, &mut noise_rng)?,
            NoiseType::Active => inject_active_noise(
                &clean_dataset,
                cfg.rho,
                &params,
                &fm,
                cfg.active_mode,
                &mut noise_rng,
            )?,
        };
        let initial_labels: BTreeMap<PromptId, Label> = dataset
            .iter()
            .map(|p| (p.prompt_id(), p.train_label))
            .collect();
        let mut label_history: BTreeMap<PromptId, Vec<LabelChange>> = BTreeMap::new();
        for p in &dataset {
            if p.noise_class != NoiseClass::Clean {
                label_history.insert(
                    p.prompt_id(),
                    vec![LabelChange {
                        epoch: 0,
                        label: p.train_label,
                    }],
                );
            }
        }
        let trajectories: Vec<MajorityTrajectory> = dataset
            .iter()
            .map(|p| MajorityTrajectory::new(p.prompt_id()))
            .collect();
        let initial_noise = noisy_count(cfg.rho, dataset.len()) as f64 / dataset.len() as f64;
        let initial_mean_log_ratio = mean_log_ratio_active(&params, &fm, &dataset);

        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            fm,
            params,
            ref_params,
            trajectories,
            label_history,
            initial_labels,
            initial_noise,
            metrics: Vec::new(),
            theory: Vec::new(),
            events: Vec::new(),
            grad_norms: Vec::new(),
            initial_mean_log_ratio,
        })
    }

    fn sample_epoch(&self, epoch: u32) -> BTreeMap<PromptId, Vec<AnswerId>> {
        self.dataset
            .iter()
            .map(|p| {
                let mut r = rng::stream(
                    self.cfg.seed,
                    "rollout",
                    &[epoch as u64, p.prompt_id() as u64],
                );
                let answers = sample_rollouts(
                    &self.params,
                    &self.fm,
                    &p.space,
                    self.cfg.k as usize,
                    &mut r,
                );
                (p.prompt_id(), answers)
            })
            .collect()
    }

    fn refresh_dynamic_labels(
        &mut self,
        epoch: u32,
        rollouts: &BTreeMap<PromptId, Vec<AnswerId>>,
    ) -> SimResult<()> {
        if self.cfg.noise_type != NoiseType::Active
            || self.cfg.active_mode != ActiveMode::DynamicPerEpoch
        {
            return Ok(());
        }
        let before: BTreeMap<PromptId, Label> = self
            .dataset
            .iter()
            .map(|p| (p.prompt_id(), p.train_label))
            .collect();
        self.dataset = refresh_active_labels(&self.dataset, rollouts)?;
        for p in &self.dataset {
            if p.noise_class == NoiseClass::Active && before[&p.prompt_id()] != p.train_label {
                self.label_history
                    .get_mut(&p.prompt_id())
                    .expect("active prompt has history")
                    .push(LabelChange {
                        epoch,
                        label: p.train_label,
                    });
            }
        }
        Ok(())
    }

    fn effective_labels(
        &self,
        epoch: u32,
        rollouts: &BTreeMap<PromptId, Vec<AnswerId>>,
    ) -> BTreeMap<PromptId, Label> {
        let olr_cfg = self.cfg.olr_config();
        self.dataset
            .iter()
            .zip(&self.trajectories)
            .map(|(p, traj)| {
                let label = match self.cfg.strategy {
                    Strategy::Olr => traj.effective_label(p.train_label, epoch, &olr_cfg),
                    Strategy::Ttrl => ttrl_label(&rollouts[&p.prompt_id()]),
                    _ => p.train_label,
                };
                (p.prompt_id(), label)
            })
            .collect()
    }

    fn build_batches(
        &self,
        epoch: u32,
        rollouts: &BTreeMap<PromptId, Vec<AnswerId>>,
        effective: &BTreeMap<PromptId, Label>,
    ) -> Vec<RolloutBatch> {
        self.dataset
            .iter()
            .map(|p| {
                let id = p.prompt_id();
                let answers = rollouts[&id].clone();
                let mut rewards: Vec<f64> = answers
                    .iter()
                    .map(|&a| verify_reward(a, effective[&id]))
                    .collect();
                if self.cfg.strategy == Strategy::LabelSmooth {
                    rewards = smooth_rewards(&rewards, self.cfg.reg_lambda, p.space.answers.len());
                }
                let advantages = group_advantages(&rewards, self.cfg.adv_eps);
                RolloutBatch {
                    prompt_id: id,
                    epoch,
                    answers,
                    rewards,
                    advantages,
                }
            })
            .collect()
    }

    fn select(&self, epoch: u32, batches: &[RolloutBatch]) -> SimResult<BTreeMap<PromptId, bool>> {
        let ids: Vec<PromptId> = self.dataset.iter().map(|p| p.prompt_id()).collect();
        let chosen: Vec<PromptId> = match self.cfg.strategy {
            Strategy::RandomSelect => {
                let fraction = self.cfg.selection_fraction.expect("validated");
                let mut r = rng::stream(self.cfg.seed, "select", &[epoch as u64]);
                random_select(&ids, fraction, &mut r)?
            }
            Strategy::SmallLoss => {
                let fraction = self.cfg.selection_fraction.expect("validated");
                let losses: Vec<(PromptId, f64)> = self
                    .dataset
                    .iter()
                    .zip(batches)
                    .map(|(p, b)| {
                        (
                            p.prompt_id(),
                            surrogate_loss(&self.params, &self.fm, &p.space, b),
                        )
                    })
                    .collect();
                small_loss_select(&losses, fraction)?
            }
            Strategy::Olr => {
                let olr_cfg = self.cfg.olr_config();
                self.trajectories
                    .iter()
                    .filter(|t| t.fires(epoch, &olr_cfg))
                    .map(|t| t.prompt_id)
                    .collect()
            }
            _ => ids.clone(),
        };
        let mut map: BTreeMap<PromptId, bool> = ids.iter().map(|&i| (i, false)).collect();
        for id in chosen {
            map.insert(id, true);
        }
        Ok(map)
    }

    /// One clipped policy-gradient step per participating prompt batch, in
    /// prompt-id order. Returns per-prompt step gradient norms. The
    /// `selected` flag restricts training only for the subset-selection
    /// strategies; for the refiner it marks label replacement.
    fn update(&mut self, state: &EpochState) -> SimResult<Vec<(PromptId, f64)>> {
        let subset_training = matches!(
            self.cfg.strategy,
            Strategy::RandomSelect | Strategy::SmallLoss
        );
        let ucfg = self.cfg.update_config();
        let old_params = self.params.clone();
        let mut norms = Vec::with_capacity(self.dataset.len());
        for (p, batch) in self.dataset.iter().zip(&state.batches) {
            let id = p.prompt_id();
            if subset_training && !state.selected[&id] {
                norms.push((id, 0.0));
                continue;
            }
            let mut g = batch_gradient(
                &self.params,
                &old_params,
                &self.ref_params,
                &self.fm,
                &p.space,
                batch,
                &ucfg,
            )?;
            if self.cfg.strategy == Strategy::ConfPenalty && self.cfg.reg_lambda > 0.0 {
                let h = entropy_grad(&self.params, &self.fm, &p.space);
                for (gi, hi) in g.iter_mut().zip(&h) {
                    *gi += self.cfg.reg_lambda * hi;
                }
            }
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push((id, norm));
            for (t, gi) in self.params.theta.iter_mut().zip(&g) {
                *t += ucfg.eta * gi;
            }
            if !self.params.is_finite() {
                return Err(SimError::Update {
                    prompt: id,
                    msg: "non-finite parameters".into(),
                });
            }
        }
        Ok(norms)
    }

    fn record_epoch(
        &mut self,
        epoch: u32,
        state: &EpochState,
        report: TheoryReport,
        realized: f64,
    ) {
        let mut clean_hits = 0;
        let mut clean_total = 0;
        let mut noisy_hits = 0;
        let mut noisy_total = 0;
        let mut sel_clean = 0;
        let mut sel_noisy = 0;
        let mut sel_hits = 0;
        let mut sel_total = 0;
        let mut unsel_hits = 0;
        let mut unsel_total = 0;
        let mut slopes = Vec::new();
        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;

        for ((p, traj), batch) in self
            .dataset
            .iter()
            .zip(&self.trajectories)
            .zip(&state.batches)
        {
            let id = p.prompt_id();
            let entry = traj.latest().expect("trajectory updated this epoch");
            let majority_correct = entry.majority == p.space.true_answer;
            let selected = state.selected[&id];
            match p.noise_class {
                NoiseClass::Clean => {
                    clean_total += 1;
                    clean_hits += majority_correct as usize;
                    sel_clean += selected as usize;
                }
                _ => {
                    noisy_total += 1;
                    noisy_hits += majority_correct as usize;
                    sel_noisy += selected as usize;
                }
            }
            if selected {
                sel_total += 1;
                sel_hits += majority_correct as usize;
            } else {
                unsel_total += 1;
                unsel_hits += majority_correct as usize;
            }
            if let Some(s) = traj.slope() {
                slopes.push(s);
            }
            reward_sum += batch.rewards.iter().sum::<f64>();
            reward_n += batch.k();

            self.events.push(EventRow {
                epoch,
                prompt_id: id,
                majority: entry.majority,
                pass_rate: entry.pass_rate,
                slope: traj.slope().unwrap_or(f64::NAN),
                consistent: traj.consistent(),
                selected,
                effective_label: state.effective[&id],
                noise_class: p.noise_class,
            });
        }

        self.metrics.push(EpochMetrics {
            epoch,
            clean_majority_acc: frac(clean_hits, clean_total),
            noisy_majority_acc: frac(noisy_hits, noisy_total),
            selection_ratio_clean: frac(sel_clean, clean_total),
            selection_ratio_noisy: frac(sel_noisy, noisy_total),
            selected_majority_acc: frac(sel_hits, sel_total),
            unselected_majority_acc: frac(unsel_hits, unsel_total),
            realized_noise: realized,
            initial_noise: self.initial_noise,
            mean_slope: mean_or_nan(&slopes),
            mean_l_t: report.mean_log_ratio(),
            mean_reward: if reward_n == 0 {
                f64::NAN
            } else {
                reward_sum / reward_n as f64
            },
        });
        self.theory.push(report);
    }

    fn run_epoch(&mut self, epoch: u32) -> SimResult<()> {
        let rollouts = self.sample_epoch(epoch);
        self.refresh_dynamic_labels(epoch, &rollouts)?;
        for (p, traj) in self.dataset.iter().zip(self.trajectories.iter_mut()) {
            traj.update(epoch, &rollouts[&p.prompt_id()], None)?;
        }
        let effective = self.effective_labels(epoch, &rollouts);
        let batches = self.build_batches(epoch, &rollouts, &effective);
        let selected = self.select(epoch, &batches)?;
        let state = EpochState {
            batches,
            effective,
            selected,
        };

        let realized = measure_realized_noise(&self.dataset, &state.effective)?;
        let report = theory_snapshot(
            &self.params,
            &self.ref_params,
            &self.fm,
            &self.dataset,
            &state.batches,
            realized,
            self.cfg.beta,
            self.cfg.seed,
            epoch,
        );

        let norms = self.update(&state)?;
        self.grad_norms.push(norms);
        self.record_epoch(epoch, &state, report, realized);
        Ok(())
    }

    fn into_output(self) -> RunOutput {
        let final_mean_log_ratio = mean_log_ratio_active(&self.params, &self.fm, &self.dataset);
        let assignments = self
            .dataset
            .iter()
            .filter(|p| p.noise_class != NoiseClass::Clean)
            .map(|p| NoiseAssignment {
                prompt_id: p.prompt_id(),
                class: p.noise_class,
                initial_label: self.initial_labels[&p.prompt_id()],
                final_label: p.train_label,
            })
            .collect();
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.cfg.clone(),
            regularizers: entropy_regularizers(
                if self.cfg.strategy == Strategy::ConfPenalty {
                    self.cfg.reg_lambda
                } else {
                    0.0
                },
                if self.cfg.strategy == Strategy::LabelSmooth {
                    self.cfg.reg_lambda
                } else {
                    0.0
                },
            )
            .expect("validated lambda"),
            dataset: dataset_manifest(&self.cfg, &self.dataset, &self.fm),
            noise: NoiseManifest {
                noise_type: self.cfg.noise_type,
                active_mode: self.cfg.active_mode,
                rho: self.cfg.rho,
                noisy_count: noisy_count(self.cfg.rho, self.dataset.len()),
                assignments,
                label_history: self
                    .label_history
                    .into_iter()
                    .map(|(prompt_id, changes)| PromptLabelHistory { prompt_id, changes })
                    .collect(),
            },
            trajectories: self.trajectories,
            final_theta: self.params.theta,
        };
        RunOutput {
            metrics: self.metrics,
            theory: self.theory,
            events: self.events,
            grad_norms: self.grad_norms,
            initial_mean_log_ratio: self.initial_mean_log_ratio,
            final_mean_log_ratio,
            manifest,
        }
    }
}

/// Error plus whatever rows were produced before it, so callers can flush
/// partial outputs.
pub struct RunFailure {
    pub error: SimError,
    pub partial_metrics: Vec<EpochMetrics>,
    pub partial_events: Vec<EventRow>,
}

/// Run the full loop, keeping partial rows on failure.
pub fn run_experiment_partial(cfg: &RunConfig) -> Result<RunOutput, Box<RunFailure>> {
    let mut state = RunState::init(cfg).map_err(|error| {
        Box::new(RunFailure {
            error,
            partial_metrics: Vec::new(),
            partial_events: Vec::new(),
        })
    })?;
    for epoch in 1..=cfg.epochs {
        if let Err(error) = state.run_epoch(epoch) {
            let error = match error {
                SimError::Update { prompt, msg } => SimError::Update {
                    prompt,
                    msg: format!("{msg} (epoch {epoch})"),
                },
                other => other,
            };
            return Err(Box::new(RunFailure {
                error,
                partial_metrics: state.metrics,
                partial_events: state.events,
            }));
        }
    }
    Ok(state.into_output())
}

/// Execute one experiment. Identical configurations produce byte-identical
/// outputs.
pub fn run_experiment(cfg: &RunConfig) -> SimResult<RunOutput> {
    run_experiment_partial(cfg).map_err(|f| f.error)
}

/// Recompute the theory quantities for a finished run: rebuild the dataset
/// and final policy from the manifest, sample one fresh rollout group per
/// prompt, and measure coupling, advantage magnitudes, critical ratios, and
/// log-ratios at that snapshot.
pub fn probe_manifest(manifest: &Manifest) -> SimResult<TheoryReport> {
    let cfg = &manifest.config;
    let (dataset, fm) = dataset_from_manifest(&manifest.dataset, &manifest.noise.assignments)?;
    let params = PolicyParams {
        theta: manifest.final_theta.clone(),
    };
    if params.theta.len() != cfg.dim {
        return Err(SimError::Config(
            "manifest final_theta length does not match dim".into(),
        ));
    }
    let ref_params = PolicyParams::zeros(cfg.dim);
    let batches: Vec<RolloutBatch> = dataset
        .iter()
        .map(|p| {
            let mut r = rng::stream(cfg.seed, "probe", &[p.prompt_id() as u64]);
            let answers = sample_rollouts(&params, &fm, &p.space, cfg.k as usize, &mut r);
            let rewards: Vec<f64> = answers
                .iter()
                .map(|&a| verify_reward(a, p.train_label))
                .collect();
            let advantages = group_advantages(&rewards, cfg.adv_eps);
            RolloutBatch {
                prompt_id: p.prompt_id(),
                epoch: 0,
                answers,
                rewards,
                advantages,
            }
        })
        .collect();
    let effective: BTreeMap<PromptId, Label> = dataset
        .iter()
        .map(|p| (p.prompt_id(), p.train_label))
        .collect();
    let realized = measure_realized_noise(&dataset, &effective)?;
    Ok(theory_snapshot(
        &params,
        &ref_params,
        &fm,
        &dataset,
        &batches,
        realized,
        cfg.beta,
        cfg.seed,
        0,
    ))
}

/// One cell of a noise-ratio sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRow {
    pub rho: f64,
    pub seed: u64,
    pub rho_realized: f64,
    pub l_start: f64,
    pub l_final: f64,
    /// Final mean log-ratio did not fall below its initial value; vacuously
    /// true when the run has no active prompts.
    pub coherent: bool,
    pub noisy_majority_acc_final: f64,
    /// Measured critical ratio averaged over the warmup window.
    pub rho_c_hat: f64,
}

/// Warmup-window average of the measured critical ratio.
pub fn warmup_rho_c_hat(output: &RunOutput, warmup_t: u32) -> f64 {
    let vals: Vec<f64> = output
        .theory
        .iter()
        .take(warmup_t as usize)
        .map(|t| t.rho_c)
        .filter(|v| v.is_finite())
        .collect();
    mean_or_nan(&vals)
}

/// Run the (rho, seed) grid and collect one row per cell.
pub fn sweep_phase_diagram(
    base: &RunConfig,
    rho_values: &[f64],
    seeds: &[u64],
) -> SimResult<Vec<PhaseRow>> {
    if rho_values.is_empty() || seeds.is_empty() {
        return Err(SimError::Config(
            "sweep needs nonempty rho_values and seeds".into(),
        ));
    }
    let mut rows = Vec::with_capacity(rho_values.len() * seeds.len());
    for &rho in rho_values {
        for &seed in seeds {
            let cfg = RunConfig {
                rho,
                seed,
                ..base.clone()
            };
            let out = run_experiment(&cfg)?;
            let l_start = out.initial_mean_log_ratio;
            let l_final = out.final_mean_log_ratio;
            let coherent = if l_start.is_nan() || l_final.is_nan() {
                true
            } else {
                l_final >= l_start
            };
            rows.push(PhaseRow {
                rho,
                seed,
                rho_realized: noisy_count(rho, cfg.n_prompts as usize) as f64
                    / cfg.n_prompts as f64,
                l_start,
                l_final,
                coherent,
                noisy_majority_acc_final: out
                    .metrics
                    .last()
                    .map(|m| m.noisy_majority_acc)
                    .unwrap_or(f64::NAN),
                rho_c_hat: warmup_rho_c_hat(&out, cfg.warmup_t),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            n_prompts: 12,
            answers_per_prompt: 3,
            n_skills: 2,
            dim: 8,
            k: 4,
            epochs: 3,
            rho: 0.5,
            eta: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_yields_empty_series_and_initial_policy() {
        let cfg = RunConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let out = run_experiment(&cfg).unwrap();
        assert!(out.metrics.is_empty());
        assert!(out.events.is_empty());
        assert!(out.theory.is_empty());
        assert_eq!(out.manifest.final_theta, vec![0.0; cfg.dim]);
    }

    #[test]
    fn event_rows_cover_epochs_times_prompts() {
        let cfg = tiny_cfg();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.events.len(), (cfg.epochs * cfg.n_prompts) as usize);
        assert_eq!(out.metrics.len(), cfg.epochs as usize);
        assert_eq!(out.grad_norms.len(), cfg.epochs as usize);
    }

    #[test]
    fn identical_configs_reproduce_identical_outputs() {
        let cfg = tiny_cfg();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.manifest.final_theta, b.manifest.final_theta);
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(
                serde_json::to_string(x).unwrap(),
                serde_json::to_string(y).unwrap()
            );
        }
    }

    #[test]
    fn olr_on_clean_data_matches_grpo_label_stream() {
        // Non-interference: with rho = 0 and majorities settled on the true
        // answers by the end of warmup, the refiner never changes an
        // effective label, so the two strategies see identical streams.
        let base = RunConfig {
            rho: 0.0,
            n_prompts: 12,
            answers_per_prompt: 3,
            n_skills: 1,
            coupling_alpha: 0.8,
            dim: 16,
            k: 8,
            eta: 1.0,
            epochs: 12,
            ..Default::default()
        };
        let grpo = run_experiment(&RunConfig {
            strategy: Strategy::Grpo,
            ..base.clone()
        })
        .unwrap();
        let olr = run_experiment(&RunConfig {
            strategy: Strategy::Olr,
            ..base.clone()
        })
        .unwrap();
        for (a, b) in grpo.events.iter().zip(&olr.events) {
            assert_eq!(
                a.effective_label, b.effective_label,
                "epoch {} prompt {}",
                a.epoch, a.prompt_id
            );
        }
        assert_eq!(grpo.manifest.final_theta, olr.manifest.final_theta);
    }

    #[test]
    fn inactive_noise_contributes_zero_gradient() {
        let cfg = RunConfig {
            noise_type: NoiseType::Inactive,
            rho: 0.5,
            epochs: 4,
            beta: 0.0,
            ..tiny_cfg()
        };
        let out = run_experiment(&cfg).unwrap();
        let noisy: std::collections::BTreeSet<PromptId> = out
            .manifest
            .noise
            .assignments
            .iter()
            .map(|a| a.prompt_id)
            .collect();
        assert!(!noisy.is_empty());
        for epoch_norms in &out.grad_norms {
            for &(id, norm) in epoch_norms {
                if noisy.contains(&id) {
                    assert_eq!(norm, 0.0, "prompt {id}");
                }
            }
        }
    }

    #[test]
    fn ttrl_ignores_training_labels() {
        let a = run_experiment(&RunConfig {
            strategy: Strategy::Ttrl,
            rho: 0.2,
            ..tiny_cfg()
        })
        .unwrap();
        let b = run_experiment(&RunConfig {
            strategy: Strategy::Ttrl,
            rho: 0.8,
            ..tiny_cfg()
        })
        .unwrap();
        assert_eq!(a.manifest.final_theta, b.manifest.final_theta);
        for (x, y) in a.events.iter().zip(&b.events) {
            assert_eq!(x.majority, y.majority);
            assert_eq!(x.effective_label, y.effective_label);
        }
    }

    #[test]
    fn selection_strategies_mark_subsets() {
        let cfg = RunConfig {
            strategy: Strategy::RandomSelect,
            selection_fraction: Some(0.5),
            ..tiny_cfg()
        };
        let out = run_experiment(&cfg).unwrap();
        for epoch in 1..=cfg.epochs {
            let selected = out
                .events
                .iter()
                .filter(|e| e.epoch == epoch && e.selected)
                .count();
            assert_eq!(selected, 6);
        }
    }

    #[test]
    fn warmup_blocks_olr_replacement() {
        let cfg = RunConfig {
            strategy: Strategy::Olr,
            epochs: 5,
            warmup_t: 5,
            ..tiny_cfg()
        };
        let out = run_experiment(&cfg).unwrap();
        assert!(out.events.iter().all(|e| !e.selected));
    }

    #[test]
    fn sweep_grid_shape_and_clean_regime() {
        let base = RunConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let rows = sweep_phase_diagram(&base, &[0.0, 0.5], &[1, 2, 3]).unwrap();
        assert_eq!(rows.len(), 6);
        for row in rows.iter().filter(|r| r.rho == 0.0) {
            assert!(row.coherent, "clean regime must report coherence");
            assert!(row.l_start.is_nan());
        }
    }

    #[test]
    fn sweep_at_full_active_noise_collapses() {
        // With every label active-noisy there is no clean signal; the
        // median log-ratio must fall over the run.
        let base = RunConfig {
            n_prompts: 24,
            answers_per_prompt: 3,
            n_skills: 1,
            coupling_alpha: 0.5,
            dim: 16,
            k: 8,
            epochs: 10,
            eta: 0.5,
            noise_type: NoiseType::Active,
            active_mode: ActiveMode::DynamicPerEpoch,
            ..Default::default()
        };
        let seeds: Vec<u64> = (0..20).collect();
        let rows = sweep_phase_diagram(&base, &[1.0], &seeds).unwrap();
        let mut gains: Vec<f64> = rows.iter().map(|r| r.l_final - r.l_start).collect();
        gains.sort_by(f64::total_cmp);
        let med = gains[gains.len() / 2];
        assert!(med < 0.0, "median log-ratio gain {med} at rho = 1");
    }

    #[test]
    fn manifest_dataset_round_trips() {
        let cfg = tiny_cfg();
        let out = run_experiment(&cfg).unwrap();
        let (dataset, fm) =
            dataset_from_manifest(&out.manifest.dataset, &out.manifest.noise.assignments).unwrap();
        assert_eq!(dataset.len(), cfg.n_prompts as usize);
        for p in &dataset {
            for &a in &p.space.answers {
                let f = fm.feature(p.prompt_id(), a);
                assert_eq!(f.len(), cfg.dim);
            }
        }
        let noisy = dataset
            .iter()
            .filter(|p| p.noise_class != NoiseClass::Clean)
            .count();
        assert_eq!(noisy, out.manifest.noise.noisy_count);
    }
}
