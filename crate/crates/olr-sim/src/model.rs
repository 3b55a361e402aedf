//! Synthetic task family and the shared-parameter softmax policy.
//!
//! Each prompt has a finite answer space with one true answer. The policy is
//! linear-softmax over per-(prompt, answer) feature vectors: correct-answer
//! features mix a per-skill direction with an idiosyncratic unit vector, so a
//! single parameter vector couples prompts of the same skill. Wrong-answer
//! features are independent random unit vectors. Features are frozen at
//! generation; only the parameter vector trains.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{SimError, SimResult};
use crate::rng;

pub type PromptId = u32;
pub type AnswerId = u32;
pub type SkillId = u32;

/// A training label: either an answer inside the prompt's answer space, or
/// the infeasible sentinel, which lives outside every answer space so the
/// policy's probability of producing it is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Answer(AnswerId),
    Infeasible,
}

impl Label {
    pub fn answer(self) -> Option<AnswerId> {
        match self {
            Label::Answer(a) => Some(a),
            Label::Infeasible => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Answer(a) => write!(f, "{a}"),
            Label::Infeasible => write!(f, "infeasible"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Label::Answer(a) => s.serialize_u32(*a),
            Label::Infeasible => s.serialize_str("infeasible"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(a) => Ok(Label::Answer(a)),
            Raw::Text(t) if t == "infeasible" => Ok(Label::Infeasible),
            Raw::Text(t) => Err(D::Error::custom(format!("unknown label {t:?}"))),
        }
    }
}

/// Classification of a training label by rollout feasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseClass {
    /// Label equals the true answer.
    Clean,
    /// Label is not rollout-feasible; all rollouts receive equal reward.
    Inactive,
    /// Label is a wrong but rollout-feasible answer; it can be reinforced.
    Active,
}

impl std::fmt::Display for NoiseClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseClass::Clean => write!(f, "clean"),
            NoiseClass::Inactive => write!(f, "inactive"),
            NoiseClass::Active => write!(f, "active"),
        }
    }
}

/// One prompt's answer universe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpace {
    pub prompt_id: PromptId,
    pub answers: Vec<AnswerId>,
    pub true_answer: AnswerId,
}

impl AnswerSpace {
    pub fn new(
        prompt_id: PromptId,
        answers: Vec<AnswerId>,
        true_answer: AnswerId,
    ) -> SimResult<Self> {
        if answers.len() < 2 {
            return Err(SimError::Config(format!(
                "prompt {prompt_id}: answer space needs at least 2 answers"
            )));
        }
        let mut sorted = answers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != answers.len() {
            return Err(SimError::Config(format!(
                "prompt {prompt_id}: duplicate answer ids"
            )));
        }
        if !answers.contains(&true_answer) {
            return Err(SimError::Config(format!(
                "prompt {prompt_id}: true answer {true_answer} not in answer space"
            )));
        }
        Ok(Self {
            prompt_id,
            answers,
            true_answer,
        })
    }

    pub fn contains(&self, answer: AnswerId) -> bool {
        self.answers.contains(&answer)
    }
}

/// Frozen feature geometry: one unit vector per (prompt, answer) pair plus
/// the skill assignment and the coupling knob used to generate it.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    dim: usize,
    coupling_alpha: f64,
    phi: std::collections::BTreeMap<(PromptId, AnswerId), Vec<f64>>,
    skill_of: std::collections::BTreeMap<PromptId, SkillId>,
}

impl FeatureMap {
    pub fn new(dim: usize, coupling_alpha: f64) -> Self {
        Self {
            dim,
            coupling_alpha,
            phi: Default::default(),
            skill_of: Default::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coupling_alpha(&self) -> f64 {
        self.coupling_alpha
    }

    pub fn insert(&mut self, prompt: PromptId, answer: AnswerId, feature: Vec<f64>) {
        debug_assert_eq!(feature.len(), self.dim);
        self.phi.insert((prompt, answer), feature);
    }

    pub fn set_skill(&mut self, prompt: PromptId, skill: SkillId) {
        self.skill_of.insert(prompt, skill);
    }

    pub fn feature(&self, prompt: PromptId, answer: AnswerId) -> &[f64] {
        &self.phi[&(prompt, answer)]
    }

    pub fn skill(&self, prompt: PromptId) -> SkillId {
        self.skill_of[&prompt]
    }
}

/// The trainable parameter vector shared across all prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            theta: vec![0.0; dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// A prompt together with its (possibly corrupted) training label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledPrompt {
    pub space: AnswerSpace,
    pub train_label: Label,
    pub noise_class: NoiseClass,
}

impl LabeledPrompt {
    pub fn clean(space: AnswerSpace) -> Self {
        let train_label = Label::Answer(space.true_answer);
        Self {
            space,
            train_label,
            noise_class: NoiseClass::Clean,
        }
    }

    pub fn prompt_id(&self) -> PromptId {
        self.space.prompt_id
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u clamped away from 0.
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn random_unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalize(mut v: Vec<f64>) -> SimResult<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(SimError::Config("degenerate feature vector".into()));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Orthonormal skill directions via modified Gram-Schmidt on Gaussian draws.
fn skill_directions(rng: &mut ChaCha8Rng, n_skills: usize, dim: usize) -> SimResult<Vec<Vec<f64>>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n_skills);
    for _ in 0..n_skills {
        let mut v = random_unit_vec(rng, dim);
        for u in &dirs {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(SimError::Config(
                "could not build orthonormal skill directions; increase dim".into(),
            ));
        }
        dirs.push(v.into_iter().map(|x| x / norm).collect());
    }
    Ok(dirs)
}

/// Generate an all-clean dataset and its feature geometry.
///
/// Correct-answer features are `normalize(sqrt(alpha) * u_skill +
/// sqrt(1 - alpha) * g)` with `u_skill` orthonormal per skill and `g` an
/// independent random unit vector; wrong-answer features are independent
/// random unit vectors. Skills are assigned uniformly at random and the true
/// answer id is drawn uniformly within each prompt's answer space.
pub fn generate_dataset(
    n_prompts: u32,
    answers_per_prompt: u32,
    n_skills: u32,
    coupling_alpha: f64,
    dim: usize,
    rng_seed: u64,
) -> SimResult<(Vec<LabeledPrompt>, FeatureMap)> {
    if n_prompts < 1 {
        return Err(SimError::Config("n_prompts must be >= 1".into()));
    }
    if answers_per_prompt < 2 {
        return Err(SimError::Config("answers_per_prompt must be >= 2".into()));
    }
    if n_skills < 1 || n_skills > n_prompts {
        return Err(SimError::Config("need 1 <= n_skills <= n_prompts".into()));
    }
    if dim < n_skills as usize + 1 {
        return Err(SimError::Config(format!(
            "dim {dim} too small to host {n_skills} orthonormal skill directions (need >= n_skills + 1)"
        )));
    }
    if !(0.0..=1.0).contains(&coupling_alpha) {
        return Err(SimError::Config("coupling_alpha must be in [0, 1]".into()));
    }

    let mut gen = rng::stream(rng_seed, "dataset", &[]);
    let skills = skill_directions(&mut gen, n_skills as usize, dim)?;

    let mut fm = FeatureMap::new(dim, coupling_alpha);
    let mut prompts = Vec::with_capacity(n_prompts as usize);
    let sqrt_a = coupling_alpha.sqrt();
    let sqrt_1a = (1.0 - coupling_alpha).sqrt();

    for p in 0..n_prompts {
        let skill = gen.random_range(0..n_skills);
        let true_answer = gen.random_range(0..answers_per_prompt);
        fm.set_skill(p, skill);
        for a in 0..answers_per_prompt {
            let g = random_unit_vec(&mut gen, dim);
            let feature = if a == true_answer {
                let mixed: Vec<f64> = skills[skill as usize]
                    .iter()
                    .zip(&g)
                    .map(|(u, gi)| sqrt_a * u + sqrt_1a * gi)
                    .collect();
                normalize(mixed)?
            } else {
                g
            };
            fm.insert(p, a, feature);
        }
        let space = AnswerSpace::new(p, (0..answers_per_prompt).collect(), true_answer)?;
        prompts.push(LabeledPrompt::clean(space));
    }
    Ok((prompts, fm))
}

/// Logits `theta . phi(x, y)` in answer-space order.
pub fn logits(params: &PolicyParams, fm: &FeatureMap, space: &AnswerSpace) -> Vec<f64> {
    space
        .answers
        .iter()
        .map(|&a| {
            fm.feature(space.prompt_id, a)
                .iter()
                .zip(&params.theta)
                .map(|(f, t)| f * t)
                .sum()
        })
        .collect()
}

/// Softmax action distribution over the prompt's answers.
pub fn action_probs(params: &PolicyParams, fm: &FeatureMap, space: &AnswerSpace) -> Vec<f64> {
    let z = logits(params, fm, space);
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Draw `k` i.i.d. answers from the policy. The infeasible sentinel is
/// outside the answer space, so it can never be produced.
pub fn sample_rollouts(
    params: &PolicyParams,
    fm: &FeatureMap,
    space: &AnswerSpace,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<AnswerId> {
    let probs = action_probs(params, fm, space);
    (0..k)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return space.answers[i];
                }
            }
            *space.answers.last().unwrap()
        })
        .collect()
}

/// Exact score gradient of `log pi(answer | x)`:
/// `phi(x, answer) - sum_y pi(y|x) phi(x, y)`.
pub fn log_prob_grad(
    params: &PolicyParams,
    fm: &FeatureMap,
    space: &AnswerSpace,
    answer: AnswerId,
) -> SimResult<Vec<f64>> {
    if !space.contains(answer) {
        return Err(SimError::Domain(format!(
            "answer {answer} not in answer space of prompt {}",
            space.prompt_id
        )));
    }
    let probs = action_probs(params, fm, space);
    let dim = fm.dim();
    let mut mean = vec![0.0; dim];
    for (i, &a) in space.answers.iter().enumerate() {
        let f = fm.feature(space.prompt_id, a);
        for (m, x) in mean.iter_mut().zip(f) {
            *m += probs[i] * x;
        }
    }
    let target = fm.feature(space.prompt_id, answer);
    Ok(target.iter().zip(&mean).map(|(t, m)| t - m).collect())
}
