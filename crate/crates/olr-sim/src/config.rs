//! Run configuration: defaults, flat `key = value` config files, and
//! validation. CLI flags override file values; the effective configuration
//! is echoed into the run manifest.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
pub use crate::noise::ActiveMode;

/// Noise family injected at the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    Inactive,
    Active,
}

impl std::fmt::Display for NoiseType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseType::Inactive => write!(f, "inactive"),
            NoiseType::Active => write!(f, "active"),
        }
    }
}

impl FromStr for NoiseType {
    type Err = SimError;
    fn from_str(s: &str) -> SimResult<Self> {
        match s {
            "inactive" => Ok(NoiseType::Inactive),
            "active" => Ok(NoiseType::Active),
            other => Err(SimError::Config(format!("unknown noise_type {other:?}"))),
        }
    }
}

impl FromStr for ActiveMode {
    type Err = SimError;
    fn from_str(s: &str) -> SimResult<Self> {
        match s {
            "static_at_start" => Ok(ActiveMode::StaticAtStart),
            "dynamic_per_epoch" => Ok(ActiveMode::DynamicPerEpoch),
            other => Err(SimError::Config(format!("unknown active_mode {other:?}"))),
        }
    }
}

/// Label-handling strategy driving the epoch loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Grpo,
    Olr,
    Ttrl,
    RandomSelect,
    SmallLoss,
    ConfPenalty,
    LabelSmooth,
}

impl Strategy {
    pub fn needs_selection_fraction(self) -> bool {
        matches!(self, Strategy::RandomSelect | Strategy::SmallLoss)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Grpo => "grpo",
            Strategy::Olr => "olr",
            Strategy::Ttrl => "ttrl",
            Strategy::RandomSelect => "random_select",
            Strategy::SmallLoss => "small_loss",
            Strategy::ConfPenalty => "conf_penalty",
            Strategy::LabelSmooth => "label_smooth",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Strategy {
    type Err = SimError;
    fn from_str(s: &str) -> SimResult<Self> {
        match s {
            "grpo" => Ok(Strategy::Grpo),
            "olr" => Ok(Strategy::Olr),
            "ttrl" => Ok(Strategy::Ttrl),
            "random_select" => Ok(Strategy::RandomSelect),
            "small_loss" => Ok(Strategy::SmallLoss),
            "conf_penalty" => Ok(Strategy::ConfPenalty),
            "label_smooth" => Ok(Strategy::LabelSmooth),
            other => Err(SimError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Full experiment configuration. Defaults mirror the standard setup:
/// 8 rollouts per prompt, slope threshold 0.05, warmup 5 epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub n_prompts: u32,
    pub answers_per_prompt: u32,
    pub n_skills: u32,
    pub coupling_alpha: f64,
    pub dim: usize,
    #[serde(rename = "K")]
    pub k: u32,
    pub epochs: u32,
    pub noise_type: NoiseType,
    pub active_mode: ActiveMode,
    pub rho: f64,
    pub strategy: Strategy,
    pub eta: f64,
    pub beta: f64,
    pub clip_eps: f64,
    pub adv_eps: f64,
    pub delta_slope: f64,
    #[serde(rename = "warmup_T")]
    pub warmup_t: u32,
    /// Required by the selection strategies; no privileged default.
    pub selection_fraction: Option<f64>,
    /// Coefficient of the confidence-penalty / label-smoothing analogs.
    pub reg_lambda: f64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_prompts: 200,
            answers_per_prompt: 5,
            n_skills: 4,
            coupling_alpha: 0.5,
            dim: 32,
            k: 8,
            epochs: 40,
            noise_type: NoiseType::Active,
            active_mode: ActiveMode::DynamicPerEpoch,
            rho: 0.5,
            strategy: Strategy::Grpo,
            eta: 0.5,
            beta: 0.0,
            clip_eps: 0.2,
            adv_eps: 1e-6,
            delta_slope: 0.05,
            warmup_t: 5,
            selection_fraction: None,
            reg_lambda: 0.1,
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> SimResult<()> {
        if self.n_prompts < 1 {
            return Err(SimError::Config("n_prompts must be >= 1".into()));
        }
        if self.answers_per_prompt < 2 {
            return Err(SimError::Config("answers_per_prompt must be >= 2".into()));
        }
        if self.n_skills < 1 || self.n_skills > self.n_prompts {
            return Err(SimError::Config("need 1 <= n_skills <= n_prompts".into()));
        }
        if self.dim < self.n_skills as usize + 1 {
            return Err(SimError::Config("dim must be >= n_skills + 1".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling_alpha) {
            return Err(SimError::Config("coupling_alpha must be in [0, 1]".into()));
        }
        if self.k < 1 {
            return Err(SimError::Config("K must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(SimError::Config("rho must be in [0, 1]".into()));
        }
        self.update_config().validate()?;
        self.olr_config().validate()?;
        if self.strategy.needs_selection_fraction() {
            match self.selection_fraction {
                Some(f) if f > 0.0 && f <= 1.0 => {}
                Some(f) => {
                    return Err(SimError::Config(format!(
                        "selection_fraction {f} outside (0, 1]"
                    )))
                }
                None => {
                    return Err(SimError::Config(format!(
                        "strategy {} requires selection_fraction",
                        self.strategy
                    )))
                }
            }
        }
        if self.reg_lambda < 0.0 {
            return Err(SimError::Config("reg_lambda must be >= 0".into()));
        }
        Ok(())
    }

    pub fn update_config(&self) -> crate::grpo::UpdateConfig {
        crate::grpo::UpdateConfig {
            eta: self.eta,
            beta: self.beta,
            clip_eps: self.clip_eps,
            adv_eps: self.adv_eps,
        }
    }

    pub fn olr_config(&self) -> crate::olr::OlrConfig {
        crate::olr::OlrConfig {
            delta_slope: self.delta_slope,
            warmup_t: self.warmup_t,
            window: None,
        }
    }

    /// Apply one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> SimResult<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> SimResult<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| SimError::Config(format!("invalid value {value:?} for {key}: {e}")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "n_prompts" => self.n_prompts = parse(key, value)?,
            "answers_per_prompt" => self.answers_per_prompt = parse(key, value)?,
            "n_skills" => self.n_skills = parse(key, value)?,
            "coupling_alpha" => self.coupling_alpha = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "K" => self.k = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "noise_type" => self.noise_type = value.parse()?,
            "active_mode" => self.active_mode = value.parse()?,
            "rho" => self.rho = parse(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "eta" => self.eta = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "clip_eps" => self.clip_eps = parse(key, value)?,
            "adv_eps" => self.adv_eps = parse(key, value)?,
            "delta_slope" => self.delta_slope = parse(key, value)?,
            "warmup_T" => self.warmup_t = parse(key, value)?,
            "selection_fraction" => self.selection_fraction = Some(parse(key, value)?),
            "reg_lambda" => self.reg_lambda = parse(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(SimError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a flat `key = value` file with `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> SimResult<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> SimResult<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SimError::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }
}
