//! Online label refinement.
//!
//! Per prompt, the refiner tracks the majority answer of each epoch's
//! rollout group and its pass rate. After a warmup of `warmup_t` epochs, the
//! training label is replaced by the current majority answer whenever
//!
//! 1. the least-squares slope of the pass-rate trajectory exceeds
//!    `delta_slope`, and
//! 2. the current majority matches the historical majority.
//!
//! Replacement is re-evaluated every epoch: if either criterion lapses the
//! label reverts to the stored training label.

use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};
use crate::model::{AnswerId, Label, PromptId};

/// Refinement hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OlrConfig {
    /// Minimum pass-rate slope for replacement.
    pub delta_slope: f64,
    /// Epochs before any replacement is considered.
    pub warmup_t: u32,
    /// Optional sliding window on trajectory length (unbounded when absent).
    pub window: Option<usize>,
}

impl Default for OlrConfig {
    fn default() -> Self {
        Self {
            delta_slope: 0.05,
            warmup_t: 5,
            window: None,
        }
    }
}

impl OlrConfig {
    pub fn validate(&self) -> SimResult<()> {
        if self.warmup_t < 2 {
            return Err(SimError::Config(
                "warmup_t must be >= 2 (slope needs two points)".into(),
            ));
        }
        if let Some(w) = self.window {
            if w < 2 {
                return Err(SimError::Config("trajectory window must be >= 2".into()));
            }
        }
        Ok(())
    }
}

/// One recorded epoch of a prompt's rollout history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub epoch: u32,
    pub majority: AnswerId,
    pub pass_rate: f64,
}

/// Majority-answer history of a single prompt.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MajorityTrajectory {
    pub prompt_id: PromptId,
    pub entries: Vec<TrajectoryEntry>,
}

impl MajorityTrajectory {
    pub fn new(prompt_id: PromptId) -> Self {
        Self {
            prompt_id,
            entries: Vec::new(),
        }
    }

    /// Append this epoch's majority observation. Epochs must increase;
    /// with a window configured, oldest entries are evicted.
    pub fn update(
        &mut self,
        epoch: u32,
        batch: &[AnswerId],
        window: Option<usize>,
    ) -> SimResult<()> {
        if let Some(last) = self.entries.last() {
            if epoch <= last.epoch {
                return Err(SimError::State(format!(
                    "prompt {}: epoch {epoch} not after {}",
                    self.prompt_id, last.epoch
                )));
            }
        }
        let (majority, pass_rate) = majority_answer(batch);
        self.entries.push(TrajectoryEntry {
            epoch,
            majority,
            pass_rate,
        });
        if let Some(w) = window {
            while self.entries.len() > w {
                self.entries.remove(0);
            }
        }
        Ok(())
    }

    pub fn latest(&self) -> Option<&TrajectoryEntry> {
        self.entries.last()
    }

    /// OLS slope of pass rate against epoch; `None` until two entries exist.
    pub fn slope(&self) -> Option<f64> {
        if self.entries.len() < 2 {
            return None;
        }
        let xs: Vec<f64> = self.entries.iter().map(|e| e.epoch as f64).collect();
        let ys: Vec<f64> = self.entries.iter().map(|e| e.pass_rate).collect();
        Some(ols_slope(&xs, &ys))
    }

    /// The answer holding the majority most often; count ties break toward
    /// the holder seen most recently, then toward the smallest id.
    pub fn historical_majority(&self) -> Option<AnswerId> {
        if self.entries.is_empty() {
            return None;
        }
        let mut counts: std::collections::BTreeMap<AnswerId, (usize, u32)> = Default::default();
        for e in &self.entries {
            let slot = counts.entry(e.majority).or_insert((0, 0));
            slot.0 += 1;
            slot.1 = e.epoch;
        }
        // BTreeMap iterates in ascending id order; strict > keeps the
        // smallest id among equals after the recency key.
        let mut best: Option<(AnswerId, (usize, u32))> = None;
        for (&id, &key) in &counts {
            match best {
                None => best = Some((id, key)),
                Some((_, bk)) if key > bk => best = Some((id, key)),
                _ => {}
            }
        }
        best.map(|(id, _)| id)
    }

    /// True iff the latest majority equals the historical majority.
    pub fn consistent(&self) -> bool {
        match (self.latest(), self.historical_majority()) {
            (Some(latest), Some(hist)) => latest.majority == hist,
            _ => false,
        }
    }

    /// The label used for reward computation at epoch `t`: the current
    /// majority when both criteria hold after warmup, the training label
    /// otherwise. Never sticky.
    pub fn effective_label(&self, train_label: Label, t: u32, cfg: &OlrConfig) -> Label {
        if t <= cfg.warmup_t {
            return train_label;
        }
        let slope_ok = match self.slope() {
            Some(s) => s > cfg.delta_slope,
            None => false,
        };
        if slope_ok && self.consistent() {
            match self.latest() {
                Some(e) => Label::Answer(e.majority),
                None => train_label,
            }
        } else {
            train_label
        }
    }

    /// Whether the replacement criteria fire at epoch `t`.
    pub fn fires(&self, t: u32, cfg: &OlrConfig) -> bool {
        if t <= cfg.warmup_t {
            return false;
        }
        let slope_ok = matches!(self.slope(), Some(s) if s > cfg.delta_slope);
        slope_ok && self.consistent()
    }
}

/// Most frequent answer in a rollout group and its pass rate; ties break
/// toward the smallest answer id.
pub fn majority_answer(batch: &[AnswerId]) -> (AnswerId, f64) {
    assert!(!batch.is_empty(), "majority of an empty batch");
    let mut counts: std::collections::BTreeMap<AnswerId, usize> = Default::default();
    for &a in batch {
        *counts.entry(a).or_insert(0) += 1;
    }
    let mut best = (*counts.iter().next().unwrap().0, 0usize);
    for (&id, &c) in &counts {
        if c > best.1 {
            best = (id, c);
        }
    }
    (best.0, best.1 as f64 / batch.len() as f64)
}

/// Two-pass ordinary-least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    num / den
}
