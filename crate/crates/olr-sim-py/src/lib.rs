//! Python bindings for the tabular RLVR noisy-label simulator.
//!
//! Exposes experiment execution plus the core numeric operations (group
//! advantages, pass-rate slope, majority voting, critical noise ratios).
//! Configurations use the same flat `key = value` text as the CLI's
//! `--config` files, so Python runs and CLI runs are interchangeable.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use olr_sim::config::RunConfig;
use olr_sim::error::SimError;
use olr_sim::output;
use olr_sim::runner::{self, RunOutput};

fn to_py_err(err: SimError) -> PyErr {
    match err {
        SimError::Config(_) | SimError::Domain(_) => PyValueError::new_err(err.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_config(text: &str) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply_text(text).map_err(to_py_err)?;
    cfg.validate().map_err(to_py_err)?;
    Ok(cfg)
}

/// A finished experiment: per-epoch metrics plus the replayable manifest.
#[pyclass]
struct RunResult {
    output: RunOutput,
}

#[pymethods]
impl RunResult {
    /// The run's `metrics.csv` content.
    fn metrics_csv(&self) -> String {
        output::metrics_csv(&self.output.metrics, &self.output.theory)
    }

    /// The run's `events.csv` content.
    fn events_csv(&self) -> String {
        output::events_csv(&self.output.events)
    }

    /// The run's `manifest.json` content.
    fn manifest_json(&self) -> PyResult<String> {
        output::manifest_json(&self.output.manifest).map_err(to_py_err)
    }

    /// Per-epoch majority accuracy on noisy prompts.
    fn noisy_majority_acc(&self) -> Vec<f64> {
        self.output
            .metrics
            .iter()
            .map(|m| m.noisy_majority_acc)
            .collect()
    }

    /// Per-epoch majority accuracy on clean prompts.
    fn clean_majority_acc(&self) -> Vec<f64> {
        self.output
            .metrics
            .iter()
            .map(|m| m.clean_majority_acc)
            .collect()
    }

    /// Per-epoch fraction of effective labels differing from true answers.
    fn realized_noise(&self) -> Vec<f64> {
        self.output
            .metrics
            .iter()
            .map(|m| m.realized_noise)
            .collect()
    }

    /// Per-epoch mean log-ratio over active prompts.
    fn mean_log_ratio(&self) -> Vec<f64> {
        self.output.metrics.iter().map(|m| m.mean_l_t).collect()
    }

    /// Per-epoch measured critical noise ratio.
    fn rho_c(&self) -> Vec<f64> {
        self.output.theory.iter().map(|t| t.rho_c).collect()
    }

    /// Final trained parameter vector.
    fn final_theta(&self) -> Vec<f64> {
        self.output.manifest.final_theta.clone()
    }

    /// Mean active-prompt log-ratio at the initial and final policies.
    fn log_ratio_endpoints(&self) -> (f64, f64) {
        (
            self.output.initial_mean_log_ratio,
            self.output.final_mean_log_ratio,
        )
    }

    fn __repr__(&self) -> String {
        format!(
            "RunResult(epochs={}, prompts={}, strategy={})",
            self.output.metrics.len(),
            self.output.manifest.config.n_prompts,
            self.output.manifest.config.strategy,
        )
    }
}

/// Run one experiment from a flat `key = value` configuration.
#[pyfunction]
fn run_experiment(config: &str) -> PyResult<RunResult> {
    let cfg = parse_config(config)?;
    let output = runner::run_experiment(&cfg).map_err(to_py_err)?;
    Ok(RunResult { output })
}

/// Run a rho x seed grid; returns the phase table as CSV.
#[pyfunction]
fn sweep_phase_diagram(config: &str, rho_values: Vec<f64>, seeds: Vec<u64>) -> PyResult<String> {
    let cfg = parse_config(config)?;
    let rows = runner::sweep_phase_diagram(&cfg, &rho_values, &seeds).map_err(to_py_err)?;
    Ok(output::phase_csv(&rows))
}

/// Recompute theory quantities from a manifest.json string.
#[pyfunction]
fn probe_manifest(manifest_json: &str) -> PyResult<String> {
    let manifest: runner::Manifest =
        serde_json::from_str(manifest_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = runner::probe_manifest(&manifest).map_err(to_py_err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// The default configuration as flat `key = value` text.
#[pyfunction]
fn default_config() -> String {
    let cfg = RunConfig::default();
    format!(
        "seed = {}\nn_prompts = {}\nanswers_per_prompt = {}\nn_skills = {}\ncoupling_alpha = {}\n\
         dim = {}\nK = {}\nepochs = {}\nnoise_type = {}\nactive_mode = {}\nrho = {}\n\
         strategy = {}\neta = {}\nbeta = {}\nclip_eps = {}\nadv_eps = {}\ndelta_slope = {}\n\
         warmup_T = {}\nreg_lambda = {}\nout_dir = {}\n",
        cfg.seed,
        cfg.n_prompts,
        cfg.answers_per_prompt,
        cfg.n_skills,
        cfg.coupling_alpha,
        cfg.dim,
        cfg.k,
        cfg.epochs,
        cfg.noise_type,
        cfg.active_mode,
        cfg.rho,
        cfg.strategy,
        cfg.eta,
        cfg.beta,
        cfg.clip_eps,
        cfg.adv_eps,
        cfg.delta_slope,
        cfg.warmup_t,
        cfg.reg_lambda,
        cfg.out_dir,
    )
}

/// Group-relative advantages: `(r - mean) / (std + adv_eps)` with
/// population statistics; zero-variance groups return exact zeros.
#[pyfunction]
#[pyo3(signature = (rewards, adv_eps = 1e-6))]
fn group_advantages(rewards: Vec<f64>, adv_eps: f64) -> Vec<f64> {
    olr_sim::grpo::group_advantages(&rewards, adv_eps)
}

/// Binary verifier reward; `label = None` denotes the infeasible sentinel.
#[pyfunction]
fn verify_reward(answer: u32, label: Option<u32>) -> f64 {
    let label = match label {
        Some(a) => olr_sim::model::Label::Answer(a),
        None => olr_sim::model::Label::Infeasible,
    };
    olr_sim::grpo::verify_reward(answer, label)
}

/// Most frequent answer and its pass rate; ties break toward the smallest id.
#[pyfunction]
fn majority_answer(batch: Vec<u32>) -> PyResult<(u32, f64)> {
    if batch.is_empty() {
        return Err(PyValueError::new_err("majority of an empty batch"));
    }
    Ok(olr_sim::olr::majority_answer(&batch))
}

/// Ordinary-least-squares slope of `ys` against `xs`.
#[pyfunction]
fn ols_slope(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PyValueError::new_err("slope needs two equally long series"));
    }
    Ok(olr_sim::olr::ols_slope(&xs, &ys))
}

/// Critical noise ratio `gamma G_c / (gamma G_c + G_n)`.
#[pyfunction]
fn critical_ratio(gamma: f64, g_clean: f64, g_noisy: f64) -> PyResult<f64> {
    olr_sim::theory::critical_ratio(gamma, g_clean, g_noisy).map_err(to_py_err)
}

/// KL-shifted critical ratio; returns `(raw, clamped)`.
#[pyfunction]
fn critical_ratio_kl(
    gamma: f64,
    g_clean: f64,
    g_noisy: f64,
    beta: f64,
    delta_ref: f64,
) -> PyResult<(f64, f64)> {
    let kl = olr_sim::theory::critical_ratio_kl(gamma, g_clean, g_noisy, beta, delta_ref)
        .map_err(to_py_err)?;
    Ok((kl.raw, kl.clamped))
}

/// Mean drift `gamma (1 - rho) G_c - rho G_n`.
#[pyfunction]
fn drift(gamma: f64, rho: f64, g_clean: f64, g_noisy: f64) -> f64 {
    olr_sim::theory::drift(gamma, rho, g_clean, g_noisy)
}

/// Effective noise and extended threshold: `(rho (1 - delta), rho_c / (1 - delta))`.
#[pyfunction]
fn tolerance_report(rho: f64, delta_hat: f64, rho_c: f64) -> PyResult<(f64, f64)> {
    olr_sim::theory::tolerance_report(rho, delta_hat, rho_c).map_err(to_py_err)
}

#[pymodule]
fn olr_sim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_phase_diagram, m)?)?;
    m.add_function(wrap_pyfunction!(probe_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(verify_reward, m)?)?;
    m.add_function(wrap_pyfunction!(majority_answer, m)?)?;
    m.add_function(wrap_pyfunction!(ols_slope, m)?)?;
    m.add_function(wrap_pyfunction!(critical_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(critical_ratio_kl, m)?)?;
    m.add_function(wrap_pyfunction!(drift, m)?)?;
    m.add_function(wrap_pyfunction!(tolerance_report, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
