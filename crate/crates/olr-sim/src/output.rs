//! Deterministic file outputs: `metrics.csv`, `events.csv`, `manifest.json`,
//! and the sweep's `phase.csv`.
//!
//! Numeric formatting is pinned: decimal, 9 significant digits, `.`
//! separator, `\n` newlines. Re-running the same configuration yields
//! byte-identical files.

use std::path::Path;

use crate::error::SimResult;
use crate::runner::{EpochMetrics, EventRow, Manifest, PhaseRow, RunOutput};
use crate::theory::TheoryReport;

pub const METRICS_HEADER: &str = "epoch,clean_majority_acc,noisy_majority_acc,selection_ratio_clean,selection_ratio_noisy,selected_majority_acc,unselected_majority_acc,realized_noise,initial_noise,mean_slope,mean_L_t,mean_reward,gamma,G_c,G_n,rho_c,rho_c_kl,drift";

pub const EVENTS_HEADER: &str =
    "epoch,prompt_id,majority,pass_rate,slope,consistent,selected,effective_label,noise_class";

pub const PHASE_HEADER: &str =
    "rho,seed,rho_realized,L_start,L_final,coherent,noisy_majority_acc_final,rho_c_hat";

/// Format with exactly 9 significant decimal digits.
pub fn fmt_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let x = if x == 0.0 { 0.0 } else { x }; // normalize -0.0
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponential format");
    let exp: i32 = exp.parse().expect("exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    debug_assert_eq!(digits.len(), 9);
    let body = if exp >= 8 {
        let mut s = digits;
        s.push_str(&"0".repeat((exp - 8) as usize));
        s
    } else if exp >= 0 {
        let point = (exp + 1) as usize;
        format!("{}.{}", &digits[..point], &digits[point..])
    } else {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    };
    format!("{sign}{body}")
}

fn metrics_row(m: &EpochMetrics, t: &TheoryReport) -> String {
    let f = fmt_sig9;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.epoch,
        f(m.clean_majority_acc),
        f(m.noisy_majority_acc),
        f(m.selection_ratio_clean),
        f(m.selection_ratio_noisy),
        f(m.selected_majority_acc),
        f(m.unselected_majority_acc),
        f(m.realized_noise),
        f(m.initial_noise),
        f(m.mean_slope),
        f(m.mean_l_t),
        f(m.mean_reward),
        f(t.gamma),
        f(t.g_clean),
        f(t.g_noisy),
        f(t.rho_c),
        f(t.rho_c_kl_raw),
        f(t.drift),
    )
}

pub fn metrics_csv(metrics: &[EpochMetrics], theory: &[TheoryReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (m, t) in metrics.iter().zip(theory) {
        out.push_str(&metrics_row(m, t));
        out.push('\n');
    }
    out
}

pub fn events_csv(events: &[EventRow]) -> String {
    let mut out = String::from(EVENTS_HEADER);
    out.push('\n');
    for e in events {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.prompt_id,
            e.majority,
            fmt_sig9(e.pass_rate),
            fmt_sig9(e.slope),
            e.consistent,
            e.selected,
            e.effective_label,
            e.noise_class,
        ));
    }
    out
}

pub fn phase_csv(rows: &[PhaseRow]) -> String {
    let mut out = String::from(PHASE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_sig9(r.rho),
            r.seed,
            fmt_sig9(r.rho_realized),
            fmt_sig9(r.l_start),
            fmt_sig9(r.l_final),
            r.coherent,
            fmt_sig9(r.noisy_majority_acc_final),
            fmt_sig9(r.rho_c_hat),
        ));
    }
    out
}

pub fn manifest_json(manifest: &Manifest) -> SimResult<String> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    Ok(text)
}

/// Write `metrics.csv`, `manifest.json`, and `events.csv`. All content is
/// rendered before the first write, so an unwritable directory fails before
/// any partial file appears.
pub fn emit_outputs(output: &RunOutput, out_dir: &Path) -> SimResult<()> {
    let metrics = metrics_csv(&output.metrics, &output.theory);
    let events = events_csv(&output.events);
    let manifest = manifest_json(&output.manifest)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics)?;
    std::fs::write(out_dir.join("manifest.json"), manifest)?;
    std::fs::write(out_dir.join("events.csv"), events)?;
    Ok(())
}

/// Flush whatever rows an aborted run produced. Theory rows are not
/// retained on failure, so the theory columns are padded with NaN.
pub fn emit_partial(
    metrics: &[EpochMetrics],
    events: &[EventRow],
    out_dir: &Path,
) -> SimResult<()> {
    let pad: Vec<TheoryReport> = metrics
        .iter()
        .map(|_| TheoryReport {
            gamma: f64::NAN,
            g_clean: f64::NAN,
            g_noisy: f64::NAN,
            rho_c: f64::NAN,
            rho_c_kl_raw: f64::NAN,
            rho_c_kl: f64::NAN,
            delta_ref: f64::NAN,
            drift: f64::NAN,
            log_ratios: Default::default(),
        })
        .collect();
    let metrics_text = metrics_csv(metrics, &pad);
    let events_text = events_csv(events);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_text)?;
    std::fs::write(out_dir.join("events.csv"), events_text)?;
    Ok(())
}

pub fn write_phase_csv(rows: &[PhaseRow], out_dir: &Path) -> SimResult<()> {
    let content = phase_csv(rows);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("phase.csv"), content)?;
    Ok(())
}
