//! Command-line front end.
//!
//! Subcommands: `run` (single experiment), `sweep` (rho x seed grid),
//! `probe` (theory quantities on a finished run's manifest), and `replay`
//! (re-execute a manifest and reproduce its outputs byte-for-byte).
//! Flags mirror the config-file keys; `OLR_SIM_OUT_DIR` overrides the
//! output directory and nothing else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use olr_sim::config::RunConfig;
use olr_sim::error::{SimError, SimResult};
use olr_sim::output;
use olr_sim::runner::{self, Manifest};

const OUT_DIR_ENV: &str = "OLR_SIM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "olr-sim",
    version,
    about = "Tabular RLVR noisy-label training simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment and write metrics.csv, events.csv, manifest.json.
    Run(RunArgs),
    /// Run a rho x seed grid and write phase.csv.
    Sweep(SweepArgs),
    /// Recompute theory quantities from a manifest.
    Probe(ProbeArgs),
    /// Re-run a manifest's configuration and reproduce its outputs.
    Replay(ReplayArgs),
}

/// Overrides mirroring the config-file keys.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Flat key = value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "n_prompts")]
    n_prompts: Option<u32>,
    #[arg(long = "answers_per_prompt")]
    answers_per_prompt: Option<u32>,
    #[arg(long = "n_skills")]
    n_skills: Option<u32>,
    #[arg(long = "coupling_alpha")]
    coupling_alpha: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "K")]
    k: Option<u32>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long = "noise_type")]
    noise_type: Option<String>,
    #[arg(long = "active_mode")]
    active_mode: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "clip_eps")]
    clip_eps: Option<f64>,
    #[arg(long = "adv_eps")]
    adv_eps: Option<f64>,
    #[arg(long = "delta_slope")]
    delta_slope: Option<f64>,
    #[arg(long = "warmup_T")]
    warmup_t: Option<u32>,
    #[arg(long = "selection_fraction")]
    selection_fraction: Option<f64>,
    #[arg(long = "reg_lambda")]
    reg_lambda: Option<f64>,
    #[arg(long = "out_dir")]
    out_dir: Option<String>,
}

impl ConfigFlags {
    fn build(&self) -> SimResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        macro_rules! apply {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.set($key, &v.to_string())?;
                }
            };
        }
        apply!(seed, "seed");
        apply!(n_prompts, "n_prompts");
        apply!(answers_per_prompt, "answers_per_prompt");
        apply!(n_skills, "n_skills");
        apply!(coupling_alpha, "coupling_alpha");
        apply!(dim, "dim");
        apply!(k, "K");
        apply!(epochs, "epochs");
        apply!(noise_type, "noise_type");
        apply!(active_mode, "active_mode");
        apply!(rho, "rho");
        apply!(strategy, "strategy");
        apply!(eta, "eta");
        apply!(beta, "beta");
        apply!(clip_eps, "clip_eps");
        apply!(adv_eps, "adv_eps");
        apply!(delta_slope, "delta_slope");
        apply!(warmup_t, "warmup_T");
        apply!(selection_fraction, "selection_fraction");
        apply!(reg_lambda, "reg_lambda");
        apply!(out_dir, "out_dir");
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            cfg.out_dir = dir;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Comma-separated noise ratios, e.g. 0.1,0.3,0.5.
    #[arg(long = "rho_values", value_delimiter = ',', required = true)]
    rho_values: Vec<f64>,
    /// Comma-separated seeds, e.g. 1,2,3.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Path to a run's manifest.json.
    #[arg(long)]
    manifest: PathBuf,
    /// Output file for the probe report (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Path to a run's manifest.json.
    #[arg(long)]
    manifest: PathBuf,
    /// Target directory; defaults to the manifest's out_dir.
    #[arg(long = "out_dir")]
    out_dir: Option<String>,
}

fn load_manifest(path: &PathBuf) -> SimResult<Manifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_run(args: &RunArgs) -> SimResult<()> {
    let cfg = args.flags.build()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    match runner::run_experiment_partial(&cfg) {
        Ok(output) => {
            output::emit_outputs(&output, &out_dir)?;
            let last = output.metrics.last();
            println!(
                "run complete: {} epochs, {} prompts, noisy majority acc {}",
                cfg.epochs,
                cfg.n_prompts,
                last.map(|m| output::fmt_sig9(m.noisy_majority_acc))
                    .unwrap_or_else(|| "-".into()),
            );
            println!("outputs in {}", out_dir.display());
            Ok(())
        }
        Err(failure) => {
            // Flush partial rows before reporting the abort.
            let _ =
                output::emit_partial(&failure.partial_metrics, &failure.partial_events, &out_dir);
            eprintln!("run aborted after {} epochs", failure.partial_metrics.len());
            Err(failure.error)
        }
    }
}

fn cmd_sweep(args: &SweepArgs) -> SimResult<()> {
    let cfg = args.flags.build()?;
    let rows = runner::sweep_phase_diagram(&cfg, &args.rho_values, &args.seeds)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    output::write_phase_csv(&rows, &out_dir)?;
    println!("{}", output::PHASE_HEADER);
    for row in &rows {
        println!(
            "{},{},{},{},{},{},{},{}",
            output::fmt_sig9(row.rho),
            row.seed,
            output::fmt_sig9(row.rho_realized),
            output::fmt_sig9(row.l_start),
            output::fmt_sig9(row.l_final),
            row.coherent,
            output::fmt_sig9(row.noisy_majority_acc_final),
            output::fmt_sig9(row.rho_c_hat),
        );
    }
    println!("phase table in {}", out_dir.join("phase.csv").display());
    Ok(())
}

fn cmd_probe(args: &ProbeArgs) -> SimResult<()> {
    let manifest = load_manifest(&args.manifest)?;
    let report = runner::probe_manifest(&manifest)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match &args.out {
        Some(path) => std::fs::write(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_replay(args: &ReplayArgs) -> SimResult<()> {
    let manifest = load_manifest(&args.manifest)?;
    let cfg = manifest.config.clone();
    let output = runner::run_experiment(&cfg)?;
    // Integrity: the regenerated run must reproduce the manifest's dataset
    // and noise assignment exactly; a tampered manifest fails here.
    let regenerated = serde_json::to_string(&output.manifest.dataset)?;
    let recorded = serde_json::to_string(&manifest.dataset)?;
    if regenerated != recorded {
        return Err(SimError::State(
            "replayed dataset differs from the manifest's record".into(),
        ));
    }
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| std::env::var(OUT_DIR_ENV).ok())
        .unwrap_or_else(|| cfg.out_dir.clone());
    output::emit_outputs(&output, &PathBuf::from(&out_dir))?;
    println!("replayed {} epochs into {}", cfg.epochs, out_dir);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Replay(args) => cmd_replay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
