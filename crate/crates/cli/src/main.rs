//! Command-line driver: validate configs, run experiments and presets,
//! resume suspended runs.
//!
//! Exit codes: 0 success, 2 configuration rejected, 3 numerical abort
//! (diagnostic file written next to the outputs), 10 wall-clock suspension
//! (checkpoint written, resumable), 1 anything else.

use clap::{Parser, Subcommand};
use openbose::experiment::{
    parse_config, preset_configs, resolve, resume_experiment, run_experiment, ExpError,
    RawConfig, ResolvedExperiment, RunStatus, PRESET_NAMES,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "openbose",
    version,
    about = "Lattice boson chains with two-particle losses: TEBD evolution of the vectorized density operator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Overrides {
    /// Override the maximal bond dimension.
    #[arg(long)]
    chi: Option<usize>,
    /// Override the time step (correlation-time units).
    #[arg(long)]
    dt: Option<f64>,
    /// Override the end time (correlation-time units).
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Override the output directory.
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a config file or a built-in preset (see `presets`).
    Run {
        /// Path to a TOML config, or a preset name.
        target: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Validate a config or preset and print the resolved plan.
    Check {
        /// Path to a TOML config, or a preset name.
        target: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// List the built-in presets.
    Presets,
    /// Continue a suspended run from its checkpoint or resume file.
    Resume {
        /// Path to a .ckpt or .resume.json written at suspension.
        path: PathBuf,
    },
}

fn apply_overrides(raw: &mut RawConfig, ov: &Overrides) {
    if let Some(chi) = ov.chi {
        raw.schedule.chi_max = chi;
    }
    if let Some(dt) = ov.dt {
        raw.schedule.dt = Some(dt);
    }
    if let Some(t_end) = ov.t_end {
        raw.schedule.t_end = t_end;
    }
    if let Some(dir) = &ov.out_dir {
        raw.outputs.out_dir = dir.clone();
    }
}

/// A target is a preset name or a config file path; presets may expand to
/// several configs sharing an output directory.
fn load_targets(target: &str, ov: &Overrides) -> Result<Vec<ResolvedExperiment>, ExpError> {
    let (raws, config_dir): (Vec<RawConfig>, Option<PathBuf>) = match preset_configs(target) {
        Some(cfgs) => (cfgs, None),
        None => {
            let path = Path::new(target);
            if !path.is_file() {
                return Err(ExpError::Config(format!(
                    "{target} is neither a config file nor one of the presets ({})",
                    PRESET_NAMES.join(", ")
                )));
            }
            let text = std::fs::read_to_string(path).map_err(|e| {
                ExpError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            (
                vec![parse_config(&text)?],
                path.parent().map(Path::to_path_buf),
            )
        }
    };
    raws.into_iter()
        .map(|mut raw| {
            apply_overrides(&mut raw, ov);
            resolve(raw, config_dir.as_deref())
        })
        .collect()
}

fn print_plan(resolved: &ResolvedExperiment) {
    println!("config hash: {}", resolved.hash);
    for plan in &resolved.runs {
        println!(
            "run {label}: |G| = {g:.6}, T_loc = {tl:.6e}, tau_c = {tc:.6e}, J = {j:.6e}, U = {u:.6e}, Gamma1 = {g1:.6e}, Gamma2 = {g2:.6e}, steps = {steps}, records = {recs}",
            label = plan.label,
            g = plan.g_abs_group,
            tl = plan.t_loc,
            tc = plan.tau_c,
            j = plan.model.hopping,
            u = plan.model.repulsion,
            g1 = plan.model.gamma1,
            g2 = plan.model.gamma2,
            steps = plan.n_steps,
            recs = plan.record_steps.len(),
        );
    }
}

fn exit_code_for(err: &ExpError) -> u8 {
    match err {
        ExpError::Config(_) | ExpError::Model(_) | ExpError::Init(_) => 2,
        ExpError::Numerical { .. } => 3,
        _ => 1,
    }
}

fn run_main() -> Result<u8, (u8, String)> {
    match Cli::parse().command {
        Command::Presets => {
            println!("fig3-desk   centre-correlation decay sweep, |G| in {{1, 10, 20, 100}}, pure dissipative");
            println!("fig4-desk   density at the centre vs the loss-equation prediction, |G| = 100");
            println!("fig5-desk   correlation-dip propagation rows, |G| = 20");
            println!("fig6-desk   dissipative vs predominantly repulsive contrast at |G| = 10, 1 tau_c");
            Ok(0)
        }
        Command::Check { target, overrides } => {
            let resolveds =
                load_targets(&target, &overrides).map_err(|e| (exit_code_for(&e), e.to_string()))?;
            for resolved in &resolveds {
                let echo = toml::to_string(&resolved.echo)
                    .map_err(|e| (1, format!("echo serialization: {e}")))?;
                println!("# resolved configuration");
                print!("{echo}");
                print_plan(resolved);
            }
            Ok(0)
        }
        Command::Run { target, overrides } => {
            let resolveds =
                load_targets(&target, &overrides).map_err(|e| (exit_code_for(&e), e.to_string()))?;
            let mut any_suspended = false;
            for resolved in &resolveds {
                print_plan(resolved);
                let outcome =
                    run_experiment(resolved).map_err(|e| (exit_code_for(&e), e.to_string()))?;
                for (label, status) in &outcome.statuses {
                    match status {
                        RunStatus::Completed => log::info!("run {label}: completed"),
                        RunStatus::Suspended => {
                            any_suspended = true;
                            log::warn!("run {label}: wall clock expired, checkpoint written");
                        }
                    }
                }
            }
            Ok(if any_suspended { 10 } else { 0 })
        }
        Command::Resume { path } => {
            let outcome =
                resume_experiment(&path).map_err(|e| (exit_code_for(&e), e.to_string()))?;
            let suspended_again = outcome
                .statuses
                .iter()
                .any(|(_, s)| *s == RunStatus::Suspended);
            for (label, status) in &outcome.statuses {
                log::info!("run {label}: {:?}", status);
            }
            Ok(if suspended_again { 10 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run_main() {
        Ok(code) => ExitCode::from(code),
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
