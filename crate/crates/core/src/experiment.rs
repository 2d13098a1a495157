//! Experiment orchestration: configuration parsing and echoing, coupling
//! resolution per interaction mode, schedule arithmetic in correlation-time
//! units, the run loop with wall-clock suspension and resume, and the
//! delimited-text outputs.
//!
//! Everything is deterministic: no run uses randomness, and reruns of the
//! same resolved configuration reproduce observables to better than 1e-10
//! (bitwise, except across a suspend/resume seam, where regrouped gate
//! products differ at rounding level).

use crate::checkpoint::{load_checkpoint, save_checkpoint, CkptError};
use crate::evolve::{run, EvolveError, GateSet, RunLimits, RunOutcome, RunReport};
use crate::initial::{initial_state, InitError, PulseProfile};
use crate::model::{
    build_lattice, build_local_ops, dimensionless_groups, LatticeModel, ModelError,
    PhysicalParams,
};
use crate::mps::{MpsError, SuperketMPS, TruncationEngine};
use crate::observables::{
    density_decay_check, record_observables, ObsError, ObservableSeries,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};
use thiserror::Error;

pub type ExpResult<T> = Result<T, ExpError>;

#[derive(Debug, Error)]
pub enum ExpError {
    /// Configuration rejected; maps to exit code 2.
    #[error("config: {0}")]
    Config(String),
    /// Numerical abort during a run; diagnostics were written. Exit code 3.
    #[error("run {label} aborted: {message} (diagnostics at {diagnostic})")]
    Numerical {
        label: String,
        message: String,
        diagnostic: String,
    },
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Mps(#[from] MpsError),
    #[error(transparent)]
    Obs(#[from] ObsError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("resume: {0}")]
    Resume(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ExpError {
    ExpError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration schema. Unknown keys are rejected, never ignored.

fn d_one() -> f64 {
    1.0
}
fn d_mean_n0() -> f64 {
    2.5
}
fn d_n_sites() -> usize {
    40
}
fn d_fock_cutoff() -> usize {
    3
}
fn d_center() -> f64 {
    0.5
}
fn d_width() -> f64 {
    0.6
}
fn d_t_end() -> f64 {
    4.0
}
fn d_record_every() -> f64 {
    0.05
}
fn d_chi_max() -> usize {
    40
}
fn d_eps_cut() -> f64 {
    1e-12
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct PhysicalSection {
    #[serde(default = "d_one")]
    pub hbar: f64,
    #[serde(default = "d_one")]
    pub mass: f64,
    #[serde(default = "d_one")]
    pub box_length: f64,
    #[serde(default = "d_mean_n0")]
    pub mean_n0: f64,
    /// Field-diffusion constant; absent means the standing default 0.1·ħ/m.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion_d: Option<f64>,
}

impl Default for PhysicalSection {
    fn default() -> Self {
        PhysicalSection {
            hbar: 1.0,
            mass: 1.0,
            box_length: 1.0,
            mean_n0: 2.5,
            diffusion_d: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct GridSection {
    #[serde(default = "d_n_sites")]
    pub n_sites: usize,
    #[serde(default = "d_fock_cutoff")]
    pub fock_cutoff: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            n_sites: 40,
            fock_cutoff: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ProfileKind {
    Gaussian,
    FlatTop,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ProfileSection {
    #[serde(default = "d_profile_kind")]
    pub kind: ProfileKind,
    #[serde(default = "d_center")]
    pub center: f64,
    #[serde(default = "d_width")]
    pub width: f64,
    /// Inline two-column table (position fraction, relative density).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<(f64, f64)>>,
    /// Table loaded from file at validation time and inlined into the echo.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_file: Option<String>,
}

fn d_profile_kind() -> ProfileKind {
    ProfileKind::FlatTop
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            kind: ProfileKind::FlatTop,
            center: 0.5,
            width: 0.6,
            table: None,
            table_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TruncationKind {
    Exact,
    Subspace,
}

fn d_truncation() -> TruncationKind {
    TruncationKind::Exact
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ScheduleSection {
    /// End time in correlation-time units.
    #[serde(default = "d_t_end")]
    pub t_end: f64,
    /// Step in correlation-time units. Absent: 1/1000, halved automatically
    /// if the convergence self-test fails.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "d_record_every")]
    pub record_every: f64,
    /// Explicit record times (correlation-time units); overrides the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_times: Option<Vec<f64>>,
    #[serde(default = "d_chi_max")]
    pub chi_max: usize,
    #[serde(default = "d_eps_cut")]
    pub eps_cut: f64,
    #[serde(default = "d_truncation")]
    pub truncation: TruncationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_minutes: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            t_end: 4.0,
            dt: None,
            record_every: 0.05,
            record_times: None,
            chi_max: 40,
            eps_cut: 1e-12,
            truncation: TruncationKind::Exact,
            wall_clock_minutes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum InteractionMode {
    PureDissipative,
    PredominantlyRepulsive,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct InteractionSection {
    pub mode: InteractionMode,
    /// |Re/Im| ratio for the predominantly repulsive mode (default 10).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    /// Dimensionless coupling magnitude |G| for magnitude-driven modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_abs: Option<f64>,
    /// Sweep over several |G| values; one run per entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<f64>>,
    /// Custom mode only: explicit coupling (energy × length).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_real: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_imag: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct OutputSection {
    #[serde(default = "d_out_dir")]
    pub out_dir: String,
}

fn d_out_dir() -> String {
    "out".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct RawConfig {
    #[serde(default)]
    pub physical: PhysicalSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub interaction: InteractionSection,
    #[serde(default)]
    pub outputs: OutputSection,
    /// Runs are deterministic; the only accepted value is true.
    #[serde(default = "d_true")]
    pub seedless: bool,
}

// ---------------------------------------------------------------------------
// Resolution.

/// One fully planned evolution job.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub label: String,
    pub params: PhysicalParams,
    pub model: LatticeModel,
    pub g_abs_group: f64,
    pub t_loc: f64,
    pub tau_c: f64,
    /// Step in correlation-time units before any self-test halving.
    pub dt_tau: f64,
    pub dt_explicit: bool,
    pub n_steps: usize,
    pub record_steps: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    /// Canonical echo: every default applied, tables inlined.
    pub echo: RawConfig,
    /// 16 hex chars of the SHA-256 of the serialized echo.
    pub hash: String,
    pub runs: Vec<RunPlan>,
}

pub fn parse_config(text: &str) -> ExpResult<RawConfig> {
    toml::from_str(text).map_err(|e| ExpError::Config(e.to_string()))
}

fn fmt_label_number(v: f64) -> String {
    let s = format!("{v}");
    s.replace('.', "p").replace('-', "m")
}

fn steps_for(interval: f64, dt: f64, what: &str) -> ExpResult<usize> {
    let ratio = interval / dt;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > 1e-9 * rounded.abs().max(1.0) {
        return Err(ExpError::Config(format!(
            "{what} = {interval} is not a whole number of dt = {dt} steps"
        )));
    }
    if rounded < 0.0 {
        return Err(ExpError::Config(format!("{what} is negative")));
    }
    Ok(rounded as usize)
}

/// Validate, apply defaults, inline file tables, derive run plans.
pub fn resolve(mut raw: RawConfig, config_dir: Option<&Path>) -> ExpResult<ResolvedExperiment> {
    if !raw.seedless {
        return Err(ExpError::Config(
            "seedless = false requested, but no stochastic mode exists; all runs are deterministic"
                .into(),
        ));
    }

    // Inline a table file so the echo (and its hash) covers the data.
    if let Some(file) = raw.profile.table_file.take() {
        if raw.profile.table.is_some() {
            return Err(ExpError::Config(
                "profile: give table or tableFile, not both".into(),
            ));
        }
        let path = match config_dir {
            Some(dir) => dir.join(&file),
            None => PathBuf::from(&file),
        };
        let rows = crate::initial::load_table(&path)?;
        raw.profile.table = Some(rows);
    }
    match raw.profile.kind {
        ProfileKind::Tabulated => {
            if raw.profile.table.is_none() {
                return Err(ExpError::Config(
                    "profile.kind = tabulated needs table or tableFile".into(),
                ));
            }
        }
        _ => {
            if raw.profile.table.is_some() {
                return Err(ExpError::Config(
                    "profile.table given but kind is not tabulated".into(),
                ));
            }
        }
    }

    // Interaction mode consistency.
    let inter = &mut raw.interaction;
    match inter.mode {
        InteractionMode::Custom => {
            if inter.g_abs.is_some() || inter.sweep.is_some() {
                return Err(ExpError::Config(
                    "custom mode takes gReal/gImag, not gAbs or sweep".into(),
                ));
            }
            if inter.ratio.is_some() {
                return Err(ExpError::Config("ratio applies only to predominantlyRepulsive".into()));
            }
            let (Some(gr), Some(gi)) = (inter.g_real, inter.g_imag) else {
                return Err(ExpError::Config(
                    "custom mode needs both gReal and gImag".into(),
                ));
            };
            if gi > 0.0 {
                return Err(ExpError::Config(format!(
                    "gImag must be nonpositive (loss, not gain), got {gi}"
                )));
            }
            if !gr.is_finite() || !gi.is_finite() {
                return Err(ExpError::Config("gReal/gImag must be finite".into()));
            }
        }
        InteractionMode::PureDissipative | InteractionMode::PredominantlyRepulsive => {
            if inter.g_real.is_some() || inter.g_imag.is_some() {
                return Err(ExpError::Config(
                    "gReal/gImag apply only to custom mode".into(),
                ));
            }
            match (&inter.g_abs, &inter.sweep) {
                (Some(_), Some(_)) => {
                    return Err(ExpError::Config("give gAbs or sweep, not both".into()))
                }
                (None, None) => {
                    return Err(ExpError::Config(
                        "magnitude-driven mode needs gAbs or sweep".into(),
                    ))
                }
                _ => {}
            }
            if let Some(sweep) = &inter.sweep {
                if sweep.is_empty() {
                    return Err(ExpError::Config("sweep must not be empty".into()));
                }
                if sweep.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
                    return Err(ExpError::Config("sweep entries must be positive".into()));
                }
                for w in sweep.windows(2) {
                    if w[1] <= w[0] {
                        return Err(ExpError::Config(
                            "sweep entries must increase strictly".into(),
                        ));
                    }
                }
            }
            if let Some(g) = inter.g_abs {
                if !(g > 0.0) || !g.is_finite() {
                    return Err(ExpError::Config(format!(
                        "gAbs must be positive, got {g}"
                    )));
                }
            }
            match inter.mode {
                InteractionMode::PredominantlyRepulsive => {
                    let r = inter.ratio.unwrap_or(10.0);
                    if !(r > 0.0) || !r.is_finite() {
                        return Err(ExpError::Config(format!(
                            "ratio must be positive, got {r}"
                        )));
                    }
                    inter.ratio = Some(r);
                }
                _ => {
                    if inter.ratio.is_some() {
                        return Err(ExpError::Config(
                            "ratio applies only to predominantlyRepulsive".into(),
                        ));
                    }
                }
            }
        }
    }

    // Grid and schedule sanity.
    if raw.grid.n_sites < 2 {
        return Err(ExpError::Config(format!(
            "nSites must be at least 2, got {}",
            raw.grid.n_sites
        )));
    }
    if raw.grid.fock_cutoff < 1 {
        return Err(ExpError::Config("fockCutoff must be at least 1".into()));
    }
    let sched = &mut raw.schedule;
    if !(sched.t_end >= 0.0) || !sched.t_end.is_finite() {
        return Err(ExpError::Config(format!(
            "tEnd must be nonnegative, got {}",
            sched.t_end
        )));
    }
    if let Some(dt) = sched.dt {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(ExpError::Config(format!("dt must be positive, got {dt}")));
        }
    }
    if !(sched.record_every > 0.0) {
        return Err(ExpError::Config(format!(
            "recordEvery must be positive, got {}",
            sched.record_every
        )));
    }
    if sched.chi_max == 0 {
        return Err(ExpError::Config("chiMax must be at least 1".into()));
    }
    if !(sched.eps_cut >= 0.0) {
        return Err(ExpError::Config(format!(
            "epsCut must be nonnegative, got {}",
            sched.eps_cut
        )));
    }
    if let Some(w) = sched.wall_clock_minutes {
        if !(w > 0.0) {
            return Err(ExpError::Config(format!(
                "wallClockMinutes must be positive, got {w}"
            )));
        }
    }
    if let Some(times) = &mut sched.record_times {
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite record times"));
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(ExpError::Config(
                "recordTimes must be finite and nonnegative".into(),
            ));
        }
        if times.last().is_some_and(|&t| t > sched.t_end + 1e-12) {
            return Err(ExpError::Config(format!(
                "recordTimes reach past tEnd = {}",
                sched.t_end
            )));
        }
        if times.first() != Some(&0.0) {
            times.insert(0, 0.0);
        }
        times.dedup();
    }

    // Schedule in correlation-time units; identical for every sweep point.
    let dt_tau = sched.dt.unwrap_or(1e-3);
    let dt_explicit = sched.dt.is_some();
    let n_steps = steps_for(sched.t_end, dt_tau, "tEnd")?;
    let record_steps: Vec<usize> = if n_steps == 0 {
        vec![0]
    } else {
        let times: Vec<f64> = match &sched.record_times {
            Some(ts) => ts.clone(),
            None => {
                let k = steps_for(sched.record_every, dt_tau, "recordEvery")?;
                if k == 0 {
                    return Err(ExpError::Config(
                        "recordEvery is below one step".into(),
                    ));
                }
                let mut ts = Vec::new();
                let mut step = 0usize;
                while step <= n_steps {
                    ts.push(step as f64 * dt_tau);
                    step += k;
                }
                ts
            }
        };
        let mut steps = Vec::with_capacity(times.len());
        for &t in &times {
            let s = steps_for(t, dt_tau, "record time")?;
            if s > n_steps {
                return Err(ExpError::Config(format!(
                    "record time {t} is past tEnd"
                )));
            }
            steps.push(s);
        }
        steps.dedup();
        steps
    };

    // Hash of the canonical echo.
    let echo_text =
        toml::to_string(&raw).map_err(|e| ExpError::Config(format!("echo serialization: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(echo_text.as_bytes());
    let hash = hex16(&hasher.finalize());

    // Per-coupling run plans.
    let rho = raw.physical.mean_n0 / raw.physical.box_length;
    let hbar = raw.physical.hbar;
    let mass = raw.physical.mass;
    let diffusion = raw
        .physical
        .diffusion_d
        .unwrap_or(0.1 * hbar / mass);
    let couplings: Vec<(String, f64, f64)> = match raw.interaction.mode {
        InteractionMode::Custom => {
            let gr = raw.interaction.g_real.expect("validated");
            let gi = raw.interaction.g_imag.expect("validated");
            vec![("custom".to_string(), gr, gi)]
        }
        InteractionMode::PureDissipative => magnitudes(&raw.interaction)
            .into_iter()
            .map(|g| {
                let g_mag = g * hbar * hbar * rho / mass;
                (format!("G{}", fmt_label_number(g)), 0.0, -g_mag)
            })
            .collect(),
        InteractionMode::PredominantlyRepulsive => {
            let r = raw.interaction.ratio.expect("validated");
            let denom = (1.0 + r * r).sqrt();
            magnitudes(&raw.interaction)
                .into_iter()
                .map(|g| {
                    let g_mag = g * hbar * hbar * rho / mass;
                    (
                        format!("G{}-rep{}", fmt_label_number(g), fmt_label_number(r)),
                        g_mag * r / denom,
                        -g_mag / denom,
                    )
                })
                .collect()
        }
    };

    let mut runs = Vec::with_capacity(couplings.len());
    for (label, g_real, g_imag) in couplings {
        let params = PhysicalParams {
            hbar,
            mass,
            g_real,
            g_imag,
            diffusion_d: diffusion,
            box_length: raw.physical.box_length,
            mean_n0: raw.physical.mean_n0,
        };
        params.validate()?;
        let model = build_lattice(&params, raw.grid.n_sites, raw.grid.fock_cutoff)?;
        let groups = dimensionless_groups(&params, model.delta_z)?;
        runs.push(RunPlan {
            label,
            params,
            model,
            g_abs_group: groups.lieb_liniger_g,
            t_loc: groups.t_loc,
            tau_c: groups.tau_c,
            dt_tau,
            dt_explicit,
            n_steps,
            record_steps: record_steps.clone(),
        });
    }

    Ok(ResolvedExperiment {
        echo: raw,
        hash,
        runs,
    })
}

fn magnitudes(inter: &InteractionSection) -> Vec<f64> {
    match (&inter.g_abs, &inter.sweep) {
        (Some(g), None) => vec![*g],
        (None, Some(s)) => s.clone(),
        _ => unreachable!("validated"),
    }
}

fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Execution.

/// Tolerance of the step-halving self-test on centre density and
/// correlation at one tenth of a correlation time.
pub const SELF_TEST_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Wall clock expired; checkpoint and resume file written.
    Suspended,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub statuses: Vec<(String, RunStatus)>,
}

impl ExperimentOutcome {
    pub fn all_completed(&self) -> bool {
        self.statuses
            .iter()
            .all(|(_, s)| *s == RunStatus::Completed)
    }
}

/// Resume document: everything needed to continue a suspended run,
/// self-contained next to the checkpoint.
#[derive(Serialize, Deserialize)]
struct ResumeDoc {
    config: RawConfig,
    label: String,
    hash: String,
    /// Step actually used after any self-test halving (τ_c units).
    dt_tau_used: f64,
    n_steps_used: usize,
    record_steps_used: Vec<usize>,
    ckpt_file: String,
    series: ObservableSeries,
}

pub fn run_experiment(resolved: &ResolvedExperiment) -> ExpResult<ExperimentOutcome> {
    let deadline = resolved
        .echo
        .schedule
        .wall_clock_minutes
        .map(|m| Instant::now() + Duration::from_secs_f64(m * 60.0));
    let out_dir = PathBuf::from(&resolved.echo.outputs.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;

    let threads: usize = std::env::var("OPENBOSE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);

    let n_runs = resolved.runs.len();
    let results: Vec<ExpResult<RunStatus>> = if threads <= 1 || n_runs <= 1 {
        resolved
            .runs
            .iter()
            .map(|plan| run_one(plan, resolved, &out_dir, deadline))
            .collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<ExpResult<RunStatus>>>> =
            (0..n_runs).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads.min(n_runs) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= n_runs {
                        break;
                    }
                    let r = run_one(&resolved.runs[i], resolved, &out_dir, deadline);
                    *slots[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("result slot").expect("run executed"))
            .collect()
    };

    let mut statuses = Vec::with_capacity(n_runs);
    for (plan, result) in resolved.runs.iter().zip(results) {
        statuses.push((plan.label.clone(), result?));
    }
    Ok(ExperimentOutcome { statuses })
}

struct PreparedRun {
    gates: GateSet,
    dt_tau: f64,
    dt_abs: f64,
    n_steps: usize,
    record_steps: Vec<usize>,
    self_test_diff: Option<f64>,
    halved: bool,
}

/// Build gates at the planned step, running the halving self-test when the
/// step was defaulted:  evolve to τ_c/10 at dt and dt/2 and compare centre
/// observables.
fn prepare_run(plan: &RunPlan, initial: &SuperketMPS) -> ExpResult<PreparedRun> {
    let mut dt_tau = plan.dt_tau;
    let mut n_steps = plan.n_steps;
    let mut record_steps = plan.record_steps.clone();
    let mut self_test_diff = None;
    let mut halved = false;

    if !plan.dt_explicit && n_steps > 0 {
        let horizon_steps = steps_for(0.1f64.min(plan.dt_tau * n_steps as f64), dt_tau, "self-test")
            .unwrap_or(n_steps)
            .min(n_steps)
            .max(1);
        let dt_abs = dt_tau * plan.tau_c;
        let coarse_gates = GateSet::build(&plan.model, dt_abs, 2).map_err(evolve_msg)?;
        let fine_gates = GateSet::build(&plan.model, dt_abs / 2.0, 2).map_err(evolve_msg)?;
        let ops = build_local_ops(plan.model.fock_cutoff)?;
        let center = plan.model.n_sites / 2;
        let probe = |gates: &GateSet, steps: usize| -> ExpResult<(f64, Option<f64>)> {
            let mut s = initial.clone();
            run(
                &mut s,
                gates,
                steps,
                &[],
                &RunLimits::default(),
                None,
                |_, _, _| Ok(()),
            )
            .map_err(evolve_msg)?;
            let n = s.local_expectation(center, &ops.number.view())?.re;
            let g = crate::observables::g2_local(&s, &ops, center)?;
            Ok((n, g))
        };
        let (n_c, g_c) = probe(&coarse_gates, horizon_steps)?;
        let (n_f, g_f) = probe(&fine_gates, 2 * horizon_steps)?;
        let mut diff = (n_c - n_f).abs();
        if let (Some(a), Some(b)) = (g_c, g_f) {
            diff = diff.max((a - b).abs());
        }
        self_test_diff = Some(diff);
        if diff > SELF_TEST_TOL {
            halved = true;
            dt_tau /= 2.0;
            n_steps *= 2;
            for s in &mut record_steps {
                *s *= 2;
            }
        }
    }

    let dt_abs = dt_tau * plan.tau_c;
    let gates = GateSet::build(&plan.model, dt_abs, 2).map_err(evolve_msg)?;
    Ok(PreparedRun {
        gates,
        dt_tau,
        dt_abs,
        n_steps,
        record_steps,
        self_test_diff,
        halved,
    })
}

fn evolve_msg(e: EvolveError) -> ExpError {
    ExpError::Config(format!("gate construction: {e}"))
}

fn profile_of(section: &ProfileSection) -> PulseProfile {
    match section.kind {
        ProfileKind::Gaussian => PulseProfile::Gaussian {
            center: section.center,
            width: section.width,
        },
        ProfileKind::FlatTop => PulseProfile::FlatTop {
            center: section.center,
            width: section.width,
        },
        ProfileKind::Tabulated => PulseProfile::Tabulated {
            table: section.table.clone().expect("validated"),
        },
    }
}

fn engine_of(kind: TruncationKind) -> TruncationEngine {
    match kind {
        TruncationKind::Exact => TruncationEngine::Exact,
        TruncationKind::Subspace => TruncationEngine::Subspace,
    }
}

fn run_one(
    plan: &RunPlan,
    resolved: &ResolvedExperiment,
    out_dir: &Path,
    deadline: Option<Instant>,
) -> ExpResult<RunStatus> {
    let sched = &resolved.echo.schedule;
    let engine = engine_of(sched.truncation);
    let profile = profile_of(&resolved.echo.profile);
    let state = initial_state(
        &profile,
        &plan.model,
        resolved.echo.physical.mean_n0,
        sched.chi_max,
        sched.eps_cut,
        engine,
    )?;
    let prepared = prepare_run(plan, &state)?;
    let series = ObservableSeries::new(&resolved.hash);
    advance_and_finalize(
        plan,
        resolved,
        out_dir,
        deadline,
        state,
        prepared,
        series,
        0,
        0.0,
    )
}

/// Execute one labeled run fully in memory: no output files, no deadline.
/// Returns the recorded series, the evolution report, and the step actually
/// used in correlation-time units (after any self-test halving). Serves
/// embedders and test drivers that consume records directly.
pub fn collect_run(
    resolved: &ResolvedExperiment,
    label: &str,
) -> ExpResult<(ObservableSeries, RunReport, f64)> {
    let plan = resolved
        .runs
        .iter()
        .find(|p| p.label == label)
        .ok_or_else(|| ExpError::Config(format!("no run labeled {label}")))?;
    let sched = &resolved.echo.schedule;
    let profile = profile_of(&resolved.echo.profile);
    let mut state = initial_state(
        &profile,
        &plan.model,
        resolved.echo.physical.mean_n0,
        sched.chi_max,
        sched.eps_cut,
        engine_of(sched.truncation),
    )?;
    let prepared = prepare_run(plan, &state)?;
    let ops = build_local_ops(plan.model.fock_cutoff)?;
    let center = plan.model.n_sites / 2;
    let mut series = ObservableSeries::new(&resolved.hash);
    let mut record_error: Option<ObsError> = None;
    let report = run(
        &mut state,
        &prepared.gates,
        prepared.n_steps,
        &prepared.record_steps,
        &RunLimits::default(),
        None,
        |_, t, st| match record_observables(st, &ops, center, t, t / plan.tau_c) {
            Ok(rec) => series.push(rec).map_err(|e| e.to_string()),
            Err(e) => {
                record_error = Some(e);
                Err("recorder failed".into())
            }
        },
    )
    .map_err(|e| ExpError::Numerical {
        label: plan.label.clone(),
        message: record_error
            .map(|o| o.to_string())
            .unwrap_or_else(|| e.to_string()),
        diagnostic: "none (in-memory run)".into(),
    })?;
    Ok((series, report, prepared.dt_tau))
}

/// Drive the evolution from `start_step` to the end of the schedule,
/// then write outputs; on deadline, checkpoint and write the resume file.
#[allow(clippy::too_many_arguments)]
fn advance_and_finalize(
    plan: &RunPlan,
    resolved: &ResolvedExperiment,
    out_dir: &Path,
    deadline: Option<Instant>,
    mut state: SuperketMPS,
    prepared: PreparedRun,
    mut series: ObservableSeries,
    start_step: usize,
    start_time: f64,
) -> ExpResult<RunStatus> {
    let ops = build_local_ops(plan.model.fock_cutoff)?;
    let center = plan.model.n_sites / 2;
    let tau_c = plan.tau_c;
    let remaining_steps = prepared.n_steps - start_step;
    // A record landing exactly on the suspension step was already taken
    // before suspension; only strictly later ones remain (plus the initial
    // snapshot of a fresh run).
    let remaining_records: Vec<usize> = prepared
        .record_steps
        .iter()
        .filter(|&&s| s > start_step || (s == 0 && start_step == 0))
        .map(|&s| s - start_step)
        .collect();

    let mut record_error: Option<ObsError> = None;
    let outcome = run(
        &mut state,
        &prepared.gates,
        remaining_steps,
        &remaining_records,
        &RunLimits::default(),
        deadline,
        |_, t, st| {
            let t_abs = start_time + t;
            match record_observables(st, &ops, center, t_abs, t_abs / tau_c) {
                Ok(rec) => series.push(rec).map_err(|e| e.to_string()),
                Err(e) => {
                    record_error = Some(e);
                    Err("recorder failed".into())
                }
            }
        },
    );

    let report = match outcome {
        Ok(report) => report,
        Err(e) => {
            let message = match record_error {
                Some(obs) => obs.to_string(),
                None => e.to_string(),
            };
            let diag = out_dir.join(format!("{}.diagnostic.txt", plan.label));
            let text = format!(
                "# config {}\nrun: {}\nerror: {}\nrecords completed: {}\ncumulative discard: {:.16e}\n",
                resolved.hash,
                plan.label,
                message,
                series.records.len(),
                state.cumulative_discard,
            );
            atomic_write(&diag, &text)?;
            return Err(ExpError::Numerical {
                label: plan.label.clone(),
                message,
                diagnostic: diag.display().to_string(),
            });
        }
    };

    let steps_done = start_step + report.steps_done;
    if report.outcome == RunOutcome::DeadlineReached {
        let ckpt_file = format!("{}.ckpt", plan.label);
        save_checkpoint(
            &out_dir.join(&ckpt_file),
            &state,
            &resolved.hash,
            steps_done,
            steps_done as f64 * prepared.dt_abs,
        )?;
        let doc = ResumeDoc {
            config: resolved.echo.clone(),
            label: plan.label.clone(),
            hash: resolved.hash.clone(),
            dt_tau_used: prepared.dt_tau,
            n_steps_used: prepared.n_steps,
            record_steps_used: prepared.record_steps.clone(),
            ckpt_file,
            series: series.clone(),
        };
        let resume_path = out_dir.join(format!("{}.resume.json", plan.label));
        let text = serde_json::to_string(&doc)
            .map_err(|e| ExpError::Resume(format!("serialize resume doc: {e}")))?;
        atomic_write(&resume_path, &text)?;
        write_summary(
            plan, resolved, out_dir, &prepared, &report, steps_done, "suspended",
        )?;
        return Ok(RunStatus::Suspended);
    }

    write_series_files(plan, resolved, out_dir, &series)?;
    write_summary(
        plan, resolved, out_dir, &prepared, &report, steps_done, "completed",
    )?;
    // A finished run leaves no stale resume artifacts behind.
    let _ = std::fs::remove_file(out_dir.join(format!("{}.ckpt", plan.label)));
    let _ = std::fs::remove_file(out_dir.join(format!("{}.resume.json", plan.label)));
    Ok(RunStatus::Completed)
}

/// Continue a suspended run from its resume file (or its checkpoint path,
/// from which the resume file is found by convention).
pub fn resume_experiment(path: &Path) -> ExpResult<ExperimentOutcome> {
    let resume_path = if path.extension().is_some_and(|e| e == "ckpt") {
        let name = path
            .file_stem()
            .ok_or_else(|| ExpError::Resume("checkpoint path has no stem".into()))?
            .to_string_lossy()
            .into_owned();
        path.with_file_name(format!("{name}.resume.json"))
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&resume_path).map_err(|e| io_err(&resume_path, e))?;
    let doc: ResumeDoc =
        serde_json::from_str(&text).map_err(|e| ExpError::Resume(format!("parse: {e}")))?;

    let resolved = resolve(doc.config.clone(), None)?;
    if resolved.hash != doc.hash {
        return Err(ExpError::Resume(format!(
            "config hash changed: resume file says {}, config resolves to {}",
            doc.hash, resolved.hash
        )));
    }
    let plan = resolved
        .runs
        .iter()
        .find(|p| p.label == doc.label)
        .ok_or_else(|| ExpError::Resume(format!("no run labeled {} in config", doc.label)))?;

    let out_dir = resume_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let ckpt = load_checkpoint(&out_dir.join(&doc.ckpt_file))?;
    if ckpt.config_hash != resolved.hash {
        return Err(ExpError::Resume(format!(
            "checkpoint belongs to config {}, not {}",
            ckpt.config_hash, resolved.hash
        )));
    }

    let dt_abs = doc.dt_tau_used * plan.tau_c;
    let gates = GateSet::build(&plan.model, dt_abs, 2).map_err(evolve_msg)?;
    let prepared = PreparedRun {
        gates,
        dt_tau: doc.dt_tau_used,
        dt_abs,
        n_steps: doc.n_steps_used,
        record_steps: doc.record_steps_used.clone(),
        self_test_diff: None,
        halved: doc.dt_tau_used < plan.dt_tau,
    };
    let deadline = resolved
        .echo
        .schedule
        .wall_clock_minutes
        .map(|m| Instant::now() + Duration::from_secs_f64(m * 60.0));
    let status = advance_and_finalize(
        plan,
        &resolved,
        &out_dir,
        deadline,
        ckpt.state,
        prepared,
        doc.series,
        ckpt.step,
        ckpt.time_abs,
    )?;
    Ok(ExperimentOutcome {
        statuses: vec![(doc.label, status)],
    })
}

// ---------------------------------------------------------------------------
// Output files. All plain delimited text, atomically written, hash-stamped.

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => fmt17(x),
        None => "nan".into(),
    }
}

fn atomic_write(path: &Path, content: &str) -> ExpResult<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    std::fs::write(&tmp, content).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn write_series_files(
    plan: &RunPlan,
    resolved: &ResolvedExperiment,
    out_dir: &Path,
    series: &ObservableSeries,
) -> ExpResult<()> {
    let hash = &resolved.hash;
    let label = &plan.label;
    let center = plan.model.n_sites / 2;

    // Scalar time series.
    let mut main = String::new();
    main.push_str(&format!("# config {hash} run {label}\n"));
    main.push_str(
        "# columns: t_over_tau_c\tt_abs\tn_center\tg2_center\ttotal_n\ttrace\tcumulative_discard\tmax_bond\tflags\n",
    );
    for r in &series.records {
        let flags = if r.flags.is_empty() {
            "-".to_string()
        } else {
            r.flags.join(";").replace(['\t', '\n'], " ")
        };
        main.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            fmt17(r.time_tau),
            fmt17(r.time_abs),
            fmt17(r.density[center]),
            fmt_opt(r.g2_local[center]),
            fmt17(r.total_n),
            fmt17(r.trace),
            fmt17(r.cumulative_discard),
            r.max_bond,
            flags
        ));
    }
    atomic_write(&out_dir.join(format!("{label}.series.tsv")), &main)?;

    // Centre correlation alone: the sweep-comparison curve.
    let mut g2c = String::new();
    g2c.push_str(&format!("# config {hash} run {label}\n"));
    g2c.push_str("# columns: t_over_tau_c\tg2_center\n");
    for r in &series.records {
        g2c.push_str(&format!(
            "{}\t{}\n",
            fmt17(r.time_tau),
            fmt_opt(r.g2_local[center])
        ));
    }
    atomic_write(&out_dir.join(format!("{label}.g2center.tsv")), &g2c)?;

    // Correlation row against the centre site, one row per record.
    let n_sites = plan.model.n_sites;
    let site_header: Vec<String> = (0..n_sites).map(|l| format!("site{l}")).collect();
    let mut row = String::new();
    row.push_str(&format!(
        "# config {hash} run {label} reference_site {center}\n"
    ));
    row.push_str(&format!(
        "# columns: t_over_tau_c\t{}\n",
        site_header.join("\t")
    ));
    for r in &series.records {
        row.push_str(&fmt17(r.time_tau));
        for v in &r.g2_row {
            row.push('\t');
            row.push_str(&fmt_opt(*v));
        }
        row.push('\n');
    }
    atomic_write(&out_dir.join(format!("{label}.g2row.tsv")), &row)?;

    // Density profile, one row per record.
    let mut dens = String::new();
    dens.push_str(&format!("# config {hash} run {label}\n"));
    dens.push_str(&format!(
        "# columns: t_over_tau_c\t{}\n",
        site_header.join("\t")
    ));
    for r in &series.records {
        dens.push_str(&fmt17(r.time_tau));
        for v in &r.density {
            dens.push('\t');
            dens.push_str(&fmt17(*v));
        }
        dens.push('\n');
    }
    atomic_write(&out_dir.join(format!("{label}.density.tsv")), &dens)?;

    // Loss-equation cross-check columns, where the correlator stays
    // defined at the centre for the whole series.
    if plan.model.gamma2 > 0.0 && series.records.len() >= 3 {
        if let Ok(check) = density_decay_check(series, plan.model.gamma2, center) {
            let mut decay = String::new();
            decay.push_str(&format!("# config {hash} run {label}\n"));
            decay.push_str(
                "# columns: t_over_tau_c\tn_center\tn_loss_equation\tn_reference_g2_one\n",
            );
            for (i, r) in series.records.iter().enumerate() {
                decay.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    fmt17(r.time_tau),
                    fmt17(check.recorded[i]),
                    fmt17(check.integrated[i]),
                    fmt17(check.reference_g2_one[i]),
                ));
            }
            atomic_write(&out_dir.join(format!("{label}.decay.tsv")), &decay)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    run: SummaryRun<'a>,
    derived: SummaryDerived,
    report: SummaryReport,
    config: &'a RawConfig,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SummaryRun<'a> {
    label: &'a str,
    status: &'a str,
    config_hash: &'a str,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SummaryDerived {
    g_abs: f64,
    t_loc: f64,
    tau_c: f64,
    hopping: f64,
    repulsion: f64,
    gamma1: f64,
    gamma2: f64,
    delta_z: f64,
    dt_tau_used: f64,
    dt_abs_used: f64,
    n_steps: usize,
    self_test_diff: Option<f64>,
    dt_halved: bool,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SummaryReport {
    steps_done: usize,
    worst_trace_drift: f64,
    worst_step_discard: f64,
    trace_band_violations: usize,
    step_drift_violations: usize,
    log_norm_flow: f64,
    max_bond_seen: usize,
}

fn write_summary(
    plan: &RunPlan,
    resolved: &ResolvedExperiment,
    out_dir: &Path,
    prepared: &PreparedRun,
    report: &crate::evolve::RunReport,
    steps_done: usize,
    status: &str,
) -> ExpResult<()> {
    let doc = SummaryDoc {
        run: SummaryRun {
            label: &plan.label,
            status,
            config_hash: &resolved.hash,
        },
        derived: SummaryDerived {
            g_abs: plan.g_abs_group,
            t_loc: plan.t_loc,
            tau_c: plan.tau_c,
            hopping: plan.model.hopping,
            repulsion: plan.model.repulsion,
            gamma1: plan.model.gamma1,
            gamma2: plan.model.gamma2,
            delta_z: plan.model.delta_z,
            dt_tau_used: prepared.dt_tau,
            dt_abs_used: prepared.dt_abs,
            n_steps: prepared.n_steps,
            self_test_diff: prepared.self_test_diff,
            dt_halved: prepared.halved,
        },
        report: SummaryReport {
            steps_done,
            worst_trace_drift: report.worst_trace_drift,
            worst_step_discard: report.worst_step_discard,
            trace_band_violations: report.trace_band_violations,
            step_drift_violations: report.step_drift_violations,
            log_norm_flow: report.log_norm_flow,
            max_bond_seen: report.max_bond_seen,
        },
        config: &resolved.echo,
    };
    let text = toml::to_string(&doc)
        .map_err(|e| ExpError::Config(format!("summary serialization: {e}")))?;
    atomic_write(
        &out_dir.join(format!("{}.summary.toml", plan.label)),
        &text,
    )
}

// ---------------------------------------------------------------------------
// Presets: the desk-scale figure protocols.

pub const PRESET_NAMES: [&str; 4] = ["fig3-desk", "fig4-desk", "fig5-desk", "fig6-desk"];

/// Built-in experiment definitions. A preset may expand to more than one
/// config (one per interaction mode) sharing an output directory.
pub fn preset_configs(name: &str) -> Option<Vec<RawConfig>> {
    // Desk-scale bond dimensions make exact SVD the dominant cost; the
    // subspace engine keeps preset runtimes in minutes at the same accuracy.
    let desk_schedule = || ScheduleSection {
        truncation: TruncationKind::Subspace,
        ..ScheduleSection::default()
    };
    let base = |interaction: InteractionSection| RawConfig {
        physical: PhysicalSection::default(),
        grid: GridSection::default(),
        profile: ProfileSection::default(),
        schedule: desk_schedule(),
        interaction,
        outputs: OutputSection {
            out_dir: format!("out/{name}"),
        },
        seedless: true,
    };
    let diss = |g_abs: Option<f64>, sweep: Option<Vec<f64>>| InteractionSection {
        mode: InteractionMode::PureDissipative,
        ratio: None,
        g_abs,
        sweep,
        g_real: None,
        g_imag: None,
    };
    match name {
        "fig3-desk" => Some(vec![base(diss(
            None,
            Some(vec![1.0, 10.0, 20.0, 100.0]),
        ))]),
        "fig4-desk" => Some(vec![base(diss(Some(100.0), None))]),
        "fig5-desk" => Some(vec![base(diss(Some(20.0), None))]),
        "fig6-desk" => {
            // Short horizon, matched runs in the two interaction modes,
            // with an off-grid record time over the feature of interest.
            let mut times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
            times.push(0.77);
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let schedule = ScheduleSection {
                t_end: 1.0,
                record_times: Some(times),
                ..desk_schedule()
            };
            let mut a = base(diss(Some(10.0), None));
            a.schedule = schedule.clone();
            let mut b = base(InteractionSection {
                mode: InteractionMode::PredominantlyRepulsive,
                ratio: Some(10.0),
                g_abs: Some(10.0),
                sweep: None,
                g_real: None,
                g_imag: None,
            });
            b.schedule = schedule;
            Some(vec![a, b])
        }
        _ => None,
    }
}
