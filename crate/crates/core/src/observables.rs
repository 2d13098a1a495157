//! Measured quantities on superket states: per-site density, on-site and
//! two-point normalized pair correlations, particle totals, and the
//! loss-equation consistency check.
//!
//! Conventions fixed here:
//! - Coincident-point pair correlation uses on-site normal ordering,
//!   g²(l,l) = ⟨a†²a²⟩_l / ⟨n_l⟩², which matches the lattice loss algebra
//!   d⟨n_l⟩/dt|loss = −2Γ₂⟨a†²a²⟩_l exactly.
//! - Distinct sites use g²(l,m) = ⟨n_l n_m⟩ / (⟨n_l⟩⟨n_m⟩); normal ordering
//!   changes nothing across sites.
//! - Densities below `DENSITY_FLOOR` make the normalized correlator
//!   undefined; undefined is recorded as absent, never as 0 or 1.

use crate::model::{build_local_ops, LocalOps, ModelError};
use crate::mps::{MpsError, SuperketMPS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Densities below this have no meaningful normalized correlator.
pub const DENSITY_FLOOR: f64 = 1e-8;

/// Imaginary parts and negative excursions beyond these are flagged as
/// convergence failures in the record.
pub const REALITY_TOL: f64 = 1e-8;
pub const G2_NEGATIVITY_TOL: f64 = 1e-6;

pub type ObsResult<T> = Result<T, ObsError>;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error(transparent)]
    Mps(#[from] MpsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("need at least {need} records, got {got}")]
    TooFewRecords { need: usize, got: usize },
    #[error("record {index}: local pair correlation undefined at the tracked site")]
    UndefinedG2 { index: usize },
    #[error("record times must increase strictly (record {index})")]
    NonMonotonicTimes { index: usize },
}

/// On-site pair correlation ⟨a†²a²⟩/⟨n⟩²; `None` below the density floor.
pub fn g2_local(state: &SuperketMPS, ops: &LocalOps, site: usize) -> ObsResult<Option<f64>> {
    let n = state.local_expectation(site, &ops.number.view())?.re;
    if n <= DENSITY_FLOOR {
        return Ok(None);
    }
    let pd = state.local_expectation(site, &ops.pair_density.view())?.re;
    Ok(Some(pd / (n * n)))
}

/// Two-point correlation ⟨n_A n_B⟩/(⟨n_A⟩⟨n_B⟩) for distinct sites;
/// `None` if either density sits below the floor.
pub fn g2_nonlocal(
    state: &SuperketMPS,
    ops: &LocalOps,
    site_a: usize,
    site_b: usize,
) -> ObsResult<Option<f64>> {
    let na = state.local_expectation(site_a, &ops.number.view())?.re;
    let nb = state.local_expectation(site_b, &ops.number.view())?.re;
    if na <= DENSITY_FLOOR || nb <= DENSITY_FLOOR {
        return Ok(None);
    }
    let nn = state
        .two_site_expectation(site_a, &ops.number.view(), site_b, &ops.number.view())?
        .re;
    Ok(Some(nn / (na * nb)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservableRecord {
    /// Time in correlation-time units (equals `time_abs` when no such unit
    /// is defined for the run).
    pub time_tau: f64,
    pub time_abs: f64,
    /// ⟨n_l⟩ per site.
    pub density: Vec<f64>,
    /// g²(l,l) per site; None below the density floor.
    pub g2_local: Vec<Option<f64>>,
    /// g²(l₀, m) against the reference site; entry at l₀ is g²(l₀,l₀).
    pub g2_row: Vec<Option<f64>>,
    pub reference_site: usize,
    pub total_n: f64,
    pub trace: f64,
    pub cumulative_discard: f64,
    pub max_bond: usize,
    /// Convergence-health flags raised while measuring (reality violations,
    /// negativity beyond tolerance). Empty means clean.
    pub flags: Vec<String>,
}

/// Measure everything the time series carries at one instant.
pub fn record_observables(
    state: &SuperketMPS,
    ops: &LocalOps,
    reference_site: usize,
    time_abs: f64,
    time_tau: f64,
) -> ObsResult<ObservableRecord> {
    let n_sites = state.n_sites();
    let mut flags = Vec::new();
    let mut density = Vec::with_capacity(n_sites);
    for l in 0..n_sites {
        let n = state.local_expectation(l, &ops.number.view())?;
        if n.im.abs() > REALITY_TOL {
            flags.push(format!("density at site {l} has imaginary part {:.3e}", n.im));
        }
        if n.re < -REALITY_TOL {
            flags.push(format!("density at site {l} negative: {:.3e}", n.re));
        }
        density.push(n.re);
    }

    let mut g2l = Vec::with_capacity(n_sites);
    for l in 0..n_sites {
        let v = g2_local(state, ops, l)?;
        if let Some(g) = v {
            if g < -G2_NEGATIVITY_TOL {
                flags.push(format!("g2(l,l) at site {l} negative: {:.3e}", g));
            }
        }
        g2l.push(v);
    }

    let mut g2row = Vec::with_capacity(n_sites);
    for m in 0..n_sites {
        if m == reference_site {
            g2row.push(g2l[m]);
        } else {
            g2row.push(g2_nonlocal(state, ops, reference_site, m)?);
        }
    }

    let trace = state.trace_contraction();
    if trace.im.abs() > REALITY_TOL {
        flags.push(format!("trace has imaginary part {:.3e}", trace.im));
    }

    Ok(ObservableRecord {
        time_tau,
        time_abs,
        total_n: density.iter().sum(),
        density,
        g2_local: g2l,
        g2_row: g2row,
        reference_site,
        trace: trace.re,
        cumulative_discard: state.cumulative_discard,
        max_bond: state.max_bond(),
        flags,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub records: Vec<ObservableRecord>,
    pub config_hash: String,
}

impl ObservableSeries {
    pub fn new(config_hash: impl Into<String>) -> Self {
        ObservableSeries {
            records: Vec::new(),
            config_hash: config_hash.into(),
        }
    }

    pub fn push(&mut self, record: ObservableRecord) -> ObsResult<()> {
        if let Some(last) = self.records.last() {
            if record.time_abs <= last.time_abs {
                return Err(ObsError::NonMonotonicTimes {
                    index: self.records.len(),
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn any_flags(&self) -> bool {
        self.records.iter().any(|r| !r.flags.is_empty())
    }
}

/// Loss-equation self-consistency report: the density at one site
/// reconstructed by integrating ṅ = −2Γ₂·g²(t)·n² with the recorded g²(t),
/// next to the recorded density and the g²≡1 reference curve.
#[derive(Debug, Clone)]
pub struct DecayCheck {
    pub site: usize,
    pub times: Vec<f64>,
    pub recorded: Vec<f64>,
    pub integrated: Vec<f64>,
    pub reference_g2_one: Vec<f64>,
    /// |integrated − recorded| per record.
    pub deviation: Vec<f64>,
    /// recorded[0] − recorded[i]: the loss accumulated so far.
    pub loss_so_far: Vec<f64>,
}

/// Classical 4-stage one-step integration with linear interpolation of the
/// recorded g²(t). The step subdivides each record interval finely enough
/// that the integrator error sits far below the interpolation error.
pub fn density_decay_check(
    series: &ObservableSeries,
    gamma2: f64,
    site: usize,
) -> ObsResult<DecayCheck> {
    let n_rec = series.records.len();
    if n_rec < 3 {
        return Err(ObsError::TooFewRecords {
            need: 3,
            got: n_rec,
        });
    }
    let times: Vec<f64> = series.records.iter().map(|r| r.time_abs).collect();
    let recorded: Vec<f64> = series.records.iter().map(|r| r.density[site]).collect();
    let g2: Vec<f64> = series
        .records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            r.g2_local[site]
                .ok_or(ObsError::UndefinedG2 { index })
        })
        .collect::<Result<_, _>>()?;

    let rhs = |g: f64, n: f64| -2.0 * gamma2 * g * n * n;

    let mut integrated = vec![recorded[0]];
    let mut reference = vec![recorded[0]];
    let mut n_int = recorded[0];
    let mut n_ref = recorded[0];
    for i in 0..n_rec - 1 {
        let (t0, t1) = (times[i], times[i + 1]);
        let (g0, g1) = (g2[i], g2[i + 1]);
        let span = t1 - t0;
        let substeps = 64usize;
        let h = span / substeps as f64;
        for s in 0..substeps {
            let frac = |x: f64| (s as f64 + x) / substeps as f64;
            let g_at = |x: f64| g0 + (g1 - g0) * frac(x);
            let k1 = rhs(g_at(0.0), n_int);
            let k2 = rhs(g_at(0.5), n_int + 0.5 * h * k1);
            let k3 = rhs(g_at(0.5), n_int + 0.5 * h * k2);
            let k4 = rhs(g_at(1.0), n_int + h * k3);
            n_int += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

            let k1 = rhs(1.0, n_ref);
            let k2 = rhs(1.0, n_ref + 0.5 * h * k1);
            let k3 = rhs(1.0, n_ref + 0.5 * h * k2);
            let k4 = rhs(1.0, n_ref + h * k3);
            n_ref += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        integrated.push(n_int);
        reference.push(n_ref);
    }

    let deviation: Vec<f64> = integrated
        .iter()
        .zip(recorded.iter())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let loss_so_far: Vec<f64> = recorded.iter().map(|&n| recorded[0] - n).collect();

    Ok(DecayCheck {
        site,
        times,
        recorded,
        integrated,
        reference_g2_one: reference,
        deviation,
        loss_so_far,
    })
}

/// Equilibrium estimate of the coincident-point correlation in the strongly
/// interacting regime: (1 − 1/n²)·4π²/(3·g²) with n the particle number and
/// g the dimensionless coupling magnitude. Annotation value only.
pub fn tonks_asymptote(g_abs: f64, n_ph: f64) -> f64 {
    assert!(g_abs > 0.0, "coupling magnitude must be positive");
    (1.0 - 1.0 / (n_ph * n_ph)) * 4.0 * std::f64::consts::PI.powi(2) / (3.0 * g_abs * g_abs)
}

/// Convenience: local operator set for a state's cutoff.
pub fn ops_for(state: &SuperketMPS) -> Result<LocalOps, ModelError> {
    build_local_ops(state.local_dim - 1)
}
