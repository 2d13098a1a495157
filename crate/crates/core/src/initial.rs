//! Initial pulse construction: a nonnegative amplitude profile over the
//! chain, normalized so the occupancies sum to the configured particle
//! number, loaded as a product of local coherent density matrices.
//!
//! Site l sits at the cell centre z_l = (l + 1/2)Δz of a box of
//! n_sites·Δz. Profiles are densities up to scale; normalization fixes
//! |c_l|² = meanN0 · f(z_l) / Σ_m f(z_m), and c_l = √(|c_l|²) ≥ 0.

use crate::model::LatticeModel;
use crate::mps::{coherent_truncated_weight, MpsError, SuperketMPS, TruncationEngine};
use crate::C64;
use std::path::Path;
use thiserror::Error;

pub type InitResult<T> = Result<T, InitError>;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("invalid profile: {0}")]
    BadProfile(String),
    #[error("site {site}: occupancy {occupancy:.4} leaves weight {weight:.3e} above the local cutoff (limit 1e-3)")]
    CutoffViolation {
        site: usize,
        occupancy: f64,
        weight: f64,
    },
    #[error("profile table {path}: line {line}: {message}")]
    TableParse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot read profile table {path}: {source}")]
    TableIo {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Mps(#[from] MpsError),
}

/// Shape of the initial density pulse. Positions are fractions of the box.
#[derive(Debug, Clone, PartialEq)]
pub enum PulseProfile {
    /// exp(−(z − center)²/(2 width²)); width is the standard deviation.
    Gaussian { center: f64, width: f64 },
    /// Unit plateau covering the central `width` fraction of the box
    /// around `center`, raised-cosine shoulders falling to zero at the box
    /// edges. width = 1 gives a uniform profile.
    FlatTop { center: f64, width: f64 },
    /// Two-column samples (position fraction, relative density), linearly
    /// interpolated; zero outside the sampled range.
    Tabulated { table: Vec<(f64, f64)> },
}

impl Default for PulseProfile {
    fn default() -> Self {
        PulseProfile::FlatTop {
            center: 0.5,
            width: 0.6,
        }
    }
}

impl PulseProfile {
    fn validate(&self) -> InitResult<()> {
        let check_cw = |center: f64, width: f64| -> InitResult<()> {
            if !(0.0..=1.0).contains(&center) {
                return Err(InitError::BadProfile(format!(
                    "center must lie in [0, 1], got {center}"
                )));
            }
            if !(width > 0.0 && width.is_finite()) {
                return Err(InitError::BadProfile(format!(
                    "width must be positive, got {width}"
                )));
            }
            Ok(())
        };
        match self {
            PulseProfile::Gaussian { center, width } => check_cw(*center, *width),
            PulseProfile::FlatTop { center, width } => {
                check_cw(*center, *width)?;
                if *width > 1.0 {
                    return Err(InitError::BadProfile(format!(
                        "flat-top width is a box fraction and cannot exceed 1, got {width}"
                    )));
                }
                Ok(())
            }
            PulseProfile::Tabulated { table } => {
                if table.len() < 2 {
                    return Err(InitError::BadProfile(
                        "tabulated profile needs at least two rows".into(),
                    ));
                }
                for w in table.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(InitError::BadProfile(
                            "tabulated positions must increase strictly".into(),
                        ));
                    }
                }
                if table.iter().any(|&(_, f)| !(f >= 0.0) || !f.is_finite()) {
                    return Err(InitError::BadProfile(
                        "tabulated densities must be finite and nonnegative".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Relative density at box fraction u ∈ [0, 1].
    fn density(&self, u: f64) -> f64 {
        match self {
            PulseProfile::Gaussian { center, width } => {
                let x = (u - center) / width;
                (-0.5 * x * x).exp()
            }
            PulseProfile::FlatTop { center, width } => {
                let half = width / 2.0;
                let dist = (u - center).abs();
                if dist <= half {
                    return 1.0;
                }
                // Shoulder spans from the plateau edge to the nearer box
                // edge on this side.
                let edge = if u < *center { *center } else { 1.0 - center };
                let span = edge - half;
                if span <= 0.0 {
                    // Plateau reaches past the box on this side.
                    return 1.0;
                }
                let frac = (dist - half) / span;
                if frac >= 1.0 {
                    0.0
                } else {
                    0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                }
            }
            PulseProfile::Tabulated { table } => {
                let first = table.first().expect("validated");
                let last = table.last().expect("validated");
                if u < first.0 || u > last.0 {
                    return 0.0;
                }
                let pos = table.partition_point(|&(x, _)| x <= u);
                if pos == 0 {
                    return first.1;
                }
                if pos == table.len() {
                    return last.1;
                }
                let (x0, f0) = table[pos - 1];
                let (x1, f1) = table[pos];
                f0 + (f1 - f0) * (u - x0) / (x1 - x0)
            }
        }
    }
}

/// Parse a two-column numeric text table (position fraction, relative
/// density). Blank lines and lines starting with '#' are skipped.
pub fn load_table(path: &Path) -> InitResult<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|source| InitError::TableIo {
        path: path.display().to_string(),
        source,
    })?;
    parse_table(&text).map_err(|(line, message)| InitError::TableParse {
        path: path.display().to_string(),
        line,
        message,
    })
}

fn parse_table(text: &str) -> Result<Vec<(f64, f64)>, (usize, String)> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<f64, String> {
            s.ok_or_else(|| "expected two columns".to_string())?
                .parse::<f64>()
                .map_err(|e| e.to_string())
        };
        let x = parse(cols.next()).map_err(|m| (i + 1, m))?;
        let f = parse(cols.next()).map_err(|m| (i + 1, m))?;
        if cols.next().is_some() {
            return Err((i + 1, "expected exactly two columns".to_string()));
        }
        rows.push((x, f));
    }
    Ok(rows)
}

/// Amplitudes c_l for the configured pulse, real and nonnegative, with
/// Σ|c_l|² = mean_n0. Fails if any site's occupancy parks more than 1e-3
/// of coherent weight above the local cutoff.
pub fn build_profile(
    profile: &PulseProfile,
    model: &LatticeModel,
    mean_n0: f64,
) -> InitResult<Vec<C64>> {
    profile.validate()?;
    if !(mean_n0 > 0.0 && mean_n0.is_finite()) {
        return Err(InitError::BadProfile(format!(
            "mean particle number must be positive, got {mean_n0}"
        )));
    }
    let n = model.n_sites;
    let raw: Vec<f64> = (0..n)
        .map(|l| profile.density((l as f64 + 0.5) / n as f64))
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(InitError::BadProfile(
            "profile vanishes on every site".into(),
        ));
    }
    let mut amps = Vec::with_capacity(n);
    for (l, f) in raw.iter().enumerate() {
        let occupancy = mean_n0 * f / total;
        let c = occupancy.sqrt();
        let weight = coherent_truncated_weight(C64::new(c, 0.0), model.fock_cutoff);
        if weight > 1e-3 {
            return Err(InitError::CutoffViolation {
                site: l,
                occupancy,
                weight,
            });
        }
        amps.push(C64::new(c, 0.0));
    }
    Ok(amps)
}

/// Build the product superket for the pulse.
pub fn initial_state(
    profile: &PulseProfile,
    model: &LatticeModel,
    mean_n0: f64,
    chi_max: usize,
    eps_cut: f64,
    engine: TruncationEngine,
) -> InitResult<SuperketMPS> {
    let amps = build_profile(profile, model, mean_n0)?;
    Ok(SuperketMPS::coherent_product_state(
        &amps,
        model.fock_cutoff,
        chi_max,
        eps_cut,
        engine,
    )?)
}
