//! Physical parameters, lattice couplings, local operators, and the
//! nearest-neighbour decomposition of the Liouvillian.
//!
//! The continuum system is a 1D Bose gas in a box of length `L` with complex
//! contact coupling `g̃` (elastic part Re g̃, two-particle loss −Im g̃) and a
//! small field-diffusion term of strength `D`. On a grid of `N_s` sites with
//! spacing `Δz = L/N_s` this becomes a Bose-Hubbard chain with
//!
//! ```text
//! J = ħ²/(2m Δz²)     hopping
//! U = Re(g̃)/Δz        on-site repulsion
//! Γ₁ = D/Δz²          diffusive single-particle dissipation
//! Γ₂ = −Im(g̃/ħ)/Δz    on-site two-particle loss
//! ```
//!
//! evolving under
//!
//! ```text
//! ϱ̇ = −(i/ħ)[H₁ + H₂, ϱ] + L₁ϱ + L₂ϱ
//! H₁ = 2J Σ_l a†_l a_l − J Σ_l (a_l a†_{l+1} + a_{l+1} a†_l)
//! H₂ = (U/2) Σ_l a†²_l a²_l
//! L₁ϱ = −Γ₁ Σ_l (a†_l a_l ϱ + ϱ a†_l a_l − 2 a_l ϱ a†_l)
//!       + (Γ₁/2) Σ_l (a†_l a_{l+1} ϱ + ϱ a†_l a_{l+1} − 2 a_{l+1} ϱ a†_l)
//!       + (Γ₁/2) Σ_l (a_l a†_{l+1} ϱ + ϱ a_l a†_{l+1} − 2 a_l ϱ a†_{l+1})
//! L₂ϱ = −(Γ₂/2) Σ_l (a†²_l a²_l ϱ + ϱ a†²_l a²_l − 2 a²_l ϱ a†²_l)
//! ```
//!
//! Boundaries are open: the nearest-neighbour sums run over bonds 0..N_s−2
//! (0-indexed) while on-site sums cover every site. With that convention L₁
//! is a sum of genuine Lindblad dissipators (bond jumps a_l − a_{l+1} at rate
//! Γ₁/2 plus single-site loss remainders at the two ends), so the generator
//! is completely positive and trace preserving.

use crate::tensor::{dag, kron};
use crate::C64;
use ndarray::prelude::*;
use thiserror::Error;

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("field {field} must satisfy {requirement}, got {value}")]
    BadParameter {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("nSites must be at least 2, got {0}")]
    TooFewSites(usize),
    #[error("fockCutoff must be at least 1, got {0}")]
    BadCutoff(usize),
    #[error("coupling magnitude |g| is zero; interaction timescales undefined")]
    ZeroCoupling,
}

/// Physical inputs in continuum units. `g_imag ≤ 0` encodes loss (never gain)
/// and `diffusion_d ≥ 0`; everything else is positivity of scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams {
    /// Reduced Planck constant in the chosen unit system (default 1).
    pub hbar: f64,
    /// Particle mass m.
    pub mass: f64,
    /// Elastic part of the contact coupling, Re g̃ (energy × length).
    pub g_real: f64,
    /// Dissipative part of the contact coupling, Im g̃ ≤ 0.
    pub g_imag: f64,
    /// Field diffusion constant D ≥ 0.
    pub diffusion_d: f64,
    /// Box length L.
    pub box_length: f64,
    /// Initial mean particle number.
    pub mean_n0: f64,
}

impl PhysicalParams {
    pub fn validate(&self) -> ModelResult<()> {
        let checks: [(&'static str, f64, bool, &'static str); 7] = [
            ("hbar", self.hbar, self.hbar > 0.0, "be positive"),
            ("mass", self.mass, self.mass > 0.0, "be positive"),
            ("gImag", self.g_imag, self.g_imag <= 0.0, "be nonpositive (loss, not gain)"),
            ("diffusionD", self.diffusion_d, self.diffusion_d >= 0.0, "be nonnegative"),
            ("boxLength", self.box_length, self.box_length > 0.0, "be positive"),
            ("meanN0", self.mean_n0, self.mean_n0 > 0.0, "be positive"),
            ("gReal", self.g_real, self.g_real.is_finite(), "be finite"),
        ];
        for (field, value, ok, requirement) in checks {
            if !ok || !value.is_finite() {
                return Err(ModelError::BadParameter {
                    field,
                    requirement,
                    value,
                });
            }
        }
        Ok(())
    }

    /// |g̃| = √(Re² + Im²).
    pub fn g_abs(&self) -> f64 {
        self.g_real.hypot(self.g_imag)
    }

    /// Mean particle density ρ = ⟨N⟩₀ / L.
    pub fn density(&self) -> f64 {
        self.mean_n0 / self.box_length
    }
}

/// Discretized chain: grid geometry plus the four couplings. Constructed
/// from [`PhysicalParams`] via [`build_lattice`] or directly from couplings
/// for analytic test cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeModel {
    pub n_sites: usize,
    /// Maximal boson occupation per site; local dimension is this + 1.
    pub fock_cutoff: usize,
    pub delta_z: f64,
    pub hbar: f64,
    /// Hopping J.
    pub hopping: f64,
    /// On-site repulsion U.
    pub repulsion: f64,
    /// Diffusive dissipation rate Γ₁ ≥ 0.
    pub gamma1: f64,
    /// Two-particle loss rate Γ₂ ≥ 0.
    pub gamma2: f64,
}

/// Couplings from physical parameters per the header formulas.
pub fn build_lattice(p: &PhysicalParams, n_sites: usize, fock_cutoff: usize) -> ModelResult<LatticeModel> {
    p.validate()?;
    if n_sites < 2 {
        return Err(ModelError::TooFewSites(n_sites));
    }
    if fock_cutoff < 1 {
        return Err(ModelError::BadCutoff(fock_cutoff));
    }
    let delta_z = p.box_length / n_sites as f64;
    Ok(LatticeModel {
        n_sites,
        fock_cutoff,
        delta_z,
        hbar: p.hbar,
        hopping: p.hbar * p.hbar / (2.0 * p.mass * delta_z * delta_z),
        repulsion: p.g_real / delta_z,
        gamma1: p.diffusion_d / (delta_z * delta_z),
        gamma2: -p.g_imag / (p.hbar * delta_z),
    })
}

impl LatticeModel {
    /// Direct construction in coupling units (ħ = 1, Δz = 1). Used by tests
    /// and oracle comparisons where the couplings, not the continuum inputs,
    /// are the interesting quantities.
    pub fn from_couplings(
        n_sites: usize,
        fock_cutoff: usize,
        hopping: f64,
        repulsion: f64,
        gamma1: f64,
        gamma2: f64,
    ) -> ModelResult<LatticeModel> {
        if n_sites < 2 {
            return Err(ModelError::TooFewSites(n_sites));
        }
        if fock_cutoff < 1 {
            return Err(ModelError::BadCutoff(fock_cutoff));
        }
        for (field, value, ok) in [
            ("gamma1", gamma1, gamma1 >= 0.0),
            ("gamma2", gamma2, gamma2 >= 0.0),
            ("hopping", hopping, hopping.is_finite()),
            ("repulsion", repulsion, repulsion.is_finite()),
        ] {
            if !ok || !value.is_finite() {
                return Err(ModelError::BadParameter {
                    field,
                    requirement: "be a finite nonnegative rate or finite coupling",
                    value,
                });
            }
        }
        Ok(LatticeModel {
            n_sites,
            fock_cutoff,
            delta_z: 1.0,
            hbar: 1.0,
            hopping,
            repulsion,
            gamma1,
            gamma2,
        })
    }

    pub fn local_dim(&self) -> usize {
        self.fock_cutoff + 1
    }
}

/// Ladder and density operators at a given Fock cutoff (d = cutoff + 1).
#[derive(Debug, Clone)]
pub struct LocalOps {
    /// a, with a|k⟩ = √k |k−1⟩.
    pub annihilate: Array2<C64>,
    /// a†.
    pub create: Array2<C64>,
    /// n = a†a, diagonal 0..cutoff.
    pub number: Array2<C64>,
    /// a².
    pub pair_loss: Array2<C64>,
    /// a†²a², diagonal k(k−1).
    pub pair_density: Array2<C64>,
    pub dim: usize,
}

pub fn build_local_ops(fock_cutoff: usize) -> ModelResult<LocalOps> {
    if fock_cutoff < 1 {
        return Err(ModelError::BadCutoff(fock_cutoff));
    }
    let d = fock_cutoff + 1;
    let mut a = Array2::<C64>::zeros((d, d));
    for k in 1..d {
        a[[k - 1, k]] = C64::new((k as f64).sqrt(), 0.0);
    }
    let create = dag(&a.view());
    let number = create.dot(&a);
    let pair_loss = a.dot(&a);
    let pair_density = dag(&pair_loss.view()).dot(&pair_loss);
    Ok(LocalOps {
        annihilate: a,
        create,
        number,
        pair_loss,
        pair_density,
        dim: d,
    })
}

/// Interaction-strength and timescale summary:
/// `lieb_liniger_g` = m|g̃|/(ħ²ρ), `t_loc` = ħ/(|g̃|ρ), and the figure time
/// unit `tau_c` = 2ħ/√(U² + (ħΓ₂)²), which reduces to 2ħΔz/|g̃|.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionlessGroup {
    pub lieb_liniger_g: f64,
    pub t_loc: f64,
    pub tau_c: f64,
}

/// The interaction groups need both continuum inputs and the grid spacing
/// (`tau_c` is defined through the lattice couplings U and Γ₂).
pub fn dimensionless_groups(p: &PhysicalParams, delta_z: f64) -> ModelResult<DimensionlessGroup> {
    p.validate()?;
    if delta_z <= 0.0 {
        return Err(ModelError::BadParameter {
            field: "deltaZ",
            requirement: "be positive",
            value: delta_z,
        });
    }
    let g_abs = p.g_abs();
    if g_abs == 0.0 {
        return Err(ModelError::ZeroCoupling);
    }
    let rho = p.density();
    let u = p.g_real / delta_z;
    let hbar_gamma2 = -p.g_imag / delta_z;
    Ok(DimensionlessGroup {
        lieb_liniger_g: p.mass * g_abs / (p.hbar * p.hbar * rho),
        t_loc: p.hbar / (g_abs * rho),
        tau_c: 2.0 * p.hbar / u.hypot(hbar_gamma2),
    })
}

/// `coeff · (X ϱ + ϱ X − 2 Z ϱ W)` as a superoperator on the row-major
/// vectorization, using A ϱ B ↦ (A ⊗ Bᵀ)·vec(ϱ).
fn dissipator_line(
    acc: &mut Array2<C64>,
    coeff: f64,
    x: &Array2<C64>,
    z: &Array2<C64>,
    w: &Array2<C64>,
) {
    let dim = x.nrows();
    let id = Array2::from_diag_elem(dim, C64::new(1.0, 0.0));
    let c = C64::new(coeff, 0.0);
    *acc = &*acc + &(kron(&x.view(), &id.view()).mapv(|v| v * c));
    *acc = &*acc + &(kron(&id.view(), &x.t()).mapv(|v| v * c));
    *acc = &*acc - &(kron(&z.view(), &w.t()).mapv(|v| v * c * 2.0));
}

/// Commutator superoperator `−(i/ħ)(H ⊗ I − I ⊗ Hᵀ)`.
fn commutator_superop(h: &Array2<C64>, hbar: f64) -> Array2<C64> {
    let dim = h.nrows();
    let id = Array2::from_diag_elem(dim, C64::new(1.0, 0.0));
    let scale = C64::new(0.0, -1.0 / hbar);
    let left = kron(&h.view(), &id.view());
    let right = kron(&id.view(), &h.t());
    (left - right).mapv(|v| v * scale)
}

/// Per-bond generators whose embedded sum reproduces the full Liouvillian.
///
/// Bond b couples sites (b, b+1) and acts on the row-major vectorization of
/// the two-site density matrix, a d⁴ vector (d² × d² matrix flattened).
/// On-site terms (2J n̂, H₂, L₂, and L₁'s on-site line) are split half/half
/// between the two bonds touching an interior site; a boundary site's
/// on-site terms go entirely to its only bond. The nearest-neighbour pieces
/// (hopping and L₁'s cross lines) belong wholly to their bond.
pub fn bond_liouvillians(m: &LatticeModel) -> ModelResult<Vec<Array2<C64>>> {
    if m.n_sites < 2 {
        return Err(ModelError::TooFewSites(m.n_sites));
    }
    let ops = build_local_ops(m.fock_cutoff)?;
    let d = ops.dim;
    let id = Array2::from_diag_elem(d, C64::new(1.0, 0.0));

    // Two-site embeddings: left factor is site b, right factor site b+1.
    let on_left = |o: &Array2<C64>| kron(&o.view(), &id.view());
    let on_right = |o: &Array2<C64>| kron(&id.view(), &o.view());

    let a_l = on_left(&ops.annihilate);
    let a_r = on_right(&ops.annihilate);
    let adag_l = on_left(&ops.create);
    let adag_r = on_right(&ops.create);
    let n_l = on_left(&ops.number);
    let n_r = on_right(&ops.number);
    let pd_l = on_left(&ops.pair_density);
    let pd_r = on_right(&ops.pair_density);
    let asq_l = on_left(&ops.pair_loss);
    let asq_r = on_right(&ops.pair_loss);

    let hop = adag_r.dot(&a_l) + adag_l.dot(&a_r);
    let cross_up = adag_l.dot(&a_r);
    let cross_dn = a_l.dot(&adag_r);

    let mut gens = Vec::with_capacity(m.n_sites - 1);
    for b in 0..m.n_sites - 1 {
        let w_left = if b == 0 { 1.0 } else { 0.5 };
        let w_right = if b + 1 == m.n_sites - 1 { 1.0 } else { 0.5 };

        let mut h = Array2::<C64>::zeros((d * d, d * d));
        h = h + n_l.mapv(|v| v * C64::new(2.0 * m.hopping * w_left, 0.0));
        h = h + n_r.mapv(|v| v * C64::new(2.0 * m.hopping * w_right, 0.0));
        h = h + pd_l.mapv(|v| v * C64::new(0.5 * m.repulsion * w_left, 0.0));
        h = h + pd_r.mapv(|v| v * C64::new(0.5 * m.repulsion * w_right, 0.0));
        h = h - hop.mapv(|v| v * C64::new(m.hopping, 0.0));

        let mut gen = commutator_superop(&h, m.hbar);

        // L1 on-site (weighted halves) and cross lines (full, per bond).
        dissipator_line(&mut gen, -m.gamma1 * w_left, &n_l, &a_l, &adag_l);
        dissipator_line(&mut gen, -m.gamma1 * w_right, &n_r, &a_r, &adag_r);
        dissipator_line(&mut gen, 0.5 * m.gamma1, &cross_up, &a_r, &adag_l);
        dissipator_line(&mut gen, 0.5 * m.gamma1, &cross_dn, &a_l, &adag_r);

        // L2 on-site (weighted halves).
        dissipator_line(&mut gen, -0.5 * m.gamma2 * w_left, &pd_l, &asq_l, &dag(&asq_l.view()));
        dissipator_line(&mut gen, -0.5 * m.gamma2 * w_right, &pd_r, &asq_r, &dag(&asq_r.view()));

        gens.push(gen);
    }
    Ok(gens)
}

/// Vectorization of the identity on a `dim`-dimensional space: the superket
/// trace functional, since ⟨vec(I), vec(M)⟩ = Tr M (row-major flattening).
pub fn trace_functional(dim: usize) -> Array1<C64> {
    let mut v = Array1::zeros(dim * dim);
    for i in 0..dim {
        v[i * dim + i] = C64::new(1.0, 0.0);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray_linalg::Eig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_params() -> PhysicalParams {
        PhysicalParams {
            hbar: 1.0,
            mass: 1.0,
            g_real: 0.0,
            g_imag: -0.4,
            diffusion_d: 0.1,
            box_length: 4.0,
            mean_n0: 1.0,
        }
    }

    #[test]
    fn couplings_at_unit_grid() {
        // boxLength = nSites so Δz = 1; J = ħ²/(2m) = 0.5, Γ₁ = D = 0.1,
        // U = 0, Γ₂ = 0.4 by direct substitution.
        let m = build_lattice(&desk_params(), 4, 3).unwrap();
        assert_abs_diff_eq!(m.delta_z, 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(m.hopping, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.gamma1, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(m.repulsion, 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(m.gamma2, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn couplings_recompute_from_params() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = PhysicalParams {
                hbar: 0.5 + r.gen::<f64>(),
                mass: 0.5 + r.gen::<f64>(),
                g_real: r.gen::<f64>() - 0.5,
                g_imag: -r.gen::<f64>(),
                diffusion_d: r.gen::<f64>(),
                box_length: 0.5 + r.gen::<f64>(),
                mean_n0: 0.5 + r.gen::<f64>(),
            };
            let n_sites = 2 + (r.gen::<u32>() % 50) as usize;
            let m = build_lattice(&p, n_sites, 3).unwrap();
            let dz = p.box_length / n_sites as f64;
            let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
            assert!(rel(m.hopping, p.hbar * p.hbar / (2.0 * p.mass * dz * dz)) < 1e-12);
            if p.g_real != 0.0 {
                assert!(rel(m.repulsion, p.g_real / dz) < 1e-12);
            }
            assert!(rel(m.gamma1, p.diffusion_d / (dz * dz)) < 1e-12);
            assert!(rel(m.gamma2, -p.g_imag / (p.hbar * dz)) < 1e-12);
        }
    }

    #[test]
    fn validation_rejects_gain_and_bad_scales() {
        let mut p = desk_params();
        p.g_imag = 0.1;
        assert!(matches!(
            p.validate(),
            Err(ModelError::BadParameter { field: "gImag", .. })
        ));
        let mut p = desk_params();
        p.mass = 0.0;
        assert!(p.validate().is_err());
        let mut p = desk_params();
        p.diffusion_d = -1e-9;
        assert!(p.validate().is_err());
        assert!(build_lattice(&desk_params(), 1, 3).is_err());
        assert!(build_lattice(&desk_params(), 4, 0).is_err());
    }

    #[test]
    fn ladder_operators_at_cutoff_three() {
        let ops = build_local_ops(3).unwrap();
        assert_eq!(ops.dim, 4);
        for (k, want) in [(1usize, 1.0f64), (2, 2.0f64.sqrt()), (3, 3.0f64.sqrt())] {
            assert_abs_diff_eq!(ops.annihilate[[k - 1, k]].re, want, epsilon = 1e-15);
        }
        for k in 0..4 {
            assert_abs_diff_eq!(ops.number[[k, k]].re, k as f64, epsilon = 1e-14);
        }
        // a†²a² counts ordered pairs: k(k−1).
        let want_pd = [0.0, 0.0, 2.0, 6.0];
        for k in 0..4 {
            assert_abs_diff_eq!(ops.pair_density[[k, k]].re, want_pd[k], epsilon = 1e-13);
            for j in 0..4 {
                if j != k {
                    assert_eq!(ops.pair_density[[k, j]], C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn pair_loss_vanishes_below_double_occupancy() {
        let ops = build_local_ops(1).unwrap();
        assert!(ops.pair_loss.iter().all(|z| *z == C64::new(0.0, 0.0)));
    }

    #[test]
    fn interaction_groups_direct_substitution() {
        // ρ = 0.01, |g̃| = 0.1, m = ħ = 1 → |G| = 10, T_loc = 1000.
        let p = PhysicalParams {
            hbar: 1.0,
            mass: 1.0,
            g_real: 0.0,
            g_imag: -0.1,
            diffusion_d: 0.0,
            box_length: 100.0,
            mean_n0: 1.0,
        };
        let g = dimensionless_groups(&p, 1.0).unwrap();
        assert_abs_diff_eq!(g.lieb_liniger_g, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.t_loc, 1000.0, epsilon = 1e-9);

        let mut p2 = p;
        p2.g_imag *= 2.0;
        let g2 = dimensionless_groups(&p2, 1.0).unwrap();
        assert_abs_diff_eq!(g2.lieb_liniger_g / g.lieb_liniger_g, 2.0, epsilon = 1e-12);

        let mut pz = p;
        pz.g_imag = 0.0;
        assert!(matches!(dimensionless_groups(&pz, 1.0), Err(ModelError::ZeroCoupling)));
    }

    #[test]
    fn tau_c_is_fiftieth_of_t_loc_at_reference_grid() {
        // 500 sites, 5 particles: τ_c/T_loc = 2ρΔz = 2·(5/L)·(L/500) = 1/50,
        // independent of L and of the split between Re g̃ and Im g̃.
        let p = PhysicalParams {
            hbar: 1.0,
            mass: 1.0,
            g_real: 0.0,
            g_imag: -0.37,
            diffusion_d: 0.1,
            box_length: 2.0,
            mean_n0: 5.0,
        };
        let g = dimensionless_groups(&p, p.box_length / 500.0).unwrap();
        assert_abs_diff_eq!(g.tau_c / g.t_loc, 0.02, epsilon = 1e-12);

        let mut pr = p;
        pr.g_real = 0.21;
        let gr = dimensionless_groups(&pr, pr.box_length / 500.0).unwrap();
        assert_abs_diff_eq!(gr.tau_c / gr.t_loc, 0.02, epsilon = 1e-12);
    }

    #[test]
    fn zero_couplings_give_zero_generators() {
        let m = LatticeModel::from_couplings(4, 2, 0.0, 0.0, 0.0, 0.0).unwrap();
        for gen in bond_liouvillians(&m).unwrap() {
            assert!(gen.iter().all(|z| z.norm() == 0.0));
        }
    }

    fn test_model() -> LatticeModel {
        LatticeModel::from_couplings(4, 3, 1.0, 0.3, 0.1, 0.4).unwrap()
    }

    #[test]
    fn generators_annihilate_trace_functional() {
        let m = test_model();
        let d2 = m.local_dim() * m.local_dim();
        let tr = trace_functional(d2);
        for gen in bond_liouvillians(&m).unwrap() {
            // Left action of ⟨⟨I|: row vector times generator.
            for col in 0..gen.ncols() {
                let dot: C64 = (0..gen.nrows()).map(|r| tr[r] * gen[[r, col]]).sum();
                assert!(dot.norm() < 1e-12, "column {col}: {dot}");
            }
        }
    }

    #[test]
    fn generators_preserve_hermiticity() {
        let m = test_model();
        let d2 = m.local_dim() * m.local_dim();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let gens = bond_liouvillians(&m).unwrap();
        for gen in &gens {
            let raw = Array2::from_shape_fn((d2, d2), |_| C64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5));
            let herm = &raw + &dag(&raw.view());
            let flat: Array1<C64> = Array1::from_iter(herm.iter().copied());
            let out = gen.dot(&flat);
            let out_mat = Array2::from_shape_fn((d2, d2), |(i, j)| out[i * d2 + j]);
            let asym = (&out_mat - &dag(&out_mat.view()))
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            assert!(asym < 1e-12);
        }
    }

    #[test]
    fn coherent_generators_have_imaginary_spectrum() {
        // With Γ₁ = Γ₂ = 0 each bond generator is −(i/ħ)[H_b, ·]; its
        // eigenvalues are differences of real energies times −i/ħ.
        let m = LatticeModel::from_couplings(3, 1, 0.7, 0.5, 0.0, 0.0).unwrap();
        for gen in bond_liouvillians(&m).unwrap() {
            let (eigs, _) = gen.eig().unwrap();
            for e in eigs.iter() {
                assert!(e.re.abs() < 1e-10, "eigenvalue {e} not imaginary");
            }
        }
    }

    #[test]
    fn two_particle_loss_rate_on_doubly_occupied_site() {
        // 2-site chain, only Γ₂ on: site 0 holds |2⟩⟨2|, site 1 vacuum.
        // d⟨n₀⟩/dt = −2Γ₂⟨a†²a²⟩ = −4Γ₂ and d p₂/dt = −2Γ₂ p₂.
        let gamma2 = 0.4;
        let m = LatticeModel::from_couplings(2, 3, 0.0, 0.0, 0.0, gamma2).unwrap();
        let gens = bond_liouvillians(&m).unwrap();
        assert_eq!(gens.len(), 1);
        let d = m.local_dim();

        let mut rho = Array2::<C64>::zeros((d * d, d * d));
        let idx = 2 * d; // |2⟩⊗|0⟩ composite index
        rho[[idx, idx]] = C64::new(1.0, 0.0);
        let flat = Array1::from_iter(rho.iter().copied());
        let deriv = gens[0].dot(&flat);
        let dmat = Array2::from_shape_fn((d * d, d * d), |(i, j)| deriv[i * d * d + j]);

        // dp₂/dt at the |2,0⟩⟨2,0| entry.
        assert_abs_diff_eq!(dmat[[idx, idx]].re, -2.0 * gamma2, epsilon = 1e-12);
        assert_abs_diff_eq!(dmat[[idx, idx]].im, 0.0, epsilon = 1e-14);

        // d⟨n₀⟩/dt via Tr(n₀ · dρ).
        let ops = build_local_ops(3).unwrap();
        let mut dn = C64::new(0.0, 0.0);
        for i1 in 0..d {
            for i2 in 0..d {
                for j1 in 0..d {
                    let row = i1 * d + i2;
                    let col = j1 * d + i2;
                    dn += ops.number[[j1, i1]] * dmat[[row, col]];
                }
            }
        }
        assert_abs_diff_eq!(dn.re, -4.0 * gamma2, epsilon = 1e-12);
    }

    #[test]
    fn interior_on_site_weight_sums_to_full_rate() {
        // 3-site chain, Γ₂ only, middle site |2⟩⟨2|: contributions from the
        // two adjacent bond generators (half weight each) must add up to the
        // full loss rate d⟨n₁⟩/dt = −4Γ₂.
        let gamma2 = 0.25;
        let m = LatticeModel::from_couplings(3, 3, 0.0, 0.0, 0.0, gamma2).unwrap();
        let gens = bond_liouvillians(&m).unwrap();
        let d = m.local_dim();
        let ops = build_local_ops(3).unwrap();

        // Bond (0,1): local state |0⟩⟨0| ⊗ |2⟩⟨2|; bond (1,2): |2⟩⟨2| ⊗ |0⟩⟨0|.
        let deriv_n = |gen: &Array2<C64>, occupied_left: bool| -> f64 {
            let mut rho = Array2::<C64>::zeros((d * d, d * d));
            let idx = if occupied_left { 2 * d } else { 2 };
            rho[[idx, idx]] = C64::new(1.0, 0.0);
            let flat = Array1::from_iter(rho.iter().copied());
            let deriv = gen.dot(&flat);
            let dmat = Array2::from_shape_fn((d * d, d * d), |(i, j)| deriv[i * d * d + j]);
            let mut dn = C64::new(0.0, 0.0);
            for i1 in 0..d {
                for i2 in 0..d {
                    for k in 0..d {
                        let (row, col) = if occupied_left {
                            (i1 * d + i2, k * d + i2)
                        } else {
                            (i1 * d + i2, i1 * d + k)
                        };
                        let o = if occupied_left {
                            ops.number[[k, i1]]
                        } else {
                            ops.number[[k, i2]]
                        };
                        dn += o * dmat[[row, col]];
                    }
                }
            }
            dn.re
        };

        let from_left_bond = deriv_n(&gens[0], false);
        let from_right_bond = deriv_n(&gens[1], true);
        assert_abs_diff_eq!(from_left_bond + from_right_bond, -4.0 * gamma2, epsilon = 1e-12);
        assert_abs_diff_eq!(from_left_bond, -2.0 * gamma2, epsilon = 1e-12);
    }
}
