//! Brute-force dense propagation of the full master equation on tiny chains.
//!
//! The generator is assembled term by term from the published operator sums
//! (module doc of [`crate::model`]) with no bond splitting, so it validates
//! the bond decomposition and the network evolution independently. Memory is
//! the square of the superket dimension; the bound below admits 3 sites at
//! Fock cutoff 3 or 4 sites at cutoff 2, which is all the tests need.

use crate::model::{build_local_ops, LatticeModel, LocalOps, ModelError};
use crate::tensor::{add_kron_scaled, expm_multiply, TensorError};
use crate::C64;
use ndarray::prelude::*;
use thiserror::Error;

/// Superoperator side length d^(2·nSites) may not exceed this.
pub const MAX_SUPEROP_DIM: usize = 6561;

pub type OracleResult<T> = Result<T, OracleError>;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("superoperator dimension {dim} exceeds the dense bound {MAX_SUPEROP_DIM}")]
    DimensionBound { dim: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Dense Liouvillian on the row-major vectorization of the full chain
/// density matrix: ϱ̇ = L·vec(ϱ) with A ϱ B ↦ (A ⊗ Bᵀ)·vec(ϱ).
pub struct DenseLiouvillian {
    /// Hilbert-space dimension d^nSites.
    pub hilbert_dim: usize,
    /// Generator of shape (hilbert_dim², hilbert_dim²).
    pub matrix: Array2<C64>,
}

/// Embed a d×d single-site operator at `site` into the d^n chain space.
pub fn site_operator(op: &ArrayView2<C64>, n_sites: usize, site: usize, d: usize) -> Array2<C64> {
    let dim: usize = d.pow(n_sites as u32);
    let left: usize = d.pow(site as u32);
    let right: usize = d.pow((n_sites - site - 1) as u32);
    let mut out = Array2::<C64>::zeros((dim, dim));
    for l in 0..left {
        for (i, j) in (0..d).flat_map(|i| (0..d).map(move |j| (i, j))) {
            let v = op[[i, j]];
            if v == C64::new(0.0, 0.0) {
                continue;
            }
            for r in 0..right {
                let row = (l * d + i) * right + r;
                let col = (l * d + j) * right + r;
                out[[row, col]] = v;
            }
        }
    }
    out
}

fn id_matrix(dim: usize) -> Array2<C64> {
    Array2::from_diag_elem(dim, C64::new(1.0, 0.0))
}

/// `acc += coeff·(X ϱ + ϱ X − 2 Z ϱ W)` in vectorized form,
/// i.e. coeff·(X⊗I + I⊗Xᵀ − 2 Z⊗Wᵀ).
fn add_dissipator_line(
    acc: &mut Array2<C64>,
    coeff: f64,
    x: &Array2<C64>,
    z: &Array2<C64>,
    w: &Array2<C64>,
    id: &Array2<C64>,
) {
    let c = C64::new(coeff, 0.0);
    add_kron_scaled(acc, c, &x.view(), &id.view());
    add_kron_scaled(acc, c, &id.view(), &x.t());
    add_kron_scaled(acc, -2.0 * c, &z.view(), &w.t());
}

/// Assemble the full-chain generator directly from the operator sums.
pub fn assemble_dense(m: &LatticeModel) -> OracleResult<DenseLiouvillian> {
    let d = m.local_dim();
    let n = m.n_sites;
    let hilbert_dim = d.pow(n as u32);
    let sdim = hilbert_dim * hilbert_dim;
    if sdim > MAX_SUPEROP_DIM {
        return Err(OracleError::DimensionBound { dim: sdim });
    }
    let ops: LocalOps = build_local_ops(m.fock_cutoff)?;
    let id = id_matrix(hilbert_dim);

    let at = |o: &Array2<C64>, l: usize| site_operator(&o.view(), n, l, d);

    // Hamiltonian H₁ + H₂ on the full chain.
    let mut h = Array2::<C64>::zeros((hilbert_dim, hilbert_dim));
    for l in 0..n {
        h = h + at(&ops.number, l).mapv(|v| v * C64::new(2.0 * m.hopping, 0.0));
        h = h + at(&ops.pair_density, l).mapv(|v| v * C64::new(0.5 * m.repulsion, 0.0));
    }
    for l in 0..n - 1 {
        let cross = at(&ops.annihilate, l).dot(&at(&ops.create, l + 1));
        h = h - (&cross + &cross.t().mapv(|v| v.conj())).mapv(|v| v * C64::new(m.hopping, 0.0));
    }

    let mut acc = Array2::<C64>::zeros((sdim, sdim));
    let mi_over_h = C64::new(0.0, -1.0 / m.hbar);
    add_kron_scaled(&mut acc, mi_over_h, &h.view(), &id.view());
    add_kron_scaled(&mut acc, -mi_over_h, &id.view(), &h.t());

    for l in 0..n {
        let a = at(&ops.annihilate, l);
        let adag = at(&ops.create, l);
        let num = at(&ops.number, l);
        add_dissipator_line(&mut acc, -m.gamma1, &num, &a, &adag, &id);

        let asq = at(&ops.pair_loss, l);
        let asq_dag = asq.t().mapv(|v| v.conj());
        let pd = at(&ops.pair_density, l);
        add_dissipator_line(&mut acc, -0.5 * m.gamma2, &pd, &asq, &asq_dag, &id);
    }
    for l in 0..n - 1 {
        let a_l = at(&ops.annihilate, l);
        let adag_l = at(&ops.create, l);
        let a_r = at(&ops.annihilate, l + 1);
        let adag_r = at(&ops.create, l + 1);
        let up = adag_l.dot(&a_r);
        let dn = a_l.dot(&adag_r);
        add_dissipator_line(&mut acc, 0.5 * m.gamma1, &up, &a_r, &adag_l, &id);
        add_dissipator_line(&mut acc, 0.5 * m.gamma1, &dn, &a_l, &adag_r, &id);
    }

    Ok(DenseLiouvillian {
        hilbert_dim,
        matrix: acc,
    })
}

/// Row-major vectorization of a density matrix.
pub fn vec_density(rho: &ArrayView2<C64>) -> Array1<C64> {
    Array1::from_iter(rho.iter().copied())
}

/// Inverse of [`vec_density`].
pub fn unvec_density(v: &ArrayView1<C64>, dim: usize) -> Array2<C64> {
    Array2::from_shape_fn((dim, dim), |(i, j)| v[i * dim + j])
}

impl DenseLiouvillian {
    /// Propagate a density matrix: exp(L·t)·vec(ρ₀), relative tolerance well
    /// below 1e-10 so semigroup and trace checks are limited by the model,
    /// not the integrator.
    pub fn propagate(&self, rho0: &ArrayView2<C64>, t: f64) -> OracleResult<Array2<C64>> {
        let scaled = self.matrix.mapv(|v| v * C64::new(t, 0.0));
        let v0 = vec_density(rho0);
        let v = expm_multiply(&scaled.view(), &v0.view(), 1e-13)?;
        Ok(unvec_density(&v.view(), self.hilbert_dim))
    }
}

/// Tr(ρ·O).
pub fn dense_expectation(rho: &ArrayView2<C64>, op: &ArrayView2<C64>) -> C64 {
    let dim = rho.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..dim {
        for j in 0..dim {
            acc += rho[[i, j]] * op[[j, i]];
        }
    }
    acc
}

/// Embed a two-site bond generator (d⁴×d⁴, acting on vec of the pair density
/// matrix) into the full-chain superoperator. Spectator indices are carried
/// diagonally. Test support for the bond-sum cross-check.
pub fn embed_bond_generator(
    gen_pair: &ArrayView2<C64>,
    bond: usize,
    n_sites: usize,
    d: usize,
) -> Array2<C64> {
    let hilbert: usize = d.pow(n_sites as u32);
    let sdim = hilbert * hilbert;
    let left: usize = d.pow(bond as u32);
    let right: usize = d.pow((n_sites - bond - 2) as u32);
    let mut out = Array2::<C64>::zeros((sdim, sdim));

    let d2 = d * d;
    for rp in 0..d2 * d2 {
        // Pair superket index = (i₁ d + i₂)·d² + (j₁ d + j₂).
        let (row_p, col_p) = (rp / d2, rp % d2);
        let (i1o, i2o) = (row_p / d, row_p % d);
        let (j1o, j2o) = (col_p / d, col_p % d);
        for cp in 0..d2 * d2 {
            let g = gen_pair[[rp, cp]];
            if g == C64::new(0.0, 0.0) {
                continue;
            }
            let (row_q, col_q) = (cp / d2, cp % d2);
            let (i1i, i2i) = (row_q / d, row_q % d);
            let (j1i, j2i) = (col_q / d, col_q % d);
            for li in 0..left {
                for ri in 0..right {
                    for lj in 0..left {
                        for rj in 0..right {
                            let row_i = ((li * d + i1o) * d + i2o) * right + ri;
                            let row_j = ((lj * d + j1o) * d + j2o) * right + rj;
                            let col_i = ((li * d + i1i) * d + i2i) * right + ri;
                            let col_j = ((lj * d + j1i) * d + j2i) * right + rj;
                            out[[row_i * hilbert + row_j, col_i * hilbert + col_j]] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bond_liouvillians, trace_functional};
    use approx::assert_abs_diff_eq;
    use ndarray_linalg::{Eigh, UPLO};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coherent_density(c: C64, d: usize) -> Array2<C64> {
        // Truncated |c⟩⟨c| renormalized to unit trace.
        let mut amp = Array1::<C64>::zeros(d);
        let mut fact = 1.0;
        for k in 0..d {
            if k > 0 {
                fact *= k as f64;
            }
            amp[k] = c.powu(k as u32) / C64::new(fact.sqrt(), 0.0);
        }
        let norm_sq: f64 = amp.iter().map(|z| z.norm_sqr()).sum();
        let mut rho = Array2::<C64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                rho[[i, j]] = amp[i] * amp[j].conj() / C64::new(norm_sq, 0.0);
            }
        }
        rho
    }

    fn kron_density(locals: &[Array2<C64>]) -> Array2<C64> {
        let mut rho = locals[0].clone();
        for loc in &locals[1..] {
            rho = crate::tensor::kron(&rho.view(), &loc.view());
        }
        rho
    }

    #[test]
    fn zero_couplings_zero_matrix() {
        let m = LatticeModel::from_couplings(2, 2, 0.0, 0.0, 0.0, 0.0).unwrap();
        let l = assemble_dense(&m).unwrap();
        assert!(l.matrix.iter().all(|z| *z == C64::new(0.0, 0.0)));
    }

    #[test]
    fn dimension_bound_enforced() {
        let m = LatticeModel::from_couplings(4, 3, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            assemble_dense(&m),
            Err(OracleError::DimensionBound { .. })
        ));
    }

    #[test]
    fn generator_annihilates_trace_functional() {
        let m = LatticeModel::from_couplings(2, 2, 0.8, 0.3, 0.2, 0.5).unwrap();
        let l = assemble_dense(&m).unwrap();
        let tr = trace_functional(l.hilbert_dim);
        for col in 0..l.matrix.ncols() {
            let dot: C64 = (0..l.matrix.nrows()).map(|r| tr[r] * l.matrix[[r, col]]).sum();
            assert!(dot.norm() < 1e-12);
        }
    }

    #[test]
    fn generator_preserves_hermiticity() {
        let m = LatticeModel::from_couplings(2, 2, 0.8, 0.3, 0.2, 0.5).unwrap();
        let l = assemble_dense(&m).unwrap();
        let dim = l.hilbert_dim;
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let raw = Array2::from_shape_fn((dim, dim), |_| C64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5));
        let herm = &raw + &crate::tensor::dag(&raw.view());
        let out = unvec_density(&l.matrix.dot(&vec_density(&herm.view())).view(), dim);
        let asym = (&out - &crate::tensor::dag(&out.view()))
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(asym < 1e-12);
    }

    #[test]
    fn bond_sum_matches_direct_assembly() {
        // 3 sites at cutoff 2: the half/half splitting must reproduce the
        // directly assembled generator entrywise.
        let m = LatticeModel::from_couplings(3, 2, 1.1, -0.4, 0.3, 0.7).unwrap();
        let dense = assemble_dense(&m).unwrap();
        let d = m.local_dim();
        let bonds = bond_liouvillians(&m).unwrap();
        let mut summed = Array2::<C64>::zeros(dense.matrix.dim());
        for (b, gen) in bonds.iter().enumerate() {
            summed = summed + embed_bond_generator(&gen.view(), b, m.n_sites, d);
        }
        let max_diff = (&summed - &dense.matrix)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "max entry difference {max_diff}");
    }

    #[test]
    fn propagate_zero_time_is_identity() {
        let m = LatticeModel::from_couplings(2, 2, 0.8, 0.3, 0.2, 0.5).unwrap();
        let l = assemble_dense(&m).unwrap();
        let rho0 = kron_density(&[coherent_density(C64::new(0.6, 0.1), 3), coherent_density(C64::new(0.3, 0.0), 3)]);
        let rho = l.propagate(&rho0.view(), 0.0).unwrap();
        let diff = (&rho - &rho0).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-14);
    }

    #[test]
    fn pair_loss_decay_is_analytic() {
        // Site 0 in |2⟩⟨2|, site 1 vacuum, only Γ₂ active:
        // p₂(t) = e^(−2Γ₂t) and ⟨n₀(t)⟩ = 2e^(−2Γ₂t).
        let gamma2 = 0.55;
        let m = LatticeModel::from_couplings(2, 3, 0.0, 0.0, 0.0, gamma2).unwrap();
        let l = assemble_dense(&m).unwrap();
        let d = m.local_dim();
        let mut site0 = Array2::<C64>::zeros((d, d));
        site0[[2, 2]] = C64::new(1.0, 0.0);
        let mut vac = Array2::<C64>::zeros((d, d));
        vac[[0, 0]] = C64::new(1.0, 0.0);
        let rho0 = kron_density(&[site0, vac]);

        let ops = build_local_ops(3).unwrap();
        let n0 = site_operator(&ops.number.view(), 2, 0, d);
        for &t in &[0.1, 0.7, 2.3] {
            let rho = l.propagate(&rho0.view(), t).unwrap();
            let n = dense_expectation(&rho.view(), &n0.view());
            assert_abs_diff_eq!(n.re, 2.0 * (-2.0 * gamma2 * t).exp(), epsilon = 1e-9);
            assert!(n.im.abs() < 1e-11);
            let trace = dense_expectation(&rho.view(), &id_matrix(l.hilbert_dim).view());
            assert_abs_diff_eq!(trace.re, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_particle_hopping_oscillates() {
        // One particle on two sites, pure hopping: ⟨n₀(t)⟩ = cos²(Jt/ħ).
        let j = 0.9;
        let m = LatticeModel::from_couplings(2, 2, j, 0.0, 0.0, 0.0).unwrap();
        let l = assemble_dense(&m).unwrap();
        let d = m.local_dim();
        let mut one = Array2::<C64>::zeros((d, d));
        one[[1, 1]] = C64::new(1.0, 0.0);
        let mut vac = Array2::<C64>::zeros((d, d));
        vac[[0, 0]] = C64::new(1.0, 0.0);
        let rho0 = kron_density(&[one, vac]);
        let ops = build_local_ops(2).unwrap();
        let n0 = site_operator(&ops.number.view(), 2, 0, d);
        for &t in &[0.3, 1.0, 2.2] {
            let rho = l.propagate(&rho0.view(), t).unwrap();
            let n = dense_expectation(&rho.view(), &n0.view());
            assert_abs_diff_eq!(n.re, (j * t).cos().powi(2), epsilon = 1e-9);
        }
    }

    #[test]
    fn semigroup_property() {
        let m = LatticeModel::from_couplings(2, 3, 0.8, 0.3, 0.2, 0.5).unwrap();
        let l = assemble_dense(&m).unwrap();
        let rho0 = kron_density(&[coherent_density(C64::new(0.7, 0.1), 4), coherent_density(C64::new(0.4, -0.2), 4)]);
        let one_shot = l.propagate(&rho0.view(), 1.3).unwrap();
        let mid = l.propagate(&rho0.view(), 0.5).unwrap();
        let two_step = l.propagate(&mid.view(), 0.8).unwrap();
        let diff = (&one_shot - &two_step).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn propagation_keeps_positivity() {
        let m = LatticeModel::from_couplings(2, 3, 0.8, 0.3, 0.2, 0.5).unwrap();
        let l = assemble_dense(&m).unwrap();
        let rho0 = kron_density(&[coherent_density(C64::new(0.7, 0.0), 4), coherent_density(C64::new(0.5, 0.0), 4)]);
        let rho = l.propagate(&rho0.view(), 2.0).unwrap();
        let herm = (&rho + &crate::tensor::dag(&rho.view())).mapv(|v| v * C64::new(0.5, 0.0));
        let (eigs, _) = herm.eigh(UPLO::Lower).unwrap();
        assert!(eigs.iter().all(|&e| e >= -1e-10), "min eig {:?}", eigs.iter().cloned().fold(f64::INFINITY, f64::min));
    }
}
