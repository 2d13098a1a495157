//! Matrix-product superket: the chain density operator ϱ stored as an MPS
//! over vectorized local density matrices.
//!
//! Per site the physical index is p = i·d + j, the row-major flattening of
//! the local d×d matrix block. Site tensors have shape (left, d², right).
//! The stored form is the weight-absorbed canonical one: tensors[l] carries
//! the bond-l weights on its right bond, so the bare product of all site
//! tensors is the state, and `weights[l]` holds the Schmidt values of the
//! cut between sites l and l+1 (including the state's overall 2-norm).
//!
//! Two-site updates avoid dividing by small Schmidt values: the left-weighted
//! pair tensor θ = λ_{l−1}·M_l·M_{l+1} is gated and factorized, the right
//! tensor becomes the right isometry, and the left tensor is rebuilt as
//! (gated unweighted pair)·V, which equals the weight-consistent tensor
//! without ever forming λ⁻¹.
//!
//! Truncation bookkeeping: every factorization's relative discarded squared
//! weight accumulates into `cumulative_discard`, the quantity the
//! convergence protocol bounds.

use crate::model::trace_functional;
use crate::tensor::{dag, subspace_truncate, svd_truncate, TensorError, TruncatedSvd};
use crate::C64;
use ndarray::prelude::*;
use ndarray_linalg::QR;
use thiserror::Error;

pub type MpsResult<T> = Result<T, MpsError>;

#[derive(Debug, Error)]
pub enum MpsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bond {bond} out of range for {n_sites} sites")]
    BadBond { bond: usize, n_sites: usize },
    #[error("site {site} out of range for {n_sites} sites")]
    BadSite { site: usize, n_sites: usize },
    #[error("gate is {got}x{got2}, state needs {want}x{want}")]
    GateDim { got: usize, got2: usize, want: usize },
    #[error("state trace is zero or non-finite; cannot normalize or form expectations")]
    ZeroTrace,
    #[error("coherent amplitude at site {site}: occupancy {occupancy:.4} leaves weight {deficit:.2e} above the Fock cutoff (limit 1e-3); raise the cutoff")]
    CutoffTooSmall {
        site: usize,
        occupancy: f64,
        deficit: f64,
    },
    #[error("{0}")]
    BadInput(String),
}

/// Which factorization backs two-site truncations. Both satisfy the same
/// contract; `Subspace` is the fast deterministic randomized route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationEngine {
    Exact,
    Subspace,
}

impl TruncationEngine {
    pub fn truncate(
        &self,
        mat: ArrayView2<C64>,
        chi_max: usize,
        eps_cut: f64,
    ) -> Result<TruncatedSvd, TensorError> {
        match self {
            TruncationEngine::Exact => svd_truncate(mat, chi_max, eps_cut),
            TruncationEngine::Subspace => subspace_truncate(mat, chi_max, eps_cut),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuperketMPS {
    /// Site tensors, shape (leftBond, d², rightBond), row-major.
    tensors: Vec<Array3<C64>>,
    /// weights[l]: Schmidt values on the bond between sites l and l+1.
    weights: Vec<Array1<f64>>,
    /// Local physical dimension d (tensor physical axis is d²).
    pub local_dim: usize,
    pub chi_max: usize,
    pub eps_cut: f64,
    pub engine: TruncationEngine,
    /// Running sum of relative discarded squared weights over all updates.
    pub cumulative_discard: f64,
}

fn reshape2(a: Array2<C64>, shape: (usize, usize, usize)) -> Array3<C64> {
    a.into_shape_with_order(shape).expect("consistent reshape")
}

/// Truncated coherent-state density matrix |c⟩⟨c| at cutoff d−1, unit trace,
/// along with the occupancy deficit |c|² − ⟨n⟩ it introduces.
pub fn coherent_local_density(c: C64, d: usize) -> (Array2<C64>, f64) {
    let mut amp = Array1::<C64>::zeros(d);
    let mut fact = 1.0f64;
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
    let mean_n: f64 = (0..d).map(|k| k as f64 * amp[k].norm_sqr()).sum::<f64>() / norm_sq;
    (rho, c.norm_sqr() - mean_n)
}

/// Weight of a coherent state beyond the cutoff: 1 − e^{−|c|²} Σ_{k≤cut} |c|^{2k}/k!.
pub fn coherent_truncated_weight(c: C64, fock_cutoff: usize) -> f64 {
    let x = c.norm_sqr();
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=fock_cutoff {
        term *= x / k as f64;
        sum += term;
    }
    (1.0 - (-x).exp() * sum).max(0.0)
}

impl SuperketMPS {
    /// Product state of arbitrary unit-trace local density matrices.
    pub fn product_state(
        locals: &[Array2<C64>],
        chi_max: usize,
        eps_cut: f64,
        engine: TruncationEngine,
    ) -> MpsResult<SuperketMPS> {
        if locals.len() < 2 {
            return Err(MpsError::BadInput(format!(
                "need at least 2 sites, got {}",
                locals.len()
            )));
        }
        let d = locals[0].nrows();
        let mut tensors = Vec::with_capacity(locals.len());
        for (site, rho) in locals.iter().enumerate() {
            if rho.dim() != (d, d) {
                return Err(MpsError::BadInput(format!(
                    "local density at site {site} is {:?}, want ({d}, {d})",
                    rho.dim()
                )));
            }
            let tr: C64 = (0..d).map(|i| rho[[i, i]]).sum();
            if !(tr.norm() > 0.0) || !tr.re.is_finite() {
                return Err(MpsError::ZeroTrace);
            }
            let mut t = Array3::<C64>::zeros((1, d * d, 1));
            for i in 0..d {
                for j in 0..d {
                    t[[0, i * d + j, 0]] = rho[[i, j]] / tr;
                }
            }
            tensors.push(t);
        }
        let weights = vec![Array1::from_elem(1, 1.0); locals.len() - 1];
        let mut state = SuperketMPS {
            tensors,
            weights,
            local_dim: d,
            chi_max,
            eps_cut,
            engine,
            cumulative_discard: 0.0,
        };
        state.canonicalize()?;
        Ok(state)
    }

    /// Product of truncated coherent states |c_l⟩⟨c_l|. Rejects amplitudes
    /// whose above-cutoff weight exceeds 1e-3.
    pub fn coherent_product_state(
        amplitudes: &[C64],
        fock_cutoff: usize,
        chi_max: usize,
        eps_cut: f64,
        engine: TruncationEngine,
    ) -> MpsResult<SuperketMPS> {
        let d = fock_cutoff + 1;
        let mut locals = Vec::with_capacity(amplitudes.len());
        for (site, &c) in amplitudes.iter().enumerate() {
            let lost = coherent_truncated_weight(c, fock_cutoff);
            if lost > 1e-3 {
                return Err(MpsError::CutoffTooSmall {
                    site,
                    occupancy: c.norm_sqr(),
                    deficit: lost,
                });
            }
            locals.push(coherent_local_density(c, d).0);
        }
        Self::product_state(&locals, chi_max, eps_cut, engine)
    }

    pub fn n_sites(&self) -> usize {
        self.tensors.len()
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors[..self.n_sites() - 1]
            .iter()
            .map(|t| t.dim().2)
            .collect()
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn bond_weights(&self, bond: usize) -> &Array1<f64> {
        &self.weights[bond]
    }

    /// Raw tensors and bond weights, for serialization.
    pub fn raw_parts(&self) -> (&[Array3<C64>], &[Array1<f64>]) {
        (&self.tensors, &self.weights)
    }

    /// Rebuild a state from serialized parts, re-validating the shape
    /// chain. The caller is trusted on the numerical content.
    pub fn from_raw_parts(
        tensors: Vec<Array3<C64>>,
        weights: Vec<Array1<f64>>,
        chi_max: usize,
        eps_cut: f64,
        engine: TruncationEngine,
        cumulative_discard: f64,
    ) -> MpsResult<SuperketMPS> {
        if tensors.is_empty() {
            return Err(MpsError::BadInput("no site tensors".into()));
        }
        if weights.len() + 1 != tensors.len() {
            return Err(MpsError::BadInput(format!(
                "{} tensors need {} bond weight vectors, got {}",
                tensors.len(),
                tensors.len() - 1,
                weights.len()
            )));
        }
        let p = tensors[0].dim().1;
        let d = (p as f64).sqrt().round() as usize;
        if d * d != p || d == 0 {
            return Err(MpsError::BadInput(format!(
                "physical dimension {p} is not a square"
            )));
        }
        if tensors[0].dim().0 != 1 || tensors[tensors.len() - 1].dim().2 != 1 {
            return Err(MpsError::BadInput("open boundary legs must be 1".into()));
        }
        for (l, pair) in tensors.windows(2).enumerate() {
            if pair[0].dim().2 != pair[1].dim().0 {
                return Err(MpsError::BadInput(format!(
                    "bond {l}: right leg {} does not match next left leg {}",
                    pair[0].dim().2,
                    pair[1].dim().0
                )));
            }
            if pair[1].dim().1 != p {
                return Err(MpsError::BadInput(format!(
                    "site {}: physical dimension {} differs from {}",
                    l + 1,
                    pair[1].dim().1,
                    p
                )));
            }
            if weights[l].len() != pair[0].dim().2 {
                return Err(MpsError::BadInput(format!(
                    "bond {l}: {} weights for dimension {}",
                    weights[l].len(),
                    pair[0].dim().2
                )));
            }
        }
        Ok(SuperketMPS {
            tensors,
            weights,
            local_dim: d,
            chi_max,
            eps_cut,
            engine,
            cumulative_discard,
        })
    }

    /// Uniform rescale of the state (applied to the first tensor).
    pub fn scale(&mut self, factor: C64) {
        self.tensors[0].mapv_inplace(|v| v * factor);
    }

    /// Apply a two-site gate in site-major convention,
    /// gate[(p₁′·d² + p₂′), (p₁·d² + p₂)], truncating the new bond.
    /// Returns the relative discarded weight of this update.
    pub fn apply_bond_gate(&mut self, bond: usize, gate: &ArrayView2<C64>) -> MpsResult<f64> {
        let n = self.n_sites();
        if bond + 1 >= n {
            return Err(MpsError::BadBond { bond, n_sites: n });
        }
        let p = self.local_dim * self.local_dim;
        if gate.dim() != (p * p, p * p) {
            return Err(MpsError::GateDim {
                got: gate.dim().0,
                got2: gate.dim().1,
                want: p * p,
            });
        }
        let (la, _, m) = self.tensors[bond].dim();
        let (_, _, rb) = self.tensors[bond + 1].dim();

        let a_mat = self.tensors[bond]
            .to_owned()
            .into_shape_with_order((la * p, m))
            .expect("tensor reshape");
        let b_mat = self.tensors[bond + 1]
            .to_owned()
            .into_shape_with_order((m, p * rb))
            .expect("tensor reshape");
        let theta = a_mat.dot(&b_mat); // [(la p), (q rb)]

        // Bring physical pair to the front, apply the gate, restore layout.
        let th = theta
            .into_shape_with_order((la, p, p, rb))
            .expect("theta reshape")
            .permuted_axes([1, 2, 0, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((p * p, la * rb))
            .expect("theta matrix");
        let gated = gate.dot(&th);
        let gated_bare = gated
            .into_shape_with_order((p, p, la, rb))
            .expect("gated reshape")
            .permuted_axes([2, 0, 1, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((la * p, p * rb))
            .expect("gated matrix");

        // Left-weighted copy for the factorization; boundary bond has no
        // left weights.
        let factored = if bond > 0 {
            let w = &self.weights[bond - 1];
            let mut weighted = gated_bare.clone();
            for (row, mut r) in weighted.rows_mut().into_iter().enumerate() {
                let scale = w[row / p];
                r.mapv_inplace(|v| v * scale);
            }
            self.engine.truncate(weighted.view(), self.chi_max, self.eps_cut)?
        } else {
            self.engine.truncate(gated_bare.view(), self.chi_max, self.eps_cut)?
        };

        let k = factored.s.len();
        self.cumulative_discard += factored.discarded_weight;

        let v = dag(&factored.vt.view()); // (p·rb, k)
        let new_left = gated_bare.dot(&v); // (la·p, k)
        self.tensors[bond] = reshape2(new_left, (la, p, k));
        self.tensors[bond + 1] = reshape2(factored.vt, (k, p, rb));
        self.weights[bond] = factored.s;
        Ok(factored.discarded_weight)
    }

    /// Transfer matrix of site l with a functional vector f on the physical
    /// index: T[a,b] = Σ_p f[p]·M[a,p,b].
    fn functional_transfer(&self, site: usize, f: &Array1<C64>) -> Array2<C64> {
        let t = &self.tensors[site];
        let (a, p, b) = t.dim();
        let mut out = Array2::<C64>::zeros((a, b));
        for ip in 0..p {
            let fv = f[ip];
            if fv == C64::new(0.0, 0.0) {
                continue;
            }
            let slice = t.slice(s![.., ip, ..]);
            out.zip_mut_with(&slice, |o, &m| *o += fv * m);
        }
        out
    }

    fn contract_functionals(&self, inserts: &[(usize, Array1<C64>)]) -> C64 {
        let tr = trace_functional(self.local_dim);
        let mut left: Array2<C64> = Array2::from_diag_elem(1, C64::new(1.0, 0.0));
        for site in 0..self.n_sites() {
            let f = inserts
                .iter()
                .find(|(s, _)| *s == site)
                .map(|(_, f)| f)
                .unwrap_or(&tr);
            left = left.dot(&self.functional_transfer(site, f));
        }
        left[[0, 0]]
    }

    /// Tr ϱ via the superket trace functional at every site.
    pub fn trace_contraction(&self) -> C64 {
        self.contract_functionals(&[])
    }

    /// Functional vector for Tr(O·m) on a vectorized local matrix: vec(Oᵀ).
    fn op_functional(&self, op: &ArrayView2<C64>) -> Array1<C64> {
        let d = self.local_dim;
        let mut f = Array1::<C64>::zeros(d * d);
        for i in 0..d {
            for j in 0..d {
                f[i * d + j] = op[[j, i]];
            }
        }
        f
    }

    /// Trace-normalized ⟨O_site⟩ = Tr(ϱ O)/Tr(ϱ).
    pub fn local_expectation(&self, site: usize, op: &ArrayView2<C64>) -> MpsResult<C64> {
        if site >= self.n_sites() {
            return Err(MpsError::BadSite {
                site,
                n_sites: self.n_sites(),
            });
        }
        let tr = self.trace_contraction();
        if !(tr.norm() > 1e-300) {
            return Err(MpsError::ZeroTrace);
        }
        let val = self.contract_functionals(&[(site, self.op_functional(op))]);
        Ok(val / tr)
    }

    /// Trace-normalized ⟨O_A O_B⟩ for distinct sites.
    pub fn two_site_expectation(
        &self,
        site_a: usize,
        op_a: &ArrayView2<C64>,
        site_b: usize,
        op_b: &ArrayView2<C64>,
    ) -> MpsResult<C64> {
        let n = self.n_sites();
        if site_a >= n {
            return Err(MpsError::BadSite { site: site_a, n_sites: n });
        }
        if site_b >= n {
            return Err(MpsError::BadSite { site: site_b, n_sites: n });
        }
        if site_a == site_b {
            return Err(MpsError::BadInput(
                "two-site expectation needs distinct sites".into(),
            ));
        }
        let tr = self.trace_contraction();
        if !(tr.norm() > 1e-300) {
            return Err(MpsError::ZeroTrace);
        }
        let val = self.contract_functionals(&[
            (site_a, self.op_functional(op_a)),
            (site_b, self.op_functional(op_b)),
        ]);
        Ok(val / tr)
    }

    /// Rescale so Tr ϱ = 1; returns the trace that was divided out.
    pub fn renormalize(&mut self) -> MpsResult<C64> {
        let tr = self.trace_contraction();
        if !(tr.norm() > 1e-300) || !tr.re.is_finite() || !tr.im.is_finite() {
            return Err(MpsError::ZeroTrace);
        }
        self.scale(C64::new(1.0, 0.0) / tr);
        Ok(tr)
    }

    /// Restore canonical form: left-to-right QR orthogonalization followed by
    /// a right-to-left factorization sweep that refreshes every bond's
    /// Schmidt weights. Exact up to floating point (no truncation beyond
    /// dropping numerically zero Schmidt values).
    pub fn canonicalize(&mut self) -> MpsResult<()> {
        let n = self.n_sites();
        let p = self.local_dim * self.local_dim;

        let mut carry: Option<Array2<C64>> = None;
        for l in 0..n {
            let (a, _, b) = self.tensors[l].dim();
            let mut mat = self.tensors[l]
                .to_owned()
                .into_shape_with_order((a, p * b))
                .expect("tensor reshape");
            if let Some(c) = carry.take() {
                mat = c.dot(&mat);
            }
            let rows = mat.nrows();
            if l + 1 == n {
                self.tensors[l] = reshape2(mat, (rows, p, b));
                break;
            }
            let tall = mat
                .into_shape_with_order((rows, p, b))
                .expect("reshape")
                .into_shape_with_order((rows * p, b))
                .expect("reshape");
            let (q, r) = tall.qr().map_err(|e| TensorError::QrFailed(e.to_string()))?;
            let k = q.ncols();
            self.tensors[l] = reshape2(q, (rows, p, k));
            carry = Some(r);
        }

        let mut carry: Option<Array2<C64>> = None;
        for l in (1..n).rev() {
            let (a, _, b) = self.tensors[l].dim();
            let mut mat = self.tensors[l]
                .to_owned()
                .into_shape_with_order((a * p, b))
                .expect("reshape");
            if let Some(c) = carry.take() {
                mat = mat.dot(&c);
            }
            let cols = mat.ncols();
            let wide = mat
                .into_shape_with_order((a, p * cols))
                .expect("reshape");
            let f = svd_truncate(wide.view(), a.min(p * cols), 0.0)?;
            let k = f.s.len();
            self.tensors[l] = reshape2(f.vt, (k, p, cols));
            self.weights[l - 1] = f.s.clone();
            let mut us = f.u;
            for (col, mut cvec) in us.columns_mut().into_iter().enumerate() {
                let sv = f.s[col];
                cvec.mapv_inplace(|v| v * sv);
            }
            carry = Some(us);
        }
        if let Some(c) = carry.take() {
            let (a, _, b) = self.tensors[0].dim();
            let mat = self.tensors[0]
                .to_owned()
                .into_shape_with_order((a * p, b))
                .expect("reshape");
            let merged = mat.dot(&c);
            let k = merged.ncols();
            self.tensors[0] = reshape2(merged, (a, p, k));
        }
        Ok(())
    }

    /// Worst canonical-form defect: right-isometry error of every non-first
    /// tensor and the deviation of each left Gram matrix from diag(λ²),
    /// both relative to the state's squared norm.
    pub fn gauge_error(&self) -> f64 {
        let n = self.n_sites();
        let p = self.local_dim * self.local_dim;
        let norm_sq: f64 = self.weights[n - 2].iter().map(|x| x * x).sum::<f64>().max(1e-300);
        let mut worst = 0.0f64;

        for l in 1..n {
            let (a, _, b) = self.tensors[l].dim();
            let mat = self.tensors[l]
                .to_owned()
                .into_shape_with_order((a, p * b))
                .expect("reshape");
            let gram = mat.dot(&dag(&mat.view()));
            for i in 0..a {
                for j in 0..a {
                    let want = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((gram[[i, j]] - C64::new(want, 0.0)).norm());
                }
            }
        }

        let mut gram: Array2<C64> = Array2::from_diag_elem(1, C64::new(1.0, 0.0));
        for l in 0..n - 1 {
            let t = &self.tensors[l];
            let (_, _, b) = t.dim();
            let mut next = Array2::<C64>::zeros((b, b));
            for ip in 0..p {
                let m = t.slice(s![.., ip, ..]);
                let gm = gram.dot(&m);
                let mh = dag(&m.view());
                next = next + mh.dot(&gm);
            }
            gram = next;
            let w = &self.weights[l];
            for i in 0..b {
                for j in 0..b {
                    let want = if i == j { C64::new(w[i] * w[i], 0.0) } else { C64::new(0.0, 0.0) };
                    worst = worst.max((gram[[i, j]] - want).norm() / norm_sq);
                }
            }
        }
        worst
    }

    /// Tr(ϱ²) by doubled transfer contraction. Cost grows with χ⁴; intended
    /// for diagnostics and small systems.
    pub fn purity(&self) -> C64 {
        let d = self.local_dim;
        let n = self.n_sites();
        let mut env: Array2<C64> = Array2::from_diag_elem(1, C64::new(1.0, 0.0));
        for l in 0..n {
            let t = &self.tensors[l];
            let (a, _, b) = t.dim();
            let mut next = Array2::<C64>::zeros((b, b));
            // Pair the physical index p=(i,j) of one copy with p'=(j,i) of
            // the other: Tr(ϱϱ) sums ϱ[i,j]ϱ[j,i] at each site.
            for i in 0..d {
                for j in 0..d {
                    let m1 = t.slice(s![.., i * d + j, ..]);
                    let m2 = t.slice(s![.., j * d + i, ..]);
                    // env indexed (copy1, copy2): next = m1ᵀ env m2.
                    let tmp = env.dot(&m2);
                    for x in 0..b {
                        for y in 0..b {
                            let mut acc = C64::new(0.0, 0.0);
                            for z in 0..a {
                                acc += m1[[z, x]] * tmp[[z, y]];
                            }
                            next[[x, y]] += acc;
                        }
                    }
                }
            }
            env = next;
        }
        env[[0, 0]]
    }

    /// Full density matrix on the computational basis of the whole chain.
    /// Exponential in the chain length; test support for small systems.
    pub fn to_dense_density(&self) -> Array2<C64> {
        let d = self.local_dim;
        let p = d * d;
        let n = self.n_sites();
        let mut acc = self.tensors[0]
            .to_owned()
            .into_shape_with_order((p, self.tensors[0].dim().2))
            .expect("reshape");
        for l in 1..n {
            let t = &self.tensors[l];
            let (a, _, b) = t.dim();
            let tm = t
                .to_owned()
                .into_shape_with_order((a, p * b))
                .expect("reshape");
            let merged = acc.dot(&tm); // (P_acc, p·b)
            let rows = merged.nrows();
            acc = merged
                .into_shape_with_order((rows * p, b))
                .expect("reshape");
        }
        let flat = acc.into_shape_with_order(p.pow(n as u32)).expect("vector");

        let dim = d.pow(n as u32);
        let mut rho = Array2::<C64>::zeros((dim, dim));
        for (idx, &v) in flat.iter().enumerate() {
            // Decode site-major physical indices p_l = i_l·d + j_l.
            let mut ps = vec![0usize; n];
            let mut rem = idx;
            for l in (0..n).rev() {
                ps[l] = rem % p;
                rem /= p;
            }
            let mut row = 0usize;
            let mut col = 0usize;
            for pl in ps {
                row = row * d + pl / d;
                col = col * d + pl % d;
            }
            rho[[row, col]] = v;
        }
        rho
    }
}

/// Convert a two-site superoperator from pair-matrix vectorization
/// ((i₁i₂),(j₁j₂) composite, as produced by the bond generators) to the
/// MPS site-major convention ((i₁j₁),(i₂j₂) composite).
pub fn pair_to_site_major(gate: &ArrayView2<C64>, d: usize) -> Array2<C64> {
    let d4 = d * d * d * d;
    assert_eq!(gate.dim(), (d4, d4));
    let g8 = gate
        .to_owned()
        .into_dyn()
        .into_shape_with_order(IxDyn(&[d, d, d, d, d, d, d, d]))
        .expect("rank-8 view");
    // Axes (i₁ i₂ j₁ j₂ | i₁' i₂' j₁' j₂') → (i₁ j₁ i₂ j₂ | i₁' j₁' i₂' j₂').
    let perm = g8.permuted_axes(IxDyn(&[0, 2, 1, 3, 4, 6, 5, 7]));
    perm.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[d4, d4]))
        .expect("rank-2 result")
        .into_dimensionality::<Ix2>()
        .expect("matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bond_liouvillians, build_local_ops, LatticeModel};
    use crate::oracle::{assemble_dense, dense_expectation, site_operator};
    use crate::tensor::expm;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 4; // cutoff 3

    fn coherent_state(amps: &[f64]) -> SuperketMPS {
        let cs: Vec<C64> = amps.iter().map(|&a| C64::new(a, 0.0)).collect();
        SuperketMPS::coherent_product_state(&cs, D - 1, 16, 1e-12, TruncationEngine::Exact).unwrap()
    }

    /// No-truncation variant for exactness comparisons against dense
    /// propagation: eps 0 keeps every nonzero Schmidt value.
    fn coherent_state_exact(amps: &[f64]) -> SuperketMPS {
        let cs: Vec<C64> = amps.iter().map(|&a| C64::new(a, 0.0)).collect();
        SuperketMPS::coherent_product_state(&cs, D - 1, 256, 0.0, TruncationEngine::Exact).unwrap()
    }

    #[test]
    fn vacuum_product_state() {
        let s = coherent_state(&[0.0, 0.0, 0.0]);
        assert_eq!(s.bond_dims(), vec![1, 1]);
        let tr = s.trace_contraction();
        assert_abs_diff_eq!(tr.re, 1.0, epsilon = 1e-12);
        assert!(tr.im.abs() < 1e-14);
        let ops = build_local_ops(D - 1).unwrap();
        for l in 0..3 {
            let n = s.local_expectation(l, &ops.number.view()).unwrap();
            assert!(n.norm() < 1e-14);
        }
    }

    #[test]
    fn coherent_occupancy_matches_truncated_sum() {
        // Independent oracle: ⟨n⟩ of the truncated coherent state is
        // Σ k x^k/k! / Σ x^k/k! over k ≤ cutoff, x = |c|².
        let c = 0.3f64;
        let s = coherent_state(&[c, 0.0]);
        let ops = build_local_ops(D - 1).unwrap();
        let x = c * c;
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        let mut term = 1.0;
        for k in 0..D {
            if k > 0 {
                term *= x / k as f64;
            }
            s0 += term;
            s1 += k as f64 * term;
        }
        let n = s.local_expectation(0, &ops.number.view()).unwrap();
        assert_abs_diff_eq!(n.re, s1 / s0, epsilon = 1e-13);
        // Small occupancies sit below the cutoff almost entirely.
        let (_, deficit) = coherent_local_density(C64::new(0.2, 0.0), D);
        assert!(deficit.abs() < 1e-6);
    }

    #[test]
    fn coherent_state_is_uncorrelated() {
        let s = coherent_state(&[0.3, 0.25, 0.2]);
        let ops = build_local_ops(D - 1).unwrap();
        // On-site statistics carry the cutoff's imprint: compare against the
        // truncated moment sums, not the ideal value of 1.
        for (l, &c) in [0.3f64, 0.25, 0.2].iter().enumerate() {
            let x = c * c;
            let (mut s0, mut s1, mut s2, mut term) = (0.0, 0.0, 0.0, 1.0);
            for k in 0..D {
                if k > 0 {
                    term *= x / k as f64;
                }
                s0 += term;
                s1 += k as f64 * term;
                s2 += (k * k.saturating_sub(1)) as f64 * term;
            }
            let n = s.local_expectation(l, &ops.number.view()).unwrap().re;
            let pd = s.local_expectation(l, &ops.pair_density.view()).unwrap().re;
            assert_abs_diff_eq!(n, s1 / s0, epsilon = 1e-12);
            assert_abs_diff_eq!(pd, s2 / s0, epsilon = 1e-12);
        }
        for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let na = s.local_expectation(a, &ops.number.view()).unwrap().re;
            let nb = s.local_expectation(b, &ops.number.view()).unwrap().re;
            let nn = s
                .two_site_expectation(a, &ops.number.view(), b, &ops.number.view())
                .unwrap()
                .re;
            assert_abs_diff_eq!(nn / (na * nb), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn cutoff_rejection_for_large_amplitude() {
        let cs = vec![C64::new(1.6, 0.0), C64::new(0.0, 0.0)];
        match SuperketMPS::coherent_product_state(&cs, 3, 8, 1e-12, TruncationEngine::Exact) {
            Err(MpsError::CutoffTooSmall { site: 0, .. }) => {}
            other => panic!("expected cutoff rejection, got {other:?}"),
        }
    }

    #[test]
    fn trace_scales_linearly_and_renormalizes() {
        let mut s = coherent_state(&[0.3, 0.2]);
        s.scale(C64::new(0.5, 0.0));
        assert_abs_diff_eq!(s.trace_contraction().re, 0.5, epsilon = 1e-12);
        let factor = s.renormalize().unwrap();
        assert_abs_diff_eq!(factor.re, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.trace_contraction().re, 1.0, epsilon = 1e-12);
    }

    /// Site-major gate for a single-site superoperator acting on the left or
    /// right site of a bond: site-major convention factorizes per site.
    fn one_site_gate(superop: &Array2<C64>, left: bool, p: usize) -> Array2<C64> {
        let id = Array2::from_diag_elem(p, C64::new(1.0, 0.0));
        if left {
            crate::tensor::kron(&superop.view(), &id.view())
        } else {
            crate::tensor::kron(&id.view(), &superop.view())
        }
    }

    #[test]
    fn identity_gate_is_inert() {
        let mut s = coherent_state(&[0.3, 0.25, 0.2]);
        let ops = build_local_ops(D - 1).unwrap();
        let before: Vec<f64> = (0..3)
            .map(|l| s.local_expectation(l, &ops.number.view()).unwrap().re)
            .collect();
        let p = D * D;
        let gate = Array2::from_diag_elem(p * p, C64::new(1.0, 0.0));
        let dw = s.apply_bond_gate(0, &gate.view()).unwrap();
        let dw2 = s.apply_bond_gate(1, &gate.view()).unwrap();
        assert!(dw < 1e-12 && dw2 < 1e-12);
        for l in 0..3 {
            let after = s.local_expectation(l, &ops.number.view()).unwrap().re;
            assert_abs_diff_eq!(after, before[l], epsilon = 1e-12);
        }
    }

    /// Single-site loss superoperator −Γ(nϱ + ϱn − 2aϱa†) in vec convention.
    fn onsite_loss_superop(gamma: f64) -> Array2<C64> {
        let ops = build_local_ops(D - 1).unwrap();
        let id = Array2::from_diag_elem(D, C64::new(1.0, 0.0));
        let g = C64::new(gamma, 0.0);
        let mut acc = Array2::<C64>::zeros((D * D, D * D));
        acc = acc - crate::tensor::kron(&ops.number.view(), &id.view()).mapv(|v| v * g);
        acc = acc - crate::tensor::kron(&id.view(), &ops.number.t()).mapv(|v| v * g);
        acc = acc
            + crate::tensor::kron(&ops.annihilate.view(), &ops.annihilate.mapv(|v| v.conj()).view())
                .mapv(|v| v * g * 2.0);
        acc
    }

    #[test]
    fn onsite_gate_preserves_product_structure() {
        let mut s = coherent_state(&[0.3, 0.25]);
        let gen = onsite_loss_superop(0.7);
        let gate1 = expm(&gen.mapv(|v| v * C64::new(0.3, 0.0)).view()).unwrap();
        let gate = one_site_gate(&gate1, true, D * D);
        let dw = s.apply_bond_gate(0, &gate.view()).unwrap();
        assert!(dw < 1e-20, "discard {dw}");
        assert_eq!(s.bond_dims(), vec![1]);

        // Coherent state under pure single-particle loss stays coherent with
        // |c(t)|² = |c|²·e^(−2Γt) (jump operator √(2Γ)·a in this convention).
        // Cutoff effects are tiny at this occupancy, so the untruncated
        // decay law works as a loose independent check.
        let ops = build_local_ops(D - 1).unwrap();
        let n = s.local_expectation(0, &ops.number.view()).unwrap().re;
        let x = 0.3f64 * 0.3;
        assert_abs_diff_eq!(n, x * (-2.0f64 * 0.7 * 0.3).exp(), epsilon = 1e-4);
    }

    #[test]
    fn bond_gate_matches_dense_two_site_evolution() {
        // Full generator on one bond of a 2-site chain: gate applied to the
        // MPS must reproduce dense propagation of the pair density matrix.
        let m = LatticeModel::from_couplings(2, 3, 0.9, 0.4, 0.15, 0.6).unwrap();
        let gens = bond_liouvillians(&m).unwrap();
        let dt = 0.2;
        let gate_pair = expm(&gens[0].mapv(|v| v * C64::new(dt, 0.0)).view()).unwrap();
        let gate = pair_to_site_major(&gate_pair.view(), D);

        let mut s = coherent_state_exact(&[0.4, 0.3]);
        let rho0 = s.to_dense_density();
        s.apply_bond_gate(0, &gate.view()).unwrap();

        let dense = assemble_dense(&m).unwrap();
        let rho_want = dense.propagate(&rho0.view(), dt).unwrap();
        let rho_got = s.to_dense_density();
        let diff = (&rho_want - &rho_got)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "max element diff {diff}");
    }

    #[test]
    fn expectations_match_dense_reconstruction() {
        // Entangle a 3-site chain with a couple of bond gates, then compare
        // every one- and two-site expectation against the dense matrix.
        let m = LatticeModel::from_couplings(3, 3, 1.2, 0.3, 0.2, 0.5).unwrap();
        let gens = bond_liouvillians(&m).unwrap();
        let dt = 0.15;
        let gates: Vec<Array2<C64>> = gens
            .iter()
            .map(|g| pair_to_site_major(&expm(&g.mapv(|v| v * C64::new(dt, 0.0)).view()).unwrap().view(), D))
            .collect();

        let mut s = coherent_state_exact(&[0.35, 0.5, 0.3]);
        s.apply_bond_gate(0, &gates[0].view()).unwrap();
        s.apply_bond_gate(1, &gates[1].view()).unwrap();
        s.apply_bond_gate(0, &gates[0].view()).unwrap();

        let rho = s.to_dense_density();
        let tr_dense = dense_expectation(&rho.view(), &Array2::from_diag_elem(64, C64::new(1.0, 0.0)).view());
        let ops = build_local_ops(3).unwrap();
        let tr = s.trace_contraction();
        assert_abs_diff_eq!(tr.re, tr_dense.re, epsilon = 1e-11);

        for l in 0..3 {
            for op in [&ops.number, &ops.pair_density, &ops.annihilate] {
                let want = dense_expectation(&rho.view(), &site_operator(&op.view(), 3, l, D).view()) / tr_dense;
                let got = s.local_expectation(l, &op.view()).unwrap();
                assert!((want - got).norm() < 1e-10);
            }
        }
        for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let oa = site_operator(&ops.number.view(), 3, a, D);
            let ob = site_operator(&ops.number.view(), 3, b, D);
            let want = dense_expectation(&rho.view(), &oa.dot(&ob).view()) / tr_dense;
            let got = s
                .two_site_expectation(a, &ops.number.view(), b, &ops.number.view())
                .unwrap();
            assert!((want - got).norm() < 1e-10);
        }
    }

    #[test]
    fn gauge_insertion_leaves_observables_invariant() {
        let m = LatticeModel::from_couplings(3, 3, 1.2, 0.3, 0.2, 0.5).unwrap();
        let gens = bond_liouvillians(&m).unwrap();
        let gate = pair_to_site_major(
            &expm(&gens[0].mapv(|v| v * C64::new(0.2, 0.0)).view()).unwrap().view(),
            D,
        );
        let mut s = coherent_state_exact(&[0.35, 0.5, 0.3]);
        s.apply_bond_gate(0, &gate.view()).unwrap();

        let ops = build_local_ops(3).unwrap();
        let before = s.local_expectation(1, &ops.number.view()).unwrap();
        let before2 = s
            .two_site_expectation(0, &ops.number.view(), 2, &ops.number.view())
            .unwrap();

        // Insert G·G⁻¹ on bond 0: well-conditioned random G.
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let k = s.tensors[0].dim().2;
        let mut g = Array2::from_diag_elem(k, C64::new(1.0, 0.0));
        for i in 0..k {
            for j in 0..k {
                g[[i, j]] += C64::new(0.3 * (r.gen::<f64>() - 0.5), 0.3 * (r.gen::<f64>() - 0.5));
            }
        }
        let g_inv = ndarray_linalg::Inverse::inv(&g).unwrap();
        let (a, p, _) = s.tensors[0].dim();
        let t0 = s.tensors[0].to_owned().into_shape_with_order((a * p, k)).unwrap();
        s.tensors[0] = reshape2(t0.dot(&g), (a, p, k));
        let (_, _, b1) = s.tensors[1].dim();
        let t1 = s.tensors[1].to_owned().into_shape_with_order((k, p * b1)).unwrap();
        s.tensors[1] = reshape2(g_inv.dot(&t1), (k, p, b1));

        let after = s.local_expectation(1, &ops.number.view()).unwrap();
        let after2 = s
            .two_site_expectation(0, &ops.number.view(), 2, &ops.number.view())
            .unwrap();
        assert!((before - after).norm() < 1e-10);
        assert!((before2 - after2).norm() < 1e-10);
    }

    #[test]
    fn canonicalize_restores_gauge_and_matches_schmidt_oracle() {
        let m = LatticeModel::from_couplings(3, 3, 1.2, 0.3, 0.2, 0.5).unwrap();
        let gens = bond_liouvillians(&m).unwrap();
        let gates: Vec<Array2<C64>> = gens
            .iter()
            .map(|g| pair_to_site_major(&expm(&g.mapv(|v| v * C64::new(0.25, 0.0)).view()).unwrap().view(), D))
            .collect();
        let mut s = coherent_state_exact(&[0.35, 0.5, 0.3]);
        for _ in 0..3 {
            s.apply_bond_gate(0, &gates[0].view()).unwrap();
            s.apply_bond_gate(1, &gates[1].view()).unwrap();
        }
        let rho_before = s.to_dense_density();
        s.canonicalize().unwrap();
        let rho_after = s.to_dense_density();
        let diff = (&rho_before - &rho_after)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "canonicalize changed the state by {diff}");
        assert!(s.gauge_error() < 1e-10, "gauge error {}", s.gauge_error());

        // Schmidt oracle: singular values of the superket split at bond 0
        // computed from the dense superket directly.
        let p = D * D;
        let mut superket = Array2::<C64>::zeros((p, p * p));
        let flat = s.to_dense_density();
        for i1 in 0..D {
            for j1 in 0..D {
                for i2 in 0..D {
                    for j2 in 0..D {
                        for i3 in 0..D {
                            for j3 in 0..D {
                                let row = (i1 * D + i2) * D + i3;
                                let col = (j1 * D + j2) * D + j3;
                                superket[[i1 * D + j1, (i2 * D + j2) * p + (i3 * D + j3)]] =
                                    flat[[row, col]];
                            }
                        }
                    }
                }
            }
        }
        let f = svd_truncate(superket.view(), p, 0.0).unwrap();
        let w = s.bond_weights(0);
        let shared = f.s.len().min(w.len());
        for i in 0..shared {
            assert!(
                (f.s[i] - w[i]).abs() < 1e-11 * f.s[0],
                "schmidt {} vs weight {}",
                f.s[i],
                w[i]
            );
        }
        for &x in f.s.iter().skip(shared).chain(w.iter().skip(shared)) {
            assert!(x < 1e-11 * f.s[0], "unmatched schmidt tail {x}");
        }
    }

    #[test]
    fn purity_of_pure_state_is_one_and_decreases_under_loss() {
        let mut s = coherent_state_exact(&[0.4, 0.3]);
        assert_abs_diff_eq!(s.purity().re, 1.0, epsilon = 1e-10);

        let gen = onsite_loss_superop(0.8);
        let gate1 = expm(&gen.mapv(|v| v * C64::new(0.5, 0.0)).view()).unwrap();
        let gate = one_site_gate(&gate1, true, D * D);
        s.apply_bond_gate(0, &gate.view()).unwrap();
        s.renormalize().unwrap();
        let pur = s.purity().re;
        assert!(pur < 1.0 + 1e-10 && pur > 0.5, "purity {pur}");
    }
}
