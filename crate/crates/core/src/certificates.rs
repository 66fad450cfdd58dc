//! Exact-recovery certificates, singleton-feasibility rank tests and robust-recovery constants.
//!
//! All matrices here act on the full column-major vectorization `vec(S)` (index `i + j·n`).
//! Dual-certificate norms are evaluated in the eigenbasis of `G = A Aᵀ` with a
//! diagonal rescaling, so small `δ` does not turn the linear solve ill-conditioned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::SpectralTemplates;
use crate::graphs::{self, ConstraintKind, ShiftConstraintSet};
use crate::linalg::{self, IndexSet, Matrix};
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum CertificateError {
    #[error("the degree eigenvector is not among the templates")]
    DegreeEigenvectorMissing,
    #[error("this certificate needs a full set of templates ({k} of {n} given)")]
    NeedsFullTemplates { k: usize, n: usize },
    #[error("certificate system is singular at δ = {delta:e}")]
    SingularSystem { delta: f64 },
    #[error("robust-recovery conditions fail: {0}")]
    ConditionsFail(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityRank {
    pub rank: usize,
    pub singleton: bool,
}

fn require_full(t: &SpectralTemplates) -> Result<(), CertificateError> {
    if t.k() != t.n() {
        return Err(CertificateError::NeedsFullTemplates { k: t.k(), n: t.n() });
    }
    Ok(())
}

fn degree_column(v: &Matrix, allow_fallback: bool) -> Result<usize, CertificateError> {
    match graphs::find_degree_eigenvector(v, 1e-8) {
        Ok(k) => Ok(k),
        Err(_) if allow_fallback => {
            graphs::most_single_signed_column(v).ok_or(CertificateError::DegreeEigenvectorMissing)
        }
        Err(_) => Err(CertificateError::DegreeEigenvectorMissing),
    }
}

/// `W_𝒟`: rows of the Khatri-Rao basis at the diagonal entries, `(i, k) ↦ v_ik²`.
pub fn diagonal_rows(v: &Matrix) -> Matrix {
    Matrix::from_fn(v.nrows(), v.ncols(), |i, k| v[(i, k)] * v[(i, k)])
}

/// `U = V¹ ∘ V¹` where `V¹` replaces the degree eigenvector by the all-ones column.
pub fn laplacian_rank_matrix(v: &Matrix, degree: usize) -> Matrix {
    Matrix::from_fn(v.nrows(), v.ncols(), |i, k| if k == degree { 1.0 } else { v[(i, k)] * v[(i, k)] })
}

/// Singleton-feasibility test: `rank(W_𝒟)` for the adjacency set, `rank(U)` for the
/// normalized Laplacian; the feasible set is a single point when the rank is `N−1`.
pub fn feasibility_rank(t: &SpectralTemplates, set: &ShiftConstraintSet) -> Result<FeasibilityRank, CertificateError> {
    require_full(t)?;
    let n = t.n();
    let a = match set.kind {
        ConstraintKind::AdjacencyScaled => diagonal_rows(&t.v),
        ConstraintKind::NormalizedLaplacian => laplacian_rank_matrix(&t.v, degree_column(&t.v, false)?),
        ConstraintKind::CombinatorialLaplacian => {
            return Err(CertificateError::InvalidInput(
                "rank test covers the adjacency and normalized Laplacian sets".into(),
            ))
        }
    };
    let rank = linalg::numerical_rank(&a, linalg::default_rank_tol(n, n));
    Ok(FeasibilityRank { rank, singleton: n >= 1 && rank == n - 1 })
}

/// Full-vec indices of the off-diagonal entries, in ascending order.
pub fn off_diagonal_indices(n: usize) -> Vec<usize> {
    (0..n * n).filter(|&r| r % n != r / n).collect()
}

/// Antisymmetry test matrix: one row `vec(B^{(i,j)})` per pair `i < j`, with `+1` at
/// `(i, j)` and `−1` at `(j, i)`.
pub fn antisymmetry_matrix(n: usize) -> Matrix {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let mut b = Matrix::zeros(pairs.len(), n * n);
    for (r, &(i, j)) in pairs.iter().enumerate() {
        b[(r, linalg::vec_index(i, j, n))] = 1.0;
        b[(r, linalg::vec_index(j, i, n))] = -1.0;
    }
    b
}

fn full_basis(v: &Matrix) -> Matrix {
    linalg::khatri_rao(v, v).expect("equal column counts")
}

fn without_column(v: &Matrix, col: usize) -> Matrix {
    let keep: Vec<usize> = (0..v.ncols()).filter(|&c| c != col).collect();
    Matrix::from_fn(v.nrows(), keep.len(), |i, c| v[(i, keep[c])])
}

/// `(I − A A†)` restricted to the off-diagonal rows.
fn off_diagonal_kernel_rows(a: &Matrix, n: usize) -> Matrix {
    let proj = linalg::kernel_projector(a);
    linalg::select_rows_unchecked(&proj, &off_diagonal_indices(n))
}

/// Matrices of the incomplete-template certificates (`P` or `T` stacks).
#[derive(Debug, Clone)]
pub struct IncompleteMatrices {
    /// `W_K` for the adjacency set, `Ũ_K` for the normalized Laplacian.
    pub w_k: Matrix,
    pub first: Matrix,
    pub second: Matrix,
    /// `[first; second]`, of size `2N² × L`.
    pub stacked: Matrix,
    /// `Υ = [I_{N²}, 0]`.
    pub upsilon: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone)]
pub struct CertificateMatrices {
    pub n: usize,
    pub kind: ConstraintKind,
    pub w: Matrix,
    pub w_d: Matrix,
    pub degree_column: Option<usize>,
    /// Rank-test matrix `U` (normalized Laplacian, full templates only).
    pub u: Option<Matrix>,
    /// `M = (I − W W†)_{𝒟ᶜ}` (adjacency, full templates).
    pub m: Option<Matrix>,
    /// `R = [M, c]` with `c` the indicator of the scale column's off-diagonal entries.
    pub r: Option<Matrix>,
    /// `Ũ = Ṽ ⊙ Ṽ` with the degree eigenvector removed (normalized Laplacian).
    pub u_tilde: Option<Matrix>,
    /// `Q = (I − Ũ Ũ†)_{𝒟ᶜ}`.
    pub q: Option<Matrix>,
    pub incomplete: Option<IncompleteMatrices>,
}

impl CertificateMatrices {
    /// The matrix whose dual system certifies the noiseless program (`R` or `Q`).
    pub fn noiseless(&self) -> Option<&Matrix> {
        self.r.as_ref().or(self.q.as_ref())
    }
}

fn incomplete_matrices(v_k: &Matrix, w_k: Matrix, n: usize, scale: Option<usize>) -> IncompleteMatrices {
    let nn = n * n;
    let k = v_k.ncols();
    let pairs = n * n.saturating_sub(1) / 2;
    let rows = nn + n + pairs + n * k + usize::from(scale.is_some());
    let kernel = linalg::kernel_projector(&w_k);
    let b = antisymmetry_matrix(n);
    // first/second are built as their transposes (rows = stacked constraints) and transposed at the end
    let mut first_t = Matrix::zeros(rows, nn);
    let mut second_t = Matrix::zeros(rows, nn);
    first_t.view_mut((0, 0), (nn, nn)).copy_from(&kernel);
    second_t.view_mut((0, 0), (nn, nn)).copy_from(&(-&kernel));
    for i in 0..n {
        first_t[(nn + i, linalg::vec_index(i, i, n))] = 1.0;
    }
    first_t.view_mut((nn + n, 0), (pairs, nn)).copy_from(&b);
    // (I ⊗ V_Kᵀ) vec(X) = vec(V_Kᵀ X): row (c, j) reads column j of X against template c
    let base = nn + n + pairs;
    for j in 0..n {
        for c in 0..k {
            for i in 0..n {
                second_t[(base + j * k + c, linalg::vec_index(i, j, n))] = v_k[(i, c)];
            }
        }
    }
    if let Some(sn) = scale {
        for i in 0..n {
            first_t[(rows - 1, linalg::vec_index(i, sn, n))] = 1.0;
        }
    }
    let first = first_t.transpose();
    let second = second_t.transpose();
    let mut stacked = Matrix::zeros(2 * nn, rows);
    stacked.view_mut((0, 0), (nn, rows)).copy_from(&first);
    stacked.view_mut((nn, 0), (nn, rows)).copy_from(&second);
    let mut upsilon = Matrix::zeros(nn, 2 * nn);
    upsilon.view_mut((0, 0), (nn, nn)).fill_with_identity();
    IncompleteMatrices { w_k, first, second, stacked, upsilon, b }
}

/// Builds the certificate matrices. With complete templates the noiseless matrices
/// (`M`, `R` or `Ũ`, `Q`) are filled; with `known` columns (or incomplete templates) the
/// `P`/`T` stacks are built over those columns.
pub fn build_certificate_matrices(
    t: &SpectralTemplates,
    set: &ShiftConstraintSet,
    known: Option<&[usize]>,
) -> Result<CertificateMatrices, CertificateError> {
    let n = t.n();
    let v = &t.v;
    if set.kind == ConstraintKind::CombinatorialLaplacian {
        return Err(CertificateError::InvalidInput(
            "certificates cover the adjacency and normalized Laplacian sets".into(),
        ));
    }
    if set.kind == ConstraintKind::AdjacencyScaled && set.scale_node >= n {
        return Err(CertificateError::InvalidInput(format!("scale node {} out of range", set.scale_node)));
    }
    let w = full_basis(v);
    let w_d = diagonal_rows(v);
    let complete = t.is_complete();
    let laplacian = set.kind == ConstraintKind::NormalizedLaplacian;
    let degree = if laplacian { Some(degree_column(v, true)?) } else { None };
    let mut out = CertificateMatrices {
        n,
        kind: set.kind,
        w,
        w_d,
        degree_column: degree,
        u: None,
        m: None,
        r: None,
        u_tilde: None,
        q: None,
        incomplete: None,
    };
    if complete {
        match degree {
            None => {
                let m = off_diagonal_kernel_rows(&out.w, n);
                let mut r = Matrix::zeros(m.nrows(), m.ncols() + 1);
                r.view_mut((0, 0), m.shape()).copy_from(&m);
                for (row, &idx) in off_diagonal_indices(n).iter().enumerate() {
                    if idx / n == set.scale_node {
                        r[(row, m.ncols())] = 1.0;
                    }
                }
                out.m = Some(m);
                out.r = Some(r);
            }
            Some(d) => {
                let u_tilde = full_basis(&without_column(v, d));
                out.q = Some(off_diagonal_kernel_rows(&u_tilde, n));
                out.u_tilde = Some(u_tilde);
                out.u = Some(laplacian_rank_matrix(v, d));
            }
        }
    }
    let known_cols: Option<Vec<usize>> = match known {
        Some(cols) => Some(cols.to_vec()),
        None if !complete => Some((0..t.k()).collect()),
        None => None,
    };
    if let Some(cols) = known_cols {
        if cols.iter().any(|&c| c >= t.k()) {
            return Err(CertificateError::InvalidInput("known template index out of range".into()));
        }
        let v_k = linalg::select_columns(v, &cols);
        let mi = match degree {
            None => incomplete_matrices(&v_k, full_basis(&v_k), n, Some(set.scale_node)),
            Some(_) => {
                let d = degree_column(&v_k, t.k() < n || known.is_some())?;
                incomplete_matrices(&v_k, full_basis(&without_column(&v_k, d)), n, None)
            }
        };
        out.incomplete = Some(mi);
    }
    Ok(out)
}

/// `‖I_{𝒩}(δ⁻² A Aᵀ + I_𝒩ᵀ I_𝒩)⁻¹ I_𝒫ᵀ‖_{M(∞)}` for disjoint row sets `𝒫` (support) and
/// `𝒩` (penalized complement), prepared once for a sweep over `δ`.
///
/// With `G = A Aᵀ = Q Λ Qᵀ`, the system is solved as `Q S (I_r ⊕ 0 + S Qᵀ D Q S)⁻¹ S Qᵀ`
/// where `S = diag(δ/√λ)` on the range of `G` and the identity on its kernel.
#[derive(Debug, Clone)]
pub struct DualSystem {
    q: Matrix,
    values: Vec<f64>,
    range: usize,
    support: Vec<usize>,
    penalized: Vec<usize>,
    qdq: Matrix,
}

/// Eigenvalues of `A Aᵀ` below this fraction of the largest count as zero.
const RANGE_TOL: f64 = 1e-10;

impl DualSystem {
    pub fn new(a: &Matrix, support: &[usize], penalized: &[usize]) -> Result<Self, CertificateError> {
        let m = a.nrows();
        if support.iter().chain(penalized).any(|&i| i >= m) {
            return Err(CertificateError::InvalidInput("row index out of range".into()));
        }
        let g = a * a.transpose();
        let eig = linalg::sym_eig(&g).map_err(|e| CertificateError::InvalidInput(e.to_string()))?;
        let top = eig.values.iter().cloned().fold(0.0, f64::max);
        let range = eig.values.iter().filter(|&&l| l > RANGE_TOL * top).count();
        let qn = linalg::select_rows_unchecked(&eig.vectors, penalized);
        let qdq = qn.transpose() * qn;
        Ok(Self {
            q: eig.vectors,
            values: eig.values.iter().cloned().collect(),
            range,
            support: support.to_vec(),
            penalized: penalized.to_vec(),
            qdq,
        })
    }

    pub fn value(&self, delta: f64) -> Result<f64, CertificateError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(CertificateError::InvalidInput(format!("δ must be positive, got {delta}")));
        }
        if self.support.is_empty() || self.penalized.is_empty() {
            return Ok(0.0);
        }
        let m = self.q.ncols();
        let scale: Vec<f64> =
            (0..m).map(|c| if c < self.range { delta / self.values[c].sqrt() } else { 1.0 }).collect();
        let mut c = Matrix::from_fn(m, m, |i, j| scale[i] * self.qdq[(i, j)] * scale[j]);
        for i in 0..self.range {
            c[(i, i)] += 1.0;
        }
        let chol = nalgebra::Cholesky::new(c).ok_or(CertificateError::SingularSystem { delta })?;
        let l = chol.l_dirty();
        let (lo, hi) =
            (0..m).map(|i| l[(i, i)].powi(2)).fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(x), b.max(x)));
        if lo <= 1e-12 * hi {
            return Err(CertificateError::SingularSystem { delta });
        }
        let rhs = Matrix::from_fn(m, self.support.len(), |i, j| scale[i] * self.q[(self.support[j], i)]);
        let z = chol.solve(&rhs);
        let left = Matrix::from_fn(self.penalized.len(), m, |r, i| self.q[(self.penalized[r], i)] * scale[i]);
        Ok(linalg::induced_inf_norm(&(left * z)))
    }

    /// Smallest value over `grid`, with the `δ` that attains it. Singular points are skipped;
    /// `None` when every point is singular.
    pub fn minimize(&self, grid: &[f64]) -> Option<(f64, f64)> {
        let values = par::map(grid, |&d| self.value(d).ok());
        grid.iter().zip(values).filter_map(|(&d, v)| v.map(|v| (v, d))).fold(
            None,
            |best: Option<(f64, f64)>, (v, d)| match best {
                Some((bv, _)) if bv <= v => best,
                _ => Some((v, d)),
            },
        )
    }
}

/// `ψ` of a certificate matrix (`R` or `Q`) for support `𝒦` over its rows.
pub fn psi(a: &Matrix, support: &IndexSet, delta: f64) -> Result<f64, CertificateError> {
    if support.universe() != a.nrows() {
        return Err(CertificateError::InvalidInput("support universe must match the row count".into()));
    }
    let comp = support.complement();
    DualSystem::new(a, support.as_slice(), comp.as_slice())?.value(delta)
}

/// `η` of a stacked matrix (`P` or `T`, `2N²` rows) for support `𝒥` over the `N²` entries.
pub fn eta(stacked: &Matrix, support: &IndexSet, delta: f64) -> Result<f64, CertificateError> {
    if 2 * support.universe() != stacked.nrows() {
        return Err(CertificateError::InvalidInput("support universe must be half the row count".into()));
    }
    let comp = support.complement();
    DualSystem::new(stacked, support.as_slice(), comp.as_slice())?.value(delta)
}

/// Rank condition of the dual system: the rows outside the penalized set are independent.
pub fn rank_condition(a: &Matrix, penalized: &[usize]) -> bool {
    let keep: Vec<usize> = (0..a.nrows()).filter(|i| !penalized.contains(i)).collect();
    let sub = linalg::select_rows_unchecked(a, &keep);
    linalg::numerical_rank(&sub, linalg::default_rank_tol(sub.nrows(), sub.ncols())) == keep.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertifiedFormulation {
    NoiselessAdjacency,
    NoiselessLaplacian,
    IncompleteAdjacency,
    IncompleteLaplacian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCertificate {
    pub formulation: CertifiedFormulation,
    pub rank_condition_holds: bool,
    /// Smallest `ψ` or `η` over the grid (`+∞` when the system is singular everywhere).
    pub psi_or_eta: f64,
    pub minimizing_delta: f64,
    /// Support indices: off-diagonal positions for full templates, full-vec entries otherwise.
    pub support: Vec<usize>,
    pub guaranteed: bool,
    /// The support came from an estimate rather than the true shift.
    pub post_hoc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub instance_id: String,
    pub formulation: CertifiedFormulation,
    pub rank_ok: bool,
    pub value: Option<f64>,
    pub delta: f64,
    pub guaranteed: bool,
}

impl RecoveryCertificate {
    pub fn row(&self, instance_id: impl Into<String>) -> CertificateRow {
        CertificateRow {
            instance_id: instance_id.into(),
            formulation: self.formulation,
            rank_ok: self.rank_condition_holds,
            value: self.psi_or_eta.is_finite().then_some(self.psi_or_eta),
            delta: self.minimizing_delta,
            guaranteed: self.guaranteed,
        }
    }
}

pub const DELTA_GRID_POINTS: usize = 33;

/// `points` logarithmically spaced values from `10^lo` to `10^hi`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![10f64.powf(lo)],
        _ => (0..points).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (points - 1) as f64)).collect(),
    }
}

/// Default `δ` grid: 33 points from `1e-6` to `1e2`.
pub fn default_delta_grid() -> Vec<f64> {
    log_grid(-6.0, 2.0, DELTA_GRID_POINTS)
}

fn check_shift(s: &Matrix, n: usize) -> Result<(), CertificateError> {
    if s.shape() != (n, n) {
        return Err(CertificateError::InvalidInput(format!(
            "shift is {}x{}, templates have {n} rows",
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

fn support_tol(s: &Matrix, rel: f64) -> f64 {
    rel * s.amax().max(f64::MIN_POSITIVE)
}

fn finish(
    formulation: CertifiedFormulation,
    a: &Matrix,
    support: Vec<usize>,
    penalized: Vec<usize>,
    grid: &[f64],
    post_hoc: bool,
) -> Result<RecoveryCertificate, CertificateError> {
    let rank_ok = rank_condition(a, &penalized);
    let system = DualSystem::new(a, &support, &penalized)?;
    let (value, delta) = system.minimize(grid).unwrap_or((f64::INFINITY, f64::NAN));
    Ok(RecoveryCertificate {
        formulation,
        rank_condition_holds: rank_ok,
        psi_or_eta: value,
        minimizing_delta: delta,
        support,
        guaranteed: rank_ok && value < 1.0,
        post_hoc,
    })
}

fn certify_full(
    t: &SpectralTemplates,
    s: &Matrix,
    set: &ShiftConstraintSet,
    grid: &[f64],
    tol: f64,
    post_hoc: bool,
) -> Result<RecoveryCertificate, CertificateError> {
    require_full(t)?;
    let n = t.n();
    check_shift(s, n)?;
    let mats = build_certificate_matrices(t, set, None)?;
    let a = mats.noiseless().expect("complete templates give the noiseless matrices");
    let off = off_diagonal_indices(n);
    let (support, penalized): (Vec<usize>, Vec<usize>) =
        (0..off.len()).partition(|&r| s[(off[r] % n, off[r] / n)].abs() > tol);
    let formulation = if mats.degree_column.is_some() {
        CertifiedFormulation::NoiselessLaplacian
    } else {
        CertifiedFormulation::NoiselessAdjacency
    };
    finish(formulation, a, support, penalized, grid, post_hoc)
}

/// Certificate for the plain ℓ1 program with complete templates (`ψ_R` or `ψ_Q`).
pub fn certify_noiseless(
    t: &SpectralTemplates,
    s_true: &Matrix,
    set: &ShiftConstraintSet,
    grid: &[f64],
) -> Result<RecoveryCertificate, CertificateError> {
    certify_full(t, s_true, set, grid, support_tol(s_true, 1e-9), false)
}

fn certify_partial(
    t: &SpectralTemplates,
    s: &Matrix,
    set: &ShiftConstraintSet,
    known: Option<&[usize]>,
    grid: &[f64],
    tol: f64,
    post_hoc: bool,
) -> Result<RecoveryCertificate, CertificateError> {
    let n = t.n();
    check_shift(s, n)?;
    let known_all: Vec<usize> = (0..t.k()).collect();
    let mats = build_certificate_matrices(t, set, Some(known.unwrap_or(&known_all)))?;
    let inc = mats.incomplete.as_ref().expect("incomplete matrices requested");
    let (support, penalized): (Vec<usize>, Vec<usize>) = (0..n * n).partition(|&r| s[(r % n, r / n)].abs() > tol);
    let formulation = if mats.degree_column.is_some() {
        CertifiedFormulation::IncompleteLaplacian
    } else {
        CertifiedFormulation::IncompleteAdjacency
    };
    finish(formulation, &inc.stacked, support, penalized, grid, post_hoc)
}

/// Certificate for the incomplete-template program (`η_P` or `η_T`) over the `known`
/// template columns (all of `t` when `None`).
pub fn certify_incomplete(
    t: &SpectralTemplates,
    s_true: &Matrix,
    set: &ShiftConstraintSet,
    known: Option<&[usize]>,
    grid: &[f64],
) -> Result<RecoveryCertificate, CertificateError> {
    certify_partial(t, s_true, set, known, grid, support_tol(s_true, 1e-9), false)
}

/// Certificate computed on the support of an estimate, for data without a ground truth.
pub fn certify_post_hoc(
    t: &SpectralTemplates,
    estimate: &Matrix,
    set: &ShiftConstraintSet,
    grid: &[f64],
    support_tol: f64,
) -> Result<RecoveryCertificate, CertificateError> {
    if t.is_complete() {
        certify_full(t, estimate, set, grid, support_tol, true)
    } else {
        certify_partial(t, estimate, set, None, grid, support_tol, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RobustBasis {
    R,
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c: f64,
    pub psi: f64,
    pub delta: f64,
    pub based_on: RobustBasis,
}

/// `C1 = √|𝒦| / σ_min(R̂_𝒦ᵀ)`, `C2 = (1 + ‖R̂ᵀ‖₂ C1) / (1 − ψ)`, `C3 = N ‖R̂†‖₂`,
/// `C = 2 C1 + 2 C2 C3`, evaluated on the (noisy) templates at a given `δ`.
pub fn robust_constants(
    t: &SpectralTemplates,
    s_true: &Matrix,
    set: &ShiftConstraintSet,
    delta: f64,
) -> Result<RobustConstants, CertificateError> {
    Ok(RobustSystem::new(t, s_true, set)?.at(delta)?)
}

/// Constants at the grid point with the smallest `C` among those where the conditions hold.
pub fn best_robust_constants(
    t: &SpectralTemplates,
    s_true: &Matrix,
    set: &ShiftConstraintSet,
    grid: &[f64],
) -> Result<RobustConstants, CertificateError> {
    let sys = RobustSystem::new(t, s_true, set)?;
    let all = par::map(grid, |&d| sys.at(d));
    let mut best: Option<RobustConstants> = None;
    let mut last_err = None;
    for r in all {
        match r {
            Ok(c) if best.is_none_or(|b| c.c < b.c) => best = Some(c),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(CertificateError::ConditionsFail("empty δ grid".into())))
}

struct RobustSystem {
    system: DualSystem,
    rank_ok: bool,
    n: usize,
    k: usize,
    sigma_min_k: f64,
    norm: f64,
    pinv_norm: f64,
    based_on: RobustBasis,
}

impl RobustSystem {
    fn new(t: &SpectralTemplates, s: &Matrix, set: &ShiftConstraintSet) -> Result<Self, CertificateError> {
        require_full(t)?;
        let n = t.n();
        check_shift(s, n)?;
        let mats = build_certificate_matrices(t, set, None)?;
        let a = mats.noiseless().expect("complete templates give the noiseless matrices");
        let off = off_diagonal_indices(n);
        let tol = support_tol(s, 1e-9);
        let (support, penalized): (Vec<usize>, Vec<usize>) =
            (0..off.len()).partition(|&r| s[(off[r] % n, off[r] / n)].abs() > tol);
        let rank_ok = rank_condition(a, &penalized);
        let sk = linalg::select_rows_unchecked(a, &support);
        let sigma_min_k = linalg::singular_values(&sk).iter().cloned().fold(f64::INFINITY, f64::min);
        let sv = linalg::singular_values(a);
        let norm = sv.iter().cloned().fold(0.0, f64::max);
        let cut = linalg::default_rank_tol(a.nrows(), a.ncols()) * norm;
        let smallest = sv.iter().cloned().filter(|&x| x > cut).fold(f64::INFINITY, f64::min);
        Ok(Self {
            system: DualSystem::new(a, &support, &penalized)?,
            rank_ok,
            n,
            k: support.len(),
            sigma_min_k,
            norm,
            pinv_norm: 1.0 / smallest,
            based_on: if mats.degree_column.is_some() { RobustBasis::Q } else { RobustBasis::R },
        })
    }

    fn at(&self, delta: f64) -> Result<RobustConstants, CertificateError> {
        if !self.rank_ok || !(self.sigma_min_k > 0.0) {
            return Err(CertificateError::ConditionsFail("the support rows are rank deficient".into()));
        }
        let psi = self.system.value(delta)?;
        if psi >= 1.0 {
            return Err(CertificateError::ConditionsFail(format!("ψ = {psi} is not below 1 at δ = {delta:e}")));
        }
        let c1 = (self.k as f64).sqrt() / self.sigma_min_k;
        let c2 = (1.0 + self.norm * c1) / (1.0 - psi);
        let c3 = self.pinv_norm * self.n as f64;
        Ok(RobustConstants { c1, c2, c3, c: 2.0 * c1 + 2.0 * c2 * c3, psi, delta, based_on: self.based_on })
    }
}
