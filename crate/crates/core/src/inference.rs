//! Shift-operator inference from spectral templates.
//!
//! Every formulation is translated into a [`SparseRecoveryProblem`] over the
//! half-vectorized shift (lower triangle, column-major), so symmetry holds by
//! construction. Off-diagonal entries carry multiplicity 2 in the ℓ1 weights and `√2` in
//! the distance metric, which makes both agree with the full-matrix norms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::SpectralTemplates;
use crate::graphs::{self, ConstraintKind, Graph, GraphError, GsoKind, ShiftConstraintSet};
use crate::linalg::{self, Matrix, Vector};
use crate::solver::{
    self, AdmmState, Ball, Distance, ExtraBlock, LinearBound, LinearEquality, Objective, Ordering, PreparedProblem,
    Sign, Solution, SolverError, SolverOptions, SparseRecoveryProblem, Status,
};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("templates admit no admissible shift: {0}")]
    Infeasible(SolverError),
    #[error("no distance bound admits a feasible shift")]
    NeverFeasible,
    #[error("this formulation needs a full set of templates ({k} of {n} given)")]
    NeedsFullTemplates { k: usize, n: usize },
    #[error("the degree eigenvector is not among the known templates")]
    DegreeEigenvectorMissing,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Solver(SolverError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<SolverError> for InferenceError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Infeasible { .. } => InferenceError::Infeasible(e),
            SolverError::NeverFeasible { .. } => InferenceError::NeverFeasible,
            other => InferenceError::Solver(other),
        }
    }
}

/// Radius of the distance constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "value")]
pub enum Epsilon {
    Fixed(f64),
    /// Smallest radius that admits a feasible shift.
    Auto,
    /// A multiple of the smallest feasible radius.
    AutoScaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    Frobenius,
    Spectral,
}

/// Iterative reweighting `ω_ij ← τ / (|S_ij| + δ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reweighting {
    pub tau: f64,
    pub delta: f64,
    pub iters: usize,
}

impl Default for Reweighting {
    fn default() -> Self {
        Self { tau: 1.0, delta: 1e-3, iters: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Formulation {
    Noiseless,
    Reweighted(Reweighting),
    Noisy {
        epsilon: Epsilon,
        distance: DistanceKind,
        /// Moves the scale constraint into the distance and drops sign constraints,
        /// which is the relaxed problem covered by the robust-recovery bound.
        #[serde(default)]
        augmented: bool,
    },
    Incomplete,
    IncompleteNoisy {
        epsilon: Epsilon,
    },
}

impl Formulation {
    pub fn noisy(epsilon: Epsilon) -> Self {
        Formulation::Noisy { epsilon, distance: DistanceKind::Frobenius, augmented: false }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub templates: SpectralTemplates,
    pub set: ShiftConstraintSet,
    pub formulation: Formulation,
    pub objective: Objective,
    /// Optional post-processing threshold for unweighted graphs.
    pub threshold: Option<f64>,
    /// Reweighting on top of a non-reweighted formulation.
    pub reweighting: Option<Reweighting>,
    pub solver: SolverOptions,
}

impl InferenceRequest {
    pub fn new(templates: SpectralTemplates, set: ShiftConstraintSet, formulation: Formulation) -> Self {
        Self {
            templates,
            set,
            formulation,
            objective: Objective::WeightedL1,
            threshold: None,
            reweighting: None,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub status: Status,
    pub iterations: usize,
    pub objective_value: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub max_violation: f64,
    pub polished: bool,
    pub epsilon: Option<f64>,
    pub rounds: usize,
    pub degree_column: Option<usize>,
    /// The degree eigenvector was chosen by the least-violation fallback rule.
    pub degree_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct GsoEstimate {
    pub kind: GsoKind,
    pub s: Matrix,
    pub lambda: Vector,
    pub s_prime: Option<Matrix>,
    pub s_bar: Option<Matrix>,
    pub diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct EstimateJson<'a> {
    kind: GsoKind,
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    lambda: Vec<f64>,
    #[serde(rename = "S_prime", skip_serializing_if = "Option::is_none")]
    s_prime: Option<Vec<Vec<f64>>>,
    #[serde(rename = "S_bar", skip_serializing_if = "Option::is_none")]
    s_bar: Option<Vec<Vec<f64>>>,
    diagnostics: &'a Diagnostics,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

impl GsoEstimate {
    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(&EstimateJson {
            kind: self.kind,
            s: rows_of(&self.s),
            lambda: self.lambda.iter().cloned().collect(),
            s_prime: self.s_prime.as_ref().map(rows_of),
            s_bar: self.s_bar.as_ref().map(rows_of),
            diagnostics: &self.diagnostics,
        })
    }

    /// Support graph of the estimate (Laplacian entries are negated into edge weights).
    pub fn graph(&self, tol: f64) -> Result<Graph, GraphError> {
        graphs::Gso { kind: self.kind, matrix: self.s.clone() }.to_graph(tol)
    }
}

/// Half-vectorized Khatri-Rao basis: column `k` is the half-vectorization of `v_k v_kᵀ`.
pub fn half_basis(v: &Matrix) -> Matrix {
    let n = v.nrows();
    let pairs = linalg::half_pairs(n);
    Matrix::from_fn(pairs.len(), v.ncols(), |r, k| {
        let (i, j) = pairs[r];
        v[(i, k)] * v[(j, k)]
    })
}

/// Entry multiplicities of the half-vectorization: 1 on the diagonal, 2 elsewhere.
pub fn multiplicities(n: usize) -> Vec<f64> {
    linalg::half_pairs(n).into_iter().map(|(i, j)| if i == j { 1.0 } else { 2.0 }).collect()
}

/// A translated request, ready to be solved or serialized.
#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub problem: SparseRecoveryProblem,
    pub n: usize,
    pub degree_column: Option<usize>,
    pub degree_fallback: bool,
    pub epsilon: Option<Epsilon>,
}

fn degree_column(v: &Matrix, allow_fallback: bool) -> Result<(usize, bool), InferenceError> {
    match graphs::find_degree_eigenvector(v, 1e-8) {
        Ok(k) => Ok((k, false)),
        Err(_) if allow_fallback => {
            graphs::most_single_signed_column(v).map(|k| (k, true)).ok_or(InferenceError::DegreeEigenvectorMissing)
        }
        Err(_) => Err(InferenceError::DegreeEigenvectorMissing),
    }
}

/// Translates the request (without solving).
pub fn build_problem(req: &InferenceRequest) -> Result<BuiltProblem, InferenceError> {
    let t = &req.templates;
    let (n, k) = (t.n(), t.k());
    let set = &req.set;
    let incomplete = matches!(req.formulation, Formulation::Incomplete | Formulation::IncompleteNoisy { .. });
    if !incomplete && k != n {
        return Err(InferenceError::NeedsFullTemplates { k, n });
    }
    if set.scale_node >= n && set.kind == ConstraintKind::AdjacencyScaled {
        return Err(InferenceError::InvalidRequest(format!("scale node {} out of range", set.scale_node)));
    }
    let pairs = linalg::half_pairs(n);
    let dim = pairs.len();
    let mult = multiplicities(n);
    let idx = |i: usize, j: usize| linalg::half_index(i, j, n);

    let mut p = SparseRecoveryProblem::new(half_basis(&t.v));
    p.weights = mult.clone();

    let (augmented, epsilon, distance) = match req.formulation {
        Formulation::Noisy { epsilon, distance, augmented } => (augmented, Some(epsilon), distance),
        Formulation::IncompleteNoisy { epsilon } => (false, Some(epsilon), DistanceKind::Frobenius),
        _ => (false, None, DistanceKind::Frobenius),
    };
    if let Some(Epsilon::Fixed(e)) = epsilon {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(InferenceError::InvalidRequest(format!("distance bound must be non-negative, got {e}")));
        }
    }
    if let Some(Epsilon::AutoScaled(f)) = epsilon {
        if !(f >= 1.0 && f.is_finite()) {
            return Err(InferenceError::InvalidRequest(format!("auto-radius factor must be at least 1, got {f}")));
        }
    }
    if augmented && set.kind != ConstraintKind::AdjacencyScaled {
        return Err(InferenceError::InvalidRequest("the augmented distance applies to the adjacency set".into()));
    }

    let mut soft = Vec::new();
    let mut degree = None;
    let mut fallback = false;
    match set.kind {
        ConstraintKind::AdjacencyScaled => {
            for i in 0..n {
                p.pins.push((idx(i, i), 0.0));
            }
            if !augmented {
                for (r, &(i, j)) in pairs.iter().enumerate() {
                    if i != j {
                        p.sign[r] = Sign::NonNegative;
                    }
                }
            }
            let sn = set.scale_node;
            let scale = LinearEquality::new((0..n).filter(|&j| j != sn).map(|j| (idx(j, sn), 1.0)).collect(), 1.0);
            if augmented {
                soft.push(scale);
            } else {
                p.linear_equalities.push(scale);
            }
        }
        ConstraintKind::NormalizedLaplacian | ConstraintKind::CombinatorialLaplacian => {
            let normalized = set.kind == ConstraintKind::NormalizedLaplacian;
            for (r, &(i, j)) in pairs.iter().enumerate() {
                if i == j {
                    if normalized {
                        p.pins.push((r, 1.0));
                    }
                } else {
                    p.sign[r] = if normalized { Sign::Box { lo: -1.0, hi: 0.0 } } else { Sign::NonPositive };
                }
            }
            if !normalized {
                for i in 0..n {
                    p.linear_equalities.push(LinearEquality::new((0..n).map(|j| (idx(i, j), 1.0)).collect(), 0.0));
                }
            }
            let (col, fb) = degree_column(&t.v, !incomplete)?;
            degree = Some(col);
            fallback = fb;
            p.eigenvalues.pins.push((col, 0.0));
            // positive semidefiniteness through the spectral coefficients
            for c in 0..k {
                if c != col {
                    p.eigenvalues.lower.push((c, 0.0));
                }
            }
        }
    }
    for e in &set.known_entries {
        if e.i >= n || e.j >= n {
            return Err(InferenceError::InvalidRequest(format!("known entry ({}, {}) out of range", e.i, e.j)));
        }
        p.pins.push((idx(e.i, e.j), e.value));
    }
    if let Some(min) = set.min_row_sum {
        let sign = if set.kind == ConstraintKind::AdjacencyScaled { 1.0 } else { -1.0 };
        for i in 0..n {
            p.linear_bounds.push(LinearBound {
                terms: (0..n).filter(|&j| j != i).map(|j| (idx(i, j), sign)).collect(),
                lo: min,
                hi: f64::INFINITY,
            });
        }
    }
    if let Some(ord) = set.ordering {
        if ord.lag == 0 {
            return Err(InferenceError::InvalidRequest("ordering lag must be positive".into()));
        }
        for i in 0..k.saturating_sub(ord.lag) {
            p.eigenvalues.ordering.push(Ordering { i, j: i + ord.lag, gap: ord.gap });
        }
    }
    if incomplete {
        let mut eqs = Vec::with_capacity(n * k);
        for c in 0..k {
            for i in 0..n {
                eqs.push(LinearEquality::new((0..n).map(|j| (idx(i, j), t.v[(j, c)])).collect(), 0.0));
            }
        }
        p.extra = Some(ExtraBlock { equalities: eqs });
    }
    if epsilon.is_some() {
        let dist = match distance {
            DistanceKind::Frobenius => Distance::Frobenius,
            DistanceKind::Spectral => Distance::Spectral { n },
        };
        let radius = match epsilon {
            Some(Epsilon::Fixed(e)) => e,
            _ => 0.0,
        };
        p.ball = Some(Ball {
            radius,
            distance: dist,
            metric: mult.iter().map(|m| m.sqrt()).collect(),
            soft_equalities: soft,
        });
    }
    debug_assert_eq!(p.dim(), dim);
    Ok(BuiltProblem { problem: p, n, degree_column: degree, degree_fallback: fallback, epsilon })
}

/// Upper end of the automatic radius search.
pub const EPSILON_UPPER: f64 = 1e6;

/// Resolves an automatic radius in place; returns the radius used.
pub fn resolve_epsilon(built: &mut BuiltProblem, o: &SolverOptions) -> Result<Option<f64>, InferenceError> {
    let Some(eps) = built.epsilon else {
        return Ok(None);
    };
    let radius = match eps {
        Epsilon::Fixed(e) => e,
        Epsilon::Auto => solver::min_feasible_epsilon(&built.problem, o, EPSILON_UPPER)?,
        Epsilon::AutoScaled(f) => f * solver::min_feasible_epsilon(&built.problem, o, EPSILON_UPPER)?,
    };
    built.problem.ball.as_mut().expect("distance formulations carry a ball").radius = radius;
    built.epsilon = Some(Epsilon::Fixed(radius));
    Ok(Some(radius))
}

fn support(s: &Vector, n: usize) -> Vec<bool> {
    linalg::half_pairs(n).into_iter().zip(s.iter()).map(|((i, j), x)| i != j && x.abs() > 1e-6).collect()
}

fn estimate(built: &BuiltProblem, kind: GsoKind, sol: Solution, epsilon: Option<f64>, rounds: usize) -> GsoEstimate {
    let n = built.n;
    let s = linalg::half_unvectorize(&sol.s, n);
    let s_bar = sol.s_extra.as_ref().map(|e| linalg::half_unvectorize(e, n));
    let s_prime = built.problem.ball.as_ref().map(|_| {
        let mut sp = &built.problem.w * &sol.lambda;
        if let Some(e) = &sol.s_extra {
            sp += e;
        }
        linalg::half_unvectorize(&sp, n)
    });
    GsoEstimate {
        kind,
        s,
        lambda: sol.lambda.clone(),
        s_prime,
        s_bar,
        diagnostics: Diagnostics {
            status: sol.status,
            iterations: sol.iterations,
            objective_value: sol.objective_value,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            max_violation: sol.max_violation,
            polished: sol.polished,
            epsilon,
            rounds,
            degree_column: built.degree_column,
            degree_fallback: built.degree_fallback,
        },
    }
}

/// Solves a built problem, optionally with reweighting rounds.
pub fn solve_built(
    built: &BuiltProblem,
    kind: GsoKind,
    objective: Objective,
    o: &SolverOptions,
    reweighting: Option<Reweighting>,
    epsilon: Option<f64>,
) -> Result<GsoEstimate, InferenceError> {
    let prepared = PreparedProblem::new(&built.problem, objective)?;
    let mult = multiplicities(built.n);
    let Some(rw) = reweighting else {
        let sol = prepared.solve(o, None)?;
        return Ok(estimate(built, kind, sol, epsilon, 1));
    };
    if !(rw.tau > 0.0 && rw.delta > 0.0) || rw.iters == 0 {
        return Err(InferenceError::InvalidRequest("reweighting needs τ, δ > 0 and at least one round".into()));
    }
    let mut weights = mult.clone();
    let mut warm: Option<AdmmState> = None;
    let mut prev: Option<Vec<bool>> = None;
    let mut last = None;
    let mut rounds = 0;
    for _ in 0..rw.iters {
        rounds += 1;
        let (sol, state) = prepared.solve_warm(o, Some(&weights), warm.as_ref())?;
        let supp = support(&sol.s, built.n);
        let stable = prev.as_ref() == Some(&supp);
        for (r, w) in weights.iter_mut().enumerate() {
            *w = mult[r] * rw.tau / (sol.s[r].abs() + rw.delta);
        }
        warm = Some(state);
        last = Some(sol);
        if stable {
            break;
        }
        prev = Some(supp);
    }
    Ok(estimate(built, kind, last.expect("at least one round"), epsilon, rounds))
}

/// Runs the request's formulation end to end (including the optional threshold).
pub fn infer(req: &InferenceRequest) -> Result<GsoEstimate, InferenceError> {
    let mut built = build_problem(req)?;
    let epsilon = resolve_epsilon(&mut built, &req.solver)?;
    let reweighting = match req.formulation {
        Formulation::Reweighted(rw) => Some(rw),
        _ => req.reweighting,
    };
    let est = solve_built(&built, req.set.gso_kind(), req.objective, &req.solver, reweighting, epsilon)?;
    Ok(match req.threshold {
        Some(t) => threshold_unweighted(&est, t, false),
        None => est,
    })
}

fn expect_formulation(ok: bool, name: &str) -> Result<(), InferenceError> {
    if ok {
        Ok(())
    } else {
        Err(InferenceError::InvalidRequest(format!("request formulation is not {name}")))
    }
}

pub fn infer_noiseless(req: &InferenceRequest) -> Result<GsoEstimate, InferenceError> {
    expect_formulation(matches!(req.formulation, Formulation::Noiseless), "noiseless")?;
    infer(req)
}

pub fn infer_reweighted(req: &InferenceRequest) -> Result<GsoEstimate, InferenceError> {
    expect_formulation(matches!(req.formulation, Formulation::Reweighted(_)), "reweighted")?;
    infer(req)
}

pub fn infer_noisy(req: &InferenceRequest) -> Result<GsoEstimate, InferenceError> {
    expect_formulation(matches!(req.formulation, Formulation::Noisy { .. }), "noisy")?;
    infer(req)
}

pub fn infer_incomplete(req: &InferenceRequest) -> Result<GsoEstimate, InferenceError> {
    expect_formulation(matches!(req.formulation, Formulation::Incomplete), "incomplete")?;
    infer(req)
}

pub fn infer_incomplete_noisy(req: &InferenceRequest) -> Result<GsoEstimate, InferenceError> {
    expect_formulation(matches!(req.formulation, Formulation::IncompleteNoisy { .. }), "incomplete-noisy")?;
    infer(req)
}

/// Templates reordered for smooth-signal inference: ascending covariance eigenvalue, with
/// the constant (degree) eigenvector moved to the smoothest end.
pub fn smooth_order(t: &SpectralTemplates) -> Result<(SpectralTemplates, bool), InferenceError> {
    let (col, fallback) = degree_column(&t.v, true)?;
    let mut order: Vec<usize> = (0..t.k()).rev().filter(|&c| c != col).collect();
    order.push(col);
    Ok((t.select(&order), fallback))
}

/// Combinatorial Laplacian from smooth signals: the noisy formulation over the
/// combinatorial-Laplacian set with `λ_i ≥ λ_{i+lag} + gap` on the reordered templates.
/// Uses the request's radius when its formulation is noisy, the smallest feasible one otherwise.
pub fn infer_smooth_laplacian(req: &InferenceRequest, lag: usize, gap: f64) -> Result<GsoEstimate, InferenceError> {
    if req.set.kind != ConstraintKind::CombinatorialLaplacian {
        return Err(InferenceError::InvalidRequest("smooth inference needs the combinatorial Laplacian set".into()));
    }
    let (templates, fallback) = smooth_order(&req.templates)?;
    let formulation = match req.formulation {
        f @ Formulation::Noisy { .. } => f,
        _ => Formulation::noisy(Epsilon::Auto),
    };
    let mut sub = req.clone();
    sub.templates = templates;
    sub.set = req.set.clone().with_ordering(graphs::SpectralOrdering { lag, gap });
    sub.formulation = formulation;
    let mut est = infer(&sub)?;
    est.diagnostics.degree_fallback |= fallback;
    Ok(est)
}

/// Zeroes off-diagonal entries with magnitude below `t`; survivors become `±1` when `binarize`.
pub fn threshold_unweighted(e: &GsoEstimate, t: f64, binarize: bool) -> GsoEstimate {
    let mut out = e.clone();
    let n = out.s.nrows();
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            let v = out.s[(i, j)];
            if v.abs() < t {
                out.s[(i, j)] = 0.0;
            } else if binarize {
                out.s[(i, j)] = v.signum();
            }
        }
    }
    out
}

/// Divides by the largest off-diagonal magnitude (no-op for an empty graph).
pub fn normalize_off_diagonal(s: &Matrix) -> Matrix {
    let n = s.nrows();
    let mut m = 0.0f64;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                m = m.max(s[(i, j)].abs());
            }
        }
    }
    if m > 0.0 {
        s / m
    } else {
        s.clone()
    }
}

/// The closed-form point when the spectral and diagonal constraints pin the shift down to
/// one point: `rank(W_𝒟) = N−1` for the adjacency set, `rank(U) = N−1` for the normalized
/// Laplacian. Returns `None` otherwise, or when that point violates the sign constraints.
pub fn unique_feasible_point(t: &SpectralTemplates, set: &ShiftConstraintSet) -> Option<GsoEstimate> {
    let n = t.n();
    if t.k() != n || n < 2 {
        return None;
    }
    let v = &t.v;
    let (lambda, degree) = match set.kind {
        ConstraintKind::AdjacencyScaled => {
            let wd = Matrix::from_fn(n, n, |i, k| v[(i, k)] * v[(i, k)]);
            let null = linalg::null_basis(&wd, linalg::default_rank_tol(n, n));
            if null.ncols() != 1 {
                return None;
            }
            (null.column(0).into_owned(), None)
        }
        ConstraintKind::NormalizedLaplacian => {
            let (col, _) = degree_column(v, false).ok()?;
            let others: Vec<usize> = (0..n).filter(|&c| c != col).collect();
            let u = Matrix::from_fn(n, n, |i, c| if c == 0 { 1.0 } else { v[(i, others[c - 1])].powi(2) });
            let null = linalg::null_basis(&u, linalg::default_rank_tol(n, n));
            if null.ncols() != 1 || null[(0, 0)].abs() < 1e-12 {
                return None;
            }
            let mu = null.column(0) / -null[(0, 0)];
            let mut lambda = Vector::zeros(n);
            for (c, &k) in others.iter().enumerate() {
                lambda[k] = mu[c + 1];
            }
            (lambda, Some(col))
        }
        ConstraintKind::CombinatorialLaplacian => return None,
    };
    let mut s = crate::diffusion::reconstruct(v, &lambda);
    let mut lambda = lambda;
    if set.kind == ConstraintKind::AdjacencyScaled {
        let sum = s.column(set.scale_node).sum();
        if sum.abs() < 1e-12 {
            return None;
        }
        s /= sum;
        lambda /= sum;
        for i in 0..n {
            s[(i, i)] = 0.0;
        }
    }
    let scale = s.amax().max(1.0);
    let mut relaxed = set.clone();
    relaxed.ordering = None;
    if !graphs::validate_membership(&s, &relaxed, 1e-8 * scale).is_empty() {
        return None;
    }
    Some(GsoEstimate {
        kind: set.gso_kind(),
        s,
        lambda,
        s_prime: None,
        s_bar: None,
        diagnostics: Diagnostics {
            status: Status::Optimal,
            iterations: 0,
            objective_value: 0.0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            max_violation: 0.0,
            polished: false,
            epsilon: None,
            rounds: 0,
            degree_column: degree,
            degree_fallback: false,
        },
    })
}
