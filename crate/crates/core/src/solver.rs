//! Weighted ℓ1 (or ℓ2 / ℓ∞) minimization of a vectorized shift over affine, sign, box,
//! eigenvalue-ordering and Euclidean-ball constraints.
//!
//! The variable is `x = [s; λ; s_extra]`. Equalities are removed once by a null-space
//! parametrization, so the ADMM x-update is a fixed orthogonal projection that does not
//! depend on the penalty `ρ`. Every other term is a proximal block acting on `A x + c`.

use std::ops::Range;

use nalgebra::SVD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, Vector};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("constraints are infeasible (residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("no radius up to {upper:.3e} admits a feasible point")]
    NeverFeasible { upper: f64 },
}

/// Per-entry sign or box constraint on `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Sign {
    Free,
    NonNegative,
    NonPositive,
    Box { lo: f64, hi: f64 },
}

impl Sign {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Sign::Free => (f64::NEG_INFINITY, f64::INFINITY),
            Sign::NonNegative => (0.0, f64::INFINITY),
            Sign::NonPositive => (f64::NEG_INFINITY, 0.0),
            Sign::Box { lo, hi } => (lo, hi),
        }
    }
}

/// `lo ≤ Σ coef · s[index] ≤ hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBound {
    pub terms: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

/// `Σ coef · x[index] = rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEquality {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearEquality {
    pub fn new(terms: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { terms, rhs }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Distance {
    Frobenius,
    /// Spectral norm of the symmetric `n × n` matrix whose half-vectorization is the residual.
    Spectral {
        n: usize,
    },
}

/// `d(s, W λ + s_extra) ≤ radius`, where the residual is scaled entrywise by `metric`.
/// Soft equalities join the ball as extra residual rows instead of being enforced exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub radius: f64,
    pub distance: Distance,
    #[serde(default)]
    pub metric: Vec<f64>,
    #[serde(default)]
    pub soft_equalities: Vec<LinearEquality>,
}

/// `λ_i ≥ λ_j + gap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub i: usize,
    pub j: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueConstraints {
    #[serde(default)]
    pub ordering: Vec<Ordering>,
    #[serde(default)]
    pub pins: Vec<(usize, f64)>,
    #[serde(default)]
    pub lower: Vec<(usize, f64)>,
}

/// A second block `s_extra` (same length as `s`) entering `s = W λ + s_extra`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtraBlock {
    pub equalities: Vec<LinearEquality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRecoveryProblem {
    /// Spectral basis: the target is `s = W λ` (plus `s_extra` when present).
    pub w: Matrix,
    pub weights: Vec<f64>,
    pub pins: Vec<(usize, f64)>,
    pub sign: Vec<Sign>,
    pub linear_equalities: Vec<LinearEquality>,
    #[serde(default)]
    pub linear_bounds: Vec<LinearBound>,
    pub ball: Option<Ball>,
    #[serde(default)]
    pub eigenvalues: EigenvalueConstraints,
    pub extra: Option<ExtraBlock>,
}

impl SparseRecoveryProblem {
    /// Unit weights, no sign constraints and exact coupling `s = W λ`.
    pub fn new(w: Matrix) -> Self {
        let n = w.nrows();
        Self {
            w,
            weights: vec![1.0; n],
            pins: Vec::new(),
            sign: vec![Sign::Free; n],
            linear_equalities: Vec::new(),
            linear_bounds: Vec::new(),
            ball: None,
            eigenvalues: EigenvalueConstraints::default(),
            extra: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidProblem(m));
        let n = self.dim();
        let k = self.k();
        if linalg::ensure_finite(&self.w).is_err() {
            return bad("basis has non-finite entries".into());
        }
        if self.weights.len() != n || self.sign.len() != n {
            return bad(format!("weights/sign must have length {n}"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be finite and non-negative".into());
        }
        for s in &self.sign {
            let (lo, hi) = s.bounds();
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return bad(format!("empty box {s:?}"));
            }
        }
        let check_eq = |e: &LinearEquality, len: usize| {
            e.rhs.is_finite() && e.terms.iter().all(|&(i, c)| i < len && c.is_finite())
        };
        if self.pins.iter().any(|&(i, v)| i >= n || !v.is_finite()) {
            return bad("pin out of range".into());
        }
        if !self.linear_equalities.iter().all(|e| check_eq(e, n)) {
            return bad("linear equality out of range".into());
        }
        if self.linear_bounds.iter().any(|b| {
            b.lo > b.hi || b.lo.is_nan() || b.hi.is_nan() || b.terms.iter().any(|&(i, c)| i >= n || !c.is_finite())
        }) {
            return bad("invalid linear bound".into());
        }
        if let Some(extra) = &self.extra {
            if !extra.equalities.iter().all(|e| check_eq(e, n)) {
                return bad("extra-block equality out of range".into());
            }
        }
        if let Some(ball) = &self.ball {
            if !(ball.radius >= 0.0) || !ball.radius.is_finite() {
                return bad(format!("ball radius must be finite and non-negative, got {}", ball.radius));
            }
            if !ball.metric.is_empty() && ball.metric.len() != n {
                return bad(format!("ball metric must be empty or have length {n}"));
            }
            if !ball.soft_equalities.iter().all(|e| check_eq(e, n)) {
                return bad("soft equality out of range".into());
            }
            if let Distance::Spectral { n: m } = ball.distance {
                if linalg::half_len(m) != n {
                    return bad(format!("spectral distance needs a half-vectorized {m}×{m} layout"));
                }
                if !ball.soft_equalities.is_empty() {
                    return bad("soft equalities are only supported with the Frobenius distance".into());
                }
            }
        }
        let ev = &self.eigenvalues;
        if ev.ordering.iter().any(|o| o.i >= k || o.j >= k || !o.gap.is_finite())
            || ev.pins.iter().any(|&(i, v)| i >= k || !v.is_finite())
            || ev.lower.iter().any(|&(i, v)| i >= k || v.is_nan())
        {
            return bad("eigenvalue constraint out of range".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    WeightedL1,
    /// `½ Σ ω_i s_i²`.
    Frobenius,
    /// `max_i |s_i|`.
    InfNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rho: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub objective: Objective,
    pub residual_balancing: bool,
    pub relaxation: f64,
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rho: 1.0,
            abs_tol: 1e-8,
            rel_tol: 1e-6,
            max_iter: 50_000,
            objective: Objective::WeightedL1,
            residual_balancing: true,
            relaxation: 1.6,
            polish: true,
        }
    }
}

impl SolverOptions {
    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub s: Vector,
    pub lambda: Vector,
    pub s_extra: Option<Vector>,
    pub status: Status,
    pub objective_value: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Largest violation of a sign, box, ordering or ball constraint.
    pub max_violation: f64,
    /// Multipliers of the objective rows (one per entry of `s`); a subgradient of the objective at `s`.
    pub dual_s: Vector,
}

#[derive(Debug, Clone)]
enum BlockKind {
    Separable { weights: Vec<f64>, quadratic: bool, lo: Vec<f64>, hi: Vec<f64> },
    InfNorm,
    Ball { radius: f64 },
    SpectralBall { radius: f64, n: usize, metric: Vec<f64> },
    SquaredNorm,
}

#[derive(Debug, Clone)]
struct Block {
    rows: Range<usize>,
    kind: BlockKind,
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Euclidean projection onto `{x : ‖x‖₁ ≤ r}`.
fn project_l1_ball(v: &[f64], r: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= r {
        return v.to_vec();
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - r) / (k + 1) as f64;
        if m > t {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|&x| soft(x, theta)).collect()
}

impl BlockKind {
    fn prox(&self, v: &mut [f64], rho: f64) {
        match self {
            BlockKind::Separable { weights, quadratic, lo, hi } => {
                for (i, x) in v.iter_mut().enumerate() {
                    let y = if *quadratic { rho * *x / (weights[i] + rho) } else { soft(*x, weights[i] / rho) };
                    *x = y.clamp(lo[i], hi[i]);
                }
            }
            BlockKind::InfNorm => {
                let p = project_l1_ball(v, 1.0 / rho);
                for (x, q) in v.iter_mut().zip(p) {
                    *x -= q;
                }
            }
            BlockKind::Ball { radius } => {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > *radius {
                    let f = if norm > 0.0 { radius / norm } else { 0.0 };
                    v.iter_mut().for_each(|x| *x *= f);
                }
            }
            BlockKind::SpectralBall { radius, n, metric } => {
                let h = Vector::from_iterator(v.len(), v.iter().zip(metric).map(|(x, m)| x / m));
                let mat = linalg::half_unvectorize(&h, *n);
                let eig = linalg::sym_eig(&mat).expect("symmetric by construction");
                if eig.values.iter().any(|l| l.abs() > *radius) {
                    let clipped = eig.values.map(|l| l.clamp(-radius, *radius));
                    let mut scaled = eig.vectors.clone();
                    for (k, mut col) in scaled.column_iter_mut().enumerate() {
                        col *= clipped[k];
                    }
                    let back = linalg::half_vectorize(&(scaled * eig.vectors.transpose()));
                    for (i, x) in v.iter_mut().enumerate() {
                        *x = back[i] * metric[i];
                    }
                }
            }
            BlockKind::SquaredNorm => {
                let f = rho / (1.0 + rho);
                v.iter_mut().for_each(|x| *x *= f);
            }
        }
    }

    fn value(&self, v: &[f64]) -> f64 {
        match self {
            BlockKind::Separable { weights, quadratic, .. } => v
                .iter()
                .zip(weights)
                .map(|(x, w)| {
                    if *quadratic {
                        0.5 * w * x * x
                    } else if *w == 0.0 {
                        0.0
                    } else {
                        w * x.abs()
                    }
                })
                .sum(),
            BlockKind::InfNorm => v.iter().fold(0.0, |a, x| a.max(x.abs())),
            BlockKind::SquaredNorm => 0.5 * v.iter().map(|x| x * x).sum::<f64>(),
            BlockKind::Ball { .. } | BlockKind::SpectralBall { .. } => 0.0,
        }
    }

    fn violation(&self, v: &[f64]) -> f64 {
        match self {
            BlockKind::Separable { lo, hi, .. } => {
                v.iter().enumerate().fold(0.0, |a, (i, &x)| a.max(lo[i] - x).max(x - hi[i]))
            }
            BlockKind::Ball { radius } => (v.iter().map(|x| x * x).sum::<f64>().sqrt() - radius).max(0.0),
            BlockKind::SpectralBall { radius, n, metric } => {
                let h = Vector::from_iterator(v.len(), v.iter().zip(metric).map(|(x, m)| x / m));
                let norm = linalg::spectral_norm(&linalg::half_unvectorize(&h, *n));
                (norm - radius).max(0.0)
            }
            BlockKind::InfNorm | BlockKind::SquaredNorm => 0.0,
        }
    }

    fn is_ball(&self) -> bool {
        matches!(self, BlockKind::Ball { .. } | BlockKind::SpectralBall { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Minimize(Objective),
    /// Minimize the squared ball residual over the remaining constraints.
    Distance,
}

/// Mutable ADMM state carried between solves of the same prepared problem.
#[derive(Debug, Clone)]
pub struct AdmmState {
    z: Vector,
    u: Vector,
    rho: f64,
}

/// A problem with its equality structure factored, ready for repeated solves that only
/// change the objective weights.
#[derive(Debug, Clone)]
pub struct PreparedProblem {
    n_s: usize,
    k: usize,
    has_extra: bool,
    blocks: Vec<Block>,
    a: Matrix,
    c: Vector,
    x0: Vector,
    null: Matrix,
    u_r: Matrix,
    sigma: Vector,
    v_r: Matrix,
    w_base: Vector,
    objective: Option<Objective>,
}

struct AffineSolution {
    x0: Vector,
    null: Matrix,
    residual: f64,
}

fn affine_solution(e: &Matrix, rhs: &Vector) -> AffineSolution {
    let (rows, m) = e.shape();
    if rows == 0 {
        return AffineSolution { x0: Vector::zeros(m), null: Matrix::identity(m, m), residual: 0.0 };
    }
    let padded_rows = rows.max(m);
    let mut ep = Matrix::zeros(padded_rows, m);
    ep.view_mut((0, 0), (rows, m)).copy_from(e);
    let mut rp = Vector::zeros(padded_rows);
    rp.rows_mut(0, rows).copy_from(rhs);
    let svd = SVD::new(ep, true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let tol = linalg::default_rank_tol(rows, m) * smax;
    let mut x0 = Vector::zeros(m);
    let mut null_cols = Vec::new();
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if smax > 0.0 && s > tol {
            let coef = u.column(k).dot(&rp) / s;
            x0 += vt.row(k).transpose() * coef;
        } else {
            null_cols.push(k);
        }
    }
    let null = Matrix::from_fn(m, null_cols.len(), |i, c| vt[(null_cols[c], i)]);
    let residual = (e * &x0 - rhs).amax();
    AffineSolution { x0, null, residual }
}

fn sqnorm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

impl PreparedProblem {
    pub fn new(p: &SparseRecoveryProblem, objective: Objective) -> Result<Self, SolverError> {
        Self::build(p, Mode::Minimize(objective))
    }

    fn build(p: &SparseRecoveryProblem, mode: Mode) -> Result<Self, SolverError> {
        p.validate()?;
        let n_s = p.dim();
        let k = p.k();
        let has_extra = p.extra.is_some();
        let m = n_s + k + if has_extra { n_s } else { 0 };
        let (l0, e0) = (n_s, n_s + k);

        // equality system
        let mut eq_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        for &(i, v) in &p.pins {
            eq_rows.push((vec![(i, 1.0)], v));
        }
        for e in &p.linear_equalities {
            let soft = p.ball.as_ref().is_some_and(|b| b.soft_equalities.contains(e));
            if !soft {
                eq_rows.push((e.terms.clone(), e.rhs));
            }
        }
        if p.ball.is_none() {
            for r in 0..n_s {
                let mut terms = vec![(r, 1.0)];
                for c in 0..k {
                    let wv = p.w[(r, c)];
                    if wv != 0.0 {
                        terms.push((l0 + c, -wv));
                    }
                }
                if has_extra {
                    terms.push((e0 + r, -1.0));
                }
                eq_rows.push((terms, 0.0));
            }
        }
        if let Some(extra) = &p.extra {
            for e in &extra.equalities {
                eq_rows.push((e.terms.iter().map(|&(i, c)| (e0 + i, c)).collect(), e.rhs));
            }
        }
        for &(i, v) in &p.eigenvalues.pins {
            eq_rows.push((vec![(l0 + i, 1.0)], v));
        }
        let mut e_mat = Matrix::zeros(eq_rows.len(), m);
        let mut e_rhs = Vector::zeros(eq_rows.len());
        for (r, (terms, rhs)) in eq_rows.iter().enumerate() {
            for &(i, c) in terms {
                e_mat[(r, i)] += c;
            }
            e_rhs[r] = *rhs;
        }
        let aff = affine_solution(&e_mat, &e_rhs);
        if aff.residual > 1e-6 * (1.0 + e_rhs.amax()) {
            return Err(SolverError::Infeasible { residual: aff.residual });
        }

        // proximal blocks
        let mut a_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let mut blocks = Vec::new();
        let (lo, hi): (Vec<f64>, Vec<f64>) = p.sign.iter().map(|s| s.bounds()).unzip();
        let objective = match mode {
            Mode::Minimize(o) => Some(o),
            Mode::Distance => None,
        };
        let (weights, quadratic) = match objective {
            Some(Objective::WeightedL1) => (p.weights.clone(), false),
            Some(Objective::Frobenius) => (p.weights.clone(), true),
            _ => (vec![0.0; n_s], false),
        };
        for r in 0..n_s {
            a_rows.push((vec![(r, 1.0)], 0.0));
        }
        blocks.push(Block { rows: 0..n_s, kind: BlockKind::Separable { weights, quadratic, lo, hi } });
        if objective == Some(Objective::InfNorm) {
            let start = a_rows.len();
            for r in 0..n_s {
                a_rows.push((vec![(r, 1.0)], 0.0));
            }
            blocks.push(Block { rows: start..a_rows.len(), kind: BlockKind::InfNorm });
        }
        if let Some(ball) = &p.ball {
            let start = a_rows.len();
            let metric: Vec<f64> = if ball.metric.is_empty() { vec![1.0; n_s] } else { ball.metric.clone() };
            for r in 0..n_s {
                let mut terms = vec![(r, metric[r])];
                for c in 0..k {
                    let wv = p.w[(r, c)];
                    if wv != 0.0 {
                        terms.push((l0 + c, -metric[r] * wv));
                    }
                }
                if has_extra {
                    terms.push((e0 + r, -metric[r]));
                }
                a_rows.push((terms, 0.0));
            }
            for e in &ball.soft_equalities {
                a_rows.push((e.terms.clone(), -e.rhs));
            }
            let kind = match (mode, ball.distance) {
                (Mode::Distance, _) => BlockKind::SquaredNorm,
                (_, Distance::Frobenius) => BlockKind::Ball { radius: ball.radius },
                (_, Distance::Spectral { n }) => BlockKind::SpectralBall { radius: ball.radius, n, metric },
            };
            blocks.push(Block { rows: start..a_rows.len(), kind });
        }
        if !p.linear_bounds.is_empty() {
            let start = a_rows.len();
            for b in &p.linear_bounds {
                a_rows.push((b.terms.clone(), 0.0));
            }
            let count = p.linear_bounds.len();
            blocks.push(Block {
                rows: start..a_rows.len(),
                kind: BlockKind::Separable {
                    weights: vec![0.0; count],
                    quadratic: false,
                    lo: p.linear_bounds.iter().map(|b| b.lo).collect(),
                    hi: p.linear_bounds.iter().map(|b| b.hi).collect(),
                },
            });
        }
        let ev = &p.eigenvalues;
        if !ev.ordering.is_empty() || !ev.lower.is_empty() {
            let start = a_rows.len();
            let (mut lo, mut hi) = (Vec::new(), Vec::new());
            for o in &ev.ordering {
                a_rows.push((vec![(l0 + o.i, 1.0), (l0 + o.j, -1.0)], 0.0));
                lo.push(o.gap);
                hi.push(f64::INFINITY);
            }
            for &(i, v) in &ev.lower {
                a_rows.push((vec![(l0 + i, 1.0)], 0.0));
                lo.push(v);
                hi.push(f64::INFINITY);
            }
            let count = lo.len();
            blocks.push(Block {
                rows: start..a_rows.len(),
                kind: BlockKind::Separable { weights: vec![0.0; count], quadratic: false, lo, hi },
            });
        }
        let mut a = Matrix::zeros(a_rows.len(), m);
        let mut c = Vector::zeros(a_rows.len());
        for (r, (terms, off)) in a_rows.iter().enumerate() {
            for &(i, v) in terms {
                a[(r, i)] += v;
            }
            c[r] = *off;
        }

        let w_base = &a * &aff.x0 + &c;
        let reduced = &a * &aff.null;
        let (u_r, sigma, v_r) = if reduced.ncols() == 0 || reduced.nrows() == 0 {
            (Matrix::zeros(a.nrows(), 0), Vector::zeros(0), Matrix::zeros(reduced.ncols(), 0))
        } else {
            let svd = SVD::new(reduced.clone(), true, true);
            let u = svd.u.expect("u requested");
            let vt = svd.v_t.expect("v_t requested");
            let smax = svd.singular_values.max();
            let keep: Vec<usize> =
                (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-10 * smax).collect();
            (
                Matrix::from_fn(u.nrows(), keep.len(), |i, j| u[(i, keep[j])]),
                Vector::from_iterator(keep.len(), keep.iter().map(|&i| svd.singular_values[i])),
                Matrix::from_fn(vt.ncols(), keep.len(), |i, j| vt[(keep[j], i)]),
            )
        };
        Ok(Self { n_s, k, has_extra, blocks, a, c, x0: aff.x0, null: aff.null, u_r, sigma, v_r, w_base, objective })
    }

    /// Dimension of the free (null-space) parametrization.
    pub fn free_dim(&self) -> usize {
        self.null.ncols()
    }

    fn prox_all(blocks: &[Block], v: &mut Vector, rho: f64) {
        for b in blocks {
            b.kind.prox(&mut v.as_mut_slice()[b.rows.clone()], rho);
        }
    }

    fn objective_of(blocks: &[Block], w: &Vector) -> f64 {
        blocks.iter().map(|b| b.kind.value(&w.as_slice()[b.rows.clone()])).sum()
    }

    fn violation_of(blocks: &[Block], w: &Vector) -> f64 {
        blocks.iter().fold(0.0, |a, b| a.max(b.kind.violation(&w.as_slice()[b.rows.clone()])))
    }

    fn with_weights(&self, weights: Option<&[f64]>) -> Result<Vec<Block>, SolverError> {
        let mut blocks = self.blocks.clone();
        if let Some(new) = weights {
            if new.len() != self.n_s || new.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(SolverError::InvalidProblem("replacement weights have the wrong shape".into()));
            }
            if let BlockKind::Separable { weights, .. } = &mut blocks[0].kind {
                if matches!(self.objective, Some(Objective::WeightedL1) | Some(Objective::Frobenius)) {
                    weights.copy_from_slice(new);
                }
            }
        }
        Ok(blocks)
    }

    pub fn solve(&self, o: &SolverOptions, weights: Option<&[f64]>) -> Result<Solution, SolverError> {
        self.solve_warm(o, weights, None).map(|(s, _)| s)
    }

    pub fn solve_warm(
        &self,
        o: &SolverOptions,
        weights: Option<&[f64]>,
        warm: Option<&AdmmState>,
    ) -> Result<(Solution, AdmmState), SolverError> {
        if !(o.rho > 0.0 && o.abs_tol > 0.0 && o.rel_tol > 0.0) {
            return Err(SolverError::InvalidProblem("penalty and tolerances must be positive".into()));
        }
        let blocks = self.with_weights(weights)?;
        self.run(&blocks, o, warm)
    }

    fn run(
        &self,
        blocks: &[Block],
        o: &SolverOptions,
        warm: Option<&AdmmState>,
    ) -> Result<(Solution, AdmmState), SolverError> {
        let p = self.a.nrows();
        let d = self.sigma.len();
        let alpha = o.relaxation.clamp(1.0, 1.9);
        let (mut z, mut u, mut rho) = match warm {
            Some(s) if s.z.len() == p => (s.z.clone(), s.u.clone(), s.rho),
            _ => {
                let mut z = self.w_base.clone();
                Self::prox_all(blocks, &mut z, o.rho);
                (z, Vector::zeros(p), o.rho)
            }
        };
        let ur_t = self.u_r.transpose();
        let uw0 = &ur_t * &self.w_base;
        let mut uz = &ur_t * &z;
        let mut uu = &ur_t * &u;
        let mut q = Vector::zeros(d);
        let mut w = self.w_base.clone();
        let mut status = Status::MaxIter;
        let (mut r_norm, mut s_norm) = (f64::INFINITY, f64::INFINITY);
        let mut iterations = 0;
        let mut plateau_ref = f64::INFINITY;
        let sqrt_p = (p as f64).sqrt();
        let sqrt_d = (d.max(1) as f64).sqrt();
        for it in 1..=o.max_iter {
            iterations = it;
            // x-update: w = A x + c projected onto the affine range
            q.copy_from(&uz);
            q -= &uu;
            q -= &uw0;
            w.copy_from(&self.w_base);
            w.gemv(1.0, &self.u_r, &q, 1.0);
            let uw = &uw0 + &q;

            let z_old_u = uz.clone();
            let mut w_hat = &w * alpha;
            w_hat.axpy(1.0 - alpha, &z, 1.0);
            let mut v = &w_hat + &u;
            Self::prox_all(blocks, &mut v, rho);
            let z_new = v;
            u += &w_hat;
            u -= &z_new;
            z = z_new;
            uz = &ur_t * &z;
            // Uᵀu tracks u without another product: Uᵀŵ = α Uᵀw + (1-α) Uᵀz_old
            uu += &uw * alpha;
            uu.axpy(1.0 - alpha, &z_old_u, 1.0);
            uu -= &uz;
            if it % 200 == 0 {
                uu = &ur_t * &u;
            }

            r_norm = (&w - &z).norm();
            let dz = &uz - &z_old_u;
            s_norm = rho * dz.component_mul(&self.sigma).norm();
            // capped so that an optimal point meets every hard constraint to within 1e-6
            let eps_pri = (sqrt_p * o.abs_tol + o.rel_tol * w.norm().max(z.norm()).max(self.c.norm())).min(5e-7);
            let eps_dual = sqrt_d * o.abs_tol + o.rel_tol * rho * uu.component_mul(&self.sigma).norm();
            if r_norm <= eps_pri && s_norm <= eps_dual {
                status = Status::Optimal;
                break;
            }
            // a stalled residual well above solver precision means the constraints cannot meet;
            // smaller plateaus are slow convergence and run on to the iteration limit
            if it % 1000 == 0 {
                if r_norm > 1e-4 * (1.0 + w.norm()) && r_norm >= 0.99 * plateau_ref && s_norm <= eps_dual {
                    return Err(SolverError::Infeasible { residual: r_norm });
                }
                plateau_ref = r_norm;
            }
            if o.residual_balancing && it % 25 == 0 {
                let rp = r_norm / eps_pri;
                let rd = s_norm / eps_dual;
                if rp > 10.0 * rd {
                    rho *= 2.0;
                    u /= 2.0;
                    uu /= 2.0;
                } else if rd > 10.0 * rp {
                    rho /= 2.0;
                    u *= 2.0;
                    uu *= 2.0;
                }
            }
        }

        let y = if d > 0 { &self.v_r * (q.component_div(&self.sigma)) } else { Vector::zeros(self.null.ncols()) };
        let mut x = &self.x0 + &self.null * y;
        let w_final = &self.a * &x + &self.c;
        let mut objective_value = Self::objective_of(blocks, &w_final);
        let mut max_violation = Self::violation_of(blocks, &w_final);
        let mut polished = false;
        if o.polish && matches!(self.objective, Some(Objective::WeightedL1)) {
            if let Some((xp, obj, viol)) = self.polish(blocks, &x, &z, objective_value) {
                if viol <= max_violation.max(1e-9) {
                    x = xp;
                    objective_value = obj;
                    max_violation = viol;
                    polished = true;
                }
            }
        }
        let n_s = self.n_s;
        let s = x.rows(0, n_s).into_owned();
        let lambda = x.rows(n_s, self.k).into_owned();
        let s_extra = self.has_extra.then(|| x.rows(n_s + self.k, n_s).into_owned());
        let dual_s = u.rows(0, n_s) * rho;
        let sol = Solution {
            s,
            lambda,
            s_extra,
            status,
            objective_value,
            primal_residual: r_norm,
            dual_residual: s_norm,
            iterations,
            polished,
            max_violation,
            dual_s,
        };
        Ok((sol, AdmmState { z, u, rho }))
    }

    /// Snaps onto the face given by the constraints that are exactly active in `z`.
    fn polish(&self, blocks: &[Block], x: &Vector, z: &Vector, objective: f64) -> Option<(Vector, f64, f64)> {
        let mut active = Vec::new();
        for b in blocks {
            match &b.kind {
                BlockKind::Separable { weights, lo, hi, .. } => {
                    for (off, r) in b.rows.clone().enumerate() {
                        let zr = z[r];
                        if zr == lo[off] || zr == hi[off] || (weights[off] > 0.0 && zr == 0.0) {
                            active.push(r);
                        }
                    }
                }
                BlockKind::Ball { radius } | BlockKind::SpectralBall { radius, .. } => {
                    let norm = sqnorm(&z.as_slice()[b.rows.clone()]).sqrt();
                    if b.kind.is_ball() && norm >= radius * (1.0 - 1e-9) {
                        return None;
                    }
                }
                BlockKind::InfNorm | BlockKind::SquaredNorm => return None,
            }
        }
        let d = self.null.ncols();
        if d == 0 {
            return None;
        }
        let a_act = linalg::select_rows_unchecked(&self.a, &active);
        let target = Vector::from_iterator(active.len(), active.iter().map(|&r| z[r] - self.c[r]));
        let b = &a_act * &self.null;
        let t = &target - &a_act * &self.x0;
        let y_hat = self.null.transpose() * (x - &self.x0);
        let y = if active.is_empty() {
            y_hat
        } else {
            let pinv = linalg::pseudo_inverse(&b, 1e-10);
            let y = &y_hat + pinv * (&t - &b * &y_hat);
            if (&b * &y - &t).amax() > 1e-9 * (1.0 + t.amax()) {
                return None;
            }
            y
        };
        let xp = &self.x0 + &self.null * y;
        let wp = &self.a * &xp + &self.c;
        let viol = Self::violation_of(blocks, &wp);
        let obj = Self::objective_of(blocks, &wp);
        if viol > 1e-9 * (1.0 + wp.amax()) || obj > objective + 1e-5 * (1.0 + objective.abs()) {
            return None;
        }
        Some((xp, obj, viol))
    }
}

pub fn solve(p: &SparseRecoveryProblem, o: &SolverOptions) -> Result<Solution, SolverError> {
    PreparedProblem::new(p, o.objective)?.solve(o, None)
}

/// Smallest ball radius for which the remaining constraints can be met: the minimum
/// ball residual over the other constraints.
pub fn feasibility_distance(p: &SparseRecoveryProblem, o: &SolverOptions) -> Result<f64, SolverError> {
    let ball = p.ball.as_ref().ok_or_else(|| SolverError::InvalidProblem("no ball constraint".into()))?;
    let prepared = PreparedProblem::build(p, Mode::Distance)?;
    let (sol, _) = prepared.run(&prepared.blocks, o, None)?;
    let mut x = sol.s.as_slice().to_vec();
    x.extend(sol.lambda.iter());
    if let Some(e) = &sol.s_extra {
        x.extend(e.iter());
    }
    let w = &prepared.a * Vector::from_vec(x) + &prepared.c;
    let rows =
        prepared.blocks.iter().find(|b| matches!(b.kind, BlockKind::SquaredNorm)).expect("ball block").rows.clone();
    let residual = Vector::from_column_slice(&w.as_slice()[rows]);
    Ok(match ball.distance {
        Distance::Frobenius => residual.norm(),
        Distance::Spectral { n } => {
            let metric: Vec<f64> = if ball.metric.is_empty() { vec![1.0; p.dim()] } else { ball.metric.clone() };
            let h = Vector::from_iterator(residual.len(), residual.iter().zip(&metric).map(|(x, m)| x / m));
            linalg::spectral_norm(&linalg::half_unvectorize(&h, n))
        }
    })
}

/// Whether some point meets every constraint with the ball at its current radius (to within 1e-6).
pub fn probe_feasible(p: &SparseRecoveryProblem, o: &SolverOptions) -> bool {
    let Some(ball) = &p.ball else {
        return PreparedProblem::build(p, Mode::Minimize(Objective::WeightedL1)).is_ok();
    };
    match feasibility_distance(p, o) {
        Ok(d) => d - ball.radius < 1e-6,
        Err(_) => false,
    }
}

/// Smallest feasible radius, padded by a relative margin of 1e-3 so the returned radius is
/// strictly feasible. Fails when the minimum exceeds `upper` or the other constraints are
/// inconsistent.
pub fn min_feasible_epsilon(p: &SparseRecoveryProblem, o: &SolverOptions, upper: f64) -> Result<f64, SolverError> {
    let distance = match feasibility_distance(p, o) {
        Ok(d) => d,
        Err(SolverError::Infeasible { .. }) => return Err(SolverError::NeverFeasible { upper }),
        Err(e) => return Err(e),
    };
    if distance > upper {
        return Err(SolverError::NeverFeasible { upper });
    }
    Ok(distance * (1.0 + 1e-3) + 1e-9)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn soft_threshold_and_l1_projection() {
        assert_eq!(soft(3.0, 1.0), 2.0);
        assert_eq!(soft(-3.0, 1.0), -2.0);
        assert_eq!(soft(0.5, 1.0), 0.0);
        let p = project_l1_ball(&[3.0, -1.0, 0.5], 2.0);
        assert_abs_diff_eq!(p.iter().map(|x| x.abs()).sum::<f64>(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], 2.0, epsilon = 1e-12);
        assert_eq!(project_l1_ball(&[0.1, 0.2], 1.0), vec![0.1, 0.2]);
    }

    #[test]
    fn spectral_ball_prox_clips_eigenvalues() {
        let n = 2;
        let metric = vec![1.0, 2f64.sqrt(), 1.0];
        let kind = BlockKind::SpectralBall { radius: 1.0, n, metric: metric.clone() };
        // diag(3, 0.5) in scaled half-vector coordinates
        let mut v = vec![3.0, 0.0, 0.5];
        kind.prox(&mut v, 1.0);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 0.5, epsilon = 1e-12);
        assert!(kind.violation(&v) < 1e-12);
    }

    /// Minimize |x₁| + |x₂| subject to x₁ + x₂ = 1, x ≥ 0 in a one-dimensional basis-free form.
    #[test]
    fn simple_lp() {
        let mut p = SparseRecoveryProblem::new(Matrix::identity(3, 3));
        p.sign = vec![Sign::NonNegative; 3];
        p.weights = vec![1.0, 2.0, 3.0];
        p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0), (1, 1.0), (2, 1.0)], 1.0));
        p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0), (1, -1.0)], 0.0));
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, Status::Optimal);
        assert_abs_diff_eq!(sol.s, Vector::from_vec(vec![0.5, 0.5, 0.0]), epsilon = 1e-9);
        assert_abs_diff_eq!(sol.objective_value, 1.5, epsilon = 1e-9);
    }

    #[test]
    fn linear_bounds_are_enforced() {
        let mut p = SparseRecoveryProblem::new(Matrix::identity(2, 2));
        p.sign = vec![Sign::NonNegative; 2];
        p.linear_bounds.push(LinearBound { terms: vec![(0, 1.0), (1, 2.0)], lo: 1.0, hi: f64::INFINITY });
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.s, Vector::from_vec(vec![0.0, 0.5]), epsilon = 1e-9);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let mut p = SparseRecoveryProblem::new(Matrix::identity(2, 2));
        p.pins = vec![(0, 1.0)];
        p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0)], 2.0));
        assert!(matches!(solve(&p, &SolverOptions::default()), Err(SolverError::Infeasible { .. })));
    }

    #[test]
    fn sign_conflicts_are_infeasible() {
        let mut p = SparseRecoveryProblem::new(Matrix::identity(2, 2));
        p.sign = vec![Sign::NonNegative; 2];
        p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0), (1, 1.0)], -1.0));
        let out = solve(&p, &SolverOptions::default());
        assert!(matches!(out, Err(SolverError::Infeasible { .. })), "{out:?}");
    }

    #[test]
    fn objectives_agree_on_singletons() {
        let mut p = SparseRecoveryProblem::new(Matrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]));
        p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0), (1, 1.0)], 3.0));
        for obj in [Objective::WeightedL1, Objective::Frobenius, Objective::InfNorm] {
            let sol = solve(&p, &SolverOptions::default().with_objective(obj)).unwrap();
            assert_abs_diff_eq!(sol.s, Vector::from_vec(vec![1.0, 2.0, -1.0]), epsilon = 1e-9);
            assert_abs_diff_eq!(sol.lambda[0], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn frobenius_and_inf_objectives() {
        // s = λ₁ (1, 0, 1) + λ₂ (0, 1, 1), with s₂ + s₃... pinned through s₀ + s₁ = 2
        let w = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mut p = SparseRecoveryProblem::new(w);
        p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0), (1, 1.0)], 2.0));
        let fro = solve(&p, &SolverOptions::default().with_objective(Objective::Frobenius)).unwrap();
        assert_abs_diff_eq!(fro.s, Vector::from_vec(vec![1.0, 1.0, 2.0]), epsilon = 1e-6);
        let inf = solve(&p, &SolverOptions::default().with_objective(Objective::InfNorm)).unwrap();
        assert_abs_diff_eq!(inf.objective_value, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn ball_relaxation_is_monotone() {
        let w = Matrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let mut p = SparseRecoveryProblem::new(w);
        p.pins = vec![(0, 1.0)];
        let exact = solve(&p, &SolverOptions::default()).unwrap();
        assert_abs_diff_eq!(exact.objective_value, 3.0, epsilon = 1e-7);
        let mut prev = f64::INFINITY;
        for eps in [0.0, 0.1, 0.5, 1.0, 2.0] {
            p.ball = Some(Ball { radius: eps, distance: Distance::Frobenius, metric: vec![], soft_equalities: vec![] });
            let sol = solve(&p, &SolverOptions::default()).unwrap();
            assert!(sol.objective_value <= prev + 1e-6, "ε={eps}: {} > {prev}", sol.objective_value);
            assert!(sol.max_violation < 1e-6, "ε={eps}: {sol:?}");
            prev = sol.objective_value;
        }
        // with a large ball only the pin remains: ‖s‖₁ = 1
        assert_abs_diff_eq!(prev, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn feasibility_distance_matches_projection() {
        // s pinned to (1, 0); the span of (1, 1) is at distance 1/√2
        let w = Matrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let mut p = SparseRecoveryProblem::new(w);
        p.pins = vec![(0, 1.0), (1, 0.0)];
        p.ball = Some(Ball { radius: 0.1, distance: Distance::Frobenius, metric: vec![], soft_equalities: vec![] });
        let o = SolverOptions::default();
        let d = feasibility_distance(&p, &o).unwrap();
        assert_abs_diff_eq!(d, 0.5f64.sqrt(), epsilon = 1e-6);
        assert!(!probe_feasible(&p, &o));
        let eps = min_feasible_epsilon(&p, &o, 10.0).unwrap();
        assert!(eps >= d && eps < d * 1.002);
        p.ball.as_mut().unwrap().radius = eps;
        assert!(probe_feasible(&p, &o));
        assert!(matches!(min_feasible_epsilon(&p, &o, 0.5), Err(SolverError::NeverFeasible { .. })));
    }

    #[test]
    fn problem_json_round_trip() {
        let mut p = SparseRecoveryProblem::new(Matrix::from_row_slice(2, 1, &[1.0, 2.0]));
        p.sign[0] = Sign::Box { lo: -1.0, hi: 0.5 };
        p.eigenvalues.ordering.push(Ordering { i: 0, j: 0, gap: 0.0 });
        p.ball =
            Some(Ball { radius: 0.5, distance: Distance::Spectral { n: 1 }, metric: vec![], soft_equalities: vec![] });
        let back = SparseRecoveryProblem::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn determinism() {
        let mut p = SparseRecoveryProblem::new(Matrix::from_row_slice(3, 2, &[1.0, 0.3, 0.2, 1.0, 0.5, -0.4]));
        p.linear_equalities.push(LinearEquality::new(vec![(0, 1.0), (2, 1.0)], 1.0));
        p.sign = vec![Sign::NonNegative; 3];
        let o = SolverOptions { polish: false, max_iter: 137, ..Default::default() };
        let a = solve(&p, &o).unwrap();
        let b = solve(&p, &o).unwrap();
        assert_eq!(a, b);
    }
}
