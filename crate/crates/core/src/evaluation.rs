//! Recovery metrics and baselines (thresholded correlation, network deconvolution).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::SignalEnsemble;
use crate::linalg::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("coordinate {0} has zero sample variance")]
    DegenerateVariance(usize),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("I + T is singular")]
    SingularShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub f_measure: f64,
    pub precision: f64,
    pub recall: f64,
    pub edge_error_l2: f64,
    pub degree_error_l2: f64,
    pub misidentified_fraction: f64,
}

/// Default magnitude above which an entry counts as an edge.
pub const DEFAULT_EDGE_TOL: f64 = 1e-6;

fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
}

fn check_same(a: &Matrix, b: &Matrix) -> Result<usize, EvalError> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(EvalError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(a.nrows())
}

pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn relative(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Support and weight comparison of an estimate against the true shift, over the
/// off-diagonal entries. An empty estimate of an empty graph scores precision and recall 1.
pub fn score(s_hat: &Matrix, s_true: &Matrix, edge_tol: f64) -> Result<RecoveryScore, EvalError> {
    let n = check_same(s_hat, s_true)?;
    let (mut tp, mut pred, mut actual) = (0usize, 0usize, 0usize);
    let (mut diff2, mut true2) = (0.0, 0.0);
    for (i, j) in upper_pairs(n) {
        let h = s_hat[(i, j)].abs() > edge_tol;
        let t = s_true[(i, j)].abs() > edge_tol;
        tp += usize::from(h && t);
        pred += usize::from(h);
        actual += usize::from(t);
        // symmetric entries count twice, matching the full-matrix norm
        diff2 += 2.0 * (s_hat[(i, j)] - s_true[(i, j)]).powi(2);
        true2 += 2.0 * s_true[(i, j)].powi(2);
    }
    let precision = if pred > 0 {
        tp as f64 / pred as f64
    } else if actual == 0 {
        1.0
    } else {
        0.0
    };
    let recall = if actual > 0 { tp as f64 / actual as f64 } else { 1.0 };
    let mismatched = (pred - tp) + (actual - tp);
    let degree = |m: &Matrix, i: usize| (0..n).filter(|&j| j != i).map(|j| m[(i, j)]).sum::<f64>();
    let (mut ddiff, mut dtrue) = (0.0, 0.0);
    for i in 0..n {
        let (a, b) = (degree(s_hat, i), degree(s_true, i));
        ddiff += (a - b).powi(2);
        dtrue += b * b;
    }
    Ok(RecoveryScore {
        f_measure: f_measure(precision, recall),
        precision,
        recall,
        edge_error_l2: relative(diff2.sqrt(), true2.sqrt()),
        degree_error_l2: relative(ddiff.sqrt(), dtrue.sqrt()),
        misidentified_fraction: relative(mismatched as f64, actual as f64),
    })
}

/// Absolute Pearson correlation between coordinates, with a zero diagonal.
pub fn correlation_matrix(x: &SignalEnsemble) -> Result<Matrix, EvalError> {
    let samples = x.samples();
    let (n, p) = samples.shape();
    if p < 2 {
        return Err(EvalError::TooFewSamples(p));
    }
    let mut centered = samples.clone();
    for i in 0..n {
        let mean = centered.row(i).sum() / p as f64;
        centered.row_mut(i).add_scalar_mut(-mean);
    }
    let cov = &centered * centered.transpose();
    let sd: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    if let Some(i) = sd.iter().position(|&s| !(s > 0.0)) {
        return Err(EvalError::DegenerateVariance(i));
    }
    Ok(Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (cov[(i, j)] / (sd[i] * sd[j])).abs().min(1.0) }))
}

/// Zeroes entries below `t`.
pub fn threshold(m: &Matrix, t: f64) -> Matrix {
    m.map(|x| if x.abs() < t { 0.0 } else { x })
}

/// Thresholded absolute sample correlation.
pub fn correlation_baseline(x: &SignalEnsemble, t: f64) -> Result<Matrix, EvalError> {
    Ok(threshold(&correlation_matrix(x)?, t))
}

/// Default threshold grid for the correlation baseline: 0.05, 0.10, …, 0.95.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Picks the threshold with the largest mean F-measure over training pairs
/// `(unthresholded estimate, true shift)`; ties go to the smaller threshold.
pub fn train_threshold(training: &[(Matrix, Matrix)], grid: &[f64]) -> Result<(f64, f64), EvalError> {
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let mut total = 0.0;
        for (est, truth) in training {
            total += score(&threshold(est, t), truth, DEFAULT_EDGE_TOL)?.f_measure;
        }
        let mean = if training.is_empty() { 0.0 } else { total / training.len() as f64 };
        if best.is_none_or(|(_, f)| mean > f) {
            best = Some((t, mean));
        }
    }
    best.ok_or_else(|| EvalError::DimensionMismatch("empty threshold grid".into()))
}

/// Network deconvolution `S = T (I + T)⁻¹`.
pub fn network_deconvolution(t: &Matrix) -> Result<Matrix, EvalError> {
    if !t.is_square() {
        return Err(EvalError::DimensionMismatch(format!("{}x{} is not square", t.nrows(), t.ncols())));
    }
    let n = t.nrows();
    // S = T (I + T)⁻¹ solved as (I + T)ᵀ Sᵀ = Tᵀ
    let lu = (Matrix::identity(n, n) + t).transpose().lu();
    if !lu.is_invertible() {
        return Err(EvalError::SingularShift);
    }
    let st = lu.solve(&t.transpose()).ok_or(EvalError::SingularShift)?;
    if st.iter().any(|x| !x.is_finite()) {
        return Err(EvalError::SingularShift);
    }
    Ok(st.transpose())
}

/// Fraction of true edges among the `k` largest-magnitude predicted entries (upper
/// triangle; equal weights ordered by `(i, j)`).
pub fn top_k_recovery(s_hat: &Matrix, s_true: &Matrix, k: usize) -> Result<f64, EvalError> {
    let n = check_same(s_hat, s_true)?;
    let mut pairs: Vec<(usize, usize)> = upper_pairs(n).collect();
    let total = pairs.iter().filter(|&&(i, j)| s_true[(i, j)] != 0.0).count();
    if total == 0 {
        return Ok(0.0);
    }
    pairs.sort_by(|&a, &b| s_hat[b].abs().total_cmp(&s_hat[a].abs()).then(a.cmp(&b)));
    let hits = pairs.iter().take(k).filter(|&&(i, j)| s_true[(i, j)] != 0.0).count();
    Ok(hits as f64 / total as f64)
}
