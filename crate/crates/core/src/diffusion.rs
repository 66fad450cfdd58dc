//! Graph filters, diffused signals, sample covariances and spectral templates.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::Gso;
use crate::linalg::{self, LinalgError, Matrix, Vector};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("filter needs at least one coefficient")]
    EmptyCoefficients,
    #[error("spectral filter needs a full basis ({k} of {n} templates given)")]
    IncompleteBasis { k: usize, n: usize },
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("an ensemble needs at least one sample")]
    NoSamples,
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("covariance is not symmetric positive semidefinite: {0}")]
    NotCovariance(String),
    #[error("templates are not orthonormal (‖VᵀV − I‖ = {0:.3e})")]
    NotOrthonormal(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    MatrixIo(#[from] linalg::io::MatrixIoError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum FilterForm {
    Polynomial { coefficients: Vec<f64> },
    Spectral,
    PrecisionRoot { delta: f64 },
    Exponential,
    ArDiffusion,
    InverseLaplacianRoot,
}

/// A linear shift-invariant filter, stored densely together with its frequency response.
#[derive(Debug, Clone)]
pub struct GraphFilter {
    pub form: FilterForm,
    /// Dense filter matrix `H`.
    pub matrix: Matrix,
    /// Orthonormal eigenbasis shared with the shift.
    pub basis: Matrix,
    /// Frequency response: `H = basis · diag(response) · basisᵀ`.
    pub response: Vector,
}

impl GraphFilter {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// Power spectral density `|response|²` per frequency.
    pub fn psd(&self) -> Vector {
        self.response.map(|x| x * x)
    }
}

pub fn psd(f: &GraphFilter) -> Vector {
    f.psd()
}

fn from_spectrum(form: FilterForm, basis: Matrix, response: Vector) -> GraphFilter {
    let matrix = reconstruct(&basis, &response);
    GraphFilter { form, matrix, basis, response }
}

/// `V diag(d) Vᵀ`, symmetrized.
pub fn reconstruct(v: &Matrix, d: &Vector) -> Matrix {
    let mut scaled = v.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= d[k];
    }
    let m = scaled * v.transpose();
    (&m + m.transpose()) * 0.5
}

/// `H = Σ_l h_l S^l`, evaluated by Horner's rule.
pub fn polynomial_filter(s: &Gso, h: &[f64]) -> Result<GraphFilter, DiffusionError> {
    if h.is_empty() {
        return Err(DiffusionError::EmptyCoefficients);
    }
    let n = s.n();
    let eye = Matrix::identity(n, n);
    let mut acc = &eye * h[h.len() - 1];
    for &c in h.iter().rev().skip(1) {
        acc = &s.matrix * acc + &eye * c;
    }
    let eig = linalg::sym_eig(&s.matrix)?;
    let response = eig.values.map(|l| h.iter().rev().fold(0.0, |a, &c| a * l + c));
    Ok(GraphFilter {
        form: FilterForm::Polynomial { coefficients: h.to_vec() },
        matrix: (&acc + acc.transpose()) * 0.5,
        basis: eig.vectors,
        response,
    })
}

/// `H = V diag(ĥ) Vᵀ` on a full template basis.
pub fn spectral_filter(t: &SpectralTemplates, h: &[f64]) -> Result<GraphFilter, DiffusionError> {
    if t.k() != t.n() {
        return Err(DiffusionError::IncompleteBasis { k: t.k(), n: t.n() });
    }
    if h.len() != t.n() {
        return Err(DiffusionError::LengthMismatch { expected: t.n(), got: h.len() });
    }
    Ok(from_spectrum(FilterForm::Spectral, t.v.clone(), Vector::from_column_slice(h)))
}

/// `H = (δI + S)^{-1/2}` with `δ = max(0, -λ_min(S)) + margin`.
pub fn precision_root_filter(s: &Gso, margin: f64) -> Result<GraphFilter, DiffusionError> {
    if !(margin > 0.0) {
        return Err(DiffusionError::BadParameter(format!("margin must be positive, got {margin}")));
    }
    let eig = linalg::sym_eig(&s.matrix)?;
    let lmin = eig.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let delta = (-lmin).max(0.0) + margin;
    let response = eig.values.map(|l| 1.0 / (delta + l).sqrt());
    Ok(from_spectrum(FilterForm::PrecisionRoot { delta }, eig.vectors, response))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothModel {
    /// Covariance `L†`.
    InverseLaplacianRoot,
    /// `x = (I + L)^{-1} w`.
    ArDiffusion,
    /// `x = exp(-L) w`.
    Exponential,
}

/// Filters that produce smooth signals on a Laplacian `l`.
pub fn smooth_signal_model(l: &Gso, model: SmoothModel) -> Result<GraphFilter, DiffusionError> {
    let eig = linalg::sym_eig(&l.matrix)?;
    let scale = eig.values.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let (form, response) = match model {
        SmoothModel::InverseLaplacianRoot => {
            (FilterForm::InverseLaplacianRoot, eig.values.map(|x| if x > 1e-10 * scale { 1.0 / x.sqrt() } else { 0.0 }))
        }
        SmoothModel::ArDiffusion => (FilterForm::ArDiffusion, eig.values.map(|x| 1.0 / (1.0 + x))),
        SmoothModel::Exponential => (FilterForm::Exponential, eig.values.map(|x| (-x).exp())),
    };
    Ok(from_spectrum(form, eig.vectors, response))
}

/// Frequency response with entries drawn uniformly from `[lo, hi]`.
pub fn random_response<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let dist = Uniform::new_inclusive(lo, hi).expect("lo <= hi");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Polynomial coefficients: degree uniform in `[min_degree, max_degree]`, coefficients `N(0, std²)`.
pub fn random_polynomial<R: Rng + ?Sized>(min_degree: usize, max_degree: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let degree = rng.random_range(min_degree..=max_degree);
    (0..=degree).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `P` signals of dimension `n`, stored as the columns of an `n × P` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalEnsemble {
    samples: Matrix,
}

impl SignalEnsemble {
    pub fn new(samples: Matrix) -> Result<Self, DiffusionError> {
        if samples.ncols() == 0 {
            return Err(DiffusionError::NoSamples);
        }
        linalg::ensure_finite(&samples)?;
        Ok(Self { samples })
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    /// CSV with one sample per row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DiffusionError> {
        Ok(linalg::io::write_csv(&self.samples.transpose(), out)?)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DiffusionError> {
        Self::new(linalg::io::read_csv(input)?.transpose())
    }
}

fn white<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

/// Draws `P` outputs `H w` with white Gaussian input `w`.
pub fn diffuse<R: Rng + ?Sized>(h: &GraphFilter, p: usize, rng: &mut R) -> Result<SignalEnsemble, DiffusionError> {
    if p == 0 {
        return Err(DiffusionError::NoSamples);
    }
    let w = white(h.n(), p, rng);
    SignalEnsemble::new(&h.matrix * w)
}

/// Multiplicative noise: `x̂_i = x_i (1 + σ z_i)`.
pub fn perturb<R: Rng + ?Sized>(x: &SignalEnsemble, sigma: f64, rng: &mut R) -> Result<SignalEnsemble, DiffusionError> {
    if !(sigma >= 0.0) {
        return Err(DiffusionError::BadParameter(format!("noise level must be non-negative, got {sigma}")));
    }
    let z = white(x.n(), x.len(), rng);
    SignalEnsemble::new(x.samples.zip_map(&z, |a, b| a * (1.0 + sigma * b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub c: Matrix,
    /// Number of samples behind the estimate; 0 for an exact covariance.
    pub samples: usize,
}

impl CovarianceEstimate {
    pub fn new(c: Matrix, samples: usize) -> Result<Self, DiffusionError> {
        if !c.is_square() {
            return Err(DiffusionError::NotCovariance("not square".into()));
        }
        linalg::ensure_finite(&c)?;
        let scale = linalg::induced_inf_norm(&c).max(f64::MIN_POSITIVE);
        if linalg::max_asymmetry(&c) > 1e-10 * scale.max(1.0) {
            return Err(DiffusionError::NotCovariance("not symmetric".into()));
        }
        let c = (&c + c.transpose()) * 0.5;
        if c.nrows() > 0 {
            let eig = linalg::sym_eig(&c)?;
            let lmax = eig.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let lmin = eig.values.min();
            if lmin < -1e-8 * lmax {
                return Err(DiffusionError::NotCovariance(format!("negative eigenvalue {lmin:.3e}")));
            }
        }
        Ok(Self { c, samples })
    }

    /// Output covariance `H Hᵀ` of a filter driven by white noise.
    pub fn exact(h: &GraphFilter) -> Self {
        Self { c: reconstruct(&h.basis, &h.psd()), samples: 0 }
    }
}

/// `(1/P) Σ x_p x_pᵀ`, with no centering.
pub fn sample_covariance(x: &SignalEnsemble) -> CovarianceEstimate {
    let c = &x.samples * x.samples.transpose() / x.len() as f64;
    CovarianceEstimate { c: (&c + c.transpose()) * 0.5, samples: x.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Provenance {
    Exact,
    SampleCovariance { samples: usize },
    File,
}

/// Orthonormal eigenvector templates, ordered by descending eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTemplates {
    pub v: Matrix,
    pub eigenvalues: Vector,
    /// Partition of the columns into runs of (numerically) repeated eigenvalues.
    pub groups: Vec<Vec<usize>>,
    pub provenance: Provenance,
}

pub const DEFAULT_GROUP_TOL: f64 = 1e-6;

/// Flips each column so its largest-magnitude entry is positive (first index wins near-ties).
pub fn normalize_signs(v: &mut Matrix) {
    for mut col in v.column_iter_mut() {
        let m = col.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if m == 0.0 {
            continue;
        }
        let lead = col.iter().position(|x| x.abs() >= m * (1.0 - 1e-9)).unwrap_or(0);
        if col[lead] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Groups consecutive (descending) eigenvalues whose relative gap is below `tol`.
pub fn eigenvalue_groups(values: &Vector, tol: f64) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for k in 0..values.len() {
        let joins = k > 0 && {
            let (a, b) = (values[k - 1], values[k]);
            let denom = a.abs().max(b.abs());
            denom == 0.0 || (a - b).abs() / denom < tol
        };
        match groups.last_mut() {
            Some(g) if joins => g.push(k),
            _ => groups.push(vec![k]),
        }
    }
    groups
}

impl SpectralTemplates {
    pub fn new(v: Matrix, eigenvalues: Vector, provenance: Provenance, group_tol: f64) -> Result<Self, DiffusionError> {
        if eigenvalues.len() != v.ncols() {
            return Err(DiffusionError::LengthMismatch { expected: v.ncols(), got: eigenvalues.len() });
        }
        if v.ncols() > v.nrows() {
            return Err(DiffusionError::BadParameter("more templates than nodes".into()));
        }
        linalg::ensure_finite(&v)?;
        let gram_err = (v.transpose() * &v - Matrix::identity(v.ncols(), v.ncols())).abs().max();
        if gram_err > 1e-8 {
            return Err(DiffusionError::NotOrthonormal(gram_err));
        }
        let groups = eigenvalue_groups(&eigenvalues, group_tol);
        Ok(Self { v, eigenvalues, groups, provenance })
    }

    /// Exact eigenvectors of a shift, ordered by descending eigenvalue of the shift.
    pub fn from_gso(s: &Gso) -> Result<Self, DiffusionError> {
        let eig = linalg::sym_eig(&s.matrix)?;
        let mut v = eig.vectors;
        normalize_signs(&mut v);
        let groups = eigenvalue_groups(&eig.values, DEFAULT_GROUP_TOL);
        Ok(Self { v, eigenvalues: eig.values, groups, provenance: Provenance::Exact })
    }

    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn k(&self) -> usize {
        self.v.ncols()
    }

    pub fn is_complete(&self) -> bool {
        self.k() == self.n()
    }

    /// True when every eigenvalue group is a singleton.
    pub fn is_distinct(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    /// Keeps the given columns (in the given order).
    pub fn select(&self, cols: &[usize]) -> Self {
        let v = linalg::select_columns(&self.v, cols);
        let eigenvalues = Vector::from_iterator(cols.len(), cols.iter().map(|&c| self.eigenvalues[c]));
        let groups = eigenvalue_groups(&eigenvalues, 0.0);
        Self { v, eigenvalues, groups, provenance: self.provenance }
    }

    /// Columns whose eigenvalue is not repeated.
    pub fn singleton_columns(&self) -> Vec<usize> {
        self.groups.iter().filter(|g| g.len() == 1).map(|g| g[0]).collect()
    }

    /// Writes `V` as a CSV grid and returns the sidecar JSON.
    pub fn write<W: Write>(&self, grid: W) -> Result<String, DiffusionError> {
        linalg::io::write_csv(&self.v, grid)?;
        let side = TemplateSidecar {
            eigenvalues: self.eigenvalues.iter().cloned().collect(),
            groups: self.groups.clone(),
            provenance: self.provenance,
        };
        Ok(serde_json::to_string_pretty(&side)?)
    }

    /// Reads a CSV grid plus an optional sidecar; without one, eigenvalues default to zero
    /// and every column is its own group.
    pub fn read<R: Read>(grid: R, sidecar: Option<&str>) -> Result<Self, DiffusionError> {
        let v = linalg::io::read_csv(grid)?;
        let k = v.ncols();
        let (eigenvalues, groups, provenance) = match sidecar {
            Some(s) => {
                let side: TemplateSidecar = serde_json::from_str(s)?;
                if side.eigenvalues.len() != k {
                    return Err(DiffusionError::LengthMismatch { expected: k, got: side.eigenvalues.len() });
                }
                let mut seen: Vec<usize> = side.groups.iter().flatten().cloned().collect();
                seen.sort_unstable();
                if seen != (0..k).collect::<Vec<_>>() {
                    return Err(DiffusionError::BadParameter("groups must partition the columns".into()));
                }
                (Vector::from_vec(side.eigenvalues), side.groups, side.provenance)
            }
            None => (Vector::zeros(k), (0..k).map(|c| vec![c]).collect(), Provenance::File),
        };
        let mut t = Self::new(v, eigenvalues, provenance, 0.0)?;
        t.groups = groups;
        Ok(t)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TemplateSidecar {
    eigenvalues: Vec<f64>,
    groups: Vec<Vec<usize>>,
    provenance: Provenance,
}

/// Eigenvectors of a covariance, ordered by descending eigenvalue and sign-normalized.
pub fn extract_templates(c: &CovarianceEstimate, group_tol: f64) -> Result<SpectralTemplates, DiffusionError> {
    let eig = linalg::sym_eig(&c.c)?;
    let mut v = eig.vectors;
    normalize_signs(&mut v);
    let provenance =
        if c.samples == 0 { Provenance::Exact } else { Provenance::SampleCovariance { samples: c.samples } };
    let groups = eigenvalue_groups(&eig.values, group_tol);
    Ok(SpectralTemplates { v, eigenvalues: eig.values, groups, provenance })
}

/// `|⟨a_k, b_k⟩|` for each column pair.
pub fn column_alignment(a: &Matrix, b: &Matrix) -> Vec<f64> {
    a.column_iter().zip(b.column_iter()).map(|(x, y)| x.dot(&y).abs()).collect()
}
