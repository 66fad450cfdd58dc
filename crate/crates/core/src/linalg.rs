//! Dense linear-algebra helpers shared by every other module.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which stores entries column-major.
//! Vectorization `vec(S)` is column-major everywhere in this crate, so
//! `vec(S)[i + j * n] == S[(i, j)]` and `khatri_rao(V, V) * λ == vec(Σ λ_k v_k v_kᵀ)`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Environment variable that overrides the relative rank-tolerance factor.
pub const RANK_TOL_ENV: &str = "SPECTEMPO_RANK_TOL";

const DEFAULT_RANK_FACTOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix contains NaN or infinite entries")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("index {index} out of range for universe of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("index set is not strictly increasing")]
    Unsorted,
}

/// Ordered set of indices into a universe `0..size`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexSet {
    indices: Vec<usize>,
    universe: usize,
}

impl IndexSet {
    pub fn new(indices: Vec<usize>, universe: usize) -> Result<Self, LinalgError> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(LinalgError::Unsorted);
            }
        }
        if let Some(&last) = indices.last() {
            if last >= universe {
                return Err(LinalgError::IndexOutOfRange { index: last, size: universe });
            }
        }
        Ok(Self { indices, universe })
    }

    pub fn full(universe: usize) -> Self {
        Self { indices: (0..universe).collect(), universe }
    }

    pub fn empty(universe: usize) -> Self {
        Self { indices: Vec::new(), universe }
    }

    pub fn from_predicate(universe: usize, mut keep: impl FnMut(usize) -> bool) -> Self {
        Self { indices: (0..universe).filter(|&i| keep(i)).collect(), universe }
    }

    pub fn complement(&self) -> Self {
        let mut out = Vec::with_capacity(self.universe - self.indices.len());
        let mut it = self.indices.iter().peekable();
        for i in 0..self.universe {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        Self { indices: out, universe: self.universe }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vector,
    pub vectors: Matrix,
}

pub fn ensure_finite(m: &Matrix) -> Result<(), LinalgError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

pub fn max_asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn sym_eig(m: &Matrix) -> Result<SymEig, LinalgError> {
    ensure_finite(m)?;
    if !m.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "sym_eig needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = max_asymmetry(m);
    if asym > 1e-10 * induced_inf_norm(m) {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(SymEig { values: Vector::zeros(0), vectors: Matrix::zeros(0, 0) });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps original order on exact ties
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = Matrix::from_fn(n, n, |i, c| eig.eigenvectors[(i, order[c])]);
    Ok(SymEig { values, vectors })
}

fn rank_factor() -> f64 {
    static FACTOR: OnceLock<f64> = OnceLock::new();
    *FACTOR.get_or_init(|| {
        std::env::var(RANK_TOL_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v > 0.0)
            .unwrap_or(DEFAULT_RANK_FACTOR)
    })
}

/// Relative rank tolerance used when the caller does not supply one:
/// `1e-8 · max(rows, cols)` unless `SPECTEMPO_RANK_TOL` sets another factor.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    rank_factor() * rows.max(cols).max(1) as f64
}

pub fn singular_values(a: &Matrix) -> Vector {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vector::zeros(0);
    }
    let mut s = SVD::new(a.clone(), false, false).singular_values;
    s.as_mut_slice().sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn numerical_rank(a: &Matrix, rank_tol: f64) -> usize {
    let s = singular_values(a);
    match s.iter().cloned().fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x)))) {
        None => 0,
        Some(smax) if smax == 0.0 => 0,
        Some(smax) => s.iter().filter(|&&x| x > rank_tol * smax).count(),
    }
}

/// Orthonormal basis of the column space, from a thin SVD.
pub fn range_basis(a: &Matrix, rank_tol: f64) -> Matrix {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Matrix::zeros(m, 0);
    }
    let svd = SVD::new(a.clone(), true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Matrix::zeros(m, 0);
    }
    let keep: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > rank_tol * smax).collect();
    Matrix::from_fn(m, keep.len(), |i, c| u[(i, keep[c])])
}

/// Orthonormal basis of the null space `{x : A x = 0}`.
pub fn null_basis(a: &Matrix, rank_tol: f64) -> Matrix {
    let (m, n) = a.shape();
    if n == 0 {
        return Matrix::zeros(0, 0);
    }
    if m == 0 {
        return Matrix::identity(n, n);
    }
    // pad to at least square so the SVD returns a full right basis
    let padded = if m < n {
        let mut p = Matrix::zeros(n, n);
        p.view_mut((0, 0), (m, n)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = SVD::new(padded, false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let null: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&k| smax == 0.0 || svd.singular_values[k] <= rank_tol * smax).collect();
    Matrix::from_fn(n, null.len(), |i, c| vt[(null[c], i)])
}

pub fn pseudo_inverse(a: &Matrix, rank_tol: f64) -> Matrix {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Matrix::zeros(n, m);
    }
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let mut out = Matrix::zeros(n, m);
    if smax == 0.0 {
        return out;
    }
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s > rank_tol * smax {
            let vk = vt.row(k).transpose();
            let uk = u.column(k);
            out += (vk * uk.transpose()) / s;
        }
    }
    out
}

/// Column-wise Kronecker product: column `j` is `kron(a_j, b_j)`.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.ncols() != b.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "khatri_rao needs equal column counts ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    let (na, nb) = (a.nrows(), b.nrows());
    Ok(Matrix::from_fn(na * nb, a.ncols(), |r, j| a[(r / nb, j)] * b[(r % nb, j)]))
}

/// Orthogonal projector onto the kernel of `Wᵀ`, i.e. `I - W W†`.
pub fn kernel_projector(w: &Matrix) -> Matrix {
    let m = w.nrows();
    let basis = range_basis(w, default_rank_tol(w.nrows(), w.ncols()));
    Matrix::identity(m, m) - &basis * basis.transpose()
}

/// `W W†`, the orthogonal projector onto the range of `W`.
pub fn range_projector(w: &Matrix) -> Matrix {
    let basis = range_basis(w, default_rank_tol(w.nrows(), w.ncols()));
    &basis * basis.transpose()
}

/// Maximum absolute row sum (the norm induced by the vector ∞-norm).
pub fn induced_inf_norm(a: &Matrix) -> f64 {
    a.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn spectral_norm(a: &Matrix) -> f64 {
    singular_values(a).iter().cloned().fold(0.0, f64::max)
}

pub fn select_rows(a: &Matrix, idx: &IndexSet) -> Result<Matrix, LinalgError> {
    if idx.universe() != a.nrows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "index universe {} does not match {} rows",
            idx.universe(),
            a.nrows()
        )));
    }
    Ok(select_rows_unchecked(a, idx.as_slice()))
}

pub(crate) fn select_rows_unchecked(a: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), a.ncols(), |r, c| a[(rows[r], c)])
}

pub fn select_columns(a: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(a.nrows(), cols.len(), |r, c| a[(r, cols[c])])
}

/// Position of entry `(i, j)` inside `vec(S)` for an `n × n` matrix.
#[inline]
pub fn vec_index(i: usize, j: usize, n: usize) -> usize {
    i + j * n
}

pub fn vectorize(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &Vector, n: usize) -> Matrix {
    assert_eq!(v.len(), n * n, "vector length must be n^2");
    Matrix::from_column_slice(n, n, v.as_slice())
}

/// Length of the half-vectorization of an `n × n` symmetric matrix.
#[inline]
pub fn half_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(i, j)` in the half-vectorization (lower triangle, column-major).
#[inline]
pub fn half_index(i: usize, j: usize, n: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    j * n - j * j.saturating_sub(1) / 2 + i - j
}

/// Row/column pair for every half-vectorization position.
pub fn half_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|j| (j..n).map(move |i| (i, j))).collect()
}

pub fn half_vectorize(m: &Matrix) -> Vector {
    let n = m.nrows();
    Vector::from_iterator(half_len(n), half_pairs(n).into_iter().map(|(i, j)| 0.5 * (m[(i, j)] + m[(j, i)])))
}

pub fn half_unvectorize(v: &Vector, n: usize) -> Matrix {
    assert_eq!(v.len(), half_len(n), "vector length must be n(n+1)/2");
    let mut m = Matrix::zeros(n, n);
    for (k, (i, j)) in half_pairs(n).into_iter().enumerate() {
        m[(i, j)] = v[k];
        m[(j, i)] = v[k];
    }
    m
}

pub mod io {
    //! Plain-grid CSV and `{rows, cols, data}` JSON encodings of dense matrices.

    use std::io::{Read, Write};

    use serde::{Deserialize, Serialize};

    use super::Matrix;

    #[derive(Debug, thiserror::Error)]
    pub enum MatrixIoError {
        #[error("csv error: {0}")]
        Csv(#[from] csv::Error),
        #[error("io error: {0}")]
        Io(#[from] std::io::Error),
        #[error("json error: {0}")]
        Json(#[from] serde_json::Error),
        #[error("could not parse {value:?} at row {row}")]
        Parse { row: usize, value: String },
        #[error("ragged grid: row {row} has {got} entries, expected {expected}")]
        Ragged { row: usize, got: usize, expected: usize },
        #[error("matrix data has {got} entries, expected {expected}")]
        BadLength { got: usize, expected: usize },
        #[error("non-finite entry in matrix data")]
        NonFinite,
    }

    /// JSON form of a matrix; `data` is row-major.
    #[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
    pub struct MatrixJson {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl From<&Matrix> for MatrixJson {
        fn from(m: &Matrix) -> Self {
            let data = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
            Self { rows: m.nrows(), cols: m.ncols(), data }
        }
    }

    impl TryFrom<MatrixJson> for Matrix {
        type Error = MatrixIoError;

        fn try_from(j: MatrixJson) -> Result<Self, Self::Error> {
            if j.data.len() != j.rows * j.cols {
                return Err(MatrixIoError::BadLength { got: j.data.len(), expected: j.rows * j.cols });
            }
            if j.data.iter().any(|x| !x.is_finite()) {
                return Err(MatrixIoError::NonFinite);
            }
            Ok(Matrix::from_row_slice(j.rows, j.cols, &j.data))
        }
    }

    pub fn write_csv<W: Write>(m: &Matrix, out: W) -> Result<(), MatrixIoError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for r in m.row_iter() {
            w.write_record(r.iter().map(|x| format_float(*x)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a numeric grid; blank lines and lines starting with `#` are skipped.
    pub fn read_csv<R: Read>(input: R) -> Result<Matrix, MatrixIoError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(input);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            let mut row = Vec::with_capacity(rec.len());
            for f in rec.iter() {
                let v: f64 = f.parse().map_err(|_| MatrixIoError::Parse { row: r, value: f.to_string() })?;
                if !v.is_finite() {
                    return Err(MatrixIoError::NonFinite);
                }
                row.push(v);
            }
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(MatrixIoError::Ragged { row: r, got: row.len(), expected: first.len() });
                }
            }
            rows.push(row);
        }
        let cols = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Matrix::from_row_slice(rows.len(), cols, &flat))
    }

    pub fn to_json(m: &Matrix) -> Result<String, MatrixIoError> {
        Ok(serde_json::to_string(&MatrixJson::from(m))?)
    }

    pub fn from_json(s: &str) -> Result<Matrix, MatrixIoError> {
        let j: MatrixJson = serde_json::from_str(s)?;
        Matrix::try_from(j)
    }

    /// Shortest decimal that round-trips exactly.
    pub fn format_float(x: f64) -> String {
        let s = format!("{x}");
        if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
            s
        } else {
            format!("{s}.0")
        }
    }
}
