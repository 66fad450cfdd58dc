//! Independent LP oracle: weighted-ℓ1 recovery over `s = W λ` with linear side constraints,
//! solved by enumerating the vertices of the epigraph polyhedron in `(t, λ)`.

use nalgebra::{DMatrix, DVector, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectempo::solver::{LinearBound, LinearEquality, Sign, SparseRecoveryProblem};

/// `min cᵀy` subject to `E y = f` and `G y ≤ h`, over a pointed polyhedron.
pub struct InequalityLp {
    pub c: DVector<f64>,
    pub e: Vec<(Vec<f64>, f64)>,
    pub g: Vec<(Vec<f64>, f64)>,
}

fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 {
        return 0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let tol = 1e-9 * sv.max().max(1.0);
    sv.iter().filter(|&&s| s > tol).count()
}

fn combinations(m: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..m {
            if m - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, m, k, cur, f);
            cur.pop();
        }
    }
    rec(0, m, k, &mut Vec::new(), f);
}

impl InequalityLp {
    /// Optimal value over all vertices, or `None` when no vertex is feasible.
    pub fn solve(&self) -> Option<f64> {
        let d = self.c.len();
        let e_mat = DMatrix::from_fn(self.e.len(), d, |r, c| self.e[r].0[c]);
        let need = d - rank(&e_mat);
        let mut best: Option<f64> = None;
        combinations(self.g.len(), need, &mut |active| {
            let rows: Vec<&(Vec<f64>, f64)> = self.e.iter().chain(active.iter().map(|&i| &self.g[i])).collect();
            let a = DMatrix::from_fn(rows.len(), d, |r, c| rows[r].0[c]);
            if rank(&a) < d {
                return;
            }
            let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
            let Ok(y) = SVD::new(a.clone(), true, true).solve(&b, 1e-12) else {
                return;
            };
            if (&a * &y - &b).amax() > 1e-9 {
                return;
            }
            let feasible =
                self.g.iter().all(|(row, h)| row.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() <= h + 1e-9)
                    && self
                        .e
                        .iter()
                        .all(|(row, f)| (row.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() - f).abs() <= 1e-9);
            if feasible {
                let v = self.c.dot(&y);
                if best.is_none_or(|b| v < b) {
                    best = Some(v);
                }
            }
        });
        best
    }
}

/// Rewrites a problem without ball or extra block as an LP in `(t, λ)` with `t ≥ |W λ|`.
pub fn to_lp(p: &SparseRecoveryProblem) -> InequalityLp {
    let (n, k) = p.w.shape();
    let d = n + k;
    let s_row = |i: usize, scale: f64| -> Vec<f64> {
        let mut r = vec![0.0; d];
        for c in 0..k {
            r[n + c] = scale * p.w[(i, c)];
        }
        r
    };
    let s_combo = |terms: &[(usize, f64)]| -> Vec<f64> {
        let mut r = vec![0.0; d];
        for &(i, coef) in terms {
            for c in 0..k {
                r[n + c] += coef * p.w[(i, c)];
            }
        }
        r
    };
    let mut c = DVector::zeros(d);
    for i in 0..n {
        c[i] = p.weights[i];
    }
    let mut g = Vec::new();
    for i in 0..n {
        // s_i - t_i <= 0 and -s_i - t_i <= 0
        let mut up = s_row(i, 1.0);
        up[i] = -1.0;
        g.push((up, 0.0));
        let mut dn = s_row(i, -1.0);
        dn[i] = -1.0;
        g.push((dn, 0.0));
        let (lo, hi) = p.sign[i].bounds();
        if hi.is_finite() {
            g.push((s_row(i, 1.0), hi));
        }
        if lo.is_finite() {
            g.push((s_row(i, -1.0), -lo));
        }
    }
    for b in &p.linear_bounds {
        let r = s_combo(&b.terms);
        if b.hi.is_finite() {
            g.push((r.clone(), b.hi));
        }
        if b.lo.is_finite() {
            g.push((r.iter().map(|x| -x).collect(), -b.lo));
        }
    }
    for &(c_idx, lo) in &p.eigenvalues.lower {
        let mut r = vec![0.0; d];
        r[n + c_idx] = -1.0;
        g.push((r, -lo));
    }
    let mut e = Vec::new();
    for &(i, v) in &p.pins {
        e.push((s_row(i, 1.0), v));
    }
    for eq in &p.linear_equalities {
        e.push((s_combo(&eq.terms), eq.rhs));
    }
    InequalityLp { c, e, g }
}

/// Random feasible instance with `n ≤ 5` entries and a full-column-rank basis.
pub fn random_instance(seed: u64) -> SparseRecoveryProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=5usize);
    let k = rng.random_range(1..=n.min(3));
    let w = loop {
        let w = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        if rank(&w) == k {
            break w;
        }
    };
    let lambda = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    let s = &w * &lambda;
    let mut p = SparseRecoveryProblem::new(w);
    p.weights = (0..n).map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.2..2.0) }).collect();
    p.sign = (0..n)
        .map(|i| match rng.random_range(0..4) {
            0 if s[i] >= 0.0 => Sign::NonNegative,
            0 => Sign::NonPositive,
            1 => Sign::Box { lo: s[i] - rng.random_range(0.0..1.0), hi: s[i] + rng.random_range(0.0..1.0) },
            _ => Sign::Free,
        })
        .collect();
    if k > 1 && rng.random_bool(0.5) {
        let i = rng.random_range(0..n);
        p.pins.push((i, s[i]));
    }
    if rng.random_bool(0.5) {
        let terms: Vec<(usize, f64)> = (0..n).map(|i| (i, rng.random_range(-1.0..1.0))).collect();
        let rhs = terms.iter().map(|&(i, a)| a * s[i]).sum();
        p.linear_equalities.push(LinearEquality::new(terms, rhs));
    }
    if rng.random_bool(0.5) {
        let terms: Vec<(usize, f64)> = (0..n).map(|i| (i, rng.random_range(-1.0..1.0))).collect();
        let v: f64 = terms.iter().map(|&(i, a)| a * s[i]).sum();
        p.linear_bounds.push(LinearBound { terms, lo: v - rng.random_range(0.0..0.5), hi: f64::INFINITY });
    }
    p
}
