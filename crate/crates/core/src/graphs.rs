//! Undirected graphs, their shift operators, random generators and the
//! admissible-shift constraint sets.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({i}, {j}) is invalid for a graph on {n} nodes")]
    BadEdge { i: usize, j: usize, n: usize },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge ({0}, {1}) has zero or non-finite weight")]
    BadWeight(usize, usize),
    #[error("node {0} is isolated; the normalized Laplacian is undefined")]
    IsolatedNode(usize),
    #[error("bad generator parameters: {0}")]
    BadParameters(String),
    #[error("no template has entries of a single sign")]
    NoneFound,
    #[error("{0} templates have entries of a single sign")]
    Ambiguous(usize),
    #[error("matrix is not a valid shift: {0}")]
    BadMatrix(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

/// Weighted undirected graph without self-loops; edges are stored with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<Edge>,
}

impl Graph {
    /// Builds a graph, normalizing each edge to `i < j` and sorting the edge list.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self, GraphError> {
        let mut map = BTreeMap::new();
        for (a, b, w) in edges {
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            if i == j || j >= n {
                return Err(GraphError::BadEdge { i: a, j: b, n });
            }
            if w == 0.0 || !w.is_finite() {
                return Err(GraphError::BadWeight(i, j));
            }
            if map.insert((i, j), w).is_some() {
                return Err(GraphError::DuplicateEdge(i, j));
            }
        }
        let edges = map.into_iter().map(|((i, j), w)| Edge { i, j, w }).collect();
        Ok(Self { n, edges })
    }

    pub fn empty(n: usize) -> Self {
        Self { n, edges: Vec::new() }
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| Edge { i, j, w: 1.0 })).collect();
        Self { n, edges }
    }

    pub fn path(n: usize) -> Self {
        Self { n, edges: (1..n).map(|j| Edge { i: j - 1, j, w: 1.0 }).collect() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for e in &self.edges {
            d[e.i] += e.w;
            d[e.j] += e.w;
        }
        d
    }

    pub fn neighbor_counts(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for e in &self.edges {
            d[e.i] += 1;
            d[e.j] += 1;
        }
        d
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.n];
        for e in &self.edges {
            adj[e.i].push(e.j);
            adj[e.j].push(e.i);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Reads the support of a symmetric matrix: every off-diagonal `|S_ij| > tol` becomes an edge.
    pub fn from_matrix(s: &Matrix, tol: f64) -> Result<Self, GraphError> {
        if !s.is_square() {
            return Err(GraphError::BadMatrix("not square".into()));
        }
        let n = s.nrows();
        let asym = linalg::max_asymmetry(s);
        if asym > 1e-9 * (1.0 + linalg::induced_inf_norm(s)) {
            return Err(GraphError::BadMatrix(format!("asymmetric by {asym:.3e}")));
        }
        let mut edges = Vec::new();
        for j in 0..n {
            for i in 0..j {
                let w = 0.5 * (s[(i, j)] + s[(j, i)]);
                if w.abs() > tol {
                    edges.push((i, j, w));
                }
            }
        }
        Self::new(n, edges)
    }

    pub fn to_json(&self) -> Result<String, GraphError> {
        Ok(serde_json::to_string(&GraphJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        let g: GraphJson = serde_json::from_str(s)?;
        Self::new(g.n, g.edges.into_iter().map(|[i, j, w]| (i as usize, j as usize, w)))
    }

    /// Edge-list CSV: a `# n=<N>` header line, then `i,j,w` rows.
    pub fn write_edge_csv<W: Write>(&self, mut out: W) -> Result<(), GraphError> {
        writeln!(out, "# n={}", self.n)?;
        for e in &self.edges {
            writeln!(out, "{},{},{}", e.i, e.j, linalg::io::format_float(e.w))?;
        }
        Ok(())
    }

    pub fn read_edge_csv<R: BufRead>(input: R) -> Result<Self, GraphError> {
        let mut n = None;
        let mut edges = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("n=") {
                    n = Some(v.trim().parse::<usize>().map_err(|e| GraphError::Parse(format!("line {lineno}: {e}")))?);
                }
                continue;
            }
            let parts: Vec<&str> = t.split(',').map(str::trim).collect();
            if parts.len() < 2 || parts.len() > 3 {
                return Err(GraphError::Parse(format!("line {lineno}: expected i,j[,w]")));
            }
            let i = parts[0].parse::<usize>().map_err(|e| GraphError::Parse(format!("line {lineno}: {e}")))?;
            let j = parts[1].parse::<usize>().map_err(|e| GraphError::Parse(format!("line {lineno}: {e}")))?;
            let w = match parts.get(2) {
                Some(w) => w.parse::<f64>().map_err(|e| GraphError::Parse(format!("line {lineno}: {e}")))?,
                None => 1.0,
            };
            edges.push((i, j, w));
        }
        let n = n.ok_or_else(|| GraphError::Parse("missing '# n=<N>' header".into()))?;
        Self::new(n, edges)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<[f64; 3]>,
}

impl From<&Graph> for GraphJson {
    fn from(g: &Graph) -> Self {
        Self { n: g.n, edges: g.edges.iter().map(|e| [e.i as f64, e.j as f64, e.w]).collect() }
    }
}

impl<'de> Deserialize<'de> for Graph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let g = GraphJson::deserialize(d)?;
        let mut edges = Vec::with_capacity(g.edges.len());
        for [i, j, w] in g.edges {
            if i < 0.0 || j < 0.0 || i.fract() != 0.0 || j.fract() != 0.0 {
                return Err(serde::de::Error::custom("edge endpoints must be non-negative integers"));
            }
            edges.push((i as usize, j as usize, w));
        }
        Graph::new(g.n, edges).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Graph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraphJson::from(self).serialize(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GsoKind {
    Adjacency,
    NormalizedLaplacian,
    CombinatorialLaplacian,
}

/// A graph-shift operator: a symmetric matrix carrying a graph's sparsity pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Gso {
    pub kind: GsoKind,
    pub matrix: Matrix,
}

impl Gso {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn to_graph(&self, tol: f64) -> Result<Graph, GraphError> {
        let mut g = Graph::from_matrix(&self.matrix, tol)?;
        if self.kind != GsoKind::Adjacency {
            for e in &mut g.edges {
                e.w = -e.w;
            }
        }
        Ok(g)
    }
}

pub fn adjacency(g: &Graph) -> Gso {
    let mut a = Matrix::zeros(g.n, g.n);
    for e in &g.edges {
        a[(e.i, e.j)] = e.w;
        a[(e.j, e.i)] = e.w;
    }
    Gso { kind: GsoKind::Adjacency, matrix: a }
}

pub fn combinatorial_laplacian(g: &Graph) -> Gso {
    let a = adjacency(g).matrix;
    let d = g.degrees();
    let l = Matrix::from_diagonal(&linalg::Vector::from_vec(d)) - a;
    Gso { kind: GsoKind::CombinatorialLaplacian, matrix: l }
}

pub fn normalized_laplacian(g: &Graph) -> Result<Gso, GraphError> {
    let d = g.degrees();
    if let Some(i) = d.iter().position(|&x| x <= 0.0) {
        return Err(GraphError::IsolatedNode(i));
    }
    let inv_sqrt: Vec<f64> = d.iter().map(|x| 1.0 / x.sqrt()).collect();
    let mut l = Matrix::identity(g.n, g.n);
    for e in &g.edges {
        let v = -e.w * inv_sqrt[e.i] * inv_sqrt[e.j];
        l[(e.i, e.j)] = v;
        l[(e.j, e.i)] = v;
    }
    Ok(Gso { kind: GsoKind::NormalizedLaplacian, matrix: l })
}

pub fn gso(g: &Graph, kind: GsoKind) -> Result<Gso, GraphError> {
    match kind {
        GsoKind::Adjacency => Ok(adjacency(g)),
        GsoKind::NormalizedLaplacian => normalized_laplacian(g),
        GsoKind::CombinatorialLaplacian => Ok(combinatorial_laplacian(g)),
    }
}

/// Erdős–Rényi graph: every unordered pair is an edge independently with probability `p`.
pub fn generate_er<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Graph, GraphError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::BadParameters(format!("edge probability {p} outside [0, 1]")));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push(Edge { i, j, w: 1.0 });
            }
        }
    }
    Ok(Graph { n, edges })
}

/// Barabási–Albert preferential attachment grown from a complete seed graph on `m0` nodes.
/// Every new node picks `m` distinct existing targets with probability proportional to degree.
pub fn generate_ba<R: Rng + ?Sized>(n: usize, m0: usize, m: usize, rng: &mut R) -> Result<Graph, GraphError> {
    if m0 == 0 || m > m0 || m0 > n {
        return Err(GraphError::BadParameters(format!("need 1 <= m0, m <= m0 <= n (n={n}, m0={m0}, m={m})")));
    }
    let mut edges: Vec<Edge> = Graph::complete(m0).edges;
    let mut degree = vec![0usize; n];
    for e in &edges {
        degree[e.i] += 1;
        degree[e.j] += 1;
    }
    for new in m0..n {
        let mut chosen: Vec<usize> = Vec::with_capacity(m);
        for _ in 0..m {
            let total: usize = (0..new).filter(|v| !chosen.contains(v)).map(|v| degree[v]).sum();
            let pick = if total == 0 {
                let free: Vec<usize> = (0..new).filter(|v| !chosen.contains(v)).collect();
                free[rng.random_range(0..free.len())]
            } else {
                let mut ticket = rng.random_range(0..total);
                let mut pick = None;
                for v in (0..new).filter(|v| !chosen.contains(v)) {
                    if ticket < degree[v] {
                        pick = Some(v);
                        break;
                    }
                    ticket -= degree[v];
                }
                pick.expect("ticket falls inside the cumulative degree range")
            };
            chosen.push(pick);
        }
        for &t in &chosen {
            edges.push(Edge { i: t, j: new, w: 1.0 });
            degree[t] += 1;
            degree[new] += 1;
        }
    }
    edges.sort_by_key(|e| (e.i, e.j));
    Ok(Graph { n, edges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    /// Non-negative, symmetric, hollow, column `scale_node` sums to one.
    AdjacencyScaled,
    /// Off-diagonal in `[-1, 0]`, PSD, unit diagonal, smallest eigenvalue zero.
    NormalizedLaplacian,
    /// Off-diagonal non-positive, PSD, rows sum to zero.
    CombinatorialLaplacian,
}

/// Eigenvalue ordering `λ_i ≥ λ_{i+lag} + gap` on the recovered spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOrdering {
    pub lag: usize,
    pub gap: f64,
}

impl Default for SpectralOrdering {
    fn default() -> Self {
        Self { lag: 3, gap: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownEntry {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Admissible set of shift operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConstraintSet {
    pub kind: ConstraintKind,
    #[serde(default)]
    pub ordering: Option<SpectralOrdering>,
    #[serde(default)]
    pub scale_node: usize,
    /// Extra equalities `S_ij = S_ji = value`.
    #[serde(default)]
    pub known_entries: Vec<KnownEntry>,
    /// Optional prior that every node has some neighbor: each row of off-diagonal
    /// magnitudes sums to at least this value.
    #[serde(default)]
    pub min_row_sum: Option<f64>,
}

impl ShiftConstraintSet {
    pub fn new(kind: ConstraintKind) -> Self {
        Self { kind, ordering: None, scale_node: 0, known_entries: Vec::new(), min_row_sum: None }
    }

    pub fn adjacency() -> Self {
        Self::new(ConstraintKind::AdjacencyScaled)
    }

    pub fn normalized_laplacian() -> Self {
        Self::new(ConstraintKind::NormalizedLaplacian)
    }

    pub fn combinatorial_laplacian() -> Self {
        Self::new(ConstraintKind::CombinatorialLaplacian)
    }

    pub fn with_ordering(mut self, ordering: SpectralOrdering) -> Self {
        self.ordering = Some(ordering);
        self
    }

    pub fn with_scale_node(mut self, node: usize) -> Self {
        self.scale_node = node;
        self
    }

    pub fn with_known_entry(mut self, i: usize, j: usize, value: f64) -> Self {
        self.known_entries.push(KnownEntry { i, j, value });
        self
    }

    pub fn with_min_row_sum(mut self, value: f64) -> Self {
        self.min_row_sum = Some(value);
        self
    }

    pub fn gso_kind(&self) -> GsoKind {
        match self.kind {
            ConstraintKind::AdjacencyScaled => GsoKind::Adjacency,
            ConstraintKind::NormalizedLaplacian => GsoKind::NormalizedLaplacian,
            ConstraintKind::CombinatorialLaplacian => GsoKind::CombinatorialLaplacian,
        }
    }

    /// Rescales a true shift so it satisfies this set's normalization (only the adjacency scale applies).
    pub fn normalize(&self, s: &Matrix) -> Matrix {
        match self.kind {
            ConstraintKind::AdjacencyScaled => {
                let col: f64 = s.column(self.scale_node).sum();
                if col.abs() > 0.0 {
                    s / col
                } else {
                    s.clone()
                }
            }
            _ => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NotSquare,
    Asymmetric { i: usize, j: usize, gap: f64 },
    Diagonal { i: usize, value: f64, expected: f64 },
    OffDiagonalSign { i: usize, j: usize, value: f64 },
    OffDiagonalRange { i: usize, j: usize, value: f64 },
    Scale { node: usize, sum: f64 },
    NotPsd { min_eigenvalue: f64 },
    NonzeroSmallestEigenvalue { min_eigenvalue: f64 },
    RowSum { i: usize, sum: f64 },
    MinRowSum { i: usize, sum: f64, min: f64 },
    Ordering { i: usize, j: usize, slack: f64 },
    KnownEntry { i: usize, j: usize, value: f64, expected: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotSquare => write!(f, "matrix is not square"),
            Violation::Asymmetric { i, j, gap } => {
                write!(f, "symmetry: |S[{i},{j}] - S[{j},{i}]| = {gap:.3e}")
            }
            Violation::Diagonal { i, value, expected } => {
                write!(f, "diagonal: S[{i},{i}] = {value:.6} (expected {expected})")
            }
            Violation::OffDiagonalSign { i, j, value } => {
                write!(f, "sign: S[{i},{j}] = {value:.6}")
            }
            Violation::OffDiagonalRange { i, j, value } => {
                write!(f, "range: S[{i},{j}] = {value:.6} not in [-1, 0]")
            }
            Violation::Scale { node, sum } => {
                write!(f, "scale constraint: column {node} sums to {sum:.6}")
            }
            Violation::NotPsd { min_eigenvalue } => {
                write!(f, "positive semidefinite: λ_min = {min_eigenvalue:.3e}")
            }
            Violation::NonzeroSmallestEigenvalue { min_eigenvalue } => {
                write!(f, "λ₁ = 0: smallest eigenvalue is {min_eigenvalue:.3e}")
            }
            Violation::RowSum { i, sum } => write!(f, "row sum: row {i} sums to {sum:.3e}"),
            Violation::MinRowSum { i, sum, min } => {
                write!(f, "neighbor prior: row {i} off-diagonal magnitude {sum:.3e} below {min}")
            }
            Violation::Ordering { i, j, slack } => {
                write!(f, "ordering: λ_{i} - λ_{j} short by {slack:.3e}")
            }
            Violation::KnownEntry { i, j, value, expected } => {
                write!(f, "known entry: S[{i},{j}] = {value:.6} (expected {expected})")
            }
        }
    }
}

/// Lists every constraint of `set` that `s` violates by more than `tol`.
///
/// Eigenvalue ordering constraints are not checked here since they refer to a
/// particular template ordering; the inference module checks them on `λ`.
pub fn validate_membership(s: &Matrix, set: &ShiftConstraintSet, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    if !s.is_square() {
        out.push(Violation::NotSquare);
        return out;
    }
    let n = s.nrows();
    for j in 0..n {
        for i in 0..j {
            let gap = (s[(i, j)] - s[(j, i)]).abs();
            if gap > tol {
                out.push(Violation::Asymmetric { i, j, gap });
            }
        }
    }
    let min_eig = || linalg::sym_eig(&((s + s.transpose()) * 0.5)).map(|e| e.values.min()).unwrap_or(f64::NAN);
    match set.kind {
        ConstraintKind::AdjacencyScaled => {
            for i in 0..n {
                if s[(i, i)].abs() > tol {
                    out.push(Violation::Diagonal { i, value: s[(i, i)], expected: 0.0 });
                }
            }
            for j in 0..n {
                for i in 0..n {
                    if i != j && s[(i, j)] < -tol {
                        out.push(Violation::OffDiagonalSign { i, j, value: s[(i, j)] });
                    }
                }
            }
            if set.scale_node < n {
                let sum = s.column(set.scale_node).sum();
                if (sum - 1.0).abs() > tol {
                    out.push(Violation::Scale { node: set.scale_node, sum });
                }
            }
        }
        ConstraintKind::NormalizedLaplacian => {
            for i in 0..n {
                if (s[(i, i)] - 1.0).abs() > tol {
                    out.push(Violation::Diagonal { i, value: s[(i, i)], expected: 1.0 });
                }
            }
            for j in 0..n {
                for i in 0..n {
                    let v = s[(i, j)];
                    if i != j && (v > tol || v < -1.0 - tol) {
                        out.push(Violation::OffDiagonalRange { i, j, value: v });
                    }
                }
            }
            if n > 0 {
                let lmin = min_eig();
                if lmin < -tol {
                    out.push(Violation::NotPsd { min_eigenvalue: lmin });
                }
                if lmin.abs() > tol {
                    out.push(Violation::NonzeroSmallestEigenvalue { min_eigenvalue: lmin });
                }
            }
        }
        ConstraintKind::CombinatorialLaplacian => {
            for j in 0..n {
                for i in 0..n {
                    if i != j && s[(i, j)] > tol {
                        out.push(Violation::OffDiagonalSign { i, j, value: s[(i, j)] });
                    }
                }
            }
            for i in 0..n {
                let sum = s.row(i).sum();
                if sum.abs() > tol {
                    out.push(Violation::RowSum { i, sum });
                }
            }
            if n > 0 {
                let lmin = min_eig();
                if lmin < -tol {
                    out.push(Violation::NotPsd { min_eigenvalue: lmin });
                }
            }
        }
    }
    if let Some(min) = set.min_row_sum {
        for i in 0..n {
            let sum: f64 = (0..n).filter(|&j| j != i).map(|j| s[(i, j)].abs()).sum();
            if sum < min - tol {
                out.push(Violation::MinRowSum { i, sum, min });
            }
        }
    }
    for k in &set.known_entries {
        if k.i < n && k.j < n && (s[(k.i, k.j)] - k.value).abs() > tol {
            out.push(Violation::KnownEntry { i: k.i, j: k.j, value: s[(k.i, k.j)], expected: k.value });
        }
    }
    out
}

/// Index of the unique column whose entries all share one sign (up to `tol`).
pub fn find_degree_eigenvector(v: &Matrix, tol: f64) -> Result<usize, GraphError> {
    let candidates: Vec<usize> = (0..v.ncols())
        .filter(|&k| {
            let c = v.column(k);
            c.iter().all(|&x| x >= -tol) || c.iter().all(|&x| x <= tol)
        })
        .collect();
    match candidates.len() {
        0 => Err(GraphError::NoneFound),
        1 => Ok(candidates[0]),
        k => Err(GraphError::Ambiguous(k)),
    }
}

/// Column whose wrong-sign mass is smallest: `max_i` of the minority-sign magnitudes.
pub fn most_single_signed_column(v: &Matrix) -> Option<usize> {
    (0..v.ncols())
        .map(|k| {
            let c = v.column(k);
            let neg = c.iter().filter(|&&x| x < 0.0).map(|x| -x).fold(0.0, f64::max);
            let pos = c.iter().filter(|&&x| x > 0.0).cloned().fold(0.0, f64::max);
            (k, neg.min(pos))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}
