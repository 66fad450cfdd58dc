//! Seeded experiment batches: feasibility heatmaps, certificate scatter data, noisy and
//! incomplete sweeps, baseline comparisons and a deconvolution demo, emitted as CSV rows.
//!
//! Every instance draws its randomness from a ChaCha stream seeded by a SplitMix64 mix of
//! the master seed, a stream tag and the instance coordinates, so any row can be replayed
//! on its own. Rows are sorted before writing, which makes the output independent of the
//! execution order.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certificates;
use crate::diffusion::{self, GraphFilter, SmoothModel, SpectralTemplates};
use crate::evaluation;
use crate::graphs::{self, ConstraintKind, Graph, Gso, ShiftConstraintSet};
use crate::inference::{self, Epsilon, Formulation, InferenceRequest, Reweighting};
use crate::linalg::{self, Matrix};
use crate::par::{self, Execution};
use crate::solver::SolverOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Fig1Feasibility,
    Fig1Reweighted,
    Fig1dPsi,
    NoisySweep,
    IncompleteSweep,
    Table1Comparison,
    DeconvolutionDemo,
    Custom,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fig1Feasibility => "fig1-feasibility",
            Self::Fig1Reweighted => "fig1-reweighted",
            Self::Fig1dPsi => "fig1d-psi",
            Self::NoisySweep => "noisy-sweep",
            Self::IncompleteSweep => "incomplete-sweep",
            Self::Table1Comparison => "table1-comparison",
            Self::DeconvolutionDemo => "deconvolution-demo",
            Self::Custom => "custom",
        }
    }

    pub fn all() -> [Self; 8] {
        [
            Self::Fig1Feasibility,
            Self::Fig1Reweighted,
            Self::Fig1dPsi,
            Self::NoisySweep,
            Self::IncompleteSweep,
            Self::Table1Comparison,
            Self::DeconvolutionDemo,
            Self::Custom,
        ]
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::all().into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphModel {
    Er,
    Ba,
}

/// How the diffusion filter of each instance is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FilterFamily {
    /// Frequency response uniform in `[lo, hi]`.
    RandomResponse { lo: f64, hi: f64 },
    /// `(S + margin I)^{-1/2}` after shifting the spectrum to be nonnegative.
    PrecisionRoot { margin: f64 },
    /// Polynomial with random degree and Gaussian coefficients.
    Polynomial { min_degree: usize, max_degree: usize, std: f64 },
    /// Smooth signals on the combinatorial Laplacian.
    Smooth { model: SmoothModel },
}

impl FilterFamily {
    /// Draws a filter of this family on `gso`.
    pub fn build<R: rand::Rng + ?Sized>(
        &self,
        gso: &Gso,
        rng: &mut R,
    ) -> Result<GraphFilter, diffusion::DiffusionError> {
        match *self {
            FilterFamily::RandomResponse { lo, hi } => {
                let t = SpectralTemplates::from_gso(gso)?;
                diffusion::spectral_filter(&t, &diffusion::random_response(gso.n(), lo, hi, rng))
            }
            FilterFamily::PrecisionRoot { margin } => diffusion::precision_root_filter(gso, margin),
            FilterFamily::Polynomial { min_degree, max_degree, std } => {
                diffusion::polynomial_filter(gso, &diffusion::random_polynomial(min_degree, max_degree, std, rng))
            }
            FilterFamily::Smooth { model } => diffusion::smooth_signal_model(gso, model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Master seed mixed into every instance stream.
    pub seed: u64,
    /// Instance indices per cell.
    pub seeds: Vec<u64>,
    /// Training instances (threshold and radius selection).
    pub training: usize,
    pub graph: GraphModel,
    pub n: Vec<usize>,
    pub p: Vec<f64>,
    pub m0: usize,
    pub m: usize,
    /// Redraw graphs until connected.
    pub connected: bool,
    pub set: ConstraintKind,
    pub filter: FilterFamily,
    /// Signal counts; `0` means exact covariance.
    pub samples: Vec<usize>,
    pub noise_sigma: f64,
    pub epsilon: Epsilon,
    /// Multipliers of the smallest feasible radius tried during training; empty skips training.
    pub epsilon_grid: Vec<f64>,
    pub reweighting: Reweighting,
    pub lag: usize,
    pub gap: f64,
    /// Threshold on off-diagonal magnitudes normalized by their maximum.
    pub threshold: f64,
    /// Require every node to have a neighbor (adjacency sets only). A prior for noisy
    /// recovery; the exact-template experiments solve the plain program.
    pub neighbor_prior: bool,
    /// Template counts for the incomplete sweep.
    pub templates_known: Vec<usize>,
    /// Edge counts for top-k recovery.
    pub top_k: Vec<usize>,
    /// Redraw limit for connected graphs and rejection sampling.
    pub max_draws: usize,
    pub delta_points: usize,
    pub solver: SolverOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Custom,
            seed: 0,
            seeds: (0..20).collect(),
            training: 10,
            graph: GraphModel::Er,
            n: vec![20],
            p: vec![0.2],
            m0: 4,
            m: 3,
            connected: true,
            set: ConstraintKind::AdjacencyScaled,
            filter: FilterFamily::RandomResponse { lo: 0.5, hi: 1.5 },
            samples: vec![0],
            noise_sigma: 0.0,
            epsilon: Epsilon::Auto,
            epsilon_grid: Vec::new(),
            reweighting: Reweighting::default(),
            lag: 3,
            gap: 0.1,
            threshold: 0.3,
            neighbor_prior: false,
            templates_known: Vec::new(),
            top_k: vec![10, 20, 40],
            max_draws: 1_000_000,
            delta_points: certificates::DELTA_GRID_POINTS,
            solver: SolverOptions::default(),
        }
    }
}

fn probability_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

impl ExperimentConfig {
    /// Desk-scale defaults for each experiment.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self { experiment: kind, ..Self::default() };
        match kind {
            ExperimentKind::Fig1Feasibility | ExperimentKind::Fig1Reweighted => {
                Self { n: vec![10, 20], p: probability_grid(), ..base }
            }
            ExperimentKind::Fig1dPsi => {
                Self { n: vec![20], p: vec![0.25], seeds: (0..200).collect(), connected: false, ..base }
            }
            ExperimentKind::NoisySweep => Self {
                samples: vec![100, 1_000, 10_000, 100_000],
                seeds: (0..10).collect(),
                neighbor_prior: true,
                ..base
            },
            ExperimentKind::IncompleteSweep => {
                Self { n: vec![16], p: vec![0.3], templates_known: (10..=16).collect(), ..base }
            }
            ExperimentKind::Table1Comparison => Self {
                p: vec![0.3],
                set: ConstraintKind::CombinatorialLaplacian,
                filter: FilterFamily::Smooth { model: SmoothModel::InverseLaplacianRoot },
                samples: vec![1_000],
                noise_sigma: 0.1,
                neighbor_prior: true,
                epsilon_grid: vec![1.0, 1.5, 2.0, 3.0, 5.0],
                ..base
            },
            ExperimentKind::DeconvolutionDemo => Self {
                n: vec![30],
                p: vec![0.1],
                seeds: (0..10).collect(),
                epsilon: Epsilon::Fixed(1.0),
                neighbor_prior: true,
                ..base
            },
            ExperimentKind::Custom => Self { neighbor_prior: true, ..base },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let bad = |msg: &str| Err(msg.to_string());
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        if self.n.is_empty() || self.n.iter().any(|&n| n < 2) {
            return bad("every n must be at least 2");
        }
        if self.p.is_empty() || self.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("edge probabilities must lie in [0, 1]");
        }
        if self.graph == GraphModel::Ba && (self.m0 == 0 || self.m > self.m0 || self.n.iter().any(|&n| n < self.m0)) {
            return bad("BA parameters need 1 <= m <= m0 <= n");
        }
        if self.samples.is_empty() || self.samples.contains(&1) {
            return bad("sample counts must be 0 (exact) or at least 2");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be a finite nonnegative number");
        }
        match self.epsilon {
            Epsilon::Fixed(e) | Epsilon::AutoScaled(e) if !(e >= 0.0 && e.is_finite()) => {
                return bad("epsilon must be finite and nonnegative")
            }
            _ => {}
        }
        if self.epsilon_grid.iter().any(|&f| !(f >= 1.0 && f.is_finite())) {
            return bad("epsilon grid multipliers must be at least 1");
        }
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return bad("threshold must lie in [0, 1]");
        }
        if self.lag == 0 || !(self.gap >= 0.0) {
            return bad("ordering needs lag >= 1 and gap >= 0");
        }
        if self.delta_points < 2 {
            return bad("delta grid needs at least two points");
        }
        if self.neighbor_prior && !self.connected {
            return bad("the neighbor prior needs connected graphs");
        }
        if self.max_draws == 0 {
            return bad("max_draws must be positive");
        }
        match self.filter {
            FilterFamily::RandomResponse { lo, hi } if !(lo <= hi && lo.is_finite() && hi.is_finite()) => {
                return bad("random response needs lo <= hi")
            }
            FilterFamily::Polynomial { min_degree, max_degree, std } if min_degree > max_degree || !(std > 0.0) => {
                return bad("polynomial filter needs min_degree <= max_degree and std > 0")
            }
            FilterFamily::Smooth { .. } if self.set != ConstraintKind::CombinatorialLaplacian => {
                return bad("smooth signal models need the combinatorial Laplacian set")
            }
            _ => {}
        }
        if self.experiment == ExperimentKind::IncompleteSweep {
            if self.templates_known.is_empty() || self.templates_known.iter().any(|&k| self.n.iter().any(|&n| k > n)) {
                return bad("templates_known must be non-empty with every K <= n");
            }
        }
        if self.experiment == ExperimentKind::DeconvolutionDemo && self.top_k.is_empty() {
            return bad("top_k is empty");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn shift_set(&self, n: usize) -> ShiftConstraintSet {
        let set = ShiftConstraintSet::new(self.set);
        if self.neighbor_prior && self.set == ConstraintKind::AdjacencyScaled {
            set.with_min_row_sum(1.0 / (n - 1) as f64)
        } else {
            set
        }
    }

    fn delta_grid(&self) -> Vec<f64> {
        certificates::log_grid(-6.0, 2.0, self.delta_points)
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one instance stream.
pub fn derive_seed(master: u64, stream: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

/// One CSV row: an (instance, method, parameter point) triple and its metric values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub method: String,
    pub n: usize,
    pub p: f64,
    pub samples: usize,
    pub k: usize,
    pub instance: u64,
    pub seed: u64,
    /// `ok` or the failure message.
    pub status: String,
    pub values: Vec<f64>,
}

impl Row {
    fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn sort_key(&self) -> (String, usize, u64, usize, usize, u64) {
        (self.method.clone(), self.n, self.p.to_bits(), self.samples, self.k, self.instance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub p: f64,
    pub samples: usize,
    pub k: usize,
    pub count: usize,
    pub failures: usize,
    pub means: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub metrics: Vec<&'static str>,
    pub rows: Vec<Row>,
    /// Parameters chosen during training (name, value).
    pub trained: Vec<(String, f64)>,
    pub elapsed: Duration,
}

fn fmt(x: f64) -> String {
    linalg::io::format_float(x)
}

impl Report {
    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metrics.iter().position(|m| *m == name)
    }

    /// Successful rows of one method.
    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows.iter().filter(move |r| r.method == method && r.ok())
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }

    /// Per-cell means over successful rows, in row order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut cells: BTreeMap<(String, usize, u64, usize, usize), (f64, Vec<&Row>, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = cells.entry((r.method.clone(), r.n, r.p.to_bits(), r.samples, r.k)).or_insert((r.p, Vec::new(), 0));
            if r.ok() {
                e.1.push(r);
            } else {
                e.2 += 1;
            }
        }
        cells
            .into_iter()
            .map(|((method, n, _, samples, k), (p, ok, failures))| {
                let means = (0..self.metrics.len())
                    .map(|m| {
                        if ok.is_empty() {
                            f64::NAN
                        } else {
                            ok.iter().map(|r| r.values[m]).sum::<f64>() / ok.len() as f64
                        }
                    })
                    .collect();
                SummaryRow { method, n, p, samples, k, count: ok.len(), failures, means }
            })
            .collect()
    }

    /// Mean of `metric` in the cell matching the given coordinates.
    pub fn cell_mean(&self, method: &str, n: usize, p: f64, samples: usize, k: usize, metric: &str) -> Option<f64> {
        let m = self.metric_index(metric)?;
        self.summary()
            .into_iter()
            .find(|s| s.method == method && s.n == n && s.p == p && s.samples == samples && s.k == k)
            .map(|s| s.means[m])
    }

    const KEYS: [&'static str; 8] = ["experiment", "config_hash", "method", "n", "p", "samples", "k", "instance"];

    pub fn write_rows_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = Self::KEYS.to_vec();
        header.extend(["seed", "status"]);
        header.extend(self.metrics.iter().copied());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.config.experiment.name().to_string(),
                self.config_hash.clone(),
                r.method.clone(),
                r.n.to_string(),
                fmt(r.p),
                r.samples.to_string(),
                r.k.to_string(),
                r.instance.to_string(),
                r.seed.to_string(),
                r.status.clone(),
            ];
            rec.extend(r.values.iter().map(|&v| fmt(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["experiment", "config_hash", "method", "n", "p", "samples", "k", "count", "failures"]
                .map(String::from)
                .to_vec();
        header.extend(self.metrics.iter().map(|m| format!("mean_{m}")));
        w.write_record(&header)?;
        for s in self.summary() {
            let mut rec = vec![
                self.config.experiment.name().to_string(),
                self.config_hash.clone(),
                s.method,
                s.n.to_string(),
                fmt(s.p),
                s.samples.to_string(),
                s.k.to_string(),
                s.count.to_string(),
                s.failures.to_string(),
            ];
            rec.extend(s.means.iter().map(|&v| fmt(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Coordinates of one unit of work.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Task {
    n: usize,
    p: f64,
    samples: usize,
    k: usize,
    instance: u64,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    /// Shared graph per `n` for fixed-graph experiments.
    fixed: BTreeMap<usize, Gso>,
    /// Trained radius multiplier and correlation threshold.
    eps_factor: Option<f64>,
    corr_threshold: f64,
}

/// Rows of one task: method, template count or `k` (when it differs from the task's), values.
type Outcome = Result<Vec<Entry>, String>;

struct Entry {
    method: &'static str,
    k: Option<usize>,
    values: Vec<f64>,
}

fn entry(method: &'static str, values: Vec<f64>) -> Entry {
    Entry { method, k: None, values }
}

fn metrics_of(kind: ExperimentKind) -> Vec<&'static str> {
    match kind {
        ExperimentKind::Fig1Feasibility => vec!["rank", "singleton", "recovered", "distinct"],
        ExperimentKind::Fig1Reweighted => vec!["singleton", "recovered", "max_error", "rounds"],
        ExperimentKind::Fig1dPsi => vec!["draws", "rank", "psi", "delta", "recovered", "max_error"],
        ExperimentKind::NoisySweep | ExperimentKind::Custom => {
            vec!["misidentified", "f_measure", "precision", "recall", "epsilon", "iterations"]
        }
        ExperimentKind::IncompleteSweep => vec!["error", "recovered", "misidentified"],
        ExperimentKind::Table1Comparison => {
            vec!["f_measure", "edge_error", "degree_error", "misidentified"]
        }
        ExperimentKind::DeconvolutionDemo => vec!["fraction"],
    }
}

/// Runs an experiment with the default parallel execution.
pub fn run(cfg: &ExperimentConfig) -> Result<Report, String> {
    run_with(cfg, Execution::Parallel)
}

pub fn run_with(cfg: &ExperimentConfig, exec: Execution) -> Result<Report, String> {
    cfg.validate()?;
    let start = Instant::now();
    let mut ctx = Context { cfg, fixed: BTreeMap::new(), eps_factor: None, corr_threshold: 0.0 };
    let mut trained = Vec::new();
    if matches!(cfg.experiment, ExperimentKind::NoisySweep | ExperimentKind::IncompleteSweep) {
        for &n in &cfg.n {
            let gso = fixed_graph(cfg, n, cfg.p[0])?;
            ctx.fixed.insert(n, gso);
        }
    }
    if cfg.experiment == ExperimentKind::Table1Comparison {
        let (factor, threshold) = train(cfg, exec)?;
        ctx.eps_factor = factor;
        ctx.corr_threshold = threshold;
        if let Some(f) = factor {
            trained.push(("epsilon_factor".to_string(), f));
        }
        trained.push(("correlation_threshold".to_string(), threshold));
    }
    let tasks = tasks(cfg);
    let results = par::map_with(exec, &tasks, |t| {
        let seed = task_seed(cfg, t);
        (*t, seed, run_task(&ctx, t, seed))
    });
    let metrics = metrics_of(cfg.experiment);
    let mut rows = Vec::new();
    for (t, seed, outcome) in results {
        let base = |method: &str, k: Option<usize>, status: String, values: Vec<f64>| Row {
            method: method.to_string(),
            n: t.n,
            p: t.p,
            samples: t.samples,
            k: k.unwrap_or(t.k),
            instance: t.instance,
            seed,
            status,
            values,
        };
        match outcome {
            Ok(list) => rows.extend(list.into_iter().map(|e| base(e.method, e.k, "ok".into(), e.values))),
            Err(e) => rows.push(base("failed", None, e, vec![f64::NAN; metrics.len()])),
        }
    }
    rows.sort_by_key(Row::sort_key);
    Ok(Report { config: cfg.clone(), config_hash: cfg.hash(), metrics, rows, trained, elapsed: start.elapsed() })
}

fn tasks(cfg: &ExperimentConfig) -> Vec<Task> {
    let ks: Vec<usize> =
        if cfg.experiment == ExperimentKind::IncompleteSweep { cfg.templates_known.clone() } else { vec![0] };
    let mut out = Vec::new();
    for &n in &cfg.n {
        for &p in &cfg.p {
            for &samples in &cfg.samples {
                for &k in &ks {
                    for &instance in &cfg.seeds {
                        out.push(Task { n, p, samples, k, instance });
                    }
                }
            }
        }
    }
    out
}

fn task_seed(cfg: &ExperimentConfig, t: &Task) -> u64 {
    derive_seed(cfg.seed, cfg.experiment.name(), &[t.n as u64, t.p.to_bits(), t.samples as u64, t.k as u64, t.instance])
}

/// Recomputes the rows of one instance; replays match the original rows exactly.
pub fn replay(report: &Report, row: &Row) -> Result<Vec<Row>, String> {
    let mut sub = report.config.clone();
    sub.n = vec![row.n];
    sub.p = vec![row.p];
    sub.samples = vec![row.samples];
    sub.seeds = vec![row.instance];
    if sub.experiment == ExperimentKind::IncompleteSweep {
        sub.templates_known = vec![row.k];
    }
    let mut again = run_with(&sub, Execution::Sequential)?;
    for r in &mut again.rows {
        r.seed = task_seed(&report.config, &Task { n: r.n, p: r.p, samples: r.samples, k: r.k, instance: r.instance });
    }
    Ok(again.rows)
}

fn draw_graph(cfg: &ExperimentConfig, n: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Graph, String> {
    for _ in 0..cfg.max_draws {
        let g = match cfg.graph {
            GraphModel::Er => graphs::generate_er(n, p, rng),
            GraphModel::Ba => graphs::generate_ba(n, cfg.m0, cfg.m, rng),
        }
        .map_err(|e| e.to_string())?;
        if !cfg.connected || g.is_connected() {
            return Ok(g);
        }
    }
    Err(format!("no connected graph in {} draws", cfg.max_draws))
}

fn shift_of(cfg: &ExperimentConfig, g: &Graph) -> Result<Gso, String> {
    graphs::gso(g, ShiftConstraintSet::new(cfg.set).gso_kind()).map_err(|e| e.to_string())
}

/// Shared graph with a simple spectrum, drawn from its own stream.
fn fixed_graph(cfg: &ExperimentConfig, n: usize, p: f64) -> Result<Gso, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "fixed-graph", &[n as u64, p.to_bits()]));
    for _ in 0..cfg.max_draws {
        let gso = shift_of(cfg, &draw_graph(cfg, n, p, &mut rng)?)?;
        if SpectralTemplates::from_gso(&gso).is_ok_and(|t| t.is_distinct()) {
            return Ok(gso);
        }
    }
    Err("no graph with a simple spectrum".into())
}

fn filter_for(cfg: &ExperimentConfig, gso: &Gso, rng: &mut ChaCha8Rng) -> Result<GraphFilter, String> {
    cfg.filter.build(gso, rng).map_err(|e| e.to_string())
}

/// Templates (and signals, when sampled) observed from a diffusion on `gso`.
fn observe(
    cfg: &ExperimentConfig,
    gso: &Gso,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SpectralTemplates, Option<diffusion::SignalEnsemble>), String> {
    let err = |e: diffusion::DiffusionError| e.to_string();
    let filter = filter_for(cfg, gso, rng)?;
    if samples == 0 {
        let c = diffusion::CovarianceEstimate::exact(&filter);
        return Ok((diffusion::extract_templates(&c, diffusion::DEFAULT_GROUP_TOL).map_err(err)?, None));
    }
    let mut x = diffusion::diffuse(&filter, samples, rng).map_err(err)?;
    if cfg.noise_sigma > 0.0 {
        x = diffusion::perturb(&x, cfg.noise_sigma, rng).map_err(err)?;
    }
    let c = diffusion::sample_covariance(&x);
    Ok((diffusion::extract_templates(&c, diffusion::DEFAULT_GROUP_TOL).map_err(err)?, Some(x)))
}

fn request(cfg: &ExperimentConfig, t: SpectralTemplates, n: usize, formulation: Formulation) -> InferenceRequest {
    let mut req = InferenceRequest::new(t, cfg.shift_set(n), formulation);
    req.solver = cfg.solver;
    req
}

fn thresholded(cfg: &ExperimentConfig, s: &Matrix) -> Matrix {
    evaluation::threshold(&inference::normalize_off_diagonal(s), cfg.threshold)
}

fn recovery_error(s: &Matrix, truth: &Matrix) -> f64 {
    (s - truth).amax()
}

/// Noisy (or smooth-Laplacian) estimate from observed templates.
fn spectemp(
    cfg: &ExperimentConfig,
    t: SpectralTemplates,
    n: usize,
    epsilon: Epsilon,
) -> Result<inference::GsoEstimate, String> {
    let req = request(cfg, t, n, Formulation::noisy(epsilon));
    if cfg.set == ConstraintKind::CombinatorialLaplacian {
        inference::infer_smooth_laplacian(&req, cfg.lag, cfg.gap)
    } else {
        inference::infer(&req)
    }
    .map_err(|e| e.to_string())
}

fn score_row(cfg: &ExperimentConfig, s: &Matrix, truth: &Matrix) -> Result<evaluation::RecoveryScore, String> {
    evaluation::score(&thresholded(cfg, s), truth, evaluation::DEFAULT_EDGE_TOL).map_err(|e| e.to_string())
}

fn run_task(ctx: &Context, t: &Task, seed: u64) -> Outcome {
    let cfg = ctx.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = cfg.shift_set(t.n);
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    match cfg.experiment {
        ExperimentKind::Fig1Feasibility => {
            let gso = shift_of(cfg, &draw_graph(cfg, t.n, t.p, &mut rng)?)?;
            let tmpl = SpectralTemplates::from_gso(&gso).map_err(|e| e.to_string())?;
            let fr = certificates::feasibility_rank(&tmpl, &set).map_err(|e| e.to_string())?;
            let truth = set.normalize(&gso.matrix);
            let recovered = fr.singleton
                && inference::unique_feasible_point(&tmpl, &set).is_some_and(|u| recovery_error(&u.s, &truth) < 1e-6);
            Ok(vec![entry(
                "feasibility",
                vec![fr.rank as f64, flag(fr.singleton), flag(recovered), flag(tmpl.is_distinct())],
            )])
        }
        ExperimentKind::Fig1Reweighted => {
            let gso = shift_of(cfg, &draw_graph(cfg, t.n, t.p, &mut rng)?)?;
            let tmpl = SpectralTemplates::from_gso(&gso).map_err(|e| e.to_string())?;
            let singleton = certificates::feasibility_rank(&tmpl, &set).map_err(|e| e.to_string())?.singleton;
            let truth = set.normalize(&gso.matrix);
            let mut out = Vec::new();
            for (method, formulation) in
                [("l1", Formulation::Noiseless), ("reweighted", Formulation::Reweighted(cfg.reweighting))]
            {
                let req = request(cfg, tmpl.clone(), t.n, formulation);
                let est = inference::infer(&req).map_err(|e| e.to_string())?;
                let err = recovery_error(&est.s, &truth);
                out.push(entry(method, vec![flag(singleton), flag(err < 1e-5), err, est.diagnostics.rounds as f64]));
            }
            Ok(out)
        }
        ExperimentKind::Fig1dPsi => fig1d_instance(cfg, t, &mut rng),
        ExperimentKind::NoisySweep | ExperimentKind::Custom => {
            let gso = match ctx.fixed.get(&t.n) {
                Some(g) => g.clone(),
                None => shift_of(cfg, &draw_graph(cfg, t.n, t.p, &mut rng)?)?,
            };
            let (tmpl, _) = observe(cfg, &gso, t.samples, &mut rng)?;
            let est = spectemp(cfg, tmpl, t.n, cfg.epsilon)?;
            let sc = score_row(cfg, &est.s, &gso.matrix)?;
            let d = &est.diagnostics;
            Ok(vec![entry(
                "spectemp",
                vec![
                    sc.misidentified_fraction,
                    sc.f_measure,
                    sc.precision,
                    sc.recall,
                    d.epsilon.unwrap_or(0.0),
                    d.iterations as f64,
                ],
            )])
        }
        ExperimentKind::IncompleteSweep => {
            let gso = ctx.fixed.get(&t.n).ok_or("missing fixed graph")?;
            let full = SpectralTemplates::from_gso(gso).map_err(|e| e.to_string())?;
            let mut cols = sample(&mut rng, t.n, t.k).into_vec();
            cols.sort_unstable();
            let req = request(cfg, full.select(&cols), t.n, Formulation::Incomplete);
            let est = inference::infer(&req).map_err(|e| e.to_string())?;
            let truth = set.normalize(&gso.matrix);
            let error = (&est.s - &truth).norm() / truth.norm();
            let mis = score_row(cfg, &est.s, &gso.matrix)?.misidentified_fraction;
            Ok(vec![entry("spectemp", vec![error, flag(recovery_error(&est.s, &truth) < 1e-5), mis])])
        }
        ExperimentKind::Table1Comparison => {
            let gso = shift_of(cfg, &draw_graph(cfg, t.n, t.p, &mut rng)?)?;
            let (tmpl, x) = observe(cfg, &gso, t.samples, &mut rng)?;
            let epsilon = ctx.eps_factor.map_or(cfg.epsilon, Epsilon::AutoScaled);
            let est = spectemp(cfg, tmpl, t.n, epsilon)?;
            let row = |sc: evaluation::RecoveryScore| {
                vec![sc.f_measure, sc.edge_error_l2, sc.degree_error_l2, sc.misidentified_fraction]
            };
            let mut out = vec![entry("spectemp", row(score_row(cfg, &est.s, &gso.matrix)?))];
            if let Some(x) = x {
                let c = evaluation::correlation_baseline(&x, ctx.corr_threshold).map_err(|e| e.to_string())?;
                let sc = evaluation::score(&c, &gso.matrix, evaluation::DEFAULT_EDGE_TOL).map_err(|e| e.to_string())?;
                out.push(entry("correlation", row(sc)));
            }
            Ok(out)
        }
        ExperimentKind::DeconvolutionDemo => deconvolution_instance(cfg, t, &mut rng),
    }
}

/// Rejection-samples a graph whose templates leave more than one feasible point and satisfy
/// the rank condition, then pairs its certificate with the plain ℓ1 outcome.
fn fig1d_instance(cfg: &ExperimentConfig, t: &Task, rng: &mut ChaCha8Rng) -> Outcome {
    let set = cfg.shift_set(t.n);
    let grid = cfg.delta_grid();
    for draw in 1..=cfg.max_draws {
        let gso = shift_of(cfg, &draw_graph(cfg, t.n, t.p, rng)?)?;
        let Ok(tmpl) = SpectralTemplates::from_gso(&gso) else {
            continue;
        };
        if !tmpl.is_distinct() {
            continue;
        }
        let Ok(fr) = certificates::feasibility_rank(&tmpl, &set) else {
            continue;
        };
        if fr.singleton {
            continue;
        }
        let truth = set.normalize(&gso.matrix);
        let Ok(cert) = certificates::certify_noiseless(&tmpl, &truth, &set, &grid) else {
            continue;
        };
        if !cert.rank_condition_holds {
            continue;
        }
        let req = request(cfg, tmpl, t.n, Formulation::Noiseless);
        let est = inference::infer(&req).map_err(|e| e.to_string())?;
        let err = recovery_error(&est.s, &truth);
        return Ok(vec![entry(
            "l1",
            vec![
                draw as f64,
                fr.rank as f64,
                cert.psi_or_eta,
                cert.minimizing_delta,
                if err < 1e-5 { 1.0 } else { 0.0 },
                err,
            ],
        )]);
    }
    Err(format!("no qualifying instance in {} draws", cfg.max_draws))
}

/// Sparse direct-dependency graph `S` (spectral norm 1/2) observed through `T = S (I − S)^{-1}`.
fn deconvolution_instance(cfg: &ExperimentConfig, t: &Task, rng: &mut ChaCha8Rng) -> Outcome {
    let g = draw_graph(cfg, t.n, t.p, rng)?;
    let a = graphs::adjacency(&g).matrix;
    let s = &a * (0.5 / linalg::spectral_norm(&a).max(f64::MIN_POSITIVE));
    let n = t.n;
    let inv = (Matrix::identity(n, n) - &s).try_inverse().ok_or("I - S is singular")?;
    let observed = &s * inv;
    let observed = (&observed + observed.transpose()) * 0.5;
    let deconv = evaluation::network_deconvolution(&observed).map_err(|e| e.to_string())?;
    let eig = linalg::sym_eig(&observed).map_err(|e| e.to_string())?;
    let mut v = eig.vectors;
    diffusion::normalize_signs(&mut v);
    let tmpl = SpectralTemplates::new(v, eig.values, diffusion::Provenance::File, diffusion::DEFAULT_GROUP_TOL)
        .map_err(|e| e.to_string())?;
    let est = spectemp(cfg, tmpl, n, cfg.epsilon)?;
    let mut out = Vec::new();
    for &k in &cfg.top_k {
        let k = k.min(n * (n - 1) / 2);
        for (method, m) in [("observed", &observed), ("deconvolution", &deconv), ("spectemp", &est.s)] {
            let f = evaluation::top_k_recovery(m, &a, k).map_err(|e| e.to_string())?;
            out.push(Entry { method, k: Some(k), values: vec![f] });
        }
    }
    Ok(out)
}

/// Training phase: radius multiplier for the spectral method and threshold for correlation.
fn train(cfg: &ExperimentConfig, exec: Execution) -> Result<(Option<f64>, f64), String> {
    let idx: Vec<u64> = (0..cfg.training as u64).collect();
    let (n, p, samples) = (cfg.n[0], cfg.p[0], cfg.samples[0]);
    let draws = par::map_with(exec, &idx, |&i| -> Result<_, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "training", &[n as u64, p.to_bits(), i]));
        let gso = shift_of(cfg, &draw_graph(cfg, n, p, &mut rng)?)?;
        let (tmpl, x) = observe(cfg, &gso, samples, &mut rng)?;
        let corr = match x {
            Some(x) => Some(evaluation::correlation_matrix(&x).map_err(|e| e.to_string())?),
            None => None,
        };
        let f_scores = cfg
            .epsilon_grid
            .iter()
            .map(|&f| {
                spectemp(cfg, tmpl.clone(), n, Epsilon::AutoScaled(f))
                    .and_then(|e| score_row(cfg, &e.s, &gso.matrix))
                    .map_or(0.0, |s| s.f_measure)
            })
            .collect::<Vec<_>>();
        Ok((gso.matrix, corr, f_scores))
    });
    let draws = draws.into_iter().collect::<Result<Vec<_>, _>>()?;
    let factor = (!cfg.epsilon_grid.is_empty()).then(|| {
        let mut best = (cfg.epsilon_grid[0], f64::NEG_INFINITY);
        for (j, &f) in cfg.epsilon_grid.iter().enumerate() {
            let mean = draws.iter().map(|d| d.2[j]).sum::<f64>() / draws.len().max(1) as f64;
            if mean > best.1 {
                best = (f, mean);
            }
        }
        best.0
    });
    let pairs: Vec<(Matrix, Matrix)> = draws.iter().filter_map(|(s, c, _)| c.clone().map(|c| (c, s.clone()))).collect();
    let threshold = if pairs.is_empty() {
        0.0
    } else {
        evaluation::train_threshold(&pairs, &evaluation::default_threshold_grid()).map_err(|e| e.to_string())?.0
    };
    Ok((factor, threshold))
}
