//! `spectempo`: generate graphs, diffuse signals, infer shifts from spectral templates,
//! certify recovery, run baselines and reproduce experiment batches as CSV.

mod error;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use spectempo::certificates::{self, log_grid};
use spectempo::diffusion::{self, SignalEnsemble, SmoothModel, SpectralTemplates};
use spectempo::evaluation;
use spectempo::experiments::{self, ExperimentConfig, ExperimentKind, FilterFamily};
use spectempo::graphs::{self, ConstraintKind, Graph, GsoKind, ShiftConstraintSet};
use spectempo::inference::{self, Epsilon, Formulation, InferenceRequest, Reweighting};
use spectempo::linalg::{self, Matrix};
use spectempo::par;
use spectempo::solver::{self, SolverOptions, SparseRecoveryProblem};

use error::Failure;

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "spectempo", version, about = "Network topology inference from spectral templates")]
struct Cli {
    /// Master seed for every random draw (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Report errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    /// JSON configuration document; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (a directory for `benchmark`); stdout when absent.
    #[arg(short = 'o', long = "output", global = true)]
    output: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random graph and write it as JSON.
    Generate(GenerateArgs),
    /// Diffuse white noise through a graph filter and write the signals as CSV.
    Diffuse(DiffuseArgs),
    /// Infer a shift operator from spectral templates.
    Infer(InferArgs),
    /// Compute the exact-recovery certificate of a graph.
    Certify(CertifyArgs),
    /// Thresholded-correlation baseline on a signal ensemble.
    Baseline(BaselineArgs),
    /// Recover direct dependencies from a dense matrix of observed dependencies.
    Deconvolve(DeconvolveArgs),
    /// Run a seeded experiment batch and write row and summary CSVs.
    Benchmark(BenchmarkArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Model {
    Er,
    Ba,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "er")]
    model: Model,
    #[arg(long)]
    n: usize,
    /// Edge probability (ER).
    #[arg(long, default_value_t = 0.2)]
    p: f64,
    /// Seed clique size (BA).
    #[arg(long, default_value_t = 4)]
    m0: usize,
    /// Edges per new node (BA).
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Redraw until the graph is connected.
    #[arg(long)]
    connected: bool,
    /// Write an edge-list CSV instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SetArg {
    Adjacency,
    NormalizedLaplacian,
    CombinatorialLaplacian,
}

impl SetArg {
    fn kind(self) -> ConstraintKind {
        match self {
            SetArg::Adjacency => ConstraintKind::AdjacencyScaled,
            SetArg::NormalizedLaplacian => ConstraintKind::NormalizedLaplacian,
            SetArg::CombinatorialLaplacian => ConstraintKind::CombinatorialLaplacian,
        }
    }

    fn gso_kind(self) -> GsoKind {
        ShiftConstraintSet::new(self.kind()).gso_kind()
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FilterArg {
    RandomResponse,
    PrecisionRoot,
    Polynomial,
    InverseLaplacianRoot,
    ArDiffusion,
    Exponential,
}

#[derive(Args, Debug, Serialize)]
struct DiffuseArgs {
    /// Graph JSON.
    #[arg(long)]
    graph: PathBuf,
    /// Shift operator the filter is built on.
    #[arg(long, value_enum, default_value = "adjacency")]
    gso: SetArg,
    #[arg(long, value_enum, default_value = "random-response")]
    filter: FilterArg,
    /// Number of signals.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Multiplicative noise level of the perturbation `x + σ x∘z`.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    lo: f64,
    #[arg(long, default_value_t = 1.5)]
    hi: f64,
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    #[arg(long, default_value_t = 1)]
    min_degree: usize,
    #[arg(long, default_value_t = 3)]
    max_degree: usize,
    #[arg(long, default_value_t = 1.0)]
    std: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TemplateSource {
    /// Eigenvectors of the shift of `--graph`.
    Exact,
    /// Eigenvectors of the sample covariance of `--signals`.
    Sample,
    /// A CSV grid given by `--grid`, with an optional `--sidecar`.
    File,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FormulationArg {
    Noiseless,
    Reweighted,
    Noisy,
    Incomplete,
    IncompleteNoisy,
    /// Noisy combinatorial Laplacian with eigenvalue ordering, for smooth signals.
    Smooth,
}

#[derive(Args, Debug, Serialize)]
struct TemplateArgs {
    #[arg(long, value_enum, default_value = "exact")]
    templates: TemplateSource,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    signals: Option<PathBuf>,
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Keep only these template columns (comma separated).
    #[arg(long, value_delimiter = ',')]
    keep: Vec<usize>,
    #[arg(long, value_enum, default_value = "adjacency")]
    set: SetArg,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[command(flatten)]
    source: TemplateArgs,
    #[arg(long, value_enum, default_value = "noiseless")]
    formulation: FormulationArg,
    /// Distance bound: a number, `auto` (smallest feasible) or `auto*F`.
    #[arg(long, default_value = "auto")]
    eps: String,
    /// Off-diagonal threshold (relative to the largest entry) for unweighted graphs.
    #[arg(long)]
    threshold: Option<f64>,
    /// Require every row of off-diagonal magnitudes to sum to at least this value.
    #[arg(long)]
    min_row_sum: Option<f64>,
    #[arg(long, default_value_t = 3)]
    lag: usize,
    #[arg(long, default_value_t = 0.1)]
    gap: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long, default_value_t = 50_000)]
    max_iter: usize,
    /// Write the assembled solver problem as JSON and stop.
    #[arg(long)]
    dump_problem: Option<PathBuf>,
    /// Solve a previously dumped problem and write the solver solution as JSON.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CertifyArgs {
    /// Graph JSON holding the true shift.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, value_enum, default_value = "adjacency")]
    set: SetArg,
    /// Known template columns for the incomplete certificate (all when empty).
    #[arg(long, value_delimiter = ',')]
    keep: Vec<usize>,
    /// Number of log-spaced δ values in [1e-6, 1e2].
    #[arg(long, default_value_t = certificates::DELTA_GRID_POINTS)]
    delta_points: usize,
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    #[arg(long)]
    signals: PathBuf,
    /// Absolute-correlation threshold.
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    /// Graph JSON to score against; the output becomes a score JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct DeconvolveArgs {
    /// Dense symmetric matrix as CSV.
    #[arg(long = "in")]
    input: PathBuf,
    /// Distance bound of the spectral method.
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    /// Graph JSON of the direct dependencies; with it the output is the recovered fraction.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Experiment preset; overrides the configuration's `experiment`.
    #[arg(long)]
    experiment: Option<String>,
    /// Number of instances per cell (seeds 0..N).
    #[arg(long)]
    instances: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    samples: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        // usage errors are configuration errors, not solver failures
        Err(e) => {
            if std::env::args().any(|a| a == "--json") {
                let message = e.kind().as_str().unwrap_or("invalid arguments").to_string();
                let body = serde_json::json!({ "error": { "kind": "config", "code": 3, "message": message } });
                eprintln!("{body}");
            } else {
                let _ = e.print();
            }
            return ExitCode::from(3);
        }
    };
    let json = cli.json;
    let jobs = cli.jobs;
    match par::with_jobs(jobs, move || dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if json {
                let body =
                    serde_json::json!({ "error": { "kind": f.kind_name(), "code": f.code(), "message": f.message } });
                eprintln!("{body}");
            } else {
                eprintln!("error: {f}");
            }
            ExitCode::from(f.code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.config.is_some() && !matches!(cli.command, Command::Benchmark(_)) {
        return Err(Failure::config("--config applies to benchmark only"));
    }
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Diffuse(a) => diffuse(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Certify(a) => certify(cli, a),
        Command::Baseline(a) => baseline(cli, a),
        Command::Deconvolve(a) => deconvolve(cli, a),
        Command::Benchmark(a) => benchmark(cli, a),
    }
}

/// Echoes `args` as the resolved configuration when `--print-config` is set.
fn print_config<T: Serialize>(cli: &Cli, args: &T) -> Result<bool> {
    if cli.print_config {
        let mut s = serde_json::to_string_pretty(args)?;
        s.push('\n');
        write_output(None, s.as_bytes())?;
    }
    Ok(cli.print_config)
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::from(e).context(p.display())),
        None => io::stdout().write_all(bytes).map_err(Failure::from),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::from(e).context(path.display()))
}

fn read_graph(path: &Path) -> Result<Graph> {
    Graph::from_json(&read_text(path)?).map_err(|e| Failure::from(e).context(path.display()))
}

fn read_signals(path: &Path) -> Result<SignalEnsemble> {
    let f = fs::File::open(path).map_err(|e| Failure::from(e).context(path.display()))?;
    SignalEnsemble::read_csv(io::BufReader::new(f)).map_err(|e| Failure::from(e).context(path.display()))
}

fn rng(cli: &Cli, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(experiments::derive_seed(cli.seed.unwrap_or(0), stream, &[]))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    if print_config(cli, a)? {
        return Ok(());
    }
    let mut rng = rng(cli, "generate");
    let g = loop {
        let g = match a.model {
            Model::Er => graphs::generate_er(a.n, a.p, &mut rng)?,
            Model::Ba => graphs::generate_ba(a.n, a.m0, a.m, &mut rng)?,
        };
        if !a.connected || g.is_connected() {
            break g;
        }
    };
    let bytes = if a.csv {
        let mut buf = Vec::new();
        g.write_edge_csv(&mut buf)?;
        buf
    } else {
        let mut s = g.to_json()?;
        s.push('\n');
        s.into_bytes()
    };
    write_output(cli.output.as_deref(), &bytes)
}

fn diffuse(cli: &Cli, a: &DiffuseArgs) -> Result<()> {
    if print_config(cli, a)? {
        return Ok(());
    }
    let g = read_graph(&a.graph)?;
    let gso = graphs::gso(&g, a.gso.gso_kind())?;
    let family = match a.filter {
        FilterArg::RandomResponse => FilterFamily::RandomResponse { lo: a.lo, hi: a.hi },
        FilterArg::PrecisionRoot => FilterFamily::PrecisionRoot { margin: a.margin },
        FilterArg::Polynomial => {
            FilterFamily::Polynomial { min_degree: a.min_degree, max_degree: a.max_degree, std: a.std }
        }
        FilterArg::InverseLaplacianRoot => FilterFamily::Smooth { model: SmoothModel::InverseLaplacianRoot },
        FilterArg::ArDiffusion => FilterFamily::Smooth { model: SmoothModel::ArDiffusion },
        FilterArg::Exponential => FilterFamily::Smooth { model: SmoothModel::Exponential },
    };
    let mut rng = rng(cli, "diffuse");
    let filter = family.build(&gso, &mut rng)?;
    let mut x = diffusion::diffuse(&filter, a.samples, &mut rng)?;
    if a.sigma > 0.0 {
        x = diffusion::perturb(&x, a.sigma, &mut rng)?;
    }
    let mut buf = Vec::new();
    x.write_csv(&mut buf)?;
    write_output(cli.output.as_deref(), &buf)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, source: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Failure::config(format!("--templates {source} needs {flag}")))
}

fn load_templates(a: &TemplateArgs) -> Result<SpectralTemplates> {
    let t = match a.templates {
        TemplateSource::Exact => {
            let g = read_graph(require(&a.graph, "--graph", "exact")?)?;
            SpectralTemplates::from_gso(&graphs::gso(&g, a.set.gso_kind())?)?
        }
        TemplateSource::Sample => {
            let x = read_signals(require(&a.signals, "--signals", "sample")?)?;
            diffusion::extract_templates(&diffusion::sample_covariance(&x), diffusion::DEFAULT_GROUP_TOL)?
        }
        TemplateSource::File => {
            let grid = require(&a.grid, "--grid", "file")?;
            let side = a.sidecar.as_deref().map(read_text).transpose()?;
            let f = fs::File::open(grid).map_err(|e| Failure::from(e).context(grid.display()))?;
            SpectralTemplates::read(f, side.as_deref()).map_err(|e| Failure::from(e).context(grid.display()))?
        }
    };
    if a.keep.is_empty() {
        return Ok(t);
    }
    if let Some(&c) = a.keep.iter().find(|&&c| c >= t.k()) {
        return Err(Failure::config(format!("template column {c} out of range (k = {})", t.k())));
    }
    Ok(t.select(&a.keep))
}

fn parse_epsilon(s: &str) -> Result<Epsilon> {
    let bad = || Failure::config(format!("--eps expects a number, `auto` or `auto*F`, got {s:?}"));
    if s == "auto" {
        return Ok(Epsilon::Auto);
    }
    if let Some(f) = s.strip_prefix("auto*") {
        return f.parse().map(Epsilon::AutoScaled).map_err(|_| bad());
    }
    s.parse().map(Epsilon::Fixed).map_err(|_| bad())
}

/// Edge list with weights rounded to 1e-9, well below solver precision, so that exact
/// recoveries print as exact values.
fn edge_csv(g: &Graph) -> Result<Vec<u8>> {
    let snapped = Graph::new(g.n(), g.edges().iter().map(|e| (e.i, e.j, (e.w * 1e9).round() / 1e9)))?;
    let mut buf = Vec::new();
    snapped.write_edge_csv(&mut buf)?;
    Ok(buf)
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    if print_config(cli, a)? {
        return Ok(());
    }
    let options = SolverOptions { max_iter: a.max_iter, ..SolverOptions::default() };
    if let Some(path) = &a.replay {
        let p = SparseRecoveryProblem::from_json(&read_text(path)?)?;
        let sol = solver::solve(&p, &options)?;
        let plain = |v: &linalg::Vector| v.iter().copied().collect::<Vec<f64>>();
        let body = serde_json::json!({
            "status": sol.status,
            "s": plain(&sol.s),
            "lambda": plain(&sol.lambda),
            "s_extra": sol.s_extra.as_ref().map(plain),
            "objective_value": sol.objective_value,
            "primal_residual": sol.primal_residual,
            "dual_residual": sol.dual_residual,
            "max_violation": sol.max_violation,
            "iterations": sol.iterations,
        });
        let mut s = serde_json::to_string_pretty(&body)?;
        s.push('\n');
        return write_output(cli.output.as_deref(), s.as_bytes());
    }
    let t = load_templates(&a.source)?;
    let mut set = ShiftConstraintSet::new(a.source.set.kind());
    if let Some(m) = a.min_row_sum {
        set = set.with_min_row_sum(m);
    }
    let eps = parse_epsilon(&a.eps)?;
    let formulation = match a.formulation {
        FormulationArg::Noiseless => Formulation::Noiseless,
        FormulationArg::Reweighted => {
            Formulation::Reweighted(Reweighting { tau: a.tau, delta: a.delta, iters: a.rounds })
        }
        FormulationArg::Noisy | FormulationArg::Smooth => Formulation::noisy(eps),
        FormulationArg::Incomplete => Formulation::Incomplete,
        FormulationArg::IncompleteNoisy => Formulation::IncompleteNoisy { epsilon: eps },
    };
    let mut req = InferenceRequest::new(t, set, formulation);
    req.solver = options;
    if let Some(path) = &a.dump_problem {
        let mut built = inference::build_problem(&req)?;
        inference::resolve_epsilon(&mut built, &req.solver)?;
        return write_output(Some(path), built.problem.to_json()?.as_bytes());
    }
    let mut est = match a.formulation {
        FormulationArg::Smooth => {
            if a.source.set.kind() != ConstraintKind::CombinatorialLaplacian {
                return Err(Failure::config("--formulation smooth needs --set combinatorial-laplacian"));
            }
            inference::infer_smooth_laplacian(&req, a.lag, a.gap)?
        }
        _ => inference::infer(&req)?,
    };
    if let Some(t) = a.threshold {
        est.s = evaluation::threshold(&inference::normalize_off_diagonal(&est.s), t);
    }
    let edges = edge_csv(&est.graph(evaluation::DEFAULT_EDGE_TOL)?)?;
    match &cli.output {
        Some(out) => {
            write_output(Some(&out.with_extension("json")), est.to_json()?.as_bytes())?;
            write_output(Some(&out.with_extension("csv")), &edges)
        }
        None => write_output(None, &edges),
    }
}

fn certify(cli: &Cli, a: &CertifyArgs) -> Result<()> {
    if print_config(cli, a)? {
        return Ok(());
    }
    let g = read_graph(&a.graph)?;
    let gso = graphs::gso(&g, a.set.gso_kind())?;
    let set = ShiftConstraintSet::new(a.set.kind());
    let t = SpectralTemplates::from_gso(&gso)?;
    let truth = set.normalize(&gso.matrix);
    let grid = log_grid(-6.0, 2.0, a.delta_points.max(1));
    let cert = if a.keep.is_empty() {
        certificates::certify_noiseless(&t, &truth, &set, &grid)?
    } else {
        if let Some(&c) = a.keep.iter().find(|&&c| c >= t.k()) {
            return Err(Failure::config(format!("template column {c} out of range (k = {})", t.k())));
        }
        certificates::certify_incomplete(&t.select(&a.keep), &truth, &set, None, &grid)?
    };
    let mut s = serde_json::to_string_pretty(&cert)?;
    s.push('\n');
    write_output(cli.output.as_deref(), s.as_bytes())
}

fn baseline(cli: &Cli, a: &BaselineArgs) -> Result<()> {
    if print_config(cli, a)? {
        return Ok(());
    }
    let x = read_signals(&a.signals)?;
    let c = evaluation::correlation_baseline(&x, a.threshold)?;
    let bytes = match &a.truth {
        Some(path) => {
            let truth = graphs::adjacency(&read_graph(path)?).matrix;
            let score = evaluation::score(&c, &truth, evaluation::DEFAULT_EDGE_TOL)?;
            let mut s = serde_json::to_string_pretty(&score)?;
            s.push('\n');
            s.into_bytes()
        }
        None => edge_csv(&Graph::from_matrix(&c, evaluation::DEFAULT_EDGE_TOL)?)?,
    };
    write_output(cli.output.as_deref(), &bytes)
}

/// Off-diagonal upper-triangle entries ordered by magnitude, ties by `(i, j)`.
fn ranked_edges(m: &Matrix, k: usize) -> Vec<(usize, usize, f64)> {
    let n = m.nrows();
    let mut e: Vec<(usize, usize, f64)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| (i, j, m[(i, j)])).collect();
    e.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then((a.0, a.1).cmp(&(b.0, b.1))));
    e.truncate(k);
    e
}

fn deconvolve(cli: &Cli, a: &DeconvolveArgs) -> Result<()> {
    if print_config(cli, a)? {
        return Ok(());
    }
    let f = fs::File::open(&a.input).map_err(|e| Failure::from(e).context(a.input.display()))?;
    let observed = linalg::io::read_csv(f).map_err(|e| Failure::from(e).context(a.input.display()))?;
    let n = observed.nrows();
    if observed.ncols() != n || linalg::max_asymmetry(&observed) > 1e-9 * (1.0 + observed.amax()) {
        return Err(Failure::config("the observed matrix must be square and symmetric"));
    }
    let deconv = evaluation::network_deconvolution(&observed)?;
    let eig = linalg::sym_eig(&observed).map_err(|e| Failure::config(e.to_string()))?;
    let mut v = eig.vectors;
    diffusion::normalize_signs(&mut v);
    let t = SpectralTemplates::new(v, eig.values, diffusion::Provenance::File, diffusion::DEFAULT_GROUP_TOL)?;
    let req = InferenceRequest::new(t, ShiftConstraintSet::adjacency(), Formulation::noisy(Epsilon::Fixed(a.eps)));
    let est = inference::infer(&req)?;
    let methods = [("observed", &observed), ("deconvolution", &deconv), ("spectemp", &est.s)];
    let k = a.top_k.min(n * n.saturating_sub(1) / 2);
    let fmt = linalg::io::format_float;
    let mut out = String::new();
    match &a.truth {
        Some(path) => {
            let truth = graphs::adjacency(&read_graph(path)?).matrix;
            out.push_str("method,k,fraction\n");
            for (name, m) in methods {
                let f = evaluation::top_k_recovery(m, &truth, k)?;
                out.push_str(&format!("{name},{k},{}\n", fmt(f)));
            }
        }
        None => {
            out.push_str("method,rank,i,j,weight\n");
            for (name, m) in methods {
                for (r, (i, j, w)) in ranked_edges(m, k).into_iter().enumerate() {
                    out.push_str(&format!("{name},{},{i},{j},{}\n", r + 1, fmt(w)));
                }
            }
        }
    }
    write_output(cli.output.as_deref(), out.as_bytes())
}

/// Preset of the chosen experiment, overlaid with the configuration file, then with flags.
fn resolve_config(cli: &Cli, a: &BenchmarkArgs) -> Result<ExperimentConfig> {
    let file: Option<Value> = match &cli.config {
        Some(path) => {
            Some(serde_json::from_str(&read_text(path)?).map_err(|e| Failure::from(e).context(path.display()))?)
        }
        None => None,
    };
    if file.as_ref().is_some_and(|v| !v.is_object()) {
        return Err(Failure::config("the configuration must be a JSON object"));
    }
    let name = match (&a.experiment, file.as_ref().and_then(|v| v.get("experiment"))) {
        (Some(name), _) => name.clone(),
        (None, Some(Value::String(name))) => name.clone(),
        (None, Some(_)) => return Err(Failure::config("`experiment` must be a string")),
        (None, None) => return Err(Failure::config("name an experiment with --experiment or in --config")),
    };
    let kind = ExperimentKind::parse(&name).ok_or_else(|| {
        let known: Vec<&str> = ExperimentKind::all().iter().map(|k| k.name()).collect();
        Failure::config(format!("unknown experiment {name:?}; expected one of {}", known.join(", ")))
    })?;
    let mut merged = serde_json::to_value(ExperimentConfig::preset(kind))?;
    if let Some(Value::Object(fields)) = file {
        for (k, v) in fields {
            merged[k] = v;
        }
    }
    merged["experiment"] = Value::String(kind.name().into());
    let mut cfg: ExperimentConfig = serde_json::from_value(merged)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(k) = a.instances {
        cfg.seeds = (0..k).collect();
    }
    if !a.n.is_empty() {
        cfg.n = a.n.clone();
    }
    if !a.p.is_empty() {
        cfg.p = a.p.clone();
    }
    if !a.samples.is_empty() {
        cfg.samples = a.samples.clone();
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn benchmark(cli: &Cli, a: &BenchmarkArgs) -> Result<()> {
    let cfg = resolve_config(cli, a)?;
    if print_config(cli, &cfg)? {
        return Ok(());
    }
    let report = experiments::run(&cfg).map_err(|e| Failure { kind: error::Kind::Solver, message: e })?;
    let dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Failure::from(e).context(dir.display()))?;
    let name = cfg.experiment.name();
    let mut rows = Vec::new();
    report.write_rows_csv(&mut rows).map_err(|e| Failure::io(e.to_string()))?;
    write_output(Some(&dir.join(format!("{name}_rows.csv"))), &rows)?;
    let mut summary = Vec::new();
    report.write_summary_csv(&mut summary).map_err(|e| Failure::io(e.to_string()))?;
    write_output(Some(&dir.join(format!("{name}_summary.csv"))), &summary)?;
    let status = serde_json::json!({
        "experiment": name,
        "config_hash": report.config_hash,
        "rows": report.rows.len(),
        "failures": report.failures(),
        "trained": report.trained.iter().map(|(k, v)| (k.clone(), *v)).collect::<std::collections::BTreeMap<_, _>>(),
        "elapsed_seconds": report.elapsed.as_secs_f64(),
    });
    eprintln!("{status}");
    Ok(())
}
