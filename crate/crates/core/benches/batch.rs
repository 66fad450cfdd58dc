//! Parallel and sequential execution of the same batches.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectempo::certificates::{self, DualSystem};
use spectempo::diffusion::SpectralTemplates;
use spectempo::experiments::{self, ExperimentConfig, ExperimentKind};
use spectempo::graphs::{self, ShiftConstraintSet};
use spectempo::par::{self, Execution};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn feasibility_batch(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        n: vec![10],
        p: vec![0.2, 0.5],
        seeds: (0..16).collect(),
        ..ExperimentConfig::preset(ExperimentKind::Fig1Feasibility)
    };
    let mut group = c.benchmark_group("fig1-feasibility");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| experiments::run_with(&cfg, exec).expect("batch runs"))
        });
    }
    group.finish();
}

fn reweighted_batch(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        n: vec![10],
        p: vec![0.3],
        seeds: (0..4).collect(),
        ..ExperimentConfig::preset(ExperimentKind::Fig1Reweighted)
    };
    let mut group = c.benchmark_group("fig1-reweighted");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| experiments::run_with(&cfg, exec).expect("batch runs"))
        });
    }
    group.finish();
}

fn certificate_grid(c: &mut Criterion) {
    let set = ShiftConstraintSet::adjacency();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gso = loop {
        let g = graphs::generate_er(14, 0.3, &mut rng).expect("valid parameters");
        if g.is_connected() {
            break graphs::adjacency(&g);
        }
    };
    let t = SpectralTemplates::from_gso(&gso).expect("symmetric shift");
    let truth = set.normalize(&gso.matrix);
    let mats = certificates::build_certificate_matrices(&t, &set, None).expect("full templates");
    let a = mats.noiseless().expect("noiseless system");
    let off = certificates::off_diagonal_indices(14);
    let (support, penalized): (Vec<usize>, Vec<usize>) =
        (0..off.len()).partition(|&r| truth[(off[r] % 14, off[r] / 14)].abs() > 1e-9);
    let system = DualSystem::new(a, &support, &penalized).expect("dual system");
    let grid = certificates::log_grid(-6.0, 2.0, 64);
    let mut group = c.benchmark_group("certificate-grid");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::map_with(exec, &grid, |&d| system.value(d).ok()))
        });
    }
    group.finish();
}

criterion_group!(benches, feasibility_batch, reweighted_batch, certificate_grid);
criterion_main!(benches);
