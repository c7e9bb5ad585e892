//! Sequential versus rayon execution of the per-system kernels. Build with
//! `--no-default-features` to see the parallel arm fall back to sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fleet_core::admm::{run_distributed, AdmmConfig, InProcessBus};
use fleet_core::baseline::solve_tikhonov_with;
use fleet_core::datagen::{default_paper_config, generate_fleet};
use fleet_core::oracle::{brute_force_detect, OracleOptions};
use fleet_core::solver::{solve_group_lasso, SolverConfig};
use fleet_core::{Execution, FleetDataset, PNorm};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn aircraft_fleet() -> FleetDataset {
    generate_fleet(&default_paper_config().with_seed(1)).unwrap()
}

fn small_fleet(systems: usize) -> FleetDataset {
    let mut cfg = default_paper_config().with_seed(2);
    cfg.systems = systems;
    cfg.observations = 100;
    cfg.anomaly_tags = vec![3, 11];
    generate_fleet(&cfg).unwrap()
}

fn central(c: &mut Criterion) {
    let fleet = aircraft_fleet();
    let mut g = c.benchmark_group("central_solve");
    g.sample_size(10);
    for lambda in [1_000.0, 30_000.0] {
        for (name, exec) in MODES {
            let mut cfg = SolverConfig::new(lambda, PNorm::L2);
            cfg.execution = exec;
            g.bench_with_input(BenchmarkId::new(name, lambda), &cfg, |b, cfg| {
                b.iter(|| solve_group_lasso(&fleet, cfg).unwrap())
            });
        }
    }
    g.finish();
}

fn admm(c: &mut Criterion) {
    let fleet = aircraft_fleet();
    let mut g = c.benchmark_group("admm_100_iterations");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = AdmmConfig {
            max_iterations: 100,
            execution: exec,
            ..AdmmConfig::default()
        };
        g.bench_function(name, |b| {
            b.iter(|| {
                // Capped runs end in a non-convergence error carrying the iterate.
                let _ = run_distributed(&fleet, 30_000.0, PNorm::L2, &cfg, &InProcessBus::new());
            })
        });
    }
    g.finish();
}

fn oracle(c: &mut Criterion) {
    let fleet = small_fleet(40);
    let mut g = c.benchmark_group("brute_force_k2_n40");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = OracleOptions {
            execution: exec,
            ..OracleOptions::default()
        };
        g.bench_function(name, |b| b.iter(|| brute_force_detect(&fleet, 2, opts).unwrap()));
    }
    g.finish();
}

fn tikhonov(c: &mut Criterion) {
    let fleet = aircraft_fleet();
    let mut g = c.benchmark_group("tikhonov");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| solve_tikhonov_with(&fleet, 100.0, 1e-8, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, central, admm, oracle, tikhonov);
criterion_main!(benches);
