use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gnc_core::allocation::{build_problem, AllocationProblem};
use gnc_core::batch::{drift_sweep, drift_sweep_sequential, solve_many, solve_many_sequential};
use gnc_core::config::stock;
use gnc_core::frames::rotation_from_euler;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn problems(n: usize) -> Vec<AllocationProblem> {
    let system = stock("vectored").expect("stock config");
    let mode = system.vehicle.modes.iter().find(|m| m.name == "five_dof").expect("mode");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..n)
        .map(|_| {
            let tau = DVector::from_fn(mode.dofs.len(), |_, _| rng.random_range(-20.0..20.0));
            let att = rotation_from_euler(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.0..3.0),
            );
            build_problem(&system.vehicle.thrusters, &att, mode.dofs, &tau, 0.1).expect("problem")
        })
        .collect()
}

fn allocation(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_many");
    for n in [64, 1024] {
        let ps = problems(n);
        group.bench_with_input(BenchmarkId::new("sequential", n), &ps, |b, ps| {
            b.iter(|| solve_many_sequential(black_box(ps)))
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &ps, |b, ps| {
            b.iter(|| solve_many(black_box(ps)))
        });
    }
    group.finish();
}

fn drift(c: &mut Criterion) {
    let mut system = stock("survey").expect("stock config");
    system.runner.noise.drift_rate = 0.05;
    let seeds: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("drift_sweep");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| drift_sweep_sequential(&system, black_box(&seeds), 10.0).expect("sweep"))
    });
    group.bench_function("parallel", |b| {
        b.iter(|| drift_sweep(&system, black_box(&seeds), 10.0).expect("sweep"))
    });
    group.finish();
}

criterion_group!(benches, allocation, drift);
criterion_main!(benches);
