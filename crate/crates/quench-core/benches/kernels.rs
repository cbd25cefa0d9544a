//! Kernel benchmarks. Run once with the default (rayon) build and once with
//! `--no-default-features` to compare the data-parallel core against the
//! sequential fallback:
//!
//! ```text
//! cargo bench -p quench-core --bench kernels -- --save-baseline parallel
//! cargo bench -p quench-core --bench kernels --no-default-features -- --baseline parallel
//! ```

use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use quench_core::grid::{laplacian_neumann, Field, FieldSeries, Grid, TimeGrid};
use quench_core::potential::{ConcavePart, ConvexMode};
use quench_core::spectral::NeumannOps;
use quench_core::state::{PhysParams, ProblemData, StateSolver};

fn field_on(n: usize) -> (Grid, Field) {
    let grid = Grid::new(n, n, 1.0, 1.0).unwrap();
    let f = Field::from_fn(grid, |x, y| (7.0 * x).sin() * (5.0 * y).cos());
    (grid, f)
}

fn bench_laplacian(c: &mut Criterion) {
    let mut group = c.benchmark_group("laplacian");
    for n in [64usize, 128, 256] {
        let (_, f) = field_on(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &f, |b, f| {
            b.iter(|| laplacian_neumann(black_box(f)))
        });
    }
    group.finish();
}

fn bench_inv_laplacian(c: &mut Criterion) {
    let mut group = c.benchmark_group("inv_neumann_laplacian");
    for n in [64usize, 128, 256] {
        let (grid, mut f) = field_on(n);
        f.remove_mean();
        let ops = NeumannOps::new(grid);
        group.bench_with_input(BenchmarkId::from_parameter(n), &f, |b, f| {
            b.iter(|| ops.inv_laplacian_unchecked(black_box(f)))
        });
    }
    group.finish();
}

fn bench_dual_norm(c: &mut Criterion) {
    let mut group = c.benchmark_group("dual_norm");
    for n in [64usize, 128] {
        let (grid, f) = field_on(n);
        let ops = NeumannOps::new(grid);
        group.bench_with_input(BenchmarkId::from_parameter(n), &f, |b, f| {
            b.iter(|| ops.dual_norm(black_box(f)))
        });
    }
    group.finish();
}

fn bench_forward_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("state_solve_nt8");
    group.sample_size(10);
    for n in [32usize, 64] {
        let grid = Grid::new(n, n, 1.0, 1.0).unwrap();
        let ops = Arc::new(NeumannOps::new(grid));
        let tg = TimeGrid::new(0.04, 8).unwrap();
        let params = PhysParams {
            gamma: 1.0,
            a: 0.1,
            b: 0.5,
            kappa1: 1.0,
            kappa2: 1.0,
            lambda: 0.2,
        };
        let solver = StateSolver::new(
            ops,
            tg,
            params,
            ConcavePart::default(),
            ConvexMode::LogQuench { alpha: 0.1 },
        );
        let data = ProblemData {
            f: FieldSeries::constant(grid, &tg, 0.3),
            phi0: Field::from_fn(grid, |x, y| {
                0.9 * (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).cos()
            }),
            w0: Field::zeros(grid),
            w1: Field::zeros(grid),
        };
        let u = FieldSeries::constant(grid, &tg, 0.2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &(), |b, _| {
            b.iter(|| solver.solve(black_box(&data), black_box(&u)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_laplacian,
    bench_inv_laplacian,
    bench_dual_norm,
    bench_forward_step
);
criterion_main!(benches);
