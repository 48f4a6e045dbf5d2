use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use kkflow_core::mesh::Geometry;
use kkflow_core::spectral::{SpectralPreconditioner, Stencil};
use kkflow_core::{Evolution, Scenario};

fn perturbed(preset: &str, n: usize) -> kkflow_core::scenario::Prepared {
    let text = format!("preset = {}\ngrid.dims = {}\nperturb.amplitude = 1e-3\n", preset, n);
    Scenario::parse(&text).unwrap().prepare().unwrap()
}

fn operators(c: &mut Criterion) {
    let pr = perturbed("full-kk", 16);
    let g = pr.state.g.clone();
    c.bench_function("geometry_new_16", |b| b.iter(|| Geometry::new(black_box(&g)).unwrap()));
    let geom = Geometry::new(&g).unwrap();
    c.bench_function("ricci_16", |b| b.iter(|| black_box(&geom).ricci()));
    let f = pr.state.lapse.clone();
    c.bench_function("weighted_laplacian_16", |b| b.iter(|| geom.weighted_laplacian(black_box(&f))));
}

fn preconditioner(c: &mut Criterion) {
    let pr = perturbed("milne", 32);
    let grid = pr.chart.grid;
    let pc = SpectralPreconditioner::new(grid, [1.0, 0.0, 0.0, 1.0, 0.0, 1.0], 1.0 / 3.0, Stencil::Compact);
    let r = grid.sample(|x| (x[0] + 2.0 * x[1]).sin() * x[2].cos());
    c.bench_function("spectral_apply_32", |b| b.iter(|| pc.apply(black_box(&r))));
}

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("step");
    group.sample_size(10);
    for preset in ["milne", "full-kk"] {
        let pr = perturbed(preset, 8);
        let dt = pr.run.dt;
        group.bench_function(format!("{}_8", preset), |b| {
            b.iter_batched(
                || Evolution::new(&pr.chart, pr.state.clone(), pr.evolution).unwrap(),
                |mut ev| ev.step(dt).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, operators, preconditioner, step);
criterion_main!(benches);
