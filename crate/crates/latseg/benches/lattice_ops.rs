//! Parallel vs sequential comparison of the hot lattice loops. The same
//! closure runs through `map_indexed` (rayon when the default `parallel`
//! feature is on) and `map_indexed_seq`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latseg::lattice::{elevate, simplex_keys, SparseLattice};
use latseg::parallel::{map_indexed, map_indexed_seq};

fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.gen::<f64>() * 30.0,
                rng.gen::<f64>() * 30.0,
                rng.gen::<f64>() * 30.0,
            ]
        })
        .collect()
}

fn build_lattice(points: &[[f64; 3]]) -> SparseLattice {
    let mut lat = SparseLattice::with_default_sigma(3, 0);
    for p in points {
        lat.enclosing_simplex(p, true).unwrap();
    }
    lat
}

/// Per-point simplex resolution: elevation plus rank-based rounding.
fn bench_simplex(c: &mut Criterion) {
    let points = random_points(20_000, 1);
    let sigma = [0.6; 3];
    let mut group = c.benchmark_group("simplex_resolution");
    for (name, run) in [
        ("parallel", true),
        ("sequential", false),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &run, |b, &par| {
            b.iter(|| {
                let work = |i: usize| {
                    let elevated = elevate(&points[i], &sigma).unwrap();
                    simplex_keys(&elevated).unwrap().1[0]
                };
                if par {
                    map_indexed(points.len(), work)
                } else {
                    map_indexed_seq(points.len(), work)
                }
            })
        });
    }
    group.finish();
}

/// Per-vertex one-hop neighbor resolution over a sizable lattice.
fn bench_adjacency(c: &mut Criterion) {
    let lat = build_lattice(&random_points(8_000, 2));
    let k = lat.len();
    let mut group = c.benchmark_group("adjacency");
    for (name, run) in [
        ("parallel", true),
        ("sequential", false),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &run, |b, &par| {
            b.iter(|| {
                let work = |v: usize| lat.neighbor_rows(v);
                if par {
                    map_indexed(k, work)
                } else {
                    map_indexed_seq(k, work)
                }
            })
        });
    }
    group.finish();
}

/// Per-vertex convolution-style gather: weighted sum over neighbor rows.
fn bench_conv_gather(c: &mut Criterion) {
    let lat = build_lattice(&random_points(8_000, 3));
    let k = lat.len();
    let adjacency = latseg::ops::adjacency(&lat);
    let channels = 16usize;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let values: Vec<f32> = (0..k * channels).map(|_| rng.gen()).collect();
    let mut group = c.benchmark_group("conv_gather");
    for (name, run) in [
        ("parallel", true),
        ("sequential", false),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &run, |b, &par| {
            b.iter(|| {
                let work = |v: usize| {
                    let mut acc = vec![0.0f32; channels];
                    for (a, &x) in acc.iter_mut().zip(&values[v * channels..(v + 1) * channels]) {
                        *a += x;
                    }
                    for &n in adjacency[v].iter().flatten() {
                        for (a, &x) in
                            acc.iter_mut().zip(&values[n * channels..(n + 1) * channels])
                        {
                            *a += 0.5 * x;
                        }
                    }
                    acc
                };
                if par {
                    map_indexed(k, work)
                } else {
                    map_indexed_seq(k, work)
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simplex, bench_adjacency, bench_conv_gather);
criterion_main!(benches);
