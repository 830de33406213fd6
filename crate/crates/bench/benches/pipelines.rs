//! Criterion benches for the hot paths: data generation, the Gram-side
//! spectral summary, the Stieltjes fixed point, and the cluster sampler.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{Complex, DVector};

use spikelab::covariance::spectral_summary;
use spikelab::datagen::{generate, NoiseLaw, PopulationModel, Sigma0};
use spikelab::spectrum::{stieltjes_solve, support_edge, Aspect, DiscreteSpectrum, Regime};
use spikelab::spikes::{cluster_limit_sampler, ProjectionData};

fn two_group(p: usize, n: usize) -> PopulationModel {
    let mut mu2 = DVector::zeros(p);
    mu2[0] = (3.0 * (p as f64 / n as f64).sqrt() / 0.25).sqrt();
    PopulationModel::new(
        vec![DVector::zeros(p), mu2],
        Sigma0::identity(p),
        vec![0.5, 0.5],
        NoiseLaw::Gaussian,
    )
    .unwrap()
}

fn bench_generate(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate");
    for &(n, p) in &[(100usize, 1000usize), (200, 4000)] {
        let model = two_group(p, n);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{p}")),
            &model,
            |b, m| {
                b.iter(|| generate(m, n, 42).unwrap());
            },
        );
    }
    group.finish();
}

fn bench_spectral_summary(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral_summary");
    for &(n, p) in &[(100usize, 1000usize), (200, 4000)] {
        let model = two_group(p, n);
        let data = generate(&model, n, 42).unwrap();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{p}")),
            &data.x,
            |b, x| {
                b.iter(|| spectral_summary(x).unwrap());
            },
        );
    }
    group.finish();
}

fn bench_stieltjes(c: &mut Criterion) {
    let h = DiscreteSpectrum::from_points([(1.0, 0.5), (2.0, 0.5)]).unwrap();
    let regime = Regime::from_spectrum(&h, Aspect::Finite(10.0));
    let edge = support_edge(&h, &regime).unwrap().right_edge;
    c.bench_function("stieltjes_interior", |b| {
        b.iter(|| stieltjes_solve(&h, &regime, Complex::new(0.4, 1e-6)).unwrap());
    });
    c.bench_function("stieltjes_real_exterior", |b| {
        b.iter(|| stieltjes_solve(&h, &regime, Complex::new(edge + 0.5, 0.0)).unwrap());
    });
}

fn bench_cluster_sampler(c: &mut Criterion) {
    let pd = ProjectionData::ultrahigh_two_group(3.0, 0.5).unwrap();
    let phi_prime = 1.0 - 1.0 / 9.0;
    c.bench_function("cluster_sampler_1000", |b| {
        b.iter(|| cluster_limit_sampler(&pd, 1, phi_prime, 3.0, 7, 1000).unwrap());
    });
}

criterion_group!(
    benches,
    bench_generate,
    bench_spectral_summary,
    bench_stieltjes,
    bench_cluster_sampler
);
criterion_main!(benches);
