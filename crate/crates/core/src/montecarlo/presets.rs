//! Named experiment presets and the model builders behind them.
//!
//! Desk-scale defaults reproduce the qualitative behavior of the full-size
//! designs; dimensions and replicate counts are chosen so the whole battery
//! runs on a workstation.

use nalgebra::DVector;

use crate::datagen::{NoiseLaw, PopulationModel, Sigma0};
use crate::error::{Error, Result};
use crate::montecarlo::{ExperimentConfig, Study};
use crate::spectrum::Aspect;

fn sparse_mean(p: usize, entries: &[(usize, f64)], scale: f64) -> DVector<f64> {
    let mut v = DVector::zeros(p);
    for &(idx, val) in entries {
        v[idx] = scale * val;
    }
    v
}

/// Four balanced groups over the two-level covariance `diag(1…1, 2…2)` with
/// mean offsets scaled by `(c_n b_p)^{1/4}`; spike strengths
/// `3 + √(2/(5 c_n))` (twice) and `2 + √(2/(5 c_n))`.
pub fn four_group_two_level(n: usize, p: usize, noise: NoiseLaw) -> Result<PopulationModel> {
    if !p.is_multiple_of(2) {
        return Err(Error::DimensionMismatch(
            "two-level covariance needs even p".into(),
        ));
    }
    let c_n = p as f64 / n as f64;
    let b_p = 2.5;
    let scale = (c_n * b_p).powf(0.25);
    let sqrt2 = 2.0_f64.sqrt();
    let means = vec![
        DVector::zeros(p),
        sparse_mean(p, &[(0, 4.0)], scale),
        sparse_mean(p, &[(0, 2.0), (1, 3.0 * sqrt2)], scale),
        sparse_mean(p, &[(0, 2.0), (1, sqrt2), (2, -4.0)], scale),
    ];
    PopulationModel::new(means, Sigma0::two_level(p, 2.0), vec![0.25; 4], noise)
}

/// Exponential noise for the four-group design (`v₃ = 2`, `v₄ = 9`).
pub fn four_group_case1(n: usize, p: usize) -> Result<PopulationModel> {
    four_group_two_level(n, p, NoiseLaw::ExpCentered)
}

/// Standardized Bernoulli noise for the four-group design
/// (`t = (√3+3)/6`, `v₃ = −√2`, `v₄ = 3`).
pub fn four_group_case2(n: usize, p: usize) -> Result<PopulationModel> {
    four_group_two_level(
        n,
        p,
        NoiseLaw::BernoulliT {
            t: (3.0_f64.sqrt() + 3.0) / 6.0,
        },
    )
}

/// Three equal groups, identity covariance, orthogonal ±20 mean offsets.
/// At `p = 300²`, `n = 300` the two detached spikes predict `≈ 7.886` and
/// `≈ 3.005` with the bulk edge at 2.
pub fn three_group_orthogonal(p: usize) -> Result<PopulationModel> {
    let means = vec![
        DVector::zeros(p),
        sparse_mean(p, &[(0, -20.0)], 1.0),
        sparse_mean(p, &[(1, 20.0)], 1.0),
    ];
    PopulationModel::new(
        means,
        Sigma0::identity(p),
        vec![1.0 / 3.0; 3],
        NoiseLaw::Gaussian,
    )
}

/// Four balanced groups over a tridiagonal-root covariance, strong-signal
/// means scaled by `c_n^{1/4}`.
pub fn four_group_tridiagonal_strong(
    n: usize,
    p: usize,
    noise: NoiseLaw,
) -> Result<PopulationModel> {
    let scale = (p as f64 / n as f64).powf(0.25);
    let means = vec![
        sparse_mean(p, &[(3, 5.0)], scale),
        sparse_mean(p, &[(0, 4.0 * 2.8_f64.sqrt()), (3, 5.0)], scale),
        sparse_mean(
            p,
            &[
                (0, 2.0 * 2.8_f64.sqrt()),
                (1, 2.0 * 8.4_f64.sqrt()),
                (3, 5.0),
            ],
            scale,
        ),
        sparse_mean(
            p,
            &[
                (0, 2.0 * 2.8_f64.sqrt()),
                (1, 2.0 / 3.0 * 8.4_f64.sqrt()),
                (2, -8.0 / 3.0 * 6.0_f64.sqrt()),
                (3, 5.0),
            ],
            scale,
        ),
    ];
    let sigma0 = Sigma0::TridiagonalRoot {
        diag: vec![1.0; p],
        off: vec![0.5; p - 1],
    };
    PopulationModel::new(means, sigma0, vec![0.25; 4], noise)
}

/// Weak-signal variant of the tridiagonal four-group design.
pub fn four_group_tridiagonal_weak(n: usize, p: usize, noise: NoiseLaw) -> Result<PopulationModel> {
    let scale = (p as f64 / n as f64).powf(0.25);
    let means = vec![
        sparse_mean(p, &[(3, 5.0)], scale),
        sparse_mean(p, &[(0, 4.0 * 1.8_f64.sqrt()), (3, 5.0)], scale),
        sparse_mean(
            p,
            &[
                (0, 2.0 * 1.8_f64.sqrt()),
                (1, 2.0 * 5.4_f64.sqrt()),
                (3, 5.0),
            ],
            scale,
        ),
        sparse_mean(
            p,
            &[
                (0, 2.0 * 1.8_f64.sqrt()),
                (1, 2.0 * 0.6_f64.sqrt()),
                (2, -4.0 * 1.2_f64.sqrt()),
                (3, 5.0),
            ],
            scale,
        ),
    ];
    let sigma0 = Sigma0::TridiagonalRoot {
        diag: vec![1.0; p],
        off: vec![0.5; p - 1],
    };
    PopulationModel::new(means, sigma0, vec![0.25; 4], noise)
}

/// Two groups over the two-level covariance with a constant mean offset
/// calibrated so the between-group spike strength is exactly `alpha`.
pub fn two_group_constant_offset(
    n: usize,
    p: usize,
    k1: f64,
    alpha: f64,
) -> Result<PopulationModel> {
    if !p.is_multiple_of(2) {
        return Err(Error::DimensionMismatch(
            "two-level covariance needs even p".into(),
        ));
    }
    let b_p = 2.5;
    let w2 = alpha / ((n as f64 / (p as f64 * b_p)).sqrt() * k1 * (1.0 - k1) * p as f64);
    let means = vec![DVector::zeros(p), DVector::from_element(p, w2.sqrt())];
    PopulationModel::new(
        means,
        Sigma0::two_level(p, 2.0),
        vec![k1, 1.0 - k1],
        NoiseLaw::Gaussian,
    )
}

/// Balanced two-group identity-covariance model with one sparse mean offset,
/// sized for panel diagnostics.
pub fn two_group_panel_model(n: usize, p: usize) -> Result<PopulationModel> {
    let c_n = p as f64 / n as f64;
    let means = vec![
        DVector::zeros(p),
        sparse_mean(p, &[(0, 2.0)], c_n.powf(0.25)),
    ];
    PopulationModel::new(
        means,
        Sigma0::identity(p),
        vec![0.5, 0.5],
        NoiseLaw::Gaussian,
    )
}

/// Names accepted by [`preset`].
pub fn preset_names() -> &'static [&'static str] {
    &[
        "lsd_semicircle",
        "phase_transition",
        "spike_clt_c10_case1",
        "spike_clt_c10_case2",
        "spike_clt_c05_case1",
        "spike_clt_c05_case2",
        "group_count_strong",
        "cluster_score_full_recall",
        "cluster_score_even_errors",
        "sesquilinear_z3",
    ]
}

/// Build a named study configuration at desk scale.
pub fn preset(name: &str, seed: u64) -> Result<ExperimentConfig> {
    let config = match name {
        "lsd_semicircle" => ExperimentConfig {
            model: PopulationModel::homogeneous(
                40_000,
                Sigma0::identity(40_000),
                NoiseLaw::Gaussian,
            )?,
            n: 200,
            p: 40_000,
            replicates: 20,
            seed,
            study: Study::LsdFit {
                aspect: Aspect::Infinite,
            },
        },
        "phase_transition" => ExperimentConfig {
            model: three_group_orthogonal(90_000)?,
            n: 300,
            p: 90_000,
            replicates: 100,
            seed,
            study: Study::SpikeClt,
        },
        "spike_clt_c10_case1" => ExperimentConfig {
            model: four_group_case1(200, 2000)?,
            n: 200,
            p: 2000,
            replicates: 1000,
            seed,
            study: Study::SpikeClt,
        },
        "spike_clt_c10_case2" => ExperimentConfig {
            model: four_group_case2(200, 2000)?,
            n: 200,
            p: 2000,
            replicates: 1000,
            seed,
            study: Study::SpikeClt,
        },
        "spike_clt_c05_case1" => ExperimentConfig {
            model: four_group_case1(200, 100)?,
            n: 200,
            p: 100,
            replicates: 1000,
            seed,
            study: Study::SpikeClt,
        },
        "spike_clt_c05_case2" => ExperimentConfig {
            model: four_group_case2(200, 100)?,
            n: 200,
            p: 100,
            replicates: 1000,
            seed,
            study: Study::SpikeClt,
        },
        "group_count_strong" => ExperimentConfig {
            model: four_group_tridiagonal_strong(120, 30_000, NoiseLaw::Gaussian)?,
            n: 120,
            p: 30_000,
            replicates: 200,
            seed,
            study: Study::GroupCount { dn: None },
        },
        "cluster_score_full_recall" => ExperimentConfig {
            model: two_group_constant_offset(200, 40_000, 0.5, 3.0)?,
            n: 200,
            p: 40_000,
            replicates: 100,
            seed,
            study: Study::ClusterScore { acc: 0.6, rec: 1.0 },
        },
        "cluster_score_even_errors" => ExperimentConfig {
            model: two_group_constant_offset(200, 40_000, 0.5, 3.0)?,
            n: 200,
            p: 40_000,
            replicates: 100,
            seed,
            study: Study::ClusterScore { acc: 0.6, rec: 0.6 },
        },
        "sesquilinear_z3" => ExperimentConfig {
            model: two_group_panel_model(200, 40_000)?,
            n: 200,
            p: 40_000,
            replicates: 100,
            seed,
            study: Study::Sesquilinear { z: 3.0 },
        },
        other => {
            return Err(Error::Unsupported(format!(
                "unknown preset '{other}'; available: {}",
                preset_names().join(", ")
            )))
        }
    };
    Ok(config)
}
