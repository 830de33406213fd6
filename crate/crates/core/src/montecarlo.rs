//! Replication engine for the simulation studies.
//!
//! A study is a `(model, n, p, replicates, seed, kind)` bundle. Replicates
//! draw their randomness from per-replicate seed streams, so results are
//! byte-identical whether they run serially or across threads, and aggregates
//! are always recomputable from the stored records. The worker count comes
//! from `SPIKELAB_THREADS` when set.

use nalgebra::{Complex, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    bulk_eigenvalues, renormalized_gram, sesquilinear_limits, sesquilinear_panel,
    spectral_summary_pair, SpectralSummary,
};
use crate::datagen::{generate, PopulationModel};
use crate::error::{Error, Result};
use crate::inference::{
    default_dn, estimate_num_groups, label_metrics, t0, t_statistic_with_summary,
};
use crate::rng;
use crate::spectrum::{lsd_density, semicircle_cdf, support_edge, Aspect, Regime};
use crate::spikes::{classify_spikes, cluster_alphas, SpikeKind};
use crate::stats::{self, Histogram};

pub mod presets;

/// What a study measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Study {
    /// `√n`-scaled deviations of the top spikes from their predicted positions,
    /// for both the oracle and the estimated renormalization.
    SpikeClt,
    /// Accuracy of the subgroup-count estimator against the model's group count.
    GroupCount {
        #[serde(default)]
        dn: Option<f64>,
    },
    /// Distribution of the clustering score `T` for a labeling constructed to
    /// hit the given accuracy and recall.
    ClusterScore { acc: f64, rec: f64 },
    /// Convergence of the sesquilinear panel to its first-order limits at a
    /// real point `z`, plus the variance of the scaled entries.
    Sesquilinear { z: f64 },
    /// Kolmogorov–Smirnov fit of the bulk spectrum against the limiting law.
    LsdFit { aspect: Aspect },
}

/// A full study description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: PopulationModel,
    pub n: usize,
    pub p: usize,
    pub replicates: usize,
    pub seed: u64,
    pub study: Study,
}

/// Per-replicate measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "snake_case")]
pub enum Record {
    SpikeClt {
        deltas: Vec<f64>,
        delta_hats: Vec<f64>,
        /// Leading eigenvalues of the oracle renormalized matrix
        /// (one more than the spike count, to watch the bulk edge).
        top_eigs_oracle: Vec<f64>,
        /// Leading eigenvalues of the estimated renormalized matrix.
        top_eigs: Vec<f64>,
        b_hat: f64,
    },
    GroupCount {
        tau_hat: usize,
    },
    ClusterScore {
        t: f64,
        acc: f64,
        rec: f64,
        t0: f64,
    },
    Sesquilinear {
        /// Row-major real parts of the 2τ×2τ panel forms.
        forms: Vec<f64>,
        /// Row-major real parts of `√n (forms − centering)`.
        scaled: Vec<f64>,
    },
    LsdFit {
        ks: f64,
    },
}

/// Aggregates over all successful replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "snake_case")]
pub enum Aggregate {
    SpikeClt {
        lambda_targets: Vec<f64>,
        mean_delta: Vec<f64>,
        var_delta: Vec<f64>,
        var_delta_hat: Vec<f64>,
        /// Variance of the per-cluster sums of deltas (and the hat version).
        cluster_sum_var: Vec<f64>,
        cluster_sum_var_hat: Vec<f64>,
        histograms: Vec<Histogram>,
    },
    GroupCount {
        accuracy: f64,
        counts: std::collections::BTreeMap<usize, usize>,
        dn: f64,
        true_tau: usize,
    },
    ClusterScore {
        median_t: f64,
        median_abs_gap: f64,
        t0_target: f64,
    },
    Sesquilinear {
        limit: Vec<f64>,
        frac_within_015: Vec<f64>,
        frac_within_010: Vec<f64>,
        var_scaled: Vec<f64>,
    },
    LsdFit {
        mean_ks: f64,
        max_ks: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replicate: usize,
    pub error: String,
}

/// All study output: per-replicate records, failures, and aggregates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: ExperimentConfig,
    pub records: Vec<Record>,
    pub failures: Vec<Failure>,
    pub aggregate: Aggregate,
}

/// Worker count: `SPIKELAB_THREADS` when set, otherwise the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var("SPIKELAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |v| v.get()))
}

// ---------------------------------------------------------------------------
// Spike targets
// ---------------------------------------------------------------------------

/// Predicted spike positions for a model at `(n, p)`.
#[derive(Clone, Debug)]
pub struct SpikeTargets {
    /// Per-spike limit `phi(α_{cluster})`, one entry per spike index.
    pub lambdas: Vec<f64>,
    /// Cluster index of each spike.
    pub cluster_of: Vec<usize>,
    /// Cluster spike strengths, descending.
    pub alphas: Vec<f64>,
    pub multiplicities: Vec<usize>,
    /// `phi'` per cluster.
    pub phi_primes: Vec<f64>,
}

/// Cluster the population spikes and map each through the spike map.
/// All clusters must be distant for the CLT targets to exist.
pub fn spike_targets(model: &PopulationModel, n: usize, p: usize) -> Result<SpikeTargets> {
    let alphas = crate::datagen::sigma_x_spikes(model, n, p)?;
    let (values, multiplicities) = cluster_alphas(&alphas, 1e-8);
    let h = model
        .sigma0()
        .spectrum()
        .map_err(|_| Error::MissingOracle)?;
    let regime = Regime::from_spectrum(&h, Aspect::Finite(p as f64 / n as f64));
    let report = classify_spikes(&values, &multiplicities, &h, &regime)?;
    let mut lambdas = Vec::new();
    let mut cluster_of = Vec::new();
    let mut phi_primes = Vec::new();
    for (k, cluster) in report.clusters.iter().enumerate() {
        if cluster.kind != SpikeKind::Distant {
            return Err(Error::BelowEdge {
                lambda: cluster.alpha,
                edge: report.critical_point,
            });
        }
        phi_primes.push(cluster.phi_prime.expect("distant cluster"));
        for _ in 0..cluster.multiplicity {
            lambdas.push(cluster.lambda_limit);
            cluster_of.push(k);
        }
    }
    Ok(SpikeTargets {
        lambdas,
        cluster_of,
        alphas: values,
        multiplicities,
        phi_primes,
    })
}

/// `√n`-scaled deviation of spike `which` from its predicted position, for
/// the oracle spectrum and for the estimated one with its `√(b_p/b̂)` correction.
pub fn delta_statistics(
    oracle: &SpectralSummary,
    estimated: &SpectralSummary,
    model: &PopulationModel,
    which: usize,
) -> Result<(f64, f64)> {
    let targets = spike_targets(model, oracle.n, oracle.p)?;
    if which >= targets.lambdas.len() {
        return Err(Error::DimensionMismatch(format!(
            "spike index {which} out of range ({} spikes)",
            targets.lambdas.len()
        )));
    }
    let (_, b_p) = model.moments();
    let sqrt_n = (oracle.n as f64).sqrt();
    let lambda = targets.lambdas[which];
    let delta = sqrt_n * (oracle.eigenvalues[which] - lambda);
    let correction = (b_p / estimated.b_hat).sqrt();
    let delta_hat = sqrt_n * (estimated.eigenvalues[which] - correction * lambda);
    Ok((delta, delta_hat))
}

// ---------------------------------------------------------------------------
// Study execution
// ---------------------------------------------------------------------------

/// Run a study with the default worker count.
pub fn run_study(config: &ExperimentConfig) -> Result<StudyResult> {
    run_study_with_threads(config, worker_threads())
}

/// Run a study on an explicit number of worker threads.
pub fn run_study_with_threads(config: &ExperimentConfig, threads: usize) -> Result<StudyResult> {
    if config.replicates == 0 {
        return Err(Error::DimensionMismatch(
            "at least one replicate required".into(),
        ));
    }
    if config.p != config.model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "config p = {} but model dimension is {}",
            config.p,
            config.model.dim()
        )));
    }
    let ctx = StudyContext::prepare(config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?;
    let outcomes: Vec<(usize, Result<Record>)> = pool.install(|| {
        (0..config.replicates)
            .into_par_iter()
            .map(|rep| {
                let seed = rng::replicate_seed(config.seed, rep as u64);
                (rep, ctx.run_replicate(config, seed))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(config.replicates);
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(Failure {
                replicate: rep,
                error: e.to_string(),
            }),
        }
    }
    if failures.len() * 20 > config.replicates {
        return Err(Error::ExcessiveFailures {
            failed: failures.len(),
            replicates: config.replicates,
        });
    }
    let aggregate = aggregate_records(config, &records)?;
    Ok(StudyResult {
        config: config.clone(),
        records,
        failures,
        aggregate,
    })
}

/// Precomputed per-study context shared across replicates.
enum StudyContext {
    SpikeClt {
        targets: SpikeTargets,
        b_p: f64,
    },
    GroupCount {
        dn: f64,
    },
    ClusterScore {
        labels: Vec<usize>,
        acc: f64,
        rec: f64,
        t0_target: f64,
    },
    Sesquilinear {
        z: f64,
    },
    LsdFit {
        cdf: LsdCdf,
    },
}

impl StudyContext {
    fn prepare(config: &ExperimentConfig) -> Result<Self> {
        match &config.study {
            Study::SpikeClt => {
                let targets = spike_targets(&config.model, config.n, config.p)?;
                let (_, b_p) = config.model.moments();
                Ok(StudyContext::SpikeClt { targets, b_p })
            }
            Study::GroupCount { dn } => Ok(StudyContext::GroupCount {
                dn: dn.unwrap_or_else(|| default_dn(config.n)),
            }),
            Study::ClusterScore { acc, rec } => {
                if config.model.tau() != 2 {
                    return Err(Error::WrongClusterCount(config.model.tau()));
                }
                let sizes = crate::datagen::apportion(config.n, config.model.fractions());
                let (labels, acc_real, rec_real) =
                    constructed_labeling(sizes[0], sizes[1], *acc, *rec)?;
                let k1 = sizes[0] as f64 / config.n as f64;
                let t0_target = t0(acc_real, rec_real, k1)?;
                Ok(StudyContext::ClusterScore {
                    labels,
                    acc: acc_real,
                    rec: rec_real,
                    t0_target,
                })
            }
            Study::Sesquilinear { z } => Ok(StudyContext::Sesquilinear { z: *z }),
            Study::LsdFit { aspect } => {
                let cdf = LsdCdf::build(&config.model, *aspect)?;
                Ok(StudyContext::LsdFit { cdf })
            }
        }
    }

    fn run_replicate(&self, config: &ExperimentConfig, seed: u64) -> Result<Record> {
        let data = generate(&config.model, config.n, seed)?;
        match self {
            StudyContext::SpikeClt { targets, b_p } => {
                let (a_p, b_p) = (config.model.moments().0, *b_p);
                let (oracle, estimated) = spectral_summary_pair(&data.x, a_p, b_p)?;
                let sqrt_n = (config.n as f64).sqrt();
                let correction = (b_p / estimated.b_hat).sqrt();
                let m = targets.lambdas.len();
                let mut deltas = Vec::with_capacity(m);
                let mut delta_hats = Vec::with_capacity(m);
                for j in 0..m {
                    deltas.push(sqrt_n * (oracle.eigenvalues[j] - targets.lambdas[j]));
                    delta_hats.push(
                        sqrt_n * (estimated.eigenvalues[j] - correction * targets.lambdas[j]),
                    );
                }
                let keep = (m + 1).min(estimated.eigenvalues.len());
                Ok(Record::SpikeClt {
                    deltas,
                    delta_hats,
                    top_eigs_oracle: oracle.eigenvalues[..keep].to_vec(),
                    top_eigs: estimated.eigenvalues[..keep].to_vec(),
                    b_hat: estimated.b_hat,
                })
            }
            StudyContext::GroupCount { dn } => {
                let summary = crate::covariance::spectral_summary(&data.x)?;
                Ok(Record::GroupCount {
                    tau_hat: estimate_num_groups(&summary, *dn),
                })
            }
            StudyContext::ClusterScore {
                labels,
                acc,
                rec,
                t0_target,
            } => {
                let summary = crate::covariance::spectral_summary(&data.x)?;
                let score = t_statistic_with_summary(&data.x, labels, &summary)?;
                // The constructed labeling has fixed counts; keep the realized
                // metrics with the record for traceability.
                debug_assert_eq!(labels.len(), config.n);
                let _ = label_metrics(&data.labels, labels);
                Ok(Record::ClusterScore {
                    t: score.t,
                    acc: *acc,
                    rec: *rec,
                    t0: *t0_target,
                })
            }
            StudyContext::Sesquilinear { z } => {
                let panel = sesquilinear_panel(
                    &data.x,
                    &data.labels,
                    &config.model,
                    Complex::new(*z, 0.0),
                )?;
                let forms: Vec<f64> = panel.forms.iter().map(|c| c.re).collect();
                let scaled: Vec<f64> = panel.scaled.iter().map(|c| c.re).collect();
                Ok(Record::Sesquilinear { forms, scaled })
            }
            StudyContext::LsdFit { cdf } => {
                let (a_p, b_p) = config.model.moments();
                let a_mat = renormalized_gram(&data.x, a_p, b_p)?;
                let spikes = config.model.tau() - 1;
                let bulk = bulk_eigenvalues(&a_mat, spikes);
                let ks = stats::ks_distance(&bulk, |x| cdf.eval(x));
                Ok(Record::LsdFit { ks })
            }
        }
    }
}

/// Recompute aggregates from records; run_study stores exactly this.
pub fn aggregate_records(config: &ExperimentConfig, records: &[Record]) -> Result<Aggregate> {
    match &config.study {
        Study::SpikeClt => {
            let targets = spike_targets(&config.model, config.n, config.p)?;
            let m = targets.lambdas.len();
            fn deltas_of(r: &Record) -> &[f64] {
                match r {
                    Record::SpikeClt { deltas, .. } => deltas,
                    _ => &[],
                }
            }
            fn hats_of(r: &Record) -> &[f64] {
                match r {
                    Record::SpikeClt { delta_hats, .. } => delta_hats,
                    _ => &[],
                }
            }
            let collect = |pick: fn(&Record) -> &[f64], j: usize| -> Vec<f64> {
                records.iter().map(|r| pick(r)[j]).collect()
            };
            let mut mean_delta = Vec::new();
            let mut var_delta = Vec::new();
            let mut var_delta_hat = Vec::new();
            let mut histograms = Vec::new();
            for j in 0..m {
                let d = collect(deltas_of, j);
                let dh = collect(hats_of, j);
                mean_delta.push(stats::mean(&d));
                var_delta.push(stats::variance(&d));
                var_delta_hat.push(stats::variance(&dh));
                histograms.push(Histogram::build(&d, 40));
            }
            let mut cluster_sum_var = Vec::new();
            let mut cluster_sum_var_hat = Vec::new();
            for k in 0..targets.alphas.len() {
                let sum_of = |pick: fn(&Record) -> &[f64]| -> Vec<f64> {
                    records
                        .iter()
                        .map(|r| {
                            let xs = pick(r);
                            targets
                                .cluster_of
                                .iter()
                                .enumerate()
                                .filter(|(_, &c)| c == k)
                                .map(|(j, _)| xs[j])
                                .sum()
                        })
                        .collect()
                };
                cluster_sum_var.push(stats::variance(&sum_of(deltas_of)));
                cluster_sum_var_hat.push(stats::variance(&sum_of(hats_of)));
            }
            Ok(Aggregate::SpikeClt {
                lambda_targets: targets.lambdas,
                mean_delta,
                var_delta,
                var_delta_hat,
                cluster_sum_var,
                cluster_sum_var_hat,
                histograms,
            })
        }
        Study::GroupCount { dn } => {
            let mut counts = std::collections::BTreeMap::new();
            for r in records {
                if let Record::GroupCount { tau_hat } = r {
                    *counts.entry(*tau_hat).or_insert(0usize) += 1;
                }
            }
            let true_tau = config.model.tau();
            let hit = counts.get(&true_tau).copied().unwrap_or(0);
            Ok(Aggregate::GroupCount {
                accuracy: hit as f64 / records.len().max(1) as f64,
                counts,
                dn: dn.unwrap_or_else(|| default_dn(config.n)),
                true_tau,
            })
        }
        Study::ClusterScore { .. } => {
            let ts: Vec<f64> = records
                .iter()
                .filter_map(|r| match r {
                    Record::ClusterScore { t, .. } => Some(*t),
                    _ => None,
                })
                .collect();
            let t0_target = records
                .iter()
                .find_map(|r| match r {
                    Record::ClusterScore { t0, .. } => Some(*t0),
                    _ => None,
                })
                .unwrap_or(f64::NAN);
            let gaps: Vec<f64> = ts.iter().map(|t| (t - t0_target).abs()).collect();
            Ok(Aggregate::ClusterScore {
                median_t: stats::median(&ts),
                median_abs_gap: stats::median(&gaps),
                t0_target,
            })
        }
        Study::Sesquilinear { z } => {
            let limit_mat =
                sesquilinear_limits(&config.model, config.n, config.p, Complex::new(*z, 0.0))?;
            let limit: Vec<f64> = limit_mat.iter().map(|c| c.re).collect();
            let dim = limit.len();
            let mut frac_within_015 = vec![0.0; dim];
            let mut frac_within_010 = vec![0.0; dim];
            let mut var_scaled = vec![0.0; dim];
            let mut per_entry: Vec<Vec<f64>> = vec![Vec::new(); dim];
            for r in records {
                if let Record::Sesquilinear { forms, scaled } = r {
                    for e in 0..dim {
                        let dev = (forms[e] - limit[e]).abs();
                        if dev <= 0.15 {
                            frac_within_015[e] += 1.0;
                        }
                        if dev <= 0.10 {
                            frac_within_010[e] += 1.0;
                        }
                        per_entry[e].push(scaled[e]);
                    }
                }
            }
            let count = records.len().max(1) as f64;
            for e in 0..dim {
                frac_within_015[e] /= count;
                frac_within_010[e] /= count;
                var_scaled[e] = stats::variance(&per_entry[e]);
            }
            Ok(Aggregate::Sesquilinear {
                limit,
                frac_within_015,
                frac_within_010,
                var_scaled,
            })
        }
        Study::LsdFit { .. } => {
            let ks: Vec<f64> = records
                .iter()
                .filter_map(|r| match r {
                    Record::LsdFit { ks } => Some(*ks),
                    _ => None,
                })
                .collect();
            Ok(Aggregate::LsdFit {
                mean_ks: stats::mean(&ks),
                max_ks: ks.iter().cloned().fold(0.0, f64::max),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Labeling construction for the cluster-score study
// ---------------------------------------------------------------------------

/// Deterministic two-cluster labeling hitting the requested accuracy and
/// recall as closely as integer counts allow. Returns the labels and the
/// realized `(acc, rec)`.
pub fn constructed_labeling(
    n1: usize,
    n2: usize,
    acc: f64,
    rec: f64,
) -> Result<(Vec<usize>, f64, f64)> {
    let n = n1 + n2;
    let r1 = (rec * n1 as f64).round() as usize;
    if r1 > n1 {
        return Err(Error::Unsupported(format!(
            "recall {rec} infeasible for n1 = {n1}"
        )));
    }
    let correct = (acc * n as f64).round() as usize;
    if correct < r1 || correct - r1 > n2 {
        return Err(Error::Unsupported(format!(
            "accuracy {acc} infeasible with recall {rec} at sizes ({n1}, {n2})"
        )));
    }
    let c2 = correct - r1;
    let mut labels = Vec::with_capacity(n);
    labels.extend(std::iter::repeat_n(0, r1));
    labels.extend(std::iter::repeat_n(1, n1 - r1));
    labels.extend(std::iter::repeat_n(0, n2 - c2));
    labels.extend(std::iter::repeat_n(1, c2));
    let acc_real = correct as f64 / n as f64;
    let rec_real = r1 as f64 / n1 as f64;
    Ok((labels, acc_real, rec_real))
}

// ---------------------------------------------------------------------------
// Limiting CDF for the fit study
// ---------------------------------------------------------------------------

/// The limiting spectral CDF: closed-form semicircle, or a numeric
/// integration of the density for a finite aspect ratio.
pub enum LsdCdf {
    Semicircle,
    Numeric { grid: Vec<f64>, cdf: Vec<f64> },
}

impl LsdCdf {
    pub fn build(model: &PopulationModel, aspect: Aspect) -> Result<Self> {
        match aspect {
            Aspect::Infinite => Ok(LsdCdf::Semicircle),
            Aspect::Finite(_) => {
                let h = model.sigma0().spectrum()?;
                let regime = Regime::from_spectrum(&h, aspect);
                let edges = support_edge(&h, &regime)?;
                let hi = edges.right_edge + 0.5;
                let lo = -hi;
                let m = 2000;
                let grid: Vec<f64> = (0..=m)
                    .map(|i| lo + (hi - lo) * i as f64 / m as f64)
                    .collect();
                let density = lsd_density(&h, &regime, &grid, 1e-6);
                let step = (hi - lo) / m as f64;
                let mut cdf = Vec::with_capacity(grid.len());
                let mut acc = 0.0;
                let mut prev = density[0].unwrap_or(0.0);
                cdf.push(0.0);
                for d in density.iter().skip(1) {
                    let cur = d.unwrap_or(prev);
                    acc += 0.5 * (prev + cur) * step;
                    cdf.push(acc);
                    prev = cur;
                }
                let total = *cdf.last().unwrap();
                if total > 0.0 {
                    for v in cdf.iter_mut() {
                        *v /= total;
                    }
                }
                Ok(LsdCdf::Numeric { grid, cdf })
            }
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            LsdCdf::Semicircle => semicircle_cdf(x),
            LsdCdf::Numeric { grid, cdf } => {
                if x <= grid[0] {
                    return 0.0;
                }
                if x >= *grid.last().unwrap() {
                    return 1.0;
                }
                let idx = grid.partition_point(|&g| g <= x);
                let (x0, x1) = (grid[idx - 1], grid[idx]);
                let (y0, y1) = (cdf[idx - 1], cdf[idx]);
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

/// Group mean reconstruction used by the cluster-score study tests.
pub fn group_mean(x: &nalgebra::DMatrix<f64>, labels: &[usize], group: usize) -> DVector<f64> {
    let mut sum = DVector::zeros(x.nrows());
    let mut count = 0usize;
    for (j, &g) in labels.iter().enumerate() {
        if g == group {
            sum += x.column(j);
            count += 1;
        }
    }
    sum / count.max(1) as f64
}
