//! Subgroup-count estimation and clustering-quality scores.
//!
//! Both applications read the spectrum of the data-driven renormalized matrix.
//! The number of subgroups is one plus the count of eigenvalues above
//! `2 + d_n`; clustering quality compares two estimates of the leading
//! between-group spike strength: `α̂` inverted from the top eigenvalue and
//! `α̌` rebuilt from the candidate labeling's cluster means.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{spectral_summary, SpectralSummary};
use crate::datagen::fraction_projection;
use crate::error::{Error, Result};

/// Threshold count of eigenvalues above `2 + d_n`, plus one. An empty count
/// means a single population.
pub fn estimate_num_groups(summary: &SpectralSummary, d_n: f64) -> usize {
    assert!(d_n > 0.0, "d_n must be positive");
    let cut = 2.0 + d_n;
    summary
        .eigenvalues
        .iter()
        .take_while(|&&l| l >= cut)
        .count()
        + 1
}

/// Default tuning `d_n = 1/(log n)²`.
pub fn default_dn(n: usize) -> f64 {
    assert!(n >= 3);
    let l = (n as f64).ln();
    1.0 / (l * l)
}

/// Spike strength from the top eigenvalue: `½(λ + √(λ² − 4))` for `λ ≥ 2`.
pub fn alpha_hat(lambda_max: f64) -> Result<f64> {
    if lambda_max < 2.0 {
        return Err(Error::BelowEdge {
            lambda: lambda_max,
            edge: 2.0,
        });
    }
    Ok(0.5 * (lambda_max + (lambda_max * lambda_max - 4.0).sqrt()))
}

/// Normalize a raw label sequence to dense indices `0..k`, ordered by sorted
/// distinct value.
fn dense_labels(raw: &[usize]) -> (Vec<usize>, usize) {
    let mut values: Vec<usize> = raw.to_vec();
    values.sort_unstable();
    values.dedup();
    let dense: Vec<usize> = raw
        .iter()
        .map(|v| values.binary_search(v).unwrap())
        .collect();
    (dense, values.len())
}

fn cluster_means(x: &DMatrix<f64>, dense: &[usize], k: usize) -> (Vec<DVector<f64>>, Vec<usize>) {
    let p = x.nrows();
    let mut sums = vec![DVector::zeros(p); k];
    let mut counts = vec![0usize; k];
    for (j, &g) in dense.iter().enumerate() {
        sums[g] += x.column(j);
        counts[g] += 1;
    }
    for g in 0..k {
        if counts[g] > 0 {
            sums[g] /= counts[g] as f64;
        }
    }
    (sums, counts)
}

/// Label-side estimate of the spike strength from a two-cluster labeling:
/// `√(n/(p b̂)) (ň₁ň₂/n²) ‖x̌₁ − x̌₂‖² − √(p/(n b̂)) â`.
pub fn alpha_check(x: &DMatrix<f64>, labels: &[usize], a_hat: f64, b_hat: f64) -> Result<f64> {
    let n = x.ncols();
    let p = x.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n} columns",
            labels.len()
        )));
    }
    let (dense, k) = dense_labels(labels);
    if k == 1 {
        return Err(Error::EmptyCluster(1));
    }
    if k != 2 {
        return Err(Error::WrongClusterCount(k));
    }
    if !(b_hat > 0.0) {
        return Err(Error::NonPositiveBhat(b_hat));
    }
    let (means, counts) = cluster_means(x, &dense, 2);
    let diff = (&means[0] - &means[1]).norm_squared();
    let weight = (counts[0] * counts[1]) as f64 / (n * n) as f64;
    let nf = n as f64;
    let pf = p as f64;
    Ok((nf / (pf * b_hat)).sqrt() * weight * diff - (pf / (nf * b_hat)).sqrt() * a_hat)
}

/// A clustering-quality score and the quantities behind it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterScore {
    /// The score: label-side estimate over spectrum-side estimate.
    pub t: f64,
    /// Spectrum-side estimate (summed over usable spikes when more than two
    /// clusters are scored).
    pub alpha_hat: f64,
    /// Label-side estimate (trace of the projected mean matrix for more than
    /// two clusters).
    pub alpha_check: f64,
    /// Number of clusters in the candidate labeling.
    pub tau_used: usize,
    /// Spike positions at or below the bulk edge, excluded from the score.
    pub spikes_excluded: usize,
    /// Analytic composite of accuracy and recall, when truth was supplied.
    pub t0: Option<f64>,
    /// Range of the composite over recall at the observed accuracy.
    pub t0_bounds: Option<(f64, f64)>,
}

/// Two-cluster score `T = α̌/α̂` from data and a candidate labeling.
pub fn t_statistic(x: &DMatrix<f64>, labels: &[usize]) -> Result<ClusterScore> {
    let summary = spectral_summary(x)?;
    t_statistic_with_summary(x, labels, &summary)
}

/// Same as [`t_statistic`] but reusing a precomputed spectral summary.
pub fn t_statistic_with_summary(
    x: &DMatrix<f64>,
    labels: &[usize],
    summary: &SpectralSummary,
) -> Result<ClusterScore> {
    let lambda_max = summary.eigenvalues[0];
    if lambda_max <= 2.0 {
        return Err(Error::BelowEdge {
            lambda: lambda_max,
            edge: 2.0,
        });
    }
    let ah = alpha_hat(lambda_max)?;
    let ac = alpha_check(x, labels, summary.a_hat, summary.b_hat)?;
    Ok(ClusterScore {
        t: ac / ah,
        alpha_hat: ah,
        alpha_check: ac,
        tau_used: 2,
        spikes_excluded: 0,
        t0: None,
        t0_bounds: None,
    })
}

/// Multi-cluster score `T_τ = tr(Σ̌)/Σ α̂_k`, the generalization of `T` to
/// more than two clusters.
pub fn t_tau(x: &DMatrix<f64>, labels: &[usize]) -> Result<ClusterScore> {
    let summary = spectral_summary(x)?;
    t_tau_with_summary(x, labels, &summary)
}

/// Same as [`t_tau`] but reusing a precomputed spectral summary.
pub fn t_tau_with_summary(
    x: &DMatrix<f64>,
    labels: &[usize],
    summary: &SpectralSummary,
) -> Result<ClusterScore> {
    let n = x.ncols();
    let p = x.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n} columns",
            labels.len()
        )));
    }
    let (dense, tau) = dense_labels(labels);
    if tau < 2 {
        return Err(Error::EmptyCluster(1));
    }
    // Spectrum side: spike strengths of the top τ−1 eigenvalues above the edge.
    let mut denominator = 0.0;
    let mut excluded = 0usize;
    for &l in summary.eigenvalues.iter().take(tau - 1) {
        if l > 2.0 {
            denominator += alpha_hat(l)?;
        } else {
            excluded += 1;
        }
    }
    if denominator == 0.0 {
        return Err(Error::BelowEdge {
            lambda: summary.eigenvalues[0],
            edge: 2.0,
        });
    }

    // Label side: trace of the projected scaled mean matrix.
    let (means, counts) = cluster_means(x, &dense, tau);
    let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let n_check = fraction_projection(&fractions);
    let mut gram = DMatrix::zeros(tau, tau);
    for i in 0..tau {
        for j in i..tau {
            let v = (fractions[i] * fractions[j]).sqrt() * means[i].dot(&means[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let nf = n as f64;
    let pf = p as f64;
    let projected = &n_check * gram * &n_check;
    let numerator = (nf / (pf * summary.b_hat)).sqrt() * projected.trace()
        - (pf / (nf * summary.b_hat)).sqrt() * summary.a_hat * (tau as f64 - 1.0);

    Ok(ClusterScore {
        t: numerator / denominator,
        alpha_hat: denominator,
        alpha_check: numerator,
        tau_used: tau,
        spikes_excluded: excluded,
        t0: None,
        t0_bounds: None,
    })
}

// ---------------------------------------------------------------------------
// The analytic composite T0 and its envelope
// ---------------------------------------------------------------------------

/// Composite of accuracy and recall that the score `T` approximates:
///
/// `T0 = k₁(1 − ACC − k₁ − REC + 2k₁REC)² /
///       [(1−k₁)(1 − ACC − k₁ + 2k₁REC)(ACC + k₁ − 2k₁REC)]`.
pub fn t0(acc: f64, rec: f64, k1: f64) -> Result<f64> {
    assert!((0.0..=1.0).contains(&acc), "acc in [0,1]");
    assert!((0.0..=1.0).contains(&rec), "rec in [0,1]");
    assert!(k1 > 0.0 && k1 <= 0.5, "k1 in (0, 1/2]");
    let num = k1 * (1.0 - acc - k1 - rec + 2.0 * k1 * rec).powi(2);
    let d1 = 1.0 - k1;
    let d2 = 1.0 - acc - k1 + 2.0 * k1 * rec;
    let d3 = acc + k1 - 2.0 * k1 * rec;
    let den = d1 * d2 * d3;
    if den.abs() < 1e-12 {
        return Err(Error::DegenerateDenominator);
    }
    Ok(num / den)
}

/// Range `(min, max)` of `T0` over recall at fixed accuracy, clamped to `[0, 1]`.
///
/// The maximum is attained at full recall; the minimum is zero while
/// `k₁ + ACC ≤ 1` with `k₁ < 1/2` and otherwise
/// `((k₁ − ACC)/k₁)·((1 − k₁ − ACC)/(1 − k₁))`.
pub fn t0_bounds(acc: f64, k1: f64) -> (f64, f64) {
    assert!((0.0..=1.0).contains(&acc), "acc in [0,1]");
    assert!(k1 > 0.0 && k1 <= 0.5, "k1 in (0, 1/2]");
    let shifted = acc - k1;
    let max = if (1.0 - shifted).abs() < 1e-15 {
        1.0
    } else {
        (k1 / (1.0 - k1)) * (shifted / (1.0 - shifted))
    };
    let min = if k1 < 0.5 && k1 + acc <= 1.0 {
        0.0
    } else {
        ((k1 - acc) / k1) * ((1.0 - k1 - acc) / (1.0 - k1))
    };
    (min.clamp(0.0, 1.0), max.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Label metrics against known truth
// ---------------------------------------------------------------------------

/// Accuracy, recall, and precision of a two-cluster labeling against truth.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub acc: f64,
    pub rec: f64,
    pub pre: f64,
    /// Fraction of the smaller true cluster.
    pub k1: f64,
    /// True when the truth labels were flipped so cluster one is the smaller.
    pub reoriented: bool,
}

/// Compare estimated labels to true ones. Both sequences must use the same
/// two symbols; cluster one is taken as the smaller true cluster, flipping
/// the orientation if needed.
pub fn label_metrics(truth: &[usize], estimated: &[usize]) -> Result<LabelMetrics> {
    if truth.len() != estimated.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} true labels vs {} estimated",
            truth.len(),
            estimated.len()
        )));
    }
    let n = truth.len();
    let mut symbols: Vec<usize> = truth.to_vec();
    symbols.sort_unstable();
    symbols.dedup();
    if symbols.len() != 2 {
        return Err(Error::WrongClusterCount(symbols.len()));
    }
    if estimated.iter().any(|v| !symbols.contains(v)) {
        return Err(Error::DimensionMismatch(
            "estimated labels use symbols not present in the truth".into(),
        ));
    }
    let count_a = truth.iter().filter(|&&v| v == symbols[0]).count();
    let reoriented = count_a * 2 > n;
    let one = if reoriented { symbols[1] } else { symbols[0] };
    let n1 = truth.iter().filter(|&&v| v == one).count();
    let acc = truth.iter().zip(estimated).filter(|(t, e)| t == e).count() as f64 / n as f64;
    let hits = truth
        .iter()
        .zip(estimated)
        .filter(|(&t, &e)| t == one && e == one)
        .count();
    let claimed = estimated.iter().filter(|&&e| e == one).count();
    let rec = hits as f64 / n1 as f64;
    let pre = if claimed == 0 {
        0.0
    } else {
        hits as f64 / claimed as f64
    };
    Ok(LabelMetrics {
        acc,
        rec,
        pre,
        k1: n1 as f64 / n as f64,
        reoriented,
    })
}

/// Attach the analytic composite and its bounds to a score, given truth.
pub fn score_against_truth(
    mut score: ClusterScore,
    truth: &[usize],
    estimated: &[usize],
) -> Result<(ClusterScore, LabelMetrics)> {
    let m = label_metrics(truth, estimated)?;
    score.t0 = t0(m.acc, m.rec, m.k1).ok();
    score.t0_bounds = Some(t0_bounds(m.acc, m.k1));
    Ok((score, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::estimate_ab;
    use crate::datagen::{generate, NoiseLaw, PopulationModel, Sigma0};
    use crate::rng;
    use rand::Rng;

    fn summary_with(eigs: Vec<f64>, n: usize) -> SpectralSummary {
        SpectralSummary {
            p: n * n,
            c_n: n as f64,
            eigenvalues: eigs,
            a_hat: 1.0,
            b_hat: 1.0,
            n,
        }
    }

    #[test]
    fn group_count_thresholding() {
        let mut eigs = vec![5.0, 3.0, 2.05];
        eigs.extend(std::iter::repeat_n(1.0, 17));
        let s = summary_with(eigs, 20);
        assert_eq!(estimate_num_groups(&s, 0.1), 3);

        let s = summary_with(vec![2.0, 1.5, 0.0, -1.0], 4);
        assert_eq!(estimate_num_groups(&s, 0.01), 1);
    }

    #[test]
    fn group_count_monotone_in_dn() {
        let s = summary_with(vec![4.0, 2.6, 2.3, 2.1, 1.0], 5);
        let mut prev = usize::MAX;
        for dn in [0.05, 0.2, 0.45, 0.7, 1.2] {
            let t = estimate_num_groups(&s, dn);
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn default_dn_values() {
        // 1/(ln 300)².
        assert!((default_dn(300) - 0.030_737_892_761).abs() < 1e-9);
        // At n with ln n = 2 the value is 1/4; n = e² is not an integer, so
        // check the formula shape instead.
        let n = 8;
        assert!((default_dn(n) - (n as f64).ln().powi(-2)).abs() < 1e-15);
        assert!(default_dn(10) > default_dn(100));
        assert!(default_dn(100) > default_dn(1000));
    }

    #[test]
    fn alpha_hat_closed_form() {
        assert!((alpha_hat(2.5).unwrap() - 2.0).abs() < 1e-14);
        assert!((alpha_hat(2.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((alpha_hat(10.0 / 3.0).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(alpha_hat(1.9), Err(Error::BelowEdge { .. })));
    }

    #[test]
    fn t0_reference_points() {
        assert!((t0(1.0, 1.0, 0.3).unwrap() - 1.0).abs() < 1e-12);
        assert!((t0(1.0, 1.0, 0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!((t0(0.6, 1.0, 0.5).unwrap() - 1.0 / 9.0).abs() < 1e-12);
        assert!((t0(0.6, 0.6, 0.5).unwrap() - 1.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn t0_bounds_reference_points() {
        let (lo, hi) = t0_bounds(0.6, 0.5);
        assert!((lo - 0.04).abs() < 1e-12);
        assert!((hi - 1.0 / 9.0).abs() < 1e-12);
        let (_, hi) = t0_bounds(1.0, 0.3);
        assert!((hi - 1.0).abs() < 1e-12);
        let (lo, _) = t0_bounds(0.6, 0.3);
        assert_eq!(lo, 0.0);
    }

    #[test]
    fn t0_bounds_sandwich_property() {
        let mut r = rng::stream(5, &[1]);
        let mut checked = 0;
        while checked < 200 {
            // Better-than-chance accuracy, and jointly realizable (acc, rec):
            // the recall fixes how many of cluster one are right, accuracy
            // must cover the rest. Outside this regime the envelope formulas
            // do not bound the composite.
            let acc: f64 = 0.5 + 0.5 * r.gen::<f64>();
            let rec: f64 = r.gen();
            let k1: f64 = 0.01 + 0.49 * r.gen::<f64>();
            if acc < rec * k1 || acc > rec * k1 + (1.0 - k1) {
                continue;
            }
            if let Ok(v) = t0(acc, rec, k1) {
                let (lo, hi) = t0_bounds(acc, k1);
                assert!((-1e-9..=1.0 + 1e-9).contains(&v), "t0 out of range: {v}");
                assert!(v >= lo - 1e-9, "acc={acc} rec={rec} k1={k1}: {v} < {lo}");
                assert!(v <= hi + 1e-9, "acc={acc} rec={rec} k1={k1}: {v} > {hi}");
                checked += 1;
            }
        }
    }

    #[test]
    fn t0_bounds_monotone_in_acc() {
        for k1 in [0.2, 0.35, 0.5] {
            let mut prev = (-1.0, -1.0);
            for i in 0..=20 {
                let acc = 0.5 + 0.5 * i as f64 / 20.0;
                let (lo, hi) = t0_bounds(acc, k1);
                assert!(
                    lo >= prev.0 - 1e-12 && hi >= prev.1 - 1e-12,
                    "k1={k1} acc={acc}"
                );
                prev = (lo, hi);
            }
        }
    }

    #[test]
    fn t0_degenerate_denominator() {
        assert!(matches!(
            t0(0.0, 0.5, 0.5),
            Err(Error::DegenerateDenominator)
        ));
    }

    #[test]
    fn alpha_check_label_invariance() {
        let p = 60;
        let mut mu2 = DVector::zeros(p);
        mu2[0] = 4.0;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), mu2],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let data = generate(&model, 16, 3).unwrap();
        let (a, b) = estimate_ab(&data.x).unwrap();
        let v1 = alpha_check(&data.x, &data.labels, a, b).unwrap();
        let flipped: Vec<usize> = data.labels.iter().map(|&g| 1 - g).collect();
        let v2 = alpha_check(&data.x, &flipped, a, b).unwrap();
        assert!((v1 - v2).abs() < 1e-12);

        let ones = vec![1usize; 16];
        assert!(matches!(
            alpha_check(&data.x, &ones, a, b),
            Err(Error::EmptyCluster(_))
        ));
        let three: Vec<usize> = (0..16).map(|j| j % 3).collect();
        assert!(matches!(
            alpha_check(&data.x, &three, a, b),
            Err(Error::WrongClusterCount(3))
        ));
    }

    #[test]
    fn label_metrics_reference_layouts() {
        // n = 10, n1 = 5: REC = 1 with 4 mislabeled from cluster two.
        let truth = vec![1, 1, 1, 1, 1, 2, 2, 2, 2, 2];
        let est = vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 2];
        let m = label_metrics(&truth, &est).unwrap();
        assert!((m.acc - 0.6).abs() < 1e-12);
        assert!((m.rec - 1.0).abs() < 1e-12);
        assert!((m.pre - 5.0 / 9.0).abs() < 1e-12);
        assert!(!m.reoriented);
        assert!((m.k1 - 0.5).abs() < 1e-12);

        // Balanced errors: ACC = REC = 0.6.
        let est = vec![1, 1, 1, 2, 2, 1, 1, 2, 2, 2];
        let m = label_metrics(&truth, &est).unwrap();
        assert!((m.acc - 0.6).abs() < 1e-12);
        assert!((m.rec - 0.6).abs() < 1e-12);
    }

    #[test]
    fn t_statistic_perfect_labels_near_one() {
        // Strong two-group separation at moderate scale: T should sit near 1.
        let p = 3600;
        let n = 60;
        let c_n = p as f64 / n as f64;
        let mut mu2 = DVector::zeros(p);
        // Spike strength 3 exactly: k₁k₂ ‖μ‖²/√(c_n b_p) = 3 with b_p = 1.
        let norm2 = 3.0 * c_n.sqrt() / 0.25;
        mu2[0] = norm2.sqrt();
        let model = PopulationModel::new(
            vec![DVector::zeros(p), mu2],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let mut ts = Vec::new();
        for seed in 0..12 {
            let data = generate(&model, n, seed).unwrap();
            let score = t_statistic(&data.x, &data.labels).unwrap();
            assert_eq!(score.tau_used, 2);
            ts.push(score.t);
        }
        let med = crate::stats::median(&ts);
        assert!((med - 1.0).abs() < 0.15, "median T = {med}");
    }

    #[test]
    fn t_statistic_respects_sample_permutations() {
        let p = 400;
        let n = 20;
        let mut mu2 = DVector::zeros(p);
        mu2[0] = 12.0;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), mu2],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let data = generate(&model, n, 11).unwrap();
        let base = t_statistic(&data.x, &data.labels).unwrap().t;

        // Permute columns and labels together.
        let mut r = rng::stream(4, &[0]);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = r.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut xp = DMatrix::zeros(p, n);
        let mut lp = vec![0usize; n];
        for (dst, &src) in perm.iter().enumerate() {
            xp.set_column(dst, &data.x.column(src));
            lp[dst] = data.labels[src];
        }
        let permuted = t_statistic(&xp, &lp).unwrap().t;
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn t_tau_matches_t_statistic_for_two_clusters() {
        let p = 2500;
        let n = 50;
        let mut mu2 = DVector::zeros(p);
        mu2[0] = (3.0 * (p as f64 / n as f64).sqrt() / 0.25).sqrt();
        let model = PopulationModel::new(
            vec![DVector::zeros(p), mu2],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let data = generate(&model, n, 21).unwrap();
        let t2 = t_statistic(&data.x, &data.labels).unwrap();
        let tt = t_tau(&data.x, &data.labels).unwrap();
        // The trace form differs from the two-cluster form by O(1/n) terms.
        assert!((t2.t - tt.t).abs() < 0.1, "{} vs {}", t2.t, tt.t);
        assert_eq!(tt.tau_used, 2);

        // Label-name invariance of the multi-cluster score.
        let renamed: Vec<usize> = data.labels.iter().map(|&g| 7 - 3 * g).collect();
        let tr = t_tau(&data.x, &renamed).unwrap();
        assert!((tt.t - tr.t).abs() < 1e-12);
    }

    #[test]
    fn score_against_truth_attaches_t0() {
        let truth = vec![1, 1, 1, 1, 2, 2, 2, 2];
        let est = vec![1, 1, 1, 1, 1, 1, 2, 2];
        let score = ClusterScore {
            t: 0.2,
            alpha_hat: 3.0,
            alpha_check: 0.6,
            tau_used: 2,
            spikes_excluded: 0,
            t0: None,
            t0_bounds: None,
        };
        let (scored, m) = score_against_truth(score, &truth, &est).unwrap();
        assert!((m.acc - 0.75).abs() < 1e-12);
        assert!(scored.t0.is_some());
        let (lo, hi) = scored.t0_bounds.unwrap();
        assert!(lo <= scored.t0.unwrap() + 1e-12 && scored.t0.unwrap() <= hi + 1e-12);
    }
}
