//! Phase-transition classification and the fluctuation law of detached spikes.
//!
//! A population spike of strength `α` detaches from the bulk exactly when `α`
//! exceeds the largest critical point of the spike map `phi`; its sample
//! counterpart then converges to `phi(α)`, and `√n`-scaled fluctuations follow
//! the eigenvalue law of a small Gaussian matrix
//! `−√(phi'(α)) Qᵀ N W N Q G`. The covariance of the symmetric Gaussian `W`
//! involves projection quantities `θ`, `ρ`, `h`, `V`, `V'` computed from the
//! population means through the resolvent `Q(α) = Σ₀ − √(c_n b_p) α I`.
//! In the `p/n → ∞` limit `θ`, `ρ`, `h` vanish, `G = α I`, and the law
//! reduces to `−√(α² − 1) Qᵀ N W N Q` with `W_ii ~ N(0, 2/α²)`,
//! `W_ij ~ N(0, 1/α²)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::datagen::{fraction_projection, PopulationModel, Sigma0};
use crate::error::{Error, Result};
use crate::rng;
use crate::spectrum::{phi, phi_inverse, phi_prime, support_edge, DiscreteSpectrum, Regime};

/// How far from −1 an eigenvalue of `N V N` may sit and still count as part
/// of the cluster.
const CLUSTER_EIGEN_TOL: f64 = 0.05;

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeKind {
    Distant,
    Close,
}

/// One cluster of population spikes and its predicted sample behavior.
#[derive(Clone, Debug, Serialize)]
pub struct SpikeCluster {
    pub alpha: f64,
    pub multiplicity: usize,
    pub kind: SpikeKind,
    /// Almost-sure limit of the sample spikes: `phi(alpha)` when distant,
    /// the bulk right edge when close.
    pub lambda_limit: f64,
    /// `phi'(alpha)`; absent for close spikes.
    pub phi_prime: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpikeReport {
    pub clusters: Vec<SpikeCluster>,
    pub critical_point: f64,
    pub right_edge: f64,
}

/// Classify spike clusters as distant or close and predict their limits.
///
/// `alphas` must be descending, one entry per cluster, with a parallel
/// multiplicity list. A spike exactly at the critical point counts as close.
pub fn classify_spikes(
    alphas: &[f64],
    multiplicities: &[usize],
    h: &DiscreteSpectrum,
    r: &Regime,
) -> Result<SpikeReport> {
    if alphas.len() != multiplicities.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} alphas vs {} multiplicities",
            alphas.len(),
            multiplicities.len()
        )));
    }
    for w in alphas.windows(2) {
        if w[1] > w[0] {
            return Err(Error::DimensionMismatch("alphas must be descending".into()));
        }
    }
    let edges = support_edge(h, r)?;
    let mut clusters = Vec::with_capacity(alphas.len());
    for (&alpha, &mult) in alphas.iter().zip(multiplicities) {
        if alpha > edges.critical_point {
            clusters.push(SpikeCluster {
                alpha,
                multiplicity: mult,
                kind: SpikeKind::Distant,
                lambda_limit: phi(h, r, alpha)?,
                phi_prime: Some(phi_prime(h, r, alpha)?),
            });
        } else {
            clusters.push(SpikeCluster {
                alpha,
                multiplicity: mult,
                kind: SpikeKind::Close,
                lambda_limit: edges.right_edge,
                phi_prime: None,
            });
        }
    }
    Ok(SpikeReport {
        clusters,
        critical_point: edges.critical_point,
        right_edge: edges.right_edge,
    })
}

/// Group a descending list of spike strengths into clusters of near-equal
/// values (relative tolerance `tol`), returning `(cluster_values, multiplicities)`.
pub fn cluster_alphas(alphas: &[f64], tol: f64) -> (Vec<f64>, Vec<usize>) {
    let mut values: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for &a in alphas {
        match (values.last(), counts.last_mut()) {
            (Some(&v), Some(c)) if (v - a).abs() <= tol * v.abs().max(1.0) => {
                *c += 1;
            }
            _ => {
                values.push(a);
                counts.push(1);
            }
        }
    }
    let mut idx = 0;
    for (v, &c) in values.iter_mut().zip(counts.iter()) {
        let sum: f64 = alphas[idx..idx + c].iter().sum();
        *v = sum / c as f64;
        idx += c;
    }
    (values, counts)
}

/// Inverse of the spike map on the distant branch: the unique `α` above the
/// critical point with `phi(α) = lambda`. Requires `lambda` strictly above
/// the bulk edge.
pub fn invert_spike(lambda: f64, h: &DiscreteSpectrum, r: &Regime) -> Result<f64> {
    let edges = support_edge(h, r)?;
    if lambda <= edges.right_edge {
        return Err(Error::BelowEdge {
            lambda,
            edge: edges.right_edge,
        });
    }
    phi_inverse(h, r, lambda)
}

// ---------------------------------------------------------------------------
// Projection quantities
// ---------------------------------------------------------------------------

/// Symmetric 3-index table over group indices.
#[derive(Clone, Debug)]
pub struct Sym3 {
    tau: usize,
    vals: Vec<f64>,
}

impl Sym3 {
    pub fn zeros(tau: usize) -> Self {
        Sym3 {
            tau,
            vals: vec![0.0; tau * tau * tau],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.vals[(i * self.tau + j) * self.tau + l]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        self.vals[(i * self.tau + j) * self.tau + l] = v;
    }
}

/// Symmetric 4-index table over group indices.
#[derive(Clone, Debug)]
pub struct Sym4 {
    tau: usize,
    vals: Vec<f64>,
}

impl Sym4 {
    pub fn zeros(tau: usize) -> Self {
        Sym4 {
            tau,
            vals: vec![0.0; tau * tau * tau * tau],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize, t: usize) -> f64 {
        self.vals[((i * self.tau + j) * self.tau + l) * self.tau + t]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, l: usize, t: usize, v: f64) {
        self.vals[((i * self.tau + j) * self.tau + l) * self.tau + t] = v;
    }
}

/// Mean-projection quantities entering the spike fluctuation law at one `α`.
///
/// All tables use the √k-weighted means `u_i = √k_i μ_i` and the resolvent
/// `Q(α) = Σ₀ − √(c_n b_p) α I`:
///
/// - `v[(i,j)] = u_iᵀ Q⁻¹ u_j`
/// - `v_prime[(i,j)] = √(c_n b_p) · u_iᵀ Q⁻² u_j`
/// - `theta[(i,j)] = u_iᵀ Q⁻¹ Σ₀ Q⁻¹ u_j`
/// - `h`, `rho`: coordinate-wise third and fourth products of the rows of
///   `Σ₀^{1/2} Q⁻¹ u_i`, which activate for skewed or heavy-tailed noise.
#[derive(Clone, Debug)]
pub struct ProjectionData {
    pub alpha: f64,
    pub fractions: Vec<f64>,
    /// `I − √k √kᵀ`.
    pub n_mat: DMatrix<f64>,
    /// Gram of the √k-weighted means over `√(c_n b_p)`.
    pub mean_gram: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub v_prime: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub h: Sym3,
    pub rho: Sym4,
}

/// Compute the projection tables at spike strength `alpha` for a diagonal
/// population covariance; `√(c_n b_p) α` must stay away from the spectrum of Σ₀.
pub fn projection_data(
    model: &PopulationModel,
    n: usize,
    p: usize,
    alpha: f64,
) -> Result<ProjectionData> {
    if p != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "model dimension {} but p = {p}",
            model.dim()
        )));
    }
    let (_, b_p) = model.moments();
    let c_n = p as f64 / n as f64;
    let scale = (c_n * b_p).sqrt();
    projection_tables(model, scale, alpha)
}

pub(crate) fn projection_tables(
    model: &PopulationModel,
    scale: f64,
    alpha: f64,
) -> Result<ProjectionData> {
    let diag = match model.sigma0() {
        Sigma0::Diagonal { diag } => diag,
        _ => {
            return Err(Error::Unsupported(
                "projection tables require a diagonal population covariance".into(),
            ))
        }
    };
    let tau = model.tau();
    let p = model.dim();
    let shift = scale * alpha;
    let mut min_gap = f64::INFINITY;
    for &d in diag {
        min_gap = min_gap.min((d - shift).abs());
    }
    if min_gap <= 1e-12 * shift.abs().max(1.0) {
        return Err(Error::SingularQ(alpha));
    }

    let u: Vec<DVector<f64>> = model
        .means()
        .iter()
        .zip(model.fractions())
        .map(|(m, &k)| m * k.sqrt())
        .collect();

    let mut mean_gram = DMatrix::zeros(tau, tau);
    let mut v = DMatrix::zeros(tau, tau);
    let mut v_prime = DMatrix::zeros(tau, tau);
    let mut theta = DMatrix::zeros(tau, tau);
    for i in 0..tau {
        for j in i..tau {
            let (mut g, mut sv, mut svp, mut st) = (0.0, 0.0, 0.0, 0.0);
            for q in 0..p {
                let prod = u[i][q] * u[j][q];
                if prod == 0.0 {
                    continue;
                }
                let qr = diag[q] - shift;
                g += prod;
                sv += prod / qr;
                svp += prod / (qr * qr);
                st += prod * diag[q] / (qr * qr);
            }
            mean_gram[(i, j)] = g / scale;
            mean_gram[(j, i)] = g / scale;
            v[(i, j)] = sv;
            v[(j, i)] = sv;
            v_prime[(i, j)] = scale * svp;
            v_prime[(j, i)] = scale * svp;
            theta[(i, j)] = st;
            theta[(j, i)] = st;
        }
    }

    // Rows a_{q,i} = √d_q u_{i,q} / (d_q − shift); h and rho are their
    // coordinate-wise third and fourth products.
    let mut h = Sym3::zeros(tau);
    let mut rho = Sym4::zeros(tau);
    let mut a = DMatrix::zeros(p, tau);
    for i in 0..tau {
        for q in 0..p {
            a[(q, i)] = diag[q].sqrt() * u[i][q] / (diag[q] - shift);
        }
    }
    for i in 0..tau {
        for j in 0..tau {
            for l in 0..tau {
                let mut s3 = 0.0;
                for q in 0..p {
                    s3 += a[(q, i)] * a[(q, j)] * a[(q, l)];
                }
                h.set(i, j, l, s3);
                for t in 0..tau {
                    let mut s4 = 0.0;
                    for q in 0..p {
                        s4 += a[(q, i)] * a[(q, j)] * a[(q, l)] * a[(q, t)];
                    }
                    rho.set(i, j, l, t, s4);
                }
            }
        }
    }

    Ok(ProjectionData {
        alpha,
        fractions: model.fractions().to_vec(),
        n_mat: fraction_projection(model.fractions()),
        mean_gram,
        v,
        v_prime,
        theta,
        h,
        rho,
    })
}

impl ProjectionData {
    /// The degenerate `p/n → ∞` tables: `V = −G/α`, `V' = G/α²`, and all
    /// resolvent corrections zero, where `G` is the normalized mean Gram.
    pub fn ultrahigh(fractions: &[f64], mean_gram: DMatrix<f64>, alpha: f64) -> Result<Self> {
        let tau = fractions.len();
        if mean_gram.nrows() != tau || mean_gram.ncols() != tau {
            return Err(Error::DimensionMismatch("mean gram must be τ×τ".into()));
        }
        if alpha == 0.0 {
            return Err(Error::SingularQ(alpha));
        }
        Ok(ProjectionData {
            alpha,
            fractions: fractions.to_vec(),
            n_mat: fraction_projection(fractions),
            v: &mean_gram * (-1.0 / alpha),
            v_prime: &mean_gram * (1.0 / (alpha * alpha)),
            mean_gram,
            theta: DMatrix::zeros(tau, tau),
            h: Sym3::zeros(tau),
            rho: Sym4::zeros(tau),
        })
    }

    /// Ultrahigh-regime tables taken from a model's means at sample scale `(n, p)`.
    pub fn ultrahigh_from_model(
        model: &PopulationModel,
        n: usize,
        p: usize,
        alpha: f64,
    ) -> Result<Self> {
        let (_, b_p) = model.moments();
        let scale = ((p as f64 / n as f64) * b_p).sqrt();
        let gram = crate::datagen::scaled_mean_gram(model, scale);
        Self::ultrahigh(model.fractions(), gram, alpha)
    }

    /// Two groups with fractions `(k1, 1−k1)`, first mean zero, second mean
    /// sized so the between-group spike strength is exactly `alpha`, in the
    /// `p/n → ∞` regime.
    pub fn ultrahigh_two_group(alpha: f64, k1: f64) -> Result<Self> {
        if !(k1 > 0.0 && k1 < 1.0) {
            return Err(Error::InvalidSpectrum(format!("k1 = {k1} outside (0,1)")));
        }
        let mut gram = DMatrix::zeros(2, 2);
        gram[(1, 1)] = alpha / k1;
        Self::ultrahigh(&[k1, 1.0 - k1], gram, alpha)
    }

    pub fn tau(&self) -> usize {
        self.fractions.len()
    }
}

// ---------------------------------------------------------------------------
// The W covariance law
// ---------------------------------------------------------------------------

/// Covariance of the symmetric Gaussian matrix `W` over its free entries
/// (pairs `(i,j)` with `i ≤ j`, row-major).
#[derive(Clone, Debug)]
pub struct WCovariance {
    pub tau: usize,
    pub pairs: Vec<(usize, usize)>,
    pub matrix: DMatrix<f64>,
}

/// Evaluate the covariance of `W` from the projection tables.
///
/// With `θ = ρ = 0` and `phi' = 1 − 1/α²` this collapses to
/// `Var(W_ii) = 2/α²`, `Var(W_ij) = 1/α²`, all covariances zero.
pub fn w_covariance(pd: &ProjectionData, phi_prime: f64, v4: f64) -> WCovariance {
    let tau = pd.tau();
    let mut pairs = Vec::new();
    for i in 0..tau {
        for j in i..tau {
            pairs.push((i, j));
        }
    }
    let m = pairs.len();
    let mut matrix = DMatrix::zeros(m, m);
    for (a, &pa) in pairs.iter().enumerate() {
        for (b, &pb) in pairs.iter().enumerate() {
            matrix[(a, b)] = w_cov_entry(&pd.theta, &pd.rho, phi_prime, v4, pa, pb);
        }
    }
    WCovariance { tau, pairs, matrix }
}

fn w_cov_entry(
    theta: &DMatrix<f64>,
    rho: &Sym4,
    phi_prime: f64,
    v4: f64,
    (i, j): (usize, usize),
    (l, t): (usize, usize),
) -> f64 {
    let kappa = phi_prime * (v4 - 3.0);
    let th = |a: usize, b: usize| theta[(a, b)];
    match (i == j, l == t) {
        (true, true) => {
            if i == l {
                2.0 * (2.0 * th(i, i) + th(i, i) * th(i, i) + 1.0 - phi_prime)
                    + kappa * rho.get(i, i, i, i)
            } else {
                2.0 * th(i, l) * th(i, l) + kappa * rho.get(i, i, l, l)
            }
        }
        (true, false) => diag_offdiag(&th, rho, kappa, i, (l, t)),
        (false, true) => diag_offdiag(&th, rho, kappa, l, (i, j)),
        (false, false) => {
            if (i, j) == (l, t) {
                th(i, i) + th(j, j) + th(i, j) * th(i, j) + th(i, i) * th(j, j) + 1.0 - phi_prime
                    + kappa * rho.get(i, j, i, j)
            } else if let Some((a, b, s)) = shared_index((i, j), (l, t)) {
                th(a, b) + th(s, a) * th(s, b) + th(s, s) * th(a, b) + kappa * rho.get(a, s, b, s)
            } else {
                th(j, l) * th(t, i) + th(j, t) * th(l, i) + kappa * rho.get(i, j, l, t)
            }
        }
    }
}

/// Cov(W_dd, W_lt) with l < t.
fn diag_offdiag(
    th: &impl Fn(usize, usize) -> f64,
    rho: &Sym4,
    kappa: f64,
    d: usize,
    (l, t): (usize, usize),
) -> f64 {
    if d == l || d == t {
        let other = if d == l { t } else { l };
        2.0 * (th(d, other) + th(d, other) * th(d, d)) + kappa * rho.get(d, d, d, other)
    } else {
        2.0 * th(t, d) * th(d, l) + kappa * rho.get(d, d, l, t)
    }
}

/// The index shared by two distinct off-diagonal pairs, if any, as `(a, b, shared)`.
fn shared_index((i, j): (usize, usize), (l, t): (usize, usize)) -> Option<(usize, usize, usize)> {
    if j == t {
        Some((i, l, j))
    } else if j == l {
        Some((i, t, j))
    } else if i == l {
        Some((j, t, i))
    } else if i == t {
        Some((j, l, i))
    } else {
        None
    }
}

impl WCovariance {
    /// Cholesky factor for sampling, with an escalating diagonal jitter.
    pub fn sampler(&self) -> Result<WSampler> {
        let m = self.matrix.nrows();
        let scale = self.matrix.diagonal().amax().max(1e-300);
        let mut jitter = 1e-12;
        for _ in 0..8 {
            let mut shifted = self.matrix.clone();
            for d in 0..m {
                shifted[(d, d)] += jitter * scale;
            }
            if let Some(chol) = shifted.cholesky() {
                return Ok(WSampler {
                    tau: self.tau,
                    pairs: self.pairs.clone(),
                    factor: chol.l(),
                });
            }
            jitter *= 100.0;
        }
        Err(Error::InvalidSpectrum(
            "W covariance is not positive semidefinite".into(),
        ))
    }

    /// Variance of `Σ c_{ij} W_ij` for a symmetric coefficient matrix `C`
    /// (each unordered off-diagonal pair contributes `2 C_ij W_ij`).
    pub fn quadratic_variance(&self, coeff: &DMatrix<f64>) -> f64 {
        let w: Vec<f64> = self
            .pairs
            .iter()
            .map(|&(i, j)| {
                if i == j {
                    coeff[(i, i)]
                } else {
                    2.0 * coeff[(i, j)]
                }
            })
            .collect();
        let mut var = 0.0;
        for a in 0..w.len() {
            for b in 0..w.len() {
                var += w[a] * self.matrix[(a, b)] * w[b];
            }
        }
        var
    }
}

/// Draws symmetric `W` matrices from a fixed covariance.
pub struct WSampler {
    tau: usize,
    pairs: Vec<(usize, usize)>,
    factor: DMatrix<f64>,
}

impl WSampler {
    pub fn sample(&self, rng: &mut impl rand::Rng) -> DMatrix<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let m = self.pairs.len();
        let z = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(rng)));
        let flat = &self.factor * z;
        let mut w = DMatrix::zeros(self.tau, self.tau);
        for (idx, &(i, j)) in self.pairs.iter().enumerate() {
            w[(i, j)] = flat[idx];
            w[(j, i)] = flat[idx];
        }
        w
    }
}

// ---------------------------------------------------------------------------
// Cluster fluctuation law
// ---------------------------------------------------------------------------

/// Deterministic frame of one cluster's limit law: the basis `Q` of the `−1`
/// eigenspace of `N V N` and the gain `G = (Qᵀ N V' N Q)⁻¹`.
struct ClusterFrame {
    nq: DMatrix<f64>,     // N Q, τ×m
    g_half: DMatrix<f64>, // symmetric square root of G
    g: DMatrix<f64>,
}

fn cluster_frame(pd: &ProjectionData, multiplicity: usize) -> Result<ClusterFrame> {
    let tau = pd.tau();
    let nvn = &pd.n_mat * &pd.v * &pd.n_mat;
    let eig = nvn.symmetric_eigen();
    let mut hits: Vec<usize> = (0..tau)
        .filter(|&i| (eig.eigenvalues[i] + 1.0).abs() <= CLUSTER_EIGEN_TOL)
        .collect();
    if hits.len() != multiplicity {
        return Err(Error::ClusterMismatch {
            expected: multiplicity,
            found: hits.len(),
        });
    }
    hits.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let mut q = DMatrix::zeros(tau, multiplicity);
    for (c, &idx) in hits.iter().enumerate() {
        // Scale each eigenvector so qᵀ N V N q = −1 exactly.
        let col = eig.eigenvectors.column(idx) / (-eig.eigenvalues[idx]).sqrt();
        q.set_column(c, &col);
    }
    let g_inv = q.transpose() * &pd.n_mat * &pd.v_prime * &pd.n_mat * &q;
    let g_inv = (&g_inv + g_inv.transpose()) * 0.5;
    let eig_g = g_inv.symmetric_eigen();
    for &l in eig_g.eigenvalues.iter() {
        if l <= 1e-12 {
            return Err(Error::ClusterMismatch {
                expected: multiplicity,
                found: hits.len(),
            });
        }
    }
    let mut g = DMatrix::zeros(multiplicity, multiplicity);
    let mut g_half = DMatrix::zeros(multiplicity, multiplicity);
    for a in 0..multiplicity {
        for b in 0..multiplicity {
            let (mut sg, mut sh) = (0.0, 0.0);
            for l in 0..multiplicity {
                let w = eig_g.eigenvectors[(a, l)] * eig_g.eigenvectors[(b, l)];
                sg += w / eig_g.eigenvalues[l];
                sh += w / eig_g.eigenvalues[l].sqrt();
            }
            g[(a, b)] = sg;
            g_half[(a, b)] = sh;
        }
    }
    Ok(ClusterFrame {
        nq: &pd.n_mat * &q,
        g_half,
        g,
    })
}

/// Sample the joint limit law of one cluster of `√n`-scaled spike deviations.
///
/// Each draw returns the `multiplicity` eigenvalues (descending) of
/// `−√(phi') Qᵀ N W N Q G`. The projection data must be evaluated at the
/// cluster's `α`; `phi'` is the spike-map derivative there and `v4` the
/// fourth moment of the noise.
pub fn cluster_limit_sampler(
    pd: &ProjectionData,
    multiplicity: usize,
    phi_prime: f64,
    v4: f64,
    seed: u64,
    draws: usize,
) -> Result<Vec<Vec<f64>>> {
    let frame = cluster_frame(pd, multiplicity)?;
    let wcov = w_covariance(pd, phi_prime, v4);
    let sampler = wcov.sampler()?;
    let mut out = Vec::with_capacity(draws);
    let mut r = rng::stream(seed, &[0x57]);
    let scale = -phi_prime.sqrt();
    for _ in 0..draws {
        let w = sampler.sample(&mut r);
        let core = frame.nq.transpose() * &w * &frame.nq;
        // Eigenvalues of S·G equal those of G^{1/2} S G^{1/2}, kept symmetric.
        let sym = &frame.g_half * core * &frame.g_half * scale;
        let sym = (&sym + sym.transpose()) * 0.5;
        let mut eigs: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().cloned().collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        out.push(eigs);
    }
    Ok(out)
}

/// Closed-form variance of the cluster sum `Σ_ℓ δ_ℓ` (the trace of the limit
/// matrix), a plain Gaussian functional of `W`.
pub fn cluster_sum_variance(
    pd: &ProjectionData,
    multiplicity: usize,
    phi_prime: f64,
    v4: f64,
) -> Result<f64> {
    let frame = cluster_frame(pd, multiplicity)?;
    // tr(Qᵀ N W N Q G) = Σ_{ij} [N Q G Qᵀ N]_{ij} W_{ij}
    let coeff = &frame.nq * &frame.g * frame.nq.transpose();
    let coeff = (&coeff + coeff.transpose()) * 0.5;
    let wcov = w_covariance(pd, phi_prime, v4);
    Ok(phi_prime * wcov.quadratic_variance(&coeff))
}

/// Closed-form variance for the two-population spike fluctuation:
/// `σ² = 2 φ' α² [1 − φ'/(1+ω)² + φ'(v₄−3) η / (2(1+ω)²)]`.
///
/// With `ω = η = 0` and `φ' = 1 − 1/α²` this is `2(1 − 1/α²)`.
pub fn two_sample_variance(omega: f64, eta: f64, alpha1: f64, phi_prime_1: f64, v4: f64) -> f64 {
    let denom = (1.0 + omega) * (1.0 + omega);
    2.0 * phi_prime_1
        * alpha1
        * alpha1
        * (1.0 - phi_prime_1 / denom + phi_prime_1 * (v4 - 3.0) * eta / (2.0 * denom))
}

/// The `(ω, η)` contractions of `θ` and `ρ` for the two-population case.
pub fn omega_eta(pd: &ProjectionData) -> Result<(f64, f64)> {
    if pd.tau() != 2 {
        return Err(Error::WrongClusterCount(pd.tau()));
    }
    let (k1, k2) = (pd.fractions[0], pd.fractions[1]);
    let th = &pd.theta;
    let omega = k2 * th[(0, 0)] + k1 * th[(1, 1)] - 2.0 * (k1 * k2).sqrt() * th[(0, 1)];
    let r = &pd.rho;
    let s12 = (k1 * k2).sqrt();
    let eta = k2 * k2 * r.get(0, 0, 0, 0)
        + k1 * k1 * r.get(1, 1, 1, 1)
        + 6.0 * k1 * k2 * r.get(0, 1, 0, 1)
        - 4.0 * k2 * s12 * r.get(0, 0, 0, 1)
        - 4.0 * k1 * s12 * r.get(0, 1, 1, 1);
    Ok((omega, eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{NoiseLaw, PopulationModel};
    use crate::spectrum::Aspect;
    use crate::stats;

    fn delta1() -> DiscreteSpectrum {
        DiscreteSpectrum::unit()
    }

    #[test]
    fn classify_matches_phase_transition() {
        let h = delta1();
        let inf = Regime::ultrahigh();
        let report = classify_spikes(&[3.0, 0.9], &[1, 1], &h, &inf).unwrap();
        assert_eq!(report.clusters[0].kind, SpikeKind::Distant);
        assert!((report.clusters[0].lambda_limit - (3.0 + 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(report.clusters[1].kind, SpikeKind::Close);
        assert_eq!(report.clusters[1].lambda_limit, 2.0);
        assert!(report.clusters[1].phi_prime.is_none());

        // Finite c: alpha = 2 vs critical point 1.5 at c = 4.
        let r = Regime::from_spectrum(&h, Aspect::Finite(4.0));
        let report = classify_spikes(&[2.0], &[1], &h, &r).unwrap();
        assert_eq!(report.clusters[0].kind, SpikeKind::Distant);
        assert!((report.clusters[0].lambda_limit - (2.0 + 1.0 / 1.5)).abs() < 1e-10);
    }

    #[test]
    fn spike_at_the_critical_point_is_close() {
        let h = delta1();
        let report = classify_spikes(&[1.0], &[1], &h, &Regime::ultrahigh()).unwrap();
        assert_eq!(report.clusters[0].kind, SpikeKind::Close);
    }

    #[test]
    fn invert_spike_round_trips() {
        let h = delta1();
        for r in [
            Regime::ultrahigh(),
            Regime::from_spectrum(&h, Aspect::Finite(4.0)),
        ] {
            let edges = support_edge(&h, &r).unwrap();
            for base in [1.2, 2.0, 5.0] {
                let alpha = base + edges.critical_point - 1.0;
                let lam = phi(&h, &r, alpha).unwrap();
                assert!((invert_spike(lam, &h, &r).unwrap() - alpha).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn invert_spike_boundary_values() {
        let h = delta1();
        let inf = Regime::ultrahigh();
        assert!((invert_spike(2.5, &h, &inf).unwrap() - 2.0).abs() < 1e-12);
        assert!((invert_spike(2.9, &h, &inf).unwrap() - 2.5).abs() < 1e-12);
        assert!(matches!(
            invert_spike(2.0, &h, &inf),
            Err(Error::BelowEdge { .. })
        ));
    }

    #[test]
    fn cluster_alphas_groups_near_ties() {
        let (vals, mult) = cluster_alphas(&[3.0000001, 3.0, 2.0], 1e-6);
        assert_eq!(mult, vec![2, 1]);
        assert!((vals[0] - 3.00000005).abs() < 1e-9);
        assert!((vals[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn fraction_projection_is_a_projection() {
        let k = [0.25, 0.25, 0.25, 0.25];
        let n = fraction_projection(&k);
        let diff = (&n * &n - &n).abs().max();
        assert!(diff < 1e-12);
        let sqrt_k = DVector::from_iterator(4, k.iter().map(|x: &f64| x.sqrt()));
        assert!((&n * sqrt_k).norm() < 1e-12);
        let mut eigs: Vec<f64> = n.symmetric_eigen().eigenvalues.iter().cloned().collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(eigs[0].abs() < 1e-12);
        for &e in &eigs[1..] {
            assert!((e - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn w_covariance_degenerate_reduces_to_wigner_scalings() {
        let pd = ProjectionData::ultrahigh_two_group(2.0, 0.5).unwrap();
        let phi_p = 1.0 - 1.0 / 4.0;
        let wc = w_covariance(&pd, phi_p, 3.0);
        // pairs: (0,0), (0,1), (1,1)
        assert!((wc.matrix[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((wc.matrix[(1, 1)] - 0.25).abs() < 1e-12);
        assert!((wc.matrix[(2, 2)] - 0.5).abs() < 1e-12);
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    assert!(wc.matrix[(a, b)].abs() < 1e-12);
                }
            }
        }
        // v4 does not enter when rho = 0.
        let wc9 = w_covariance(&pd, phi_p, 9.0);
        assert!((&wc9.matrix - &wc.matrix).abs().max() < 1e-12);
    }

    #[test]
    fn w_covariance_theta_free_formula() {
        // With θ = ρ = 0 and arbitrary φ': Var(W_ii) = 2(1 − φ').
        let pd = ProjectionData::ultrahigh_two_group(3.0, 0.5).unwrap();
        for phi_p in [0.3, 0.6, 1.0 - 1.0 / 9.0] {
            let wc = w_covariance(&pd, phi_p, 5.0);
            assert!((wc.matrix[(0, 0)] - 2.0 * (1.0 - phi_p)).abs() < 1e-12);
            assert!((wc.matrix[(1, 1)] - (1.0 - phi_p)).abs() < 1e-12);
        }
        let wc = w_covariance(&pd, 1.0 - 1.0 / 9.0, 5.0);
        assert!((wc.matrix[(0, 0)] - 2.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn two_group_frame_recovers_alpha_gain() {
        // In the degenerate regime G must equal α·I on the cluster.
        let pd = ProjectionData::ultrahigh_two_group(3.0, 0.5).unwrap();
        let frame = cluster_frame(&pd, 1).unwrap();
        assert!((frame.g[(0, 0)] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn cluster_mismatch_is_reported() {
        let pd = ProjectionData::ultrahigh_two_group(3.0, 0.5).unwrap();
        assert!(matches!(
            cluster_limit_sampler(&pd, 2, 1.0 - 1.0 / 9.0, 3.0, 1, 10),
            Err(Error::ClusterMismatch {
                expected: 2,
                found: 1
            })
        ));
    }

    #[test]
    fn sampler_matches_two_sample_closed_form() {
        // τ=2, c=∞, α=3: σ² = 2(1 − 1/9) = 16/9.
        let alpha = 3.0;
        let pd = ProjectionData::ultrahigh_two_group(alpha, 0.5).unwrap();
        let phi_p = 1.0 - 1.0 / (alpha * alpha);
        let draws = cluster_limit_sampler(&pd, 1, phi_p, 3.0, 424242, 100_000).unwrap();
        let xs: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let var = stats::variance(&xs);
        let target = 16.0 / 9.0;
        assert!(
            (var - target).abs() < 0.03 * target,
            "var {var} vs {target}"
        );
        assert!(stats::mean(&xs).abs() < 0.02);

        // The closed-form trace variance agrees exactly.
        let v = cluster_sum_variance(&pd, 1, phi_p, 3.0).unwrap();
        assert!((v - target).abs() < 1e-10, "closed form {v}");
        assert!((two_sample_variance(0.0, 0.0, alpha, phi_p, 3.0) - target).abs() < 1e-12);
    }

    #[test]
    fn two_sample_variance_limits() {
        // α → ∞ pushes the variance to 2.
        let alpha = 1e3;
        let v = two_sample_variance(0.0, 0.0, alpha, 1.0 - 1.0 / (alpha * alpha), 3.0);
        assert!((v - 2.0).abs() < 1e-5);
    }

    #[test]
    fn exchangeable_pair_is_symmetric() {
        // A multiplicity-2 cluster with exchangeable structure: the law of the
        // sorted pair must be symmetric under negation and swap.
        // Equilateral mean layout: ‖μ‖² = 12, μ₂ᵀμ₃ = 6 at k = 1/3 gives a
        // double eigenvalue 2 of N·gram·N.
        let mut gram = DMatrix::zeros(3, 3);
        gram[(1, 1)] = 4.0;
        gram[(2, 2)] = 4.0;
        gram[(1, 2)] = 2.0;
        gram[(2, 1)] = 2.0;
        let pd = ProjectionData::ultrahigh(&[1.0 / 3.0; 3], gram, 2.0).unwrap();
        let nvn = &pd.n_mat * &pd.v * &pd.n_mat;
        let mut evs: Vec<f64> = nvn.symmetric_eigen().eigenvalues.iter().cloned().collect();
        evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            (evs[0] + 1.0).abs() < 1e-10 && (evs[1] + 1.0).abs() < 1e-10,
            "{evs:?}"
        );

        let phi_p = 1.0 - 0.25;
        let draws = cluster_limit_sampler(&pd, 2, phi_p, 3.0, 7, 40_000).unwrap();
        let top: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let bottom_neg: Vec<f64> = draws.iter().map(|d| -d[1]).collect();
        let p = stats::ks_two_sample_pvalue(&top, &bottom_neg);
        assert!(p > 0.01, "KS p-value {p}");
    }

    #[test]
    fn projection_data_identity_closed_form() {
        // Σ₀ = I: θ_ij = √(k_i k_j) μ_iᵀμ_j (√c_n α − 1)⁻².
        let p = 500;
        let n = 125; // c_n = 4
        let mut mu2 = DVector::zeros(p);
        mu2[0] = 3.0;
        mu2[1] = -1.0;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), mu2.clone()],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let alpha = 2.0;
        let pd = projection_data(&model, n, p, alpha).unwrap();
        let c_n = 4.0_f64;
        let expected = 0.5 * mu2.norm_squared() * (c_n.sqrt() * alpha - 1.0).powi(-2);
        assert!((pd.theta[(1, 1)] - expected).abs() < 1e-12);
        assert!(pd.theta[(0, 0)].abs() < 1e-15);
        let q = 1.0 - c_n.sqrt() * alpha;
        assert!((pd.v[(1, 1)] - 0.5 * mu2.norm_squared() / q).abs() < 1e-12);
        // ρ_1111 = k₁² Σ μ⁴ (√c α − 1)⁻⁴.
        let quart: f64 = mu2.iter().map(|x| x.powi(4)).sum();
        let expected_rho = 0.25 * quart * (c_n.sqrt() * alpha - 1.0).powi(-4);
        assert!((pd.rho.get(1, 1, 1, 1) - expected_rho).abs() < 1e-14);
    }

    #[test]
    fn projection_tables_vanish_as_cn_grows() {
        let p = 4000;
        let mut mu2 = DVector::zeros(p);
        mu2[0] = 5.0;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), mu2],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let pd_small = projection_data(&model, 1000, p, 2.0).unwrap(); // c_n = 4
        let pd_big = projection_data(&model, 10, p, 2.0).unwrap(); // c_n = 400
        assert!(pd_big.theta[(1, 1)].abs() < pd_small.theta[(1, 1)].abs() / 5.0);
        assert!(pd_big.rho.get(1, 1, 1, 1).abs() < pd_small.rho.get(1, 1, 1, 1).abs() / 25.0);
        // The degenerate relations V ≈ −G/α, V' ≈ G/α² take over.
        let g = &pd_big.mean_gram;
        assert!((pd_big.v[(1, 1)] + g[(1, 1)] / 2.0).abs() < 0.02 * g[(1, 1)].abs());
        assert!((pd_big.v_prime[(1, 1)] - g[(1, 1)] / 4.0).abs() < 0.02 * g[(1, 1)].abs());
    }

    #[test]
    fn projection_data_rejects_sigma_hits() {
        let p = 50;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), DVector::from_element(p, 1.0)],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        // √(c_n b_p) α = 1 exactly hits the spectrum of I.
        let n = p; // c_n = 1, b_p = 1
        assert!(matches!(
            projection_data(&model, n, p, 1.0),
            Err(Error::SingularQ(_))
        ));
    }

    #[test]
    fn zero_means_zero_tables() {
        let p = 30;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), DVector::zeros(p)],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let pd = projection_data(&model, 10, p, 2.0).unwrap();
        assert!(pd.theta.abs().max() < 1e-15);
        assert!(pd.v.abs().max() < 1e-15);
        assert!(pd.rho.get(0, 0, 0, 0).abs() < 1e-15);
        assert!(pd.h.get(0, 0, 0).abs() < 1e-15);
    }
}
