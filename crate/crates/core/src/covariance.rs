//! Sample-level matrix constructions on the n×n Gram side.
//!
//! Everything here avoids p×p matrices: the renormalized matrix
//! `√(p/(n b)) [Φ XᵀX Φ / p − a Φ]` is built from the centered Gram, the
//! moment estimators `(â, b̂)` come from Gram traces, and resolvents of the
//! group-centered covariance are applied through a Woodbury identity on the
//! noise Gram. For `p ≤ 60`-scale oracles the test suite checks every one of
//! these against the naive p×p construction.

use nalgebra::{Complex, DMatrix, DVector};

use crate::datagen::{PopulationModel, Sigma0};
use crate::error::{Error, Result};
use crate::spectrum::{
    semicircle_stieltjes, stieltjes_derivative, stieltjes_solve, support_edge, Aspect, Regime,
};
use crate::spikes::{projection_tables, Sym3, Sym4};

/// Margin added to the bulk edge when real evaluation points are accepted.
const REAL_Z_MARGIN: f64 = 0.05;

// ---------------------------------------------------------------------------
// Centering and renormalized Gram
// ---------------------------------------------------------------------------

/// The centering projection `Φ = I − 1 1ᵀ/n`.
pub fn centering_projection(n: usize) -> DMatrix<f64> {
    assert!(n >= 2, "centering needs n >= 2");
    let mut phi = DMatrix::from_element(n, n, -1.0 / n as f64);
    for i in 0..n {
        phi[(i, i)] += 1.0;
    }
    phi
}

/// `Φ XᵀX Φ`, computed as the Gram matrix double-centered in place.
pub(crate) fn centered_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols();
    let mut g = x.transpose() * x;
    let row_means: Vec<f64> = (0..n).map(|i| g.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] += grand - row_means[i] - row_means[j];
        }
    }
    g
}

fn ab_from_centered_gram(g: &DMatrix<f64>, p: usize) -> Result<(f64, f64)> {
    let n = g.nrows();
    assert!(n >= 3, "moment estimation needs n >= 3");
    let nm1 = (n - 1) as f64;
    let p = p as f64;
    let tr_s = g.trace() / nm1;
    let tr_s2 = g.iter().map(|v| v * v).sum::<f64>() / (nm1 * nm1);
    let a_hat = tr_s / p;
    let b_hat = tr_s2 / p - tr_s * tr_s / (nm1 * p);
    if !(b_hat > 0.0) {
        return Err(Error::NonPositiveBhat(b_hat));
    }
    Ok((a_hat, b_hat))
}

/// Estimate the spectral moments `(a, b)` of the population covariance from
/// data, entirely on the Gram side.
pub fn estimate_ab(x: &DMatrix<f64>) -> Result<(f64, f64)> {
    ab_from_centered_gram(&centered_gram(x), x.nrows())
}

fn renormalized_from_gram(g: &DMatrix<f64>, p: usize, a: f64, b: f64) -> DMatrix<f64> {
    let n = g.nrows();
    let scale = (p as f64 / (n as f64 * b)).sqrt();
    let inv_n = 1.0 / n as f64;
    let mut out = g / p as f64;
    for i in 0..n {
        for j in 0..n {
            let phi_ij = if i == j { 1.0 - inv_n } else { -inv_n };
            out[(i, j)] = scale * (out[(i, j)] - a * phi_ij);
        }
    }
    out
}

/// The renormalized n×n matrix `√(p/(n b)) [Φ XᵀX Φ / p − a Φ]`.
///
/// Pass the true population moments for the oracle version or estimates from
/// [`estimate_ab`] for the data-driven one.
pub fn renormalized_gram(x: &DMatrix<f64>, a: f64, b: f64) -> Result<DMatrix<f64>> {
    if !(b > 0.0) {
        return Err(Error::NonPositiveBhat(b));
    }
    if x.ncols() < 2 {
        return Err(Error::DimensionMismatch(
            "need at least two observations".into(),
        ));
    }
    Ok(renormalized_from_gram(&centered_gram(x), x.nrows(), a, b))
}

// ---------------------------------------------------------------------------
// Spectral summary
// ---------------------------------------------------------------------------

/// Sorted spectrum of the renormalized matrix plus the scalars behind it.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SpectralSummary {
    /// Descending eigenvalues; includes the structural zero of the centered
    /// direction.
    pub eigenvalues: Vec<f64>,
    pub a_hat: f64,
    pub b_hat: f64,
    pub n: usize,
    pub p: usize,
    pub c_n: f64,
}

fn summary_from_gram(g: &DMatrix<f64>, p: usize, a: f64, b: f64) -> SpectralSummary {
    let n = g.nrows();
    let a_mat = renormalized_from_gram(g, p, a, b);
    let mut eigenvalues: Vec<f64> = a_mat
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    eigenvalues.sort_by(|x, y| y.partial_cmp(x).unwrap());
    SpectralSummary {
        eigenvalues,
        a_hat: a,
        b_hat: b,
        n,
        p,
        c_n: p as f64 / n as f64,
    }
}

/// Full spectrum of the data-driven renormalized matrix, with `(â, b̂)`.
pub fn spectral_summary(x: &DMatrix<f64>) -> Result<SpectralSummary> {
    let g = centered_gram(x);
    let (a_hat, b_hat) = ab_from_centered_gram(&g, x.nrows())?;
    Ok(summary_from_gram(&g, x.nrows(), a_hat, b_hat))
}

/// Spectrum of the oracle renormalized matrix built with known `(a_p, b_p)`.
pub fn spectral_summary_oracle(x: &DMatrix<f64>, a_p: f64, b_p: f64) -> Result<SpectralSummary> {
    if !(b_p > 0.0) {
        return Err(Error::NonPositiveBhat(b_p));
    }
    Ok(summary_from_gram(&centered_gram(x), x.nrows(), a_p, b_p))
}

/// Both summaries from one Gram pass: the oracle and the estimated version.
pub fn spectral_summary_pair(
    x: &DMatrix<f64>,
    a_p: f64,
    b_p: f64,
) -> Result<(SpectralSummary, SpectralSummary)> {
    let g = centered_gram(x);
    let p = x.nrows();
    let (a_hat, b_hat) = ab_from_centered_gram(&g, p)?;
    let oracle = summary_from_gram(&g, p, a_p, b_p);
    let estimated = summary_from_gram(&g, p, a_hat, b_hat);
    Ok((oracle, estimated))
}

/// Project out the all-ones direction: the (n−1)×(n−1) compression of a
/// symmetric matrix onto the complement of `1_n`, removing the structural zero.
pub fn deflate_ones(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    // Householder vector sending 1/√n to e₁.
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    v[0] -= 1.0;
    let norm = v.norm();
    if norm < 1e-14 {
        return m.clone().remove_row(0).remove_column(0);
    }
    v /= norm;
    let mv = m * &v;
    let vm = mv.transpose();
    let vmv = v.dot(&mv);
    // H M H with H = I − 2vvᵀ.
    let mut out = m.clone();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] += -2.0 * v[i] * vm[j] - 2.0 * mv[i] * v[j] + 4.0 * v[i] * vmv * v[j];
        }
    }
    out.remove_row(0).remove_column(0)
}

/// Eigenvalues of the bulk: structural zero removed, then the top `drop_top`
/// (spike candidates) discarded. Descending.
pub fn bulk_eigenvalues(a_mat: &DMatrix<f64>, drop_top: usize) -> Vec<f64> {
    let deflated = deflate_ones(a_mat);
    let mut eigs: Vec<f64> = deflated
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eigs.drain(..drop_top.min(eigs.len()));
    eigs
}

// ---------------------------------------------------------------------------
// Group-centered covariance resolvent
// ---------------------------------------------------------------------------

/// Gram-side factorization of the group-wise centered covariance
/// `B = (1/n) Σ_i Σ_j (s_ij − s̄_i)(s_ij − s̄_i)ᵀ`, supporting resolvent
/// applications `(B − z̃ I)⁻¹` without forming p×p matrices.
pub struct GroupResolvent<'a> {
    noise: &'a DMatrix<f64>,
    group_of: Vec<usize>,
    group_sizes: Vec<usize>,
    /// `Φ_G SᵀS Φ_G` where `Φ_G` centers within each group.
    gram: DMatrix<f64>,
}

/// Build the factorization. Labels are zero-based group indices; every group
/// needs at least two members.
pub fn group_centered_cov_gram<'a>(
    noise: &'a DMatrix<f64>,
    labels: &[usize],
) -> Result<GroupResolvent<'a>> {
    let n = noise.ncols();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} observations",
            labels.len(),
            n
        )));
    }
    let tau = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; tau];
    for &g in labels {
        sizes[g] += 1;
    }
    for (g, &sz) in sizes.iter().enumerate() {
        if sz < 2 {
            return Err(Error::GroupTooSmall {
                group: g,
                size: sz,
                min: 2,
            });
        }
    }
    let mut gram = noise.transpose() * noise;
    group_center_sym(&mut gram, labels, &sizes);
    Ok(GroupResolvent {
        noise,
        group_of: labels.to_vec(),
        group_sizes: sizes,
        gram,
    })
}

/// Subtract per-group row means from each column of `m` (apply `Φ_G` on the left).
fn group_center_columns(m: &mut DMatrix<f64>, labels: &[usize], sizes: &[usize]) {
    let tau = sizes.len();
    for c in 0..m.ncols() {
        let mut means = vec![0.0; tau];
        for (r, &g) in labels.iter().enumerate() {
            means[g] += m[(r, c)];
        }
        for g in 0..tau {
            means[g] /= sizes[g] as f64;
        }
        for (r, &g) in labels.iter().enumerate() {
            m[(r, c)] -= means[g];
        }
    }
}

fn group_center_sym(m: &mut DMatrix<f64>, labels: &[usize], sizes: &[usize]) {
    group_center_columns(m, labels, sizes);
    let mut t = m.transpose();
    group_center_columns(&mut t, labels, sizes);
    *m = t;
}

impl GroupResolvent<'_> {
    /// Number of observations.
    pub fn n(&self) -> usize {
        self.noise.ncols()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    fn shifted_lu(
        &self,
        z_tilde: Complex<f64>,
    ) -> nalgebra::LU<Complex<f64>, nalgebra::Dyn, nalgebra::Dyn> {
        let n = self.n();
        let mut a = self.gram.map(|v| Complex::new(v, 0.0));
        for d in 0..n {
            a[(d, d)] -= Complex::new(n as f64, 0.0) * z_tilde;
        }
        a.lu()
    }

    /// Quadratic forms `Fᵀ (B − z̃ I)⁻¹ F` for a p×k block of vectors.
    pub fn quad_forms(
        &self,
        z_tilde: Complex<f64>,
        f: &DMatrix<f64>,
    ) -> Result<DMatrix<Complex<f64>>> {
        if f.nrows() != self.noise.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "vectors have {} rows, noise has {}",
                f.nrows(),
                self.noise.nrows()
            )));
        }
        let mut ytf = self.noise.transpose() * f;
        group_center_columns(&mut ytf, &self.group_of, &self.group_sizes);
        let rhs = ytf.map(|v| Complex::new(v, 0.0));
        let sol = self
            .shifted_lu(z_tilde)
            .solve(&rhs)
            .ok_or(Error::SingularResolvent)?;
        let ftf = f.transpose() * f;
        let k = f.ncols();
        let mut out = DMatrix::from_element(k, k, Complex::new(0.0, 0.0));
        for i in 0..k {
            for j in 0..k {
                let mut corr = Complex::new(0.0, 0.0);
                for r in 0..ytf.nrows() {
                    corr += Complex::new(ytf[(r, i)], 0.0) * sol[(r, j)];
                }
                out[(i, j)] = -(Complex::new(ftf[(i, j)], 0.0) - corr) / z_tilde;
            }
        }
        Ok(out)
    }

    /// Apply `(B − z̃ I)⁻¹` to one p-vector.
    pub fn apply(&self, z_tilde: Complex<f64>, v: &DVector<f64>) -> Result<DVector<Complex<f64>>> {
        let mut ytv =
            DMatrix::from_column_slice(self.n(), 1, (self.noise.transpose() * v).as_slice());
        group_center_columns(&mut ytv, &self.group_of, &self.group_sizes);
        let rhs = ytv.map(|x| Complex::new(x, 0.0));
        let w = self
            .shifted_lu(z_tilde)
            .solve(&rhs)
            .ok_or(Error::SingularResolvent)?;
        // Back to p-space: Y w = S Φ_G w, done on real and imaginary parts.
        let mut w_re = w.map(|c| c.re);
        let mut w_im = w.map(|c| c.im);
        group_center_columns(&mut w_re, &self.group_of, &self.group_sizes);
        group_center_columns(&mut w_im, &self.group_of, &self.group_sizes);
        let yw_re = self.noise * w_re.column(0);
        let yw_im = self.noise * w_im.column(0);
        let p = v.len();
        let mut out = DVector::from_element(p, Complex::new(0.0, 0.0));
        for i in 0..p {
            out[i] = -(Complex::new(v[i] - yw_re[i], -yw_im[i])) / z_tilde;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Sesquilinear panels
// ---------------------------------------------------------------------------

/// The 2τ×2τ panel of scaled resolvent forms over `(s̄_1..s̄_τ, μ_1..μ_τ)`,
/// its deterministic centering, and the ultrahigh first-order limits.
#[derive(Clone, Debug)]
pub struct SesquilinearPanel {
    /// `(z̃/√(c_n b_p)) Fᵀ (B − z̃I)⁻¹ F`.
    pub forms: DMatrix<Complex<f64>>,
    /// The proxy centering built from the finite-sample Stieltjes solution.
    pub centering: DMatrix<Complex<f64>>,
    /// First-order limits in the `p/n → ∞` regime.
    pub limit: DMatrix<Complex<f64>>,
    /// `√n (forms − centering)`, the panel whose entries are asymptotically Gaussian.
    pub scaled: DMatrix<Complex<f64>>,
    pub s0: Complex<f64>,
    pub z: Complex<f64>,
}

/// First-order limits of the scaled panel in the ultrahigh regime: the
/// diagonal noise block `−(√(c_n/b_p) a_p + z + 1/s(z))/k_i`, vanishing cross
/// forms, and the mean block `−μ_iᵀμ_j/√(c_n b_p)`.
pub fn sesquilinear_limits(
    model: &PopulationModel,
    n: usize,
    p: usize,
    z: Complex<f64>,
) -> Result<DMatrix<Complex<f64>>> {
    if z.im == 0.0 && z.re.abs() <= 2.0 {
        return Err(Error::BranchAmbiguity { z: z.re, edge: 2.0 });
    }
    let tau = model.tau();
    let (a_p, b_p) = model.moments();
    let c_n = p as f64 / n as f64;
    let sqrt_cb = (c_n * b_p).sqrt();
    let s = semicircle_stieltjes(z);
    let mut limit = DMatrix::from_element(2 * tau, 2 * tau, Complex::new(0.0, 0.0));
    let base = Complex::new((c_n / b_p).sqrt() * a_p, 0.0) + z + 1.0 / s;
    for (i, &k) in model.fractions().iter().enumerate() {
        limit[(i, i)] = -base / k;
    }
    for i in 0..tau {
        for j in 0..tau {
            let v = -model.means()[i].dot(&model.means()[j]) / sqrt_cb;
            limit[(tau + i, tau + j)] = Complex::new(v, 0.0);
        }
    }
    Ok(limit)
}

/// Compute the sesquilinear panel at `z` from data with known population means.
///
/// This is a simulation diagnostic: the noise matrix is recovered as
/// `X − μ_{label}` column by column, and the group-centered covariance
/// resolvent is applied through its Gram factorization.
pub fn sesquilinear_panel(
    x: &DMatrix<f64>,
    labels: &[usize],
    model: &PopulationModel,
    z: Complex<f64>,
) -> Result<SesquilinearPanel> {
    let p = x.nrows();
    let n = x.ncols();
    if p != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {p} rows, model dimension is {}",
            model.dim()
        )));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n} columns",
            labels.len()
        )));
    }
    let tau = model.tau();
    if let Some(&bad) = labels.iter().find(|&&g| g >= tau) {
        return Err(Error::DimensionMismatch(format!(
            "label {bad} out of range for τ={tau}"
        )));
    }
    let (a_p, b_p) = model.moments();
    let c_n = p as f64 / n as f64;
    let sqrt_cb = (c_n * b_p).sqrt();
    let h = model.sigma0().spectrum()?;
    let regime = Regime::from_spectrum(&h, Aspect::Finite(c_n));
    if z.im == 0.0 {
        let edges = support_edge(&h, &regime)?;
        if z.re.abs() < edges.right_edge + REAL_Z_MARGIN {
            return Err(Error::PoleViolation {
                x: z.re,
                pole: edges.right_edge + REAL_Z_MARGIN,
            });
        }
    }

    // Noise matrix and group noise means.
    let mut noise = x.clone();
    for (j, &g) in labels.iter().enumerate() {
        let mut col = noise.column_mut(j);
        col -= &model.means()[g];
    }
    let resolvent = group_centered_cov_gram(&noise, labels)?;
    let sizes = resolvent.group_sizes().to_vec();
    let mut f = DMatrix::zeros(p, 2 * tau);
    for (j, &g) in labels.iter().enumerate() {
        for r in 0..p {
            f[(r, g)] += noise[(r, j)];
        }
    }
    for g in 0..tau {
        let inv = 1.0 / sizes[g] as f64;
        for r in 0..p {
            f[(r, g)] *= inv;
        }
    }
    for i in 0..tau {
        f.column_mut(tau + i).copy_from(&model.means()[i]);
    }

    let z_tilde = Complex::new(c_n * a_p, 0.0) + Complex::new(sqrt_cb, 0.0) * z;
    let raw = resolvent.quad_forms(z_tilde, &f)?;
    let forms = raw.map(|v| v * z_tilde / Complex::new(sqrt_cb, 0.0));

    // Proxy centering from the finite-sample Stieltjes solution.
    let s0 = stieltjes_solve(&h, &regime, z)?;
    let mut centering = DMatrix::from_element(2 * tau, 2 * tau, Complex::new(0.0, 0.0));
    let base = Complex::new((c_n / b_p).sqrt() * a_p, 0.0) + z + 1.0 / s0;
    for g in 0..tau {
        let k_ng = sizes[g] as f64 / n as f64;
        centering[(g, g)] = -base / k_ng;
    }
    for i in 0..tau {
        for j in i..tau {
            let v = shifted_sigma_quad(
                model.sigma0(),
                s0,
                sqrt_cb,
                &model.means()[i],
                &model.means()[j],
            )?;
            centering[(tau + i, tau + j)] = -v;
            centering[(tau + j, tau + i)] = -v;
        }
    }

    let limit = sesquilinear_limits(model, n, p, z)?;
    let sqrt_n = Complex::new((n as f64).sqrt(), 0.0);
    let scaled = (&forms - &centering).map(|v| v * sqrt_n);
    Ok(SesquilinearPanel {
        forms,
        centering,
        limit,
        scaled,
        s0,
        z,
    })
}

/// `μ_iᵀ (√(c_n b_p) I + s₀ Σ₀)⁻¹ μ_j` for the centering block.
fn shifted_sigma_quad(
    sigma0: &Sigma0,
    s0: Complex<f64>,
    sqrt_cb: f64,
    mu_i: &DVector<f64>,
    mu_j: &DVector<f64>,
) -> Result<Complex<f64>> {
    match sigma0 {
        Sigma0::Diagonal { diag } => {
            let mut acc = Complex::new(0.0, 0.0);
            for q in 0..diag.len() {
                let prod = mu_i[q] * mu_j[q];
                if prod != 0.0 {
                    acc += prod / (Complex::new(sqrt_cb, 0.0) + s0 * diag[q]);
                }
            }
            Ok(acc)
        }
        _ => Err(Error::Unsupported(
            "sesquilinear centering requires a diagonal population covariance".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Joint covariance of the scaled panel entries
// ---------------------------------------------------------------------------

/// Covariance structure of the limiting Gaussian panel at a real point `z`.
///
/// Entries are addressed by their position in the 2τ×2τ panel: index `< τ`
/// selects a noise-mean row/column, index `≥ τ` a population-mean one.
#[derive(Clone, Debug)]
pub struct LCovariance {
    pub tau: usize,
    pub s: f64,
    pub s_prime: f64,
    fractions: Vec<f64>,
    zeta: DMatrix<f64>,
    f3: Sym3,
    g4: Sym4,
    v3: f64,
    v4: f64,
}

/// Evaluate the panel covariance law for a model at real `z` outside the bulk.
///
/// In the ultrahigh regime the mean-block and cross entries degenerate and
/// only the noise block keeps variance `2/(1−s²)/k_i²` on its diagonal and
/// `1/(1−s²)/(k_i k_j)` between symmetric off-diagonal partners.
pub fn l_covariance(model: &PopulationModel, z: f64, aspect: Aspect) -> Result<LCovariance> {
    let tau = model.tau();
    let (s, s_prime, zeta, f3, g4) = match aspect {
        Aspect::Infinite => {
            if z.abs() <= 2.0 {
                return Err(Error::BranchAmbiguity { z, edge: 2.0 });
            }
            let s = semicircle_stieltjes(Complex::new(z, 0.0)).re;
            let s_prime = s * s / (1.0 - s * s);
            (
                s,
                s_prime,
                DMatrix::zeros(tau, tau),
                Sym3::zeros(tau),
                Sym4::zeros(tau),
            )
        }
        Aspect::Finite(_) => {
            let h = model.sigma0().spectrum()?;
            let regime = Regime::from_spectrum(&h, aspect);
            let s = stieltjes_solve(&h, &regime, Complex::new(z, 0.0))?.re;
            let s_prime = stieltjes_derivative(&h, &regime, Complex::new(z, 0.0))?.re;
            let scale = regime.pole_scale().expect("finite aspect");
            let alpha_star = -1.0 / s;
            let pd = projection_tables(model, scale, alpha_star)?;
            let k = model.fractions();
            let mut zeta = DMatrix::zeros(tau, tau);
            for i in 0..tau {
                for j in 0..tau {
                    zeta[(i, j)] = pd.theta[(i, j)] / (k[i] * k[j]).sqrt();
                }
            }
            let mut f3 = Sym3::zeros(tau);
            let mut g4 = Sym4::zeros(tau);
            for i in 0..tau {
                for j in 0..tau {
                    for l in 0..tau {
                        f3.set(i, j, l, pd.h.get(i, j, l) / (k[i] * k[j] * k[l]).sqrt());
                        for t in 0..tau {
                            g4.set(
                                i,
                                j,
                                l,
                                t,
                                pd.rho.get(i, j, l, t) / (k[i] * k[j] * k[l] * k[t]).sqrt(),
                            );
                        }
                    }
                }
            }
            (s, s_prime, zeta, f3, g4)
        }
    };
    Ok(LCovariance {
        tau,
        s,
        s_prime,
        fractions: model.fractions().to_vec(),
        zeta,
        f3,
        g4,
        v3: model.noise().skewness(),
        v4: model.noise().kurtosis(),
    })
}

impl LCovariance {
    /// Covariance between two panel entries `(i, j)` and `(l, t)`.
    pub fn cov(&self, e1: (usize, usize), e2: (usize, usize)) -> f64 {
        let tau = self.tau;
        let s2 = self.s * self.s;
        let s4 = s2 * s2;
        let noise_d = (self.s_prime - s2) / s4;
        let mu = |x: usize| x >= tau;
        let (a, b) = e1;
        let (c, d) = e2;
        match (mu(a) as u8 + mu(b) as u8, mu(c) as u8 + mu(d) as u8) {
            (0, 0) => {
                if a == b && c == d && a == c {
                    2.0 * noise_d / (self.fractions[a] * self.fractions[a])
                } else if a != b && ((a, b) == (c, d) || (a, b) == (d, c)) {
                    noise_d / (self.fractions[a] * self.fractions[b])
                } else {
                    0.0
                }
            }
            (2, 2) => {
                let (i, j) = (a - tau, b - tau);
                let (l, t) = (c - tau, d - tau);
                self.s_prime / s4
                    * (self.zeta[(j, l)] * self.zeta[(t, i)]
                        + self.zeta[(j, t)] * self.zeta[(l, i)])
                    + (self.v4 - 3.0) / s2 * self.g4.get(i, j, l, t)
            }
            (1, 1) => {
                let (i1, m1) = split_cross(e1, tau);
                let (i2, m2) = split_cross(e2, tau);
                if i1 == i2 {
                    self.s_prime / s4 * self.zeta[(m1, m2)] / self.fractions[i1]
                } else {
                    0.0
                }
            }
            (1, 2) => self.cross_mu(e1, e2),
            (2, 1) => self.cross_mu(e2, e1),
            _ => 0.0,
        }
    }

    fn cross_mu(&self, cross: (usize, usize), mumu: (usize, usize)) -> f64 {
        let tau = self.tau;
        let (_, m) = split_cross(cross, tau);
        let (l, t) = (mumu.0 - tau, mumu.1 - tau);
        -self.v3 / (self.s * self.s) * self.f3.get(m, l, t)
    }

    pub fn var(&self, e: (usize, usize)) -> f64 {
        self.cov(e, e)
    }
}

fn split_cross((a, b): (usize, usize), tau: usize) -> (usize, usize) {
    if a < tau {
        (a, b - tau)
    } else {
        (b, a - tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, NoiseLaw, PopulationModel};
    use crate::rng;
    use rand::Rng;

    fn random_matrix(p: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, &[99]);
        DMatrix::from_fn(p, n, |_, _| r.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn centering_projection_properties() {
        let phi2 = centering_projection(2);
        assert!((phi2[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((phi2[(0, 1)] + 0.5).abs() < 1e-15);
        for n in [2, 5, 17] {
            let phi = centering_projection(n);
            assert!(((&phi * &phi) - &phi).abs().max() < 1e-14);
            assert!((phi.trace() - (n as f64 - 1.0)).abs() < 1e-12);
            let ones = DVector::from_element(n, 1.0);
            assert!((&phi * ones).norm() < 1e-14);
            assert!(((&phi - phi.transpose()).abs().max()) < 1e-15);
        }
    }

    #[test]
    fn centered_gram_matches_explicit_projection() {
        let x = random_matrix(7, 5, 3);
        let phi = centering_projection(5);
        let naive = &phi * x.transpose() * &x * &phi;
        let fast = centered_gram(&x);
        assert!((&naive - &fast).abs().max() < 1e-10);
    }

    #[test]
    fn estimate_ab_zero_matrix_fails() {
        let x = DMatrix::zeros(10, 5);
        assert!(matches!(estimate_ab(&x), Err(Error::NonPositiveBhat(_))));
    }

    #[test]
    fn renormalized_gram_basics() {
        let x = DMatrix::zeros(6, 4);
        let a = renormalized_gram(&x, 0.0, 1.0).unwrap();
        assert!(a.abs().max() < 1e-15);

        let x = random_matrix(9, 6, 4);
        let a = renormalized_gram(&x, 0.7, 1.3).unwrap();
        let ones = DVector::from_element(6, 1.0);
        assert!((&a * ones).norm() < 1e-10);
        assert!((&a - a.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn eigenvalue_identity_against_dense_oracle() {
        // Nonzero spectra of the renormalized Gram and of the p×p sample
        // covariance are linked by an exact affine map.
        let (p, n) = (40, 10);
        let x = random_matrix(p, n, 8);
        let (a, b) = (0.9, 1.7);
        let a_mat = renormalized_gram(&x, a, b).unwrap();
        // Drop the structural zero: the affine map below pairs with the
        // nonzero spectrum of the sample covariance.
        let a_eigs = bulk_eigenvalues(&a_mat, 0);

        let phi = centering_projection(n);
        let s_dense = &x * &phi * x.transpose() / n as f64;
        let mut s_eigs: Vec<f64> = s_dense
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .collect();
        s_eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());

        let to_a = |ls: f64| {
            (n as f64 / (p as f64 * b)).sqrt() * ls - (p as f64 / (n as f64 * b)).sqrt() * a
        };
        // n−1 nonzero eigenvalues on each side.
        for i in 0..(n - 1) {
            let mapped = to_a(s_eigs[i]);
            assert!(
                (mapped - a_eigs[i]).abs() < 1e-8 * mapped.abs().max(1.0),
                "i={i}: {} vs {}",
                mapped,
                a_eigs[i]
            );
        }
    }

    #[test]
    fn summary_has_structural_zero() {
        let x = random_matrix(3, 5, 21);
        let s = spectral_summary(&x).unwrap();
        assert_eq!(s.eigenvalues.len(), 5);
        assert!(s.eigenvalues.iter().any(|l| l.abs() < 1e-8));
        let gap: Vec<f64> = s.eigenvalues.windows(2).map(|w| w[0] - w[1]).collect();
        assert!(gap.iter().all(|&g| g >= -1e-12));
    }

    #[test]
    fn deflate_removes_exactly_the_ones_direction() {
        let x = random_matrix(12, 8, 5);
        let a = renormalized_gram(&x, 0.5, 1.0).unwrap();
        let bulk = deflate_ones(&a);
        assert_eq!(bulk.nrows(), 7);
        let mut full: Vec<f64> = a.symmetric_eigen().eigenvalues.iter().cloned().collect();
        let mut reduced: Vec<f64> = bulk.symmetric_eigen().eigenvalues.iter().cloned().collect();
        full.sort_by(|x, y| x.partial_cmp(y).unwrap());
        reduced.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // The reduced spectrum interlaces the full one minus the zero at the
        // ones direction; removing the closest-to-zero entry must reproduce it.
        let zero_pos = full
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        full.remove(zero_pos);
        for (f, r) in full.iter().zip(&reduced) {
            assert!((f - r).abs() < 1e-9, "{f} vs {r}");
        }
    }

    #[test]
    fn group_resolvent_matches_dense_inverse() {
        let (p, n) = (30, 12);
        let noise = random_matrix(p, n, 17);
        let labels: Vec<usize> = (0..n).map(|j| if j < 5 { 0 } else { 1 }).collect();
        let res = group_centered_cov_gram(&noise, &labels).unwrap();

        // Dense B matrix.
        let mut centered = noise.clone();
        let mut m0 = DVector::zeros(p);
        let mut m1 = DVector::zeros(p);
        for (j, &g) in labels.iter().enumerate() {
            if g == 0 {
                m0 += noise.column(j);
            } else {
                m1 += noise.column(j);
            }
        }
        m0 /= 5.0;
        m1 /= 7.0;
        for (j, &g) in labels.iter().enumerate() {
            let mut col = centered.column_mut(j);
            col -= if g == 0 { &m0 } else { &m1 };
        }
        let b_dense = &centered * centered.transpose() / n as f64;

        for z in [Complex::new(9.0, 0.0), Complex::new(2.0, 1.5)] {
            let mut shifted = b_dense.map(|v| Complex::new(v, 0.0));
            for d in 0..p {
                shifted[(d, d)] -= z;
            }
            let lu = shifted.lu();

            let u = random_matrix(p, 1, 31).column(0).into_owned();
            let dense_sol = lu.solve(&u.map(|v| Complex::new(v, 0.0))).unwrap();
            let fast = res.apply(z, &u).unwrap();
            let diff = (&fast - &dense_sol).norm();
            assert!(diff < 1e-8, "z={z}: diff {diff}");

            // Quadratic forms against the dense solve, and resolvent symmetry.
            let f = random_matrix(p, 3, 57);
            let q = res.quad_forms(z, &f).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let dense_q = f.column(i).map(|v| Complex::new(v, 0.0)).dotc(
                        &lu.solve(&f.column(j).map(|v| Complex::new(v, 0.0)))
                            .unwrap(),
                    );
                    assert!((q[(i, j)] - dense_q).norm() < 1e-8, "entry ({i},{j})");
                }
            }
            assert!((&q - q.transpose()).map(|v| v.norm()).max() < 1e-10);
        }
    }

    #[test]
    fn single_group_resolvent_is_plain_centered_covariance() {
        let (p, n) = (10, 8);
        let noise = random_matrix(p, n, 23);
        let labels = vec![0usize; n];
        let res = group_centered_cov_gram(&noise, &labels).unwrap();
        let phi = centering_projection(n);
        let b_dense = &noise * &phi * noise.transpose() / n as f64;
        let z = Complex::new(7.5, 0.0);
        let mut shifted = b_dense.map(|v| Complex::new(v, 0.0));
        for d in 0..p {
            shifted[(d, d)] -= z;
        }
        let u = random_matrix(p, 1, 3).column(0).into_owned();
        let dense = shifted
            .lu()
            .solve(&u.map(|v| Complex::new(v, 0.0)))
            .unwrap();
        let fast = res.apply(z, &u).unwrap();
        assert!((&fast - &dense).norm() < 1e-9);
    }

    #[test]
    fn group_resolvent_rejects_tiny_groups() {
        let noise = random_matrix(5, 4, 1);
        let labels = vec![0, 0, 0, 1];
        assert!(matches!(
            group_centered_cov_gram(&noise, &labels),
            Err(Error::GroupTooSmall {
                group: 1,
                size: 1,
                ..
            })
        ));
    }

    #[test]
    fn limits_match_hand_computed_single_group_value() {
        // Σ₀ = I, τ = 1, c_n = 100, z = 3: the noise form limit is
        // −(√c_n + z + 1/s(z)) = −(10 + 3 − (3+√5)/2).
        let p = 500;
        let n = 5;
        let model =
            PopulationModel::homogeneous(p, Sigma0::identity(p), NoiseLaw::Gaussian).unwrap();
        let lim = sesquilinear_limits(&model, n, p, Complex::new(3.0, 0.0)).unwrap();
        let s = (-3.0 + 5.0_f64.sqrt()) / 2.0;
        let expected = -(10.0 + 3.0 + 1.0 / s);
        assert!((lim[(0, 0)].re - expected).abs() < 1e-12);
        assert!((lim[(0, 0)].re + 10.381_966_011_250_105).abs() < 1e-12);
        assert!(lim[(1, 1)].norm() < 1e-15);
    }

    #[test]
    fn limits_mean_block_scales_by_the_gram() {
        // Two groups: the mean block limit is −μᵢᵀμⱼ/√(c_n b_p), cross forms 0.
        let p = 400;
        let n = 16;
        let mut mu2 = DVector::zeros(p);
        mu2[0] = 3.0;
        mu2[1] = -4.0;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), mu2.clone()],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let lim = sesquilinear_limits(&model, n, p, Complex::new(4.0, 0.0)).unwrap();
        let sqrt_cb = (p as f64 / n as f64).sqrt();
        assert!((lim[(3, 3)].re + mu2.norm_squared() / sqrt_cb).abs() < 1e-12);
        assert!(lim[(2, 3)].norm() < 1e-15);
        // Cross block vanishes to first order.
        assert!(lim[(0, 2)].norm() < 1e-15);
        assert!(lim[(1, 3)].norm() < 1e-15);
    }

    #[test]
    fn panel_agrees_with_naive_construction_on_small_instance() {
        let p = 24;
        let n = 12;
        let mut mu2 = DVector::zeros(p);
        mu2[0] = 1.5;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), mu2],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let data = generate(&model, n, 7).unwrap();
        let z = Complex::new(6.0, 0.0);
        let panel = sesquilinear_panel(&data.x, &data.labels, &model, z).unwrap();

        // Naive: dense B, dense resolvent, explicit forms.
        let noise = crate::datagen::subtract_means(&data, &model);
        let mut sbar = vec![DVector::zeros(p); 2];
        let mut counts = [0usize; 2];
        for (j, &g) in data.labels.iter().enumerate() {
            sbar[g] += noise.column(j);
            counts[g] += 1;
        }
        for g in 0..2 {
            sbar[g] /= counts[g] as f64;
        }
        let mut centered = noise.clone();
        for (j, &g) in data.labels.iter().enumerate() {
            let mut col = centered.column_mut(j);
            col -= &sbar[g];
        }
        let b_dense = &centered * centered.transpose() / n as f64;
        let (a_p, b_p) = model.moments();
        let c_n = p as f64 / n as f64;
        let z_tilde = Complex::new(c_n * a_p + (c_n * b_p).sqrt() * z.re, 0.0);
        let mut shifted = b_dense.map(|v| Complex::new(v, 0.0));
        for d in 0..p {
            shifted[(d, d)] -= z_tilde;
        }
        let lu = shifted.lu();
        let cols: Vec<DVector<f64>> = vec![
            sbar[0].clone(),
            sbar[1].clone(),
            model.means()[0].clone(),
            model.means()[1].clone(),
        ];
        for i in 0..4 {
            for j in 0..4 {
                let sol = lu.solve(&cols[j].map(|v| Complex::new(v, 0.0))).unwrap();
                let form = cols[i].map(|v| Complex::new(v, 0.0)).dotc(&sol) * z_tilde
                    / Complex::new((c_n * b_p).sqrt(), 0.0);
                assert!(
                    (panel.forms[(i, j)] - form).norm() < 1e-8 * form.norm().max(1.0),
                    "entry ({i},{j}): {} vs {form}",
                    panel.forms[(i, j)]
                );
            }
        }
    }

    #[test]
    fn panel_rejects_interior_real_z() {
        let p = 30;
        let n = 10;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), DVector::from_element(p, 0.4)],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let data = generate(&model, n, 2).unwrap();
        let z = Complex::new(1.0, 0.0);
        assert!(matches!(
            sesquilinear_panel(&data.x, &data.labels, &model, z),
            Err(Error::PoleViolation { .. })
        ));
    }

    #[test]
    fn l_covariance_ultrahigh_patterns() {
        let p = 40;
        let model = PopulationModel::new(
            vec![DVector::zeros(p), DVector::from_element(p, 0.2)],
            Sigma0::identity(p),
            vec![0.5, 0.5],
            NoiseLaw::Gaussian,
        )
        .unwrap();
        let lc = l_covariance(&model, 3.0, Aspect::Infinite).unwrap();
        let s = (-3.0 + 5.0_f64.sqrt()) / 2.0;
        let d = 1.0 / (1.0 - s * s);
        // Var(L_11) with k = 1/2: 2·d/k² = 8d.
        assert!((lc.var((0, 0)) - 2.0 * d / 0.25).abs() < 1e-12);
        assert!((lc.cov((0, 1), (0, 1)) - d / 0.25).abs() < 1e-12);
        assert!((lc.cov((0, 1), (1, 0)) - d / 0.25).abs() < 1e-12);
        // Everything touching the mean block vanishes in this regime.
        assert_eq!(lc.var((2, 2)), 0.0);
        assert_eq!(lc.cov((0, 0), (2, 2)), 0.0);
        assert_eq!(lc.cov((0, 2), (0, 3)), 0.0);
        // Distinct diagonal noise entries are uncorrelated.
        assert_eq!(lc.cov((0, 0), (1, 1)), 0.0);
    }

    #[test]
    fn l_covariance_single_population_value() {
        let p = 16;
        let model =
            PopulationModel::homogeneous(p, Sigma0::identity(p), NoiseLaw::Gaussian).unwrap();
        let lc = l_covariance(&model, 3.0, Aspect::Infinite).unwrap();
        assert!((lc.var((0, 0)) - 2.341_640_786_499_874).abs() < 1e-12);
    }

    #[test]
    fn l_covariance_finite_c_approaches_ultrahigh() {
        // (s' − s²)/s⁴ = 1/(1 − s²) under the semicircle identity; a huge
        // finite aspect ratio must match the closed form numerically.
        let p = 64;
        let model =
            PopulationModel::homogeneous(p, Sigma0::identity(p), NoiseLaw::Gaussian).unwrap();
        let inf = l_covariance(&model, 3.0, Aspect::Infinite).unwrap();
        let fin = l_covariance(&model, 3.0, Aspect::Finite(1e8)).unwrap();
        assert!((inf.var((0, 0)) - fin.var((0, 0))).abs() < 1e-3);

        // And the pure algebra at z = 3.
        let s = (-3.0 + 5.0_f64.sqrt()) / 2.0;
        let s_prime = s * s / (1.0 - s * s);
        assert!(((s_prime - s * s) / s.powi(4) - 1.0 / (1.0 - s * s)).abs() < 1e-12);
    }
}
