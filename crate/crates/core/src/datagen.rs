//! Population models and reproducible synthetic data.
//!
//! Observations follow `x = μ_i + Σ₀^{1/2} z` with i.i.d. standardized noise
//! coordinates. The population covariance is described by its diagonal or by
//! an explicit symmetric root, and the noise law is one of four standardized
//! families with known third and fourth moments.
//!
//! Generation is keyed by `(seed, group, column)` counter streams, so the
//! same inputs reproduce the same matrix byte for byte regardless of thread
//! count or replicate order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::spectrum::DiscreteSpectrum;

/// Largest dimension at which dense fallbacks (eigensolves of Σ₀ roots) run.
const DENSE_SIGMA_LIMIT: usize = 4096;

// ---------------------------------------------------------------------------
// Noise laws
// ---------------------------------------------------------------------------

/// Standardized noise families: mean 0, variance 1, finite fourth moment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseLaw {
    Gaussian,
    Rademacher,
    /// `Exp(1) − 1`.
    ExpCentered,
    /// `(Bernoulli(t) − t)/√(t(1−t))`.
    BernoulliT {
        t: f64,
    },
}

impl NoiseLaw {
    /// Third moment `E z³`.
    pub fn skewness(&self) -> f64 {
        match *self {
            NoiseLaw::Gaussian => 0.0,
            NoiseLaw::Rademacher => 0.0,
            NoiseLaw::ExpCentered => 2.0,
            NoiseLaw::BernoulliT { t } => (1.0 - 2.0 * t) / (t * (1.0 - t)).sqrt(),
        }
    }

    /// Fourth moment `E z⁴`.
    pub fn kurtosis(&self) -> f64 {
        match *self {
            NoiseLaw::Gaussian => 3.0,
            NoiseLaw::Rademacher => 1.0,
            NoiseLaw::ExpCentered => 9.0,
            NoiseLaw::BernoulliT { t } => 1.0 / (t * (1.0 - t)) - 3.0,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            NoiseLaw::Gaussian => StandardNormal.sample(rng),
            NoiseLaw::Rademacher => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            NoiseLaw::ExpCentered => {
                let e: f64 = Exp1.sample(rng);
                e - 1.0
            }
            NoiseLaw::BernoulliT { t } => {
                let sigma = (t * (1.0 - t)).sqrt();
                if rng.gen::<f64>() < t {
                    (1.0 - t) / sigma
                } else {
                    -t / sigma
                }
            }
        }
    }

    pub fn fill(&self, rng: &mut impl Rng, out: &mut [f64]) {
        match *self {
            NoiseLaw::Gaussian => {
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
            }
            NoiseLaw::Rademacher => {
                for v in out.iter_mut() {
                    *v = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                }
            }
            NoiseLaw::ExpCentered => {
                for v in out.iter_mut() {
                    let e: f64 = Exp1.sample(rng);
                    *v = e - 1.0;
                }
            }
            NoiseLaw::BernoulliT { t } => {
                let sigma = (t * (1.0 - t)).sqrt();
                let hi = (1.0 - t) / sigma;
                let lo = -t / sigma;
                for v in out.iter_mut() {
                    *v = if rng.gen::<f64>() < t { hi } else { lo };
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Population covariance
// ---------------------------------------------------------------------------

/// The population covariance Σ₀, as a diagonal or through a symmetric root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Sigma0 {
    /// Σ₀ = diag(d), all entries positive.
    Diagonal { diag: Vec<f64> },
    /// Σ₀ = T² for a symmetric tridiagonal root T.
    TridiagonalRoot { diag: Vec<f64>, off: Vec<f64> },
    /// Σ₀ = R² for an explicit symmetric root R (small dimensions only).
    DenseRoot { root: DMatrix<f64> },
}

impl Sigma0 {
    pub fn identity(p: usize) -> Self {
        Sigma0::Diagonal { diag: vec![1.0; p] }
    }

    /// First half ones, second half `v`; the two-level diagonal used in examples.
    pub fn two_level(p: usize, v: f64) -> Self {
        let mut d = vec![1.0; p];
        for x in d.iter_mut().skip(p / 2) {
            *x = v;
        }
        Sigma0::Diagonal { diag: d }
    }

    pub fn dim(&self) -> usize {
        match self {
            Sigma0::Diagonal { diag } => diag.len(),
            Sigma0::TridiagonalRoot { diag, .. } => diag.len(),
            Sigma0::DenseRoot { root } => root.nrows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Sigma0::Diagonal { diag } => {
                if diag.is_empty() {
                    return Err(Error::EmptyInput);
                }
                for &d in diag {
                    if !(d > 0.0) || !d.is_finite() {
                        return Err(Error::NonPositiveEigenvalue(d));
                    }
                }
            }
            Sigma0::TridiagonalRoot { diag, off } => {
                if diag.is_empty() {
                    return Err(Error::EmptyInput);
                }
                if off.len() + 1 != diag.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "tridiagonal root needs {} off-diagonal entries, got {}",
                        diag.len() - 1,
                        off.len()
                    )));
                }
            }
            Sigma0::DenseRoot { root } => {
                if root.nrows() == 0 || root.nrows() != root.ncols() {
                    return Err(Error::DimensionMismatch("dense root must be square".into()));
                }
                let sym = (root - root.transpose()).abs().max();
                if sym > 1e-10 * root.abs().max().max(1.0) {
                    return Err(Error::DimensionMismatch(
                        "dense root must be symmetric".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(tr Σ₀ / p, tr Σ₀² / p)`, exactly and in O(p) for banded forms.
    pub fn moments(&self) -> (f64, f64) {
        match self {
            Sigma0::Diagonal { diag } => {
                let p = diag.len() as f64;
                let a = diag.iter().sum::<f64>() / p;
                let b = diag.iter().map(|d| d * d).sum::<f64>() / p;
                (a, b)
            }
            Sigma0::TridiagonalRoot { diag, off } => {
                let p = diag.len();
                // tr(T²) = Σ diag² + 2 Σ off²
                let tr2 = diag.iter().map(|d| d * d).sum::<f64>()
                    + 2.0 * off.iter().map(|o| o * o).sum::<f64>();
                // T² is pentadiagonal; tr(T⁴) is its squared Frobenius norm.
                let mut tr4 = 0.0;
                for i in 0..p {
                    let left = if i > 0 { off[i - 1] * off[i - 1] } else { 0.0 };
                    let right = if i + 1 < p { off[i] * off[i] } else { 0.0 };
                    let m = left + diag[i] * diag[i] + right;
                    tr4 += m * m;
                    if i + 1 < p {
                        let u = off[i] * (diag[i] + diag[i + 1]);
                        tr4 += 2.0 * u * u;
                    }
                    if i + 2 < p {
                        let v = off[i] * off[i + 1];
                        tr4 += 2.0 * v * v;
                    }
                }
                (tr2 / p as f64, tr4 / p as f64)
            }
            Sigma0::DenseRoot { root } => {
                let p = root.nrows() as f64;
                let sq = root * root;
                let a = sq.trace() / p;
                let b = sq.iter().map(|v| v * v).sum::<f64>() / p;
                (a, b)
            }
        }
    }

    /// Empirical spectral distribution of Σ₀.
    ///
    /// Diagonal forms are exact at any dimension. Constant-band tridiagonal
    /// roots use the Toeplitz closed form; other root forms fall back to a
    /// dense eigensolve and are rejected above [`DENSE_SIGMA_LIMIT`].
    pub fn spectrum(&self) -> Result<DiscreteSpectrum> {
        match self {
            Sigma0::Diagonal { diag } => DiscreteSpectrum::from_eigenvalues(diag),
            Sigma0::TridiagonalRoot { diag, off } => {
                if let Some((d, o)) = self.constant_bands() {
                    let p = diag.len();
                    let eigs: Vec<f64> = (1..=p)
                        .map(|k| {
                            let root_eig = d + 2.0
                                * o
                                * (std::f64::consts::PI * k as f64 / (p as f64 + 1.0)).cos();
                            root_eig * root_eig
                        })
                        .collect();
                    return DiscreteSpectrum::from_eigenvalues(&eigs);
                }
                let _ = off;
                let p = diag.len();
                if p > DENSE_SIGMA_LIMIT {
                    return Err(Error::Unsupported(format!(
                        "eigendecomposition of a non-Toeplitz tridiagonal root at p={p}"
                    )));
                }
                let t = self.dense_root();
                let eigs: Vec<f64> = t
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .map(|l| l * l)
                    .collect();
                DiscreteSpectrum::from_eigenvalues(&eigs)
            }
            Sigma0::DenseRoot { root } => {
                if root.nrows() > DENSE_SIGMA_LIMIT {
                    return Err(Error::Unsupported(format!(
                        "eigendecomposition of a dense root at p={}",
                        root.nrows()
                    )));
                }
                let eigs: Vec<f64> = root
                    .clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .map(|l| l * l)
                    .collect();
                DiscreteSpectrum::from_eigenvalues(&eigs)
            }
        }
    }

    /// Largest eigenvalue of Σ₀.
    pub fn top_eigenvalue(&self) -> Result<f64> {
        match self {
            Sigma0::Diagonal { diag } => Ok(diag.iter().cloned().fold(0.0, f64::max)),
            _ => {
                if let Some((d, o)) = self.constant_bands() {
                    let p = self.dim() as f64;
                    let c1 = (std::f64::consts::PI / (p + 1.0)).cos();
                    let cand1 = d + 2.0 * o * c1;
                    let cand2 = d - 2.0 * o * c1;
                    return Ok((cand1 * cand1).max(cand2 * cand2));
                }
                let h = self.spectrum()?;
                Ok(h.max_point())
            }
        }
    }

    fn constant_bands(&self) -> Option<(f64, f64)> {
        if let Sigma0::TridiagonalRoot { diag, off } = self {
            let d = diag[0];
            let o = off.first().copied().unwrap_or(0.0);
            if diag.iter().all(|&x| (x - d).abs() < 1e-12)
                && off.iter().all(|&x| (x - o).abs() < 1e-12)
            {
                return Some((d, o));
            }
        }
        None
    }

    fn dense_root(&self) -> DMatrix<f64> {
        match self {
            Sigma0::Diagonal { diag } => DMatrix::from_diagonal(&DVector::from_iterator(
                diag.len(),
                diag.iter().map(|d| d.sqrt()),
            )),
            Sigma0::TridiagonalRoot { diag, off } => {
                let p = diag.len();
                let mut t = DMatrix::zeros(p, p);
                for i in 0..p {
                    t[(i, i)] = diag[i];
                    if i + 1 < p {
                        t[(i, i + 1)] = off[i];
                        t[(i + 1, i)] = off[i];
                    }
                }
                t
            }
            Sigma0::DenseRoot { root } => root.clone(),
        }
    }

    /// `out = Σ₀^{1/2} z`, in place over a column.
    fn apply_root(&self, z: &[f64], out: &mut [f64]) {
        match self {
            Sigma0::Diagonal { diag } => {
                for i in 0..z.len() {
                    out[i] = diag[i].sqrt() * z[i];
                }
            }
            Sigma0::TridiagonalRoot { diag, off } => {
                let p = z.len();
                for i in 0..p {
                    let mut v = diag[i] * z[i];
                    if i > 0 {
                        v += off[i - 1] * z[i - 1];
                    }
                    if i + 1 < p {
                        v += off[i] * z[i + 1];
                    }
                    out[i] = v;
                }
            }
            Sigma0::DenseRoot { root } => {
                let zv = DVector::from_column_slice(z);
                let s = root * zv;
                out.copy_from_slice(s.as_slice());
            }
        }
    }

    /// `Σ₀ v` as a dense vector.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Sigma0::Diagonal { diag } => {
                DVector::from_iterator(diag.len(), diag.iter().zip(v.iter()).map(|(d, x)| d * x))
            }
            Sigma0::TridiagonalRoot { .. } => {
                let mut tmp = vec![0.0; v.len()];
                let mut out = vec![0.0; v.len()];
                self.apply_root(v.as_slice(), &mut tmp);
                self.apply_root(&tmp, &mut out);
                DVector::from_vec(out)
            }
            Sigma0::DenseRoot { root } => root * (root * v),
        }
    }
}

// ---------------------------------------------------------------------------
// Population model
// ---------------------------------------------------------------------------

/// A full generative description of the multi-population model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    means: Vec<DVector<f64>>,
    sigma0: Sigma0,
    fractions: Vec<f64>,
    noise: NoiseLaw,
}

impl PopulationModel {
    pub fn new(
        means: Vec<DVector<f64>>,
        sigma0: Sigma0,
        fractions: Vec<f64>,
        noise: NoiseLaw,
    ) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::EmptyInput);
        }
        sigma0.validate()?;
        let p = sigma0.dim();
        for (i, m) in means.iter().enumerate() {
            if m.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "mean {i} has length {}, covariance dimension is {p}",
                    m.len()
                )));
            }
        }
        if fractions.len() != means.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} fractions for {} groups",
                fractions.len(),
                means.len()
            )));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpectrum(format!(
                "group fractions sum to {total}"
            )));
        }
        for &k in &fractions {
            if !(k > 0.0) || k > 1.0 {
                return Err(Error::InvalidSpectrum(format!(
                    "group fraction {k} outside (0, 1]"
                )));
            }
        }
        let fractions = fractions.iter().map(|k| k / total).collect();
        Ok(PopulationModel {
            means,
            sigma0,
            fractions,
            noise,
        })
    }

    /// Single population with zero mean.
    pub fn homogeneous(p: usize, sigma0: Sigma0, noise: NoiseLaw) -> Result<Self> {
        PopulationModel::new(vec![DVector::zeros(p)], sigma0, vec![1.0], noise)
    }

    pub fn tau(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.sigma0.dim()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn sigma0(&self) -> &Sigma0 {
        &self.sigma0
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn noise(&self) -> NoiseLaw {
        self.noise
    }

    /// Population moments `(a_p, b_p)` of Σ₀.
    pub fn moments(&self) -> (f64, f64) {
        self.sigma0.moments()
    }
}

/// Group sizes by largest-remainder apportionment of `n·k_i`.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|k| k * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = quotas[i] - quotas[i].floor();
        let fj = quotas[j] - quotas[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for idx in 0..n.saturating_sub(assigned) {
        sizes[order[idx % order.len()]] += 1;
    }
    sizes
}

/// A generated sample: columns grouped contiguously by population.
#[derive(Clone, Debug)]
pub struct DataMatrix {
    /// p×n observation matrix.
    pub x: DMatrix<f64>,
    /// Zero-based group index per column.
    pub labels: Vec<usize>,
    pub n_per_group: Vec<usize>,
}

/// Draw `n` observations from the model. Identical `(model, n, seed)` inputs
/// reproduce the matrix exactly; each `(group, column)` pair owns its own
/// random stream, so generation order never matters.
pub fn generate(model: &PopulationModel, n: usize, seed: u64) -> Result<DataMatrix> {
    let p = model.dim();
    let sizes = apportion(n, model.fractions());
    for (g, &sz) in sizes.iter().enumerate() {
        if sz < 2 {
            return Err(Error::GroupTooSmall {
                group: g,
                size: sz,
                min: 2,
            });
        }
    }
    let mut x = DMatrix::zeros(p, n);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; p];
    let mut col = 0usize;
    for (g, &sz) in sizes.iter().enumerate() {
        let mu = &model.means[g];
        for j in 0..sz {
            let mut stream = rng::stream(seed, &[g as u64, j as u64]);
            model.noise.fill(&mut stream, &mut z);
            let mut target = x.column_mut(col);
            model.sigma0.apply_root(&z, target.as_mut_slice());
            for (v, m) in target.iter_mut().zip(mu.iter()) {
                *v += m;
            }
            labels.push(g);
            col += 1;
        }
    }
    Ok(DataMatrix {
        x,
        labels,
        n_per_group: sizes,
    })
}

/// Noise-only matrix `S = X − means`: subtract each column's population mean.
pub fn subtract_means(data: &DataMatrix, model: &PopulationModel) -> DMatrix<f64> {
    let mut s = data.x.clone();
    for (j, &g) in data.labels.iter().enumerate() {
        let mut col = s.column_mut(j);
        col -= &model.means[g];
    }
    s
}

// ---------------------------------------------------------------------------
// Spikes of the population-level matrices
// ---------------------------------------------------------------------------

/// `N = I − √k √kᵀ` for a fraction vector, a rank τ−1 projection.
pub fn fraction_projection(fractions: &[f64]) -> DMatrix<f64> {
    let tau = fractions.len();
    let sqrt_k = DVector::from_iterator(tau, fractions.iter().map(|k| k.sqrt()));
    DMatrix::identity(tau, tau) - &sqrt_k * sqrt_k.transpose()
}

/// Eigenvalues (descending, exactly τ−1 of them, zeros included) of the
/// between-group matrix `Σ_μ = Σ_{i<j} k_i k_j (μ_i−μ_j)(μ_i−μ_j)ᵀ`.
///
/// Works on the τ×τ projected Gram `N UᵀU N` with `U = (√k_i μ_i)`, so the
/// cost is O(p τ²) regardless of dimension.
pub fn sigma_mu_spikes(model: &PopulationModel) -> Result<Vec<f64>> {
    let tau = model.tau();
    if tau < 2 {
        return Err(Error::SingleGroup);
    }
    let gram = scaled_mean_gram(model, 1.0);
    let n_mat = fraction_projection(model.fractions());
    let projected = &n_mat * gram * &n_mat;
    let mut eigs: Vec<f64> = projected
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs.truncate(tau - 1);
    Ok(eigs.into_iter().map(|l| l.max(0.0)).collect())
}

/// `UᵀU / scale` with `U = (√k_i μ_i)`.
pub(crate) fn scaled_mean_gram(model: &PopulationModel, scale: f64) -> DMatrix<f64> {
    let tau = model.tau();
    let k = model.fractions();
    let mut gram = DMatrix::zeros(tau, tau);
    for i in 0..tau {
        for j in i..tau {
            let v = (k[i] * k[j]).sqrt() * model.means[i].dot(&model.means[j]) / scale;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram
}

/// Top τ−1 eigenvalues of `(Σ₀ + Σ_μ)/√(c_n b_p)` at sample size `n` and
/// dimension `p`, descending.
///
/// The perturbation Σ_μ lives on the span of the mean differences; a Krylov
/// subspace grown from that span under Σ₀ captures the coupled directions, and
/// anything unreachable is bounded by the top of Σ₀ alone, which competes as a
/// bulk candidate.
pub fn sigma_x_spikes(model: &PopulationModel, n: usize, p: usize) -> Result<Vec<f64>> {
    let tau = model.tau();
    if tau < 2 {
        return Err(Error::SingleGroup);
    }
    if p != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "model dimension {} but p = {p}",
            model.dim()
        )));
    }
    if n == 0 {
        return Err(Error::DimensionMismatch("n must be positive".into()));
    }
    let (_, b_p) = model.moments();
    let c_n = p as f64 / n as f64;
    let scale = (c_n * b_p).sqrt();

    // Orthonormal Krylov basis of span{μ_i − μ_1} expanded under Σ₀.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let norm_scale: f64 = model
        .means
        .iter()
        .map(|m| m.norm())
        .fold(0.0, f64::max)
        .max(1.0);
    let push = |basis: &mut Vec<DVector<f64>>, mut v: DVector<f64>| -> bool {
        for b in basis.iter() {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        for b in basis.iter() {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        if v.norm() > 1e-10 * norm_scale {
            let nrm = v.norm();
            basis.push(v / nrm);
            true
        } else {
            false
        }
    };
    for i in 1..tau {
        push(&mut basis, &model.means[i] - &model.means[0]);
    }
    let cap = 64.max(8 * tau).min(512);
    let mut frontier = basis.clone();
    while !frontier.is_empty() && basis.len() < cap {
        let mut next = Vec::new();
        for v in &frontier {
            let w = model.sigma0.apply(v);
            if push(&mut basis, w) {
                next.push(basis.last().unwrap().clone());
            }
            if basis.len() >= cap {
                break;
            }
        }
        frontier = next;
    }

    let mut candidates: Vec<f64> = Vec::new();
    if !basis.is_empty() {
        let m = basis.len();
        // Bᵀ (Σ₀ + Σ_μ) B, with Σ_μ applied through U N.
        let u_cols: Vec<DVector<f64>> = model
            .means
            .iter()
            .zip(model.fractions())
            .map(|(mu, &k)| mu * k.sqrt())
            .collect();
        let n_mat = fraction_projection(model.fractions());
        // Coordinates of each basis vector against U.
        let mut ub = DMatrix::zeros(tau, m);
        for (t, u) in u_cols.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                ub[(t, j)] = u.dot(b);
            }
        }
        let mu_part = ub.transpose() * &n_mat * &ub;
        let mut restricted = mu_part;
        for j in 0..m {
            let w = model.sigma0.apply(&basis[j]);
            for i in 0..m {
                restricted[(i, j)] += basis[i].dot(&w);
            }
        }
        restricted = (&restricted + restricted.transpose()) * 0.5;
        let eigs = restricted.symmetric_eigen().eigenvalues;
        candidates.extend(eigs.iter().cloned());
    }
    // Directions outside the reachable span see Σ₀ alone.
    let bulk = model.sigma0.top_eigenvalue()?;
    candidates.extend(std::iter::repeat_n(bulk, tau - 1));
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    candidates.truncate(tau - 1);
    Ok(candidates.into_iter().map(|l| l / scale).collect())
}
