//! Discrete population spectra and the maps built on them.
//!
//! A population covariance enters the asymptotic theory only through the
//! empirical distribution `H` of its eigenvalues and the moments
//! `a = ∫ t dH`, `b = ∫ t² dH`. This module represents `H` as weighted point
//! masses and provides:
//!
//! - the spike map `phi(x) = x + (1/b) Σ w t² / (x − t/√(cb))` and its
//!   derivative, which send a population spike strength to its limiting
//!   sample location;
//! - the support edges: the largest critical point of `phi` and the right
//!   edge `phi(critical_point)` of the limiting spectral distribution;
//! - the Stieltjes transform of the limiting spectral distribution, as the
//!   damped fixed point of `z = −1/s − (s/b) Σ w t² / (1 + s t/√(cb))`;
//! - density recovery on a grid via `Im s(x + iε)/π`.
//!
//! The aspect ratio `c = p/n` may be infinite. That regime is handled by
//! dedicated closed forms (`phi(x) = x + 1/x`, the standard semicircle law),
//! not by plugging in a large number.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when merging duplicate mass points.
const MERGE_TOL: f64 = 1e-12;

/// Absolute residual demanded from every Stieltjes solve.
const STIELTJES_TOL: f64 = 1e-10;

/// Damped fixed-point parameters for the Stieltjes solve.
const FIXED_POINT_DAMPING: f64 = 0.5;
const FIXED_POINT_MAX_ITER: usize = 10_000;

// ---------------------------------------------------------------------------
// Aspect ratio and regime parameters
// ---------------------------------------------------------------------------

/// Limiting aspect ratio `p/n`, finite or infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aspect {
    Finite(f64),
    Infinite,
}

impl Aspect {
    pub fn is_infinite(self) -> bool {
        matches!(self, Aspect::Infinite)
    }

    /// The finite value, if any.
    pub fn finite(self) -> Option<f64> {
        match self {
            Aspect::Finite(c) => Some(c),
            Aspect::Infinite => None,
        }
    }
}

impl Serialize for Aspect {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Aspect::Finite(c) => s.serialize_f64(*c),
            Aspect::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Aspect {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => {
                let c = n.as_f64().ok_or_else(|| D::Error::custom("bad aspect"))?;
                Ok(Aspect::Finite(c))
            }
            serde_json::Value::String(s) if s == "inf" || s == "infinity" => Ok(Aspect::Infinite),
            other => Err(D::Error::custom(format!("bad aspect value {other}"))),
        }
    }
}

/// Regime parameters: the aspect ratio and the first two moments of `H`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub c: Aspect,
    /// First moment `∫ t dH` (per-coordinate trace of the population covariance).
    pub a: f64,
    /// Second moment `∫ t² dH`; strictly positive.
    pub b: f64,
}

impl Regime {
    pub fn new(c: Aspect, a: f64, b: f64) -> Result<Self> {
        if let Aspect::Finite(v) = c {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpectrum(format!(
                    "aspect ratio must be positive, got {v}"
                )));
            }
        }
        if !(b > 0.0) {
            return Err(Error::InvalidSpectrum(format!(
                "second moment must be positive, got {b}"
            )));
        }
        if b + 1e-12 * b.max(1.0) < a * a {
            return Err(Error::InvalidSpectrum(format!(
                "moments violate b >= a^2: a={a}, b={b}"
            )));
        }
        Ok(Regime { c, a, b })
    }

    /// Moments taken from a discrete spectrum.
    pub fn from_spectrum(h: &DiscreteSpectrum, c: Aspect) -> Self {
        Regime {
            c,
            a: h.first_moment(),
            b: h.second_moment(),
        }
    }

    /// The `p/n → ∞` regime of an identity-like population (`a = b = 1`).
    pub fn ultrahigh() -> Self {
        Regime {
            c: Aspect::Infinite,
            a: 1.0,
            b: 1.0,
        }
    }

    /// `√(c·b)`, the scale dividing population eigenvalues in the maps;
    /// `None` when `c = ∞`.
    pub fn pole_scale(&self) -> Option<f64> {
        self.c.finite().map(|c| (c * self.b).sqrt())
    }
}

// ---------------------------------------------------------------------------
// DiscreteSpectrum
// ---------------------------------------------------------------------------

/// A population spectral distribution as weighted point masses.
///
/// Points are kept sorted ascending, weights sum to one, and duplicate mass
/// points are merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSpectrum {
    points: Vec<(f64, f64)>,
}

impl DiscreteSpectrum {
    /// Point mass at `t = 1`.
    pub fn unit() -> Self {
        DiscreteSpectrum {
            points: vec![(1.0, 1.0)],
        }
    }

    /// Uniform weights on a list of population eigenvalues; duplicates merge
    /// by exact counting.
    pub fn from_eigenvalues(eigs: &[f64]) -> Result<Self> {
        if eigs.is_empty() {
            return Err(Error::EmptyInput);
        }
        for &t in eigs {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::NonPositiveEigenvalue(t));
            }
        }
        let mut sorted = eigs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let total = sorted.len() as f64;
        let mut groups: Vec<(f64, usize)> = Vec::new();
        for t in sorted {
            match groups.last_mut() {
                Some(last) if (t - last.0).abs() <= MERGE_TOL * t.max(1.0) => last.1 += 1,
                _ => groups.push((t, 1)),
            }
        }
        Ok(DiscreteSpectrum {
            points: groups
                .into_iter()
                .map(|(t, c)| (t, c as f64 / total))
                .collect(),
        })
    }

    /// Build from explicit `(t, w)` masses. Weights must be nonnegative and
    /// sum to one within 1e-6; they are rescaled to sum to one exactly.
    pub fn from_points(points: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for (t, w) in points {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::NonPositiveEigenvalue(t));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidSpectrum(format!(
                    "negative weight {w} at t={t}"
                )));
            }
            pts.push((t, w));
        }
        if pts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let total: f64 = pts.iter().map(|&(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidSpectrum(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
        for (t, w) in pts {
            match merged.last_mut() {
                Some(last) if (t - last.0).abs() <= MERGE_TOL * t.max(1.0) => last.1 += w,
                _ => merged.push((t, w)),
            }
        }
        merged.retain(|&(_, w)| w > 0.0);
        if merged.is_empty() {
            return Err(Error::InvalidSpectrum("all weights are zero".into()));
        }
        for (_, w) in merged.iter_mut() {
            *w /= total;
        }
        Ok(DiscreteSpectrum { points: merged })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `∫ t dH`.
    pub fn first_moment(&self) -> f64 {
        self.points.iter().map(|&(t, w)| w * t).sum()
    }

    /// `∫ t² dH`.
    pub fn second_moment(&self) -> f64 {
        self.points.iter().map(|&(t, w)| w * t * t).sum()
    }

    /// Largest mass point.
    pub fn max_point(&self) -> f64 {
        self.points.last().map(|&(t, _)| t).unwrap_or(0.0)
    }
}

// ---------------------------------------------------------------------------
// The spike map phi and its derivative
// ---------------------------------------------------------------------------

fn check_pole(h: &DiscreteSpectrum, r: &Regime, x: f64) -> Result<Option<f64>> {
    match r.pole_scale() {
        None => {
            if x == 0.0 {
                return Err(Error::PoleViolation { x, pole: 0.0 });
            }
            Ok(None)
        }
        Some(scale) => {
            let pole = h.max_point() / scale;
            if x <= pole {
                return Err(Error::PoleViolation { x, pole });
            }
            Ok(Some(scale))
        }
    }
}

/// The map sending a population spike strength to its limiting sample location.
///
/// `phi(x) = x + (1/b) Σ w t² / (x − t/√(cb))`; reduces to `x + 1/x` when `c = ∞`.
pub fn phi(h: &DiscreteSpectrum, r: &Regime, x: f64) -> Result<f64> {
    match check_pole(h, r, x)? {
        None => Ok(x + 1.0 / x),
        Some(scale) => {
            let sum: f64 = h
                .points()
                .iter()
                .map(|&(t, w)| w * t * t / (x - t / scale))
                .sum();
            Ok(x + sum / r.b)
        }
    }
}

/// Derivative of [`phi`] in `x`: `1 − (1/b) Σ w t² / (x − t/√(cb))²`.
pub fn phi_prime(h: &DiscreteSpectrum, r: &Regime, x: f64) -> Result<f64> {
    match check_pole(h, r, x)? {
        None => Ok(1.0 - 1.0 / (x * x)),
        Some(scale) => {
            let sum: f64 = h
                .points()
                .iter()
                .map(|&(t, w)| {
                    let d = x - t / scale;
                    w * t * t / (d * d)
                })
                .sum();
            Ok(1.0 - sum / r.b)
        }
    }
}

// ---------------------------------------------------------------------------
// Support edges
// ---------------------------------------------------------------------------

/// The phase-transition threshold and the right edge of the limiting spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportEdges {
    /// Largest critical point of `phi`; spikes above it detach from the bulk.
    pub critical_point: f64,
    /// Right edge of the limiting spectral distribution, `phi(critical_point)`.
    pub right_edge: f64,
}

/// Locate the largest root of `phi'` right of the poles and the bulk edge it maps to.
///
/// In the `c = ∞` regime this is exactly `(1, 2)`. For finite `c`, `phi'` is
/// strictly increasing right of the largest pole, from `−∞` up to 1, so the
/// root is bracketed and bisected to absolute tolerance 1e-10 or better.
pub fn support_edge(h: &DiscreteSpectrum, r: &Regime) -> Result<SupportEdges> {
    let scale = match r.pole_scale() {
        None => {
            return Ok(SupportEdges {
                critical_point: 1.0,
                right_edge: 2.0,
            })
        }
        Some(s) => s,
    };
    let pole = h.max_point() / scale;
    // Walk toward the pole until phi' is negative there.
    let mut lo = pole;
    let mut eps = pole.max(1e-8) * 1e-3;
    let mut found_lo = false;
    for _ in 0..60 {
        let cand = pole + eps;
        match phi_prime(h, r, cand) {
            Ok(d) if d < 0.0 => {
                lo = cand;
                found_lo = true;
                break;
            }
            _ => eps *= 0.25,
        }
    }
    if !found_lo {
        return Err(Error::NoRootFound);
    }
    // Geometric expansion to the right until phi' turns positive.
    let mut hi = (pole + 1.0).max(2.0 * lo);
    let mut found_hi = false;
    for _ in 0..200 {
        if phi_prime(h, r, hi)? > 0.0 {
            found_hi = true;
            break;
        }
        hi *= 2.0;
    }
    if !found_hi {
        return Err(Error::NoRootFound);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi_prime(h, r, mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.abs().max(1.0) {
            break;
        }
    }
    let a = 0.5 * (lo + hi);
    Ok(SupportEdges {
        critical_point: a,
        right_edge: phi(h, r, a)?,
    })
}

/// Inverse of [`phi`] on the distant-spike branch: the unique `x > critical_point`
/// with `phi(x) = lambda`. Errors with [`Error::BelowEdge`] for `lambda <= right_edge`.
pub fn phi_inverse(h: &DiscreteSpectrum, r: &Regime, lambda: f64) -> Result<f64> {
    let edges = support_edge(h, r)?;
    if r.c.is_infinite() {
        if lambda < 2.0 {
            return Err(Error::BelowEdge { lambda, edge: 2.0 });
        }
        return Ok(0.5 * (lambda + (lambda * lambda - 4.0).sqrt()));
    }
    if lambda <= edges.right_edge {
        if lambda == edges.right_edge {
            return Ok(edges.critical_point);
        }
        return Err(Error::BelowEdge {
            lambda,
            edge: edges.right_edge,
        });
    }
    // phi is strictly increasing on (critical_point, ∞): bracket and bisect.
    let mut lo = edges.critical_point;
    let mut hi = lambda.max(lo + 1.0);
    for _ in 0..200 {
        if phi(h, r, hi)? > lambda {
            break;
        }
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(h, r, mid)? < lambda {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Semicircle closed forms
// ---------------------------------------------------------------------------

/// Density of the standard semicircle law, `(1/2π)√(4 − x²)` on `|x| ≤ 2`.
pub fn semicircle_density(x: f64) -> f64 {
    if x.abs() >= 2.0 {
        0.0
    } else {
        (4.0 - x * x).sqrt() / (2.0 * std::f64::consts::PI)
    }
}

/// Cumulative distribution of the standard semicircle law.
pub fn semicircle_cdf(x: f64) -> f64 {
    if x <= -2.0 {
        0.0
    } else if x >= 2.0 {
        1.0
    } else {
        0.5 + x * (4.0 - x * x).sqrt() / (4.0 * std::f64::consts::PI)
            + (x / 2.0).asin() / std::f64::consts::PI
    }
}

/// Stieltjes transform of the semicircle law with the branch `s(z) → 0` as `|z| → ∞`.
pub fn semicircle_stieltjes(z: Complex<f64>) -> Complex<f64> {
    let w = (z * z - 4.0).sqrt();
    let r1 = (-z + w) / 2.0;
    let r2 = (-z - w) / 2.0;
    // The two roots multiply to 1; take the one inside the unit disc.
    if r1.norm() <= r2.norm() {
        r1
    } else {
        r2
    }
}

// ---------------------------------------------------------------------------
// Stieltjes fixed point
// ---------------------------------------------------------------------------

fn stieltjes_residual(
    h: &DiscreteSpectrum,
    r: &Regime,
    scale: f64,
    z: Complex<f64>,
    s: Complex<f64>,
) -> Complex<f64> {
    let mut k = Complex::new(0.0, 0.0);
    for &(t, w) in h.points() {
        k += w * t * t / (1.0 + s * (t / scale));
    }
    -1.0 / s - s * k / r.b - z
}

/// Solve `z = −1/s − (s/b) Σ w t²/(1 + s t/√(cb))` for the Stieltjes transform
/// of the limiting spectral distribution.
///
/// Accepts complex `z` off the real axis, or real `z` outside the open interval
/// `(−right_edge, right_edge)`. Every returned value satisfies the defining
/// equation with absolute residual below 1e-10; the `c = ∞` case uses the
/// semicircle closed form.
pub fn stieltjes_solve(h: &DiscreteSpectrum, r: &Regime, z: Complex<f64>) -> Result<Complex<f64>> {
    if r.c.is_infinite() {
        if z.im == 0.0 && z.re.abs() < 2.0 {
            return Err(Error::BranchAmbiguity { z: z.re, edge: 2.0 });
        }
        let mut s = semicircle_stieltjes(z);
        if z.im > 0.0 && s.im < 0.0 {
            s = s.conj();
        }
        return Ok(s);
    }
    let scale = r.pole_scale().expect("finite aspect ratio");

    if z.im == 0.0 {
        let edges = support_edge(h, r)?;
        let x = z.re;
        if x.abs() < edges.right_edge {
            return Err(Error::BranchAmbiguity {
                z: x,
                edge: edges.right_edge,
            });
        }
        if x >= edges.right_edge {
            // Right of the bulk the transform equals −1/phi⁻¹(x); certified below.
            let alpha = phi_inverse(h, r, x)?;
            let s = Complex::new(-1.0 / alpha, 0.0);
            let res = stieltjes_residual(h, r, scale, z, s).norm();
            if res > STIELTJES_TOL {
                return Err(Error::NonConvergence {
                    iterations: 0,
                    residual: res,
                });
            }
            return Ok(s);
        }
    }

    // Damped fixed point s ← (1−γ)s + γ g(s), started from the semicircle form.
    let g = |s: Complex<f64>| -> Complex<f64> {
        let mut k = Complex::new(0.0, 0.0);
        for &(t, w) in h.points() {
            k += w * t * t / (1.0 + s * (t / scale));
        }
        -1.0 / (z + s * k / r.b)
    };
    let mut s = semicircle_stieltjes(z);
    if z.im > 0.0 && s.im < 0.0 {
        s = s.conj();
    }
    if !s.is_finite() || s.norm() < 1e-12 {
        s = Complex::new(0.0, 1e-3);
    }
    let mut residual = f64::INFINITY;
    for it in 0..FIXED_POINT_MAX_ITER {
        residual = stieltjes_residual(h, r, scale, z, s).norm();
        if residual < STIELTJES_TOL {
            return Ok(s);
        }
        // Newton polish once the fixed point has found the basin.
        if residual < 1e-4 {
            if let Some(refined) = newton_polish(h, r, scale, z, s) {
                let res2 = stieltjes_residual(h, r, scale, z, refined).norm();
                if res2 < STIELTJES_TOL {
                    return Ok(refined);
                }
                if res2 < residual {
                    s = refined;
                    continue;
                }
            }
        }
        let next = g(s);
        if !next.is_finite() {
            return Err(Error::NonConvergence {
                iterations: it,
                residual,
            });
        }
        s = s * (1.0 - FIXED_POINT_DAMPING) + next * FIXED_POINT_DAMPING;
        if z.im > 0.0 && s.im < 0.0 {
            s.im = 1e-16;
        }
    }
    Err(Error::NonConvergence {
        iterations: FIXED_POINT_MAX_ITER,
        residual,
    })
}

fn newton_polish(
    h: &DiscreteSpectrum,
    r: &Regime,
    scale: f64,
    z: Complex<f64>,
    mut s: Complex<f64>,
) -> Option<Complex<f64>> {
    for _ in 0..50 {
        let f = stieltjes_residual(h, r, scale, z, s);
        if f.norm() < STIELTJES_TOL * 0.1 {
            return Some(s);
        }
        let mut k = Complex::new(0.0, 0.0);
        let mut kp = Complex::new(0.0, 0.0);
        for &(t, w) in h.points() {
            let d = 1.0 + s * (t / scale);
            k += w * t * t / d;
            kp += -w * t * t * (t / scale) / (d * d);
        }
        let df = 1.0 / (s * s) - (k + s * kp) / r.b;
        if df.norm() < 1e-30 {
            return None;
        }
        let step = f / df;
        s -= step;
        if !s.is_finite() {
            return None;
        }
        if step.norm() < 1e-16 * s.norm().max(1.0) {
            return Some(s);
        }
    }
    Some(s)
}

/// Derivative `s'(z)` of the Stieltjes transform, from the implicit equation.
pub fn stieltjes_derivative(
    h: &DiscreteSpectrum,
    r: &Regime,
    z: Complex<f64>,
) -> Result<Complex<f64>> {
    let s = stieltjes_solve(h, r, z)?;
    if r.c.is_infinite() {
        // From s² + zs + 1 = 0.
        return Ok(s * s / (1.0 - s * s));
    }
    let scale = r.pole_scale().expect("finite aspect ratio");
    let mut k = Complex::new(0.0, 0.0);
    let mut kp = Complex::new(0.0, 0.0);
    for &(t, w) in h.points() {
        let d = 1.0 + s * (t / scale);
        k += w * t * t / d;
        kp += -w * t * t * (t / scale) / (d * d);
    }
    let dz_ds = 1.0 / (s * s) - (k + s * kp) / r.b;
    Ok(1.0 / dz_ds)
}

// ---------------------------------------------------------------------------
// Density recovery
// ---------------------------------------------------------------------------

/// Evaluate the density of the limiting spectral distribution on a grid by
/// inverting the Stieltjes transform at height `eps` above the real axis.
///
/// Grid points where the solve fails are reported as `None` rather than filled in.
pub fn lsd_density(h: &DiscreteSpectrum, r: &Regime, grid: &[f64], eps: f64) -> Vec<Option<f64>> {
    assert!(eps > 0.0, "eps must be positive");
    grid.iter()
        .map(|&x| {
            stieltjes_solve(h, r, Complex::new(x, eps))
                .ok()
                .map(|s| (s.im / std::f64::consts::PI).max(0.0))
        })
        .collect()
}
