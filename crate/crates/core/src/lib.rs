//! Spectral statistics for renormalized sample covariance matrices from
//! multi-population data.
//!
//! The crate centers on the n×n renormalized Gram matrix
//! `√(p/(n b)) [Φ XᵀX Φ / p − a Φ]` whose spectrum stays bounded for any
//! aspect ratio `p/n`, including `p ≫ n`. Around it sit:
//!
//! - [`spectrum`]: discrete population spectra, the spike map `phi`, support
//!   edges, and the Stieltjes transform of the limiting spectral distribution;
//! - [`datagen`]: population models and reproducible synthetic data;
//! - [`covariance`]: centering, Gram-side constructions, moment estimators,
//!   and resolvent diagnostics that never materialize p×p matrices;
//! - [`spikes`]: phase-transition classification, spike inversion, and the
//!   Gaussian fluctuation law of detached spikes;
//! - [`inference`]: subgroup-count estimation and clustering-quality scores;
//! - [`montecarlo`]: a deterministic, parallel replication engine.

// Validations use `!(x > 0.0)` on purpose: NaN must fail them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod datagen;
pub mod error;
pub mod inference;
pub mod montecarlo;
pub mod rng;
pub mod spectrum;
pub mod spikes;
pub mod stats;

pub use error::{Error, Result};
pub use spectrum::{Aspect, DiscreteSpectrum, Regime, SupportEdges};
