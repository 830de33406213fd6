//! JSON schema for population models.
//!
//! The on-disk form is compact: covariance as a named shape, means as sparse
//! or constant specs, and an optional scale rule tying mean magnitudes to the
//! sample shape. `build` expands it to a dense in-memory model.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use spikelab::datagen::{NoiseLaw, PopulationModel, Sigma0};

pub const SCHEMA: &str = "spikelab/v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub schema: Option<String>,
    pub p: usize,
    pub fractions: Vec<f64>,
    pub sigma0: Sigma0Spec,
    pub means: Vec<MeanSpec>,
    #[serde(default)]
    pub mean_scale: MeanScale,
    pub noise: NoiseLaw,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Sigma0Spec {
    Identity,
    /// First half ones, second half `value`.
    TwoLevel {
        value: f64,
    },
    Diagonal {
        entries: Vec<f64>,
    },
    DiagonalBlocks {
        blocks: Vec<Block>,
    },
    /// Constant-band tridiagonal square root of the covariance.
    TridiagonalRoot {
        diag: f64,
        off: f64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Block {
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanSpec {
    Zero,
    Constant { value: f64 },
    Sparse { entries: Vec<(usize, f64)> },
    Dense { values: Vec<f64> },
}

/// How mean magnitudes scale with the sample shape.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanScale {
    #[default]
    Unit,
    /// Multiply by `(c_n b_p)^{1/4}`; requires the sample size.
    CnbpQuarter,
    /// Multiply by `c_n^{1/4}`; requires the sample size.
    CnQuarter,
    Fixed {
        value: f64,
    },
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self, String> {
        let spec: ModelSpec =
            serde_json::from_str(text).map_err(|e| format!("model schema error: {e}"))?;
        if let Some(s) = &spec.schema {
            if s != SCHEMA {
                return Err(format!(
                    "model schema error: expected \"{SCHEMA}\", got \"{s}\""
                ));
            }
        }
        Ok(spec)
    }

    fn sigma0(&self) -> Result<Sigma0, String> {
        let p = self.p;
        Ok(match &self.sigma0 {
            Sigma0Spec::Identity => Sigma0::identity(p),
            Sigma0Spec::TwoLevel { value } => Sigma0::two_level(p, *value),
            Sigma0Spec::Diagonal { entries } => {
                if entries.len() != p {
                    return Err(format!(
                        "model schema error: diagonal has {} entries for p = {p}",
                        entries.len()
                    ));
                }
                Sigma0::Diagonal {
                    diag: entries.clone(),
                }
            }
            Sigma0Spec::DiagonalBlocks { blocks } => {
                let mut diag = Vec::with_capacity(p);
                for b in blocks {
                    diag.extend(std::iter::repeat_n(b.value, b.count));
                }
                if diag.len() != p {
                    return Err(format!(
                        "model schema error: blocks cover {} coordinates for p = {p}",
                        diag.len()
                    ));
                }
                Sigma0::Diagonal { diag }
            }
            Sigma0Spec::TridiagonalRoot { diag, off } => Sigma0::TridiagonalRoot {
                diag: vec![*diag; p],
                off: vec![*off; p - 1],
            },
        })
    }

    /// Expand to a dense model. The sample size is needed whenever the mean
    /// scale depends on `c_n`.
    pub fn build(&self, n: Option<usize>) -> Result<PopulationModel, String> {
        let sigma0 = self.sigma0()?;
        let scale = match &self.mean_scale {
            MeanScale::Unit => 1.0,
            MeanScale::Fixed { value } => *value,
            MeanScale::CnbpQuarter => {
                let n = n.ok_or("model schema error: mean scale needs a sample size")?;
                let (_, b_p) = sigma0.moments();
                ((self.p as f64 / n as f64) * b_p).powf(0.25)
            }
            MeanScale::CnQuarter => {
                let n = n.ok_or("model schema error: mean scale needs a sample size")?;
                (self.p as f64 / n as f64).powf(0.25)
            }
        };
        let means: Vec<DVector<f64>> = self
            .means
            .iter()
            .map(|m| -> Result<DVector<f64>, String> {
                Ok(match m {
                    MeanSpec::Zero => DVector::zeros(self.p),
                    MeanSpec::Constant { value } => DVector::from_element(self.p, scale * value),
                    MeanSpec::Sparse { entries } => {
                        let mut v = DVector::zeros(self.p);
                        for &(idx, val) in entries {
                            if idx >= self.p {
                                return Err(format!(
                                    "model schema error: sparse index {idx} out of range"
                                ));
                            }
                            v[idx] = scale * val;
                        }
                        v
                    }
                    MeanSpec::Dense { values } => {
                        if values.len() != self.p {
                            return Err(format!(
                                "model schema error: dense mean has {} entries for p = {}",
                                values.len(),
                                self.p
                            ));
                        }
                        DVector::from_iterator(self.p, values.iter().map(|v| scale * v))
                    }
                })
            })
            .collect::<Result<_, _>>()?;
        PopulationModel::new(means, sigma0, self.fractions.clone(), self.noise)
            .map_err(|e| format!("model schema error: {e}"))
    }
}
