use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Linear,
    Polynomial,
    Gaussian,
}

/// Gaussian bandwidth σ²: fixed, or the mean squared distance of the pairs
/// the active estimator visits, recomputed from the current sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Polynomial bias `c`.
    pub c: f64,
    /// Polynomial power `d`.
    pub d: u32,
    pub sigma2: Bandwidth,
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            family: KernelFamily::Linear,
            c: 0.0,
            d: 1,
            sigma2: Bandwidth::Auto,
        }
    }

    pub fn polynomial(c: f64, d: u32) -> Self {
        Self {
            family: KernelFamily::Polynomial,
            c,
            d,
            sigma2: Bandwidth::Auto,
        }
    }

    pub fn gaussian(sigma2: Bandwidth) -> Self {
        Self {
            family: KernelFamily::Gaussian,
            c: 0.0,
            d: 1,
            sigma2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            KernelFamily::Linear => Ok(()),
            KernelFamily::Polynomial => {
                if self.d < 1 {
                    Err(Error::InvalidArgument("polynomial kernel needs power d >= 1".into()))
                } else if !(self.c >= 0.0 && self.c.is_finite()) {
                    Err(Error::InvalidArgument(format!(
                        "polynomial bias c must be >= 0, got {}",
                        self.c
                    )))
                } else {
                    Ok(())
                }
            }
            KernelFamily::Gaussian => match self.sigma2 {
                Bandwidth::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                    Err(Error::InvalidArgument(format!("gaussian sigma2 must be > 0, got {s}")))
                }
                _ => Ok(()),
            },
        }
    }

    /// Same kernel with the bandwidth pinned to `sigma2`.
    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = Bandwidth::Fixed(sigma2);
        self
    }

    /// Kernel value as a function of the dot product (dot-product kernels only).
    pub(crate) fn dot_profile(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Linear => u,
            KernelFamily::Polynomial => (u + self.c).powi(self.d as i32),
            KernelFamily::Gaussian => unreachable!("gaussian is not a dot-product kernel"),
        }
    }

    /// Derivative of [`Self::dot_profile`].
    pub(crate) fn dot_profile_deriv(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Linear => 1.0,
            KernelFamily::Polynomial => self.d as f64 * (u + self.c).powi(self.d as i32 - 1),
            KernelFamily::Gaussian => unreachable!("gaussian is not a dot-product kernel"),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            KernelFamily::Linear => write!(f, "linear"),
            KernelFamily::Polynomial => write!(f, "poly(c={}, d={})", self.c, self.d),
            KernelFamily::Gaussian => match self.sigma2 {
                Bandwidth::Auto => write!(f, "gaussian(auto)"),
                Bandwidth::Fixed(s) => write!(f, "gaussian(sigma2={s})"),
            },
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluates `k(s, t)`. A Gaussian kernel must carry a fixed bandwidth.
pub fn kernel_eval(k: &KernelSpec, s: &[f64], t: &[f64]) -> Result<f64> {
    if s.len() != t.len() {
        return Err(shape_err(
            "kernel_eval",
            format!("vectors of dimension {} and {}", s.len(), t.len()),
        ));
    }
    k.validate()?;
    Ok(match k.family {
        KernelFamily::Linear | KernelFamily::Polynomial => k.dot_profile(dot(s, t)),
        KernelFamily::Gaussian => {
            let Bandwidth::Fixed(sigma2) = k.sigma2 else {
                return Err(Error::InvalidArgument(
                    "gaussian kernel needs a resolved bandwidth; estimate it from the sample sets first".into(),
                ));
            };
            (-sq_dist(s, t) / (2.0 * sigma2)).exp()
        }
    })
}
