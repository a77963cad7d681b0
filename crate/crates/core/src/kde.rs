//! Exact kernel density estimation over a stored reference set.
//!
//! The density at `x` is the mean kernel value between `x` and every
//! reference row. Kernels are L1-normalized in the reference dimension, so a
//! density integrates to one (times the optional `scale` multiplier). Sums run
//! over references in ascending index order, so parallel and sequential batch
//! evaluation agree bit for bit.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Exponential,
    Tophat,
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Exponential => "exponential",
            KernelFamily::Tophat => "tophat",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "exponential" => Ok(KernelFamily::Exponential),
            "tophat" => Ok(KernelFamily::Tophat),
            other => Err(Error::InvalidConfig(format!("unknown kernel `{other}`"))),
        }
    }
}

/// A kernel family with its bandwidth.
///
/// `scale` multiplies every kernel value. It is 1 for normalized kernels and
/// exists so callers can check that decisions do not depend on the overall
/// density scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    pub bandwidth: f64,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Kernel {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Kernel {
            family,
            bandwidth,
            scale: 1.0,
        })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Kernel::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn with_scale(self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kernel scale must be positive, got {scale}"
            )));
        }
        Ok(Kernel { scale, ..self })
    }

    /// Constant making the kernel integrate to `scale` over R^dim.
    pub fn normalizer(&self, dim: usize) -> f64 {
        let d = dim as f64;
        let h = self.bandwidth;
        let log_c = match self.family {
            KernelFamily::Gaussian => -0.5 * d * (2.0 * PI * h * h).ln(),
            // 1 / (surface(S^{d-1}) * h^d * Gamma(d))
            KernelFamily::Exponential => {
                ln_gamma_half(dim)
                    - (2.0f64).ln()
                    - 0.5 * d * PI.ln()
                    - d * h.ln()
                    - ln_gamma_half(2 * dim)
            }
            // 1 / volume of the radius-h ball
            KernelFamily::Tophat => ln_gamma_half(dim + 2) - 0.5 * d * PI.ln() - d * h.ln(),
        };
        self.scale * log_c.exp()
    }

    /// Unnormalized kernel shape as a function of the squared distance.
    #[inline]
    fn profile(&self, sq_dist: f64) -> f64 {
        let h = self.bandwidth;
        match self.family {
            KernelFamily::Gaussian => (-sq_dist / (2.0 * h * h)).exp(),
            KernelFamily::Exponential => (-sq_dist.sqrt() / h).exp(),
            KernelFamily::Tophat => {
                if sq_dist.sqrt() <= h {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// ln Gamma(k / 2) for a positive integer `k`.
fn ln_gamma_half(k: usize) -> f64 {
    assert!(k > 0, "Gamma is undefined at 0");
    // Gamma(1) = 1, Gamma(1/2) = sqrt(pi), Gamma(x + 1) = x Gamma(x)
    let (mut x, mut acc) = if k % 2 == 0 {
        (1.0, 0.0)
    } else {
        (0.5, 0.5 * PI.ln())
    };
    let target = k as f64 / 2.0;
    while x < target {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

#[inline]
fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel value between two points of equal dimension.
pub fn kernel_eval(kernel: &Kernel, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(kernel.normalizer(a.len()) * kernel.profile(sq_dist(a, b)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    kernel: Kernel,
    refs: Array2<f64>,
    norm: f64,
}

impl KdeModel {
    /// Stores `refs` verbatim. An empty reference set is allowed and has
    /// density zero everywhere.
    pub fn fit(kernel: Kernel, refs: Array2<f64>) -> Self {
        let norm = kernel.normalizer(refs.ncols());
        KdeModel { kernel, refs, norm }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn refs(&self) -> ArrayView2<'_, f64> {
        self.refs.view()
    }

    pub fn len(&self) -> usize {
        self.refs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.refs.ncols()
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }

    /// Sum of unnormalized kernel profiles, in reference order.
    fn profile_sum(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.refs
            .rows()
            .into_iter()
            .map(|r| self.kernel.profile(sq_dist(x, r)))
            .sum()
    }

    pub fn eval(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_dim(x.len())?;
        if self.is_empty() {
            return Ok(0.0);
        }
        Ok(self.norm * self.profile_sum(x) / self.len() as f64)
    }

    /// Density at `x` with reference `skip` removed. Zero if nothing remains.
    pub fn eval_excluding(&self, x: ArrayView1<'_, f64>, skip: usize) -> Result<f64> {
        self.check_dim(x.len())?;
        if self.len() <= 1 {
            return Ok(0.0);
        }
        let sum: f64 = self
            .refs
            .rows()
            .into_iter()
            .enumerate()
            .filter(|&(i, _)| i != skip)
            .map(|(_, r)| self.kernel.profile(sq_dist(x, r)))
            .sum();
        Ok(self.norm * sum / (self.len() - 1) as f64)
    }

    /// Densities for every row of `x`, evaluated in parallel.
    pub fn eval_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_dim(x.ncols())?;
        let rows: Vec<_> = x.rows().into_iter().collect();
        Ok(rows
            .into_par_iter()
            .map(|row| self.eval(row).expect("dimension checked"))
            .collect())
    }

    pub fn eval_batch_sequential(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_dim(x.ncols())?;
        x.rows().into_iter().map(|row| self.eval(row)).collect()
    }
}
