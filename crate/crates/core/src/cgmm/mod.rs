//! Continuum GMM machinery: per-observation moment functions, the kernel
//! matrix of their Gaussian-measure inner products, and the Tikhonov
//! regularized efficient objective.
//!
//! Two backends share the spectral layer. The closed-form backend expands
//! every moment function into complex exponential atoms and integrates
//! exactly; the grid backend integrates on a tensor Gauss–Hermite rule and
//! works in the dual (feature) space, which is far cheaper and is the only
//! option for the log form.

pub mod atoms;
pub mod grid;
pub mod kernel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use atoms::{build_atoms, gaussian_inner, AtomSet, MomentAtoms, Subsample};
pub use grid::{GridEngine, GridKernel};
pub use kernel::{build_kernel, efficient_objective, ClosedForm, MomentKernel};

/// Level moment φ̂(s) − Πⱼ φ̂(sPⱼ) or its logarithmic counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentForm {
    Level,
    Log,
}

impl std::str::FromStr for MomentForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "level" | "cf" => Ok(MomentForm::Level),
            "log" | "log-cf" => Ok(MomentForm::Log),
            other => Err(Error::Config(format!("unknown moment form '{other}' (level|log)"))),
        }
    }
}

/// Relative cutoff below which eigenvalues are dropped from spectral sums.
pub const EIGEN_CUTOFF: f64 = 1e-12;
/// Moment functions are O(1), so a largest eigenvalue below this is round-off.
pub const EIGEN_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed,
    Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationPolicy {
    pub mode: AlphaMode,
    pub c: f64,
    pub exponent: f64,
}

/// Rate-mode constant: α = c·λmax·T^exponent.
pub const DEFAULT_ALPHA_SCALE: f64 = 0.005;
pub const DEFAULT_ALPHA_EXPONENT: f64 = -0.25;

impl Default for RegularizationPolicy {
    fn default() -> Self {
        Self { mode: AlphaMode::Rate, c: DEFAULT_ALPHA_SCALE, exponent: DEFAULT_ALPHA_EXPONENT }
    }
}

impl RegularizationPolicy {
    pub fn fixed(alpha: f64) -> Self {
        Self { mode: AlphaMode::Fixed, c: alpha, exponent: -0.25 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::Config(format!("regularization constant must be positive, got {}", self.c)));
        }
        // α → 0 needs a negative exponent, α³T → ∞ needs it above −1/3.
        if self.mode == AlphaMode::Rate && !(self.exponent > -1.0 / 3.0 && self.exponent < 0.0) {
            return Err(Error::Config(format!(
                "rate exponent {} outside (-1/3, 0): violates alpha -> 0 with alpha^3 T -> inf",
                self.exponent
            )));
        }
        Ok(())
    }
}

/// Anything carrying the eigenvalues of M/T.
pub trait Spectral {
    /// Kept eigenvalues, descending.
    fn eigenvalues(&self) -> &[f64];
    fn sample_size(&self) -> usize;
}

pub fn make_alpha<K: Spectral>(policy: &RegularizationPolicy, kernel: &K) -> Result<f64> {
    policy.validate()?;
    let lmax = kernel.eigenvalues().first().copied().unwrap_or(0.0);
    if !(lmax > EIGEN_FLOOR) {
        return Err(Error::DegenerateKernel(format!("no positive eigenvalue (largest {lmax:.3e})")));
    }
    Ok(match policy.mode {
        AlphaMode::Fixed => policy.c,
        AlphaMode::Rate => policy.c * lmax * (kernel.sample_size() as f64).powf(policy.exponent),
    })
}

/// Σₜ λₜ/(λₜ² + α) |pₜ|² given squared projections.
pub fn regularized_sum(eigenvalues: &[f64], proj_sq: &[f64], alpha: f64) -> f64 {
    eigenvalues
        .iter()
        .zip(proj_sq)
        .map(|(&l, &p)| if l > 0.0 { l / (l * l + alpha) * p } else { 0.0 })
        .sum()
}

/// Drops eigenvalues below the relative cutoff; clips tiny negatives.
pub(crate) fn kept_count(sorted_desc: &[f64]) -> usize {
    let lmax = sorted_desc.first().copied().unwrap_or(0.0);
    if !(lmax > 0.0) {
        return 0;
    }
    sorted_desc.iter().take_while(|&&l| l > EIGEN_CUTOFF * lmax).count()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub kept: usize,
    pub lambda_max: f64,
    pub lambda_min_kept: f64,
    pub trace: f64,
    /// Σ λ²/(λ² + α).
    pub effective_rank: f64,
}

pub fn summarize(eigenvalues: &[f64], alpha: f64) -> SpectrumSummary {
    SpectrumSummary {
        kept: eigenvalues.len(),
        lambda_max: eigenvalues.first().copied().unwrap_or(0.0),
        lambda_min_kept: eigenvalues.last().copied().unwrap_or(0.0),
        trace: eigenvalues.iter().sum(),
        effective_rank: eigenvalues.iter().map(|l| l * l / (l * l + alpha)).sum(),
    }
}
