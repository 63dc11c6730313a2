//! Asymptotic variance, delta method, specification test and bootstrap.

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cgmm::{ClosedForm, GridEngine, GridKernel, MomentForm, MomentKernel};
use crate::ecf::{blocks_from_complex, cov_kernel_level, projected_points, SensorPanel};
use crate::error::{Error, Result};
use crate::estimator::{estimate_warm, EstimateResult, EstimatorConfig};
use crate::param::{
    align_matrix, mixing_jacobian, projector_jacobian, AngleVector, JacobianMode, MixingSpec, ProjectorJacobian,
};
use crate::quadrature::TensorGrid;
use crate::rng::{derive_seed, stream, TAG_BOOTSTRAP};

/// ∂q_T(s, θ)/∂θ' for the level form.
///
/// This is the exact derivative of the sample moment:
/// −Σⱼ Π_{m≠j} φ̂(sPₘ) · (1/T) Σₜ e^{isPⱼηₜ} · i (ηₜ' ⊗ s) ∂vec(Pⱼ)/∂θ'.
pub fn dq_dtheta(panel: &SensorPanel, spec: &MixingSpec, s: &[f64]) -> Result<Vec<Complex64>> {
    let mode = if spec.n() == 2 { JacobianMode::Analytic } else { JacobianMode::Numeric };
    let jac = projector_jacobian(spec, mode)?;
    dq_dtheta_with(panel, spec, &jac, s, MomentForm::Level, 0.0)
}

/// Derivative for either form with a precomputed projector Jacobian. The
/// log form divides by φ̂(sPⱼ) and fails when that modulus is below `trim`.
pub fn dq_dtheta_with(
    panel: &SensorPanel,
    spec: &MixingSpec,
    jac: &ProjectorJacobian,
    s: &[f64],
    form: MomentForm,
    trim: f64,
) -> Result<Vec<Complex64>> {
    let n = spec.n();
    let dim = spec.theta.dim();
    let t = panel.t();
    let sv = DVector::from_column_slice(s);
    let pts = projected_points(spec, s);
    let mut phi = vec![Complex64::new(0.0, 0.0); n];
    let mut dphi = vec![vec![Complex64::new(0.0, 0.0); dim]; n];
    for j in 0..n {
        let u = DVector::from_column_slice(&pts[j + 1]);
        let y = panel.data() * &u;
        // a_k = dPᵀ s so that s dP η = a_k'η.
        let a: Vec<DVector<f64>> = (0..dim)
            .map(|k| {
                let dp = DMatrix::from_column_slice(n, n, jac.d_vec_p[j].column(k).as_slice());
                dp.transpose() * &sv
            })
            .collect();
        let proj: Vec<DVector<f64>> = a.iter().map(|ak| panel.data() * ak).collect();
        for tt in 0..t {
            let (sn, cs) = y[tt].sin_cos();
            let e = Complex64::new(cs, sn);
            phi[j] += e;
            for k in 0..dim {
                dphi[j][k] += e * Complex64::new(0.0, proj[k][tt]);
            }
        }
        phi[j] /= t as f64;
        dphi[j].iter_mut().for_each(|v| *v /= t as f64);
    }
    let mut g = vec![Complex64::new(0.0, 0.0); dim];
    match form {
        MomentForm::Level => {
            for j in 0..n {
                let loo: Complex64 = (0..n).filter(|&m| m != j).map(|m| phi[m]).product();
                for k in 0..dim {
                    g[k] -= loo * dphi[j][k];
                }
            }
        }
        MomentForm::Log => {
            for j in 0..n {
                let m = phi[j].norm();
                if m < trim || m == 0.0 {
                    return Err(Error::Trimmed { modulus: m, trim });
                }
                for k in 0..dim {
                    g[k] -= dphi[j][k] / phi[j];
                }
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Spectral,
    Sandwich,
    Bootstrap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub b_matrix: DMatrix<f64>,
    pub v_matrix: DMatrix<f64>,
    /// B V B', the variance of √T(θ̂ − θ₀).
    pub asymptotic: DMatrix<f64>,
    /// Finite-sample covariance of θ̂, asymptotic / T.
    pub vcov: DMatrix<f64>,
    pub se: Vec<f64>,
    pub method: VarianceMethod,
    pub warnings: Vec<String>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn report(b: DMatrix<f64>, v: DMatrix<f64>, t: usize, method: VarianceMethod, warnings: Vec<String>) -> VarianceReport {
    let asymptotic = symmetrize(&(&b * &v * b.transpose()));
    let vcov = &asymptotic / t as f64;
    let se = (0..vcov.nrows()).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
    VarianceReport { b_matrix: symmetrize(&b), v_matrix: symmetrize(&v), asymptotic, vcov, se, method, warnings }
}

/// Inverts a symmetric bracket, naming the null direction when singular.
fn invert_bracket(bracket: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(bracket));
    let (imin, lmin) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(lmax > 0.0) || lmin <= 1e-12 * lmax {
        return Err(Error::RankDeficient { direction: eig.eigenvectors.column(imin).iter().copied().collect() });
    }
    let inv_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(&eig.eigenvectors * inv_l * eig.eigenvectors.transpose())
}

/// Spectral bracket Σₜ λₜ/(λₜ² + α) Re(⟨gₖ, χₜ⟩ conj⟨gₗ, χₜ⟩) from the
/// projections p[(t, k)] = ⟨gₖ, χₜ⟩.
pub fn spectral_bracket(eigenvalues: &[f64], proj: &DMatrix<Complex64>, alpha: f64) -> DMatrix<f64> {
    let dim = proj.ncols();
    let mut b = DMatrix::zeros(dim, dim);
    for (t, &l) in eigenvalues.iter().enumerate() {
        let w = l / (l * l + alpha);
        for k in 0..dim {
            for m in 0..dim {
                b[(k, m)] += w * (proj[(t, k)] * proj[(t, m)].conj()).re;
            }
        }
    }
    b
}

/// Efficient variance [Σ λ/(λ²+α) ⟨g,χ⟩⟨χ,g⟩]⁻¹ / T.
pub fn efficient_variance_from(eigenvalues: &[f64], proj: &DMatrix<Complex64>, alpha: f64, t: usize) -> Result<VarianceReport> {
    let bracket = spectral_bracket(eigenvalues, proj, alpha);
    let b = invert_bracket(&bracket)?;
    Ok(report(b, bracket, t, VarianceMethod::Spectral, Vec::new()))
}

/// Grid backend: ⟨gₖ, χₜ⟩ = uₜ'z(gₖ).
pub fn efficient_variance_grid(engine: &GridEngine, kernel: &GridKernel, spec: &MixingSpec, alpha: f64) -> Result<VarianceReport> {
    let g = engine.derivative_features(spec, kernel)?;
    let p = kernel.eigenvectors.tr_mul(&g).map(|v| Complex64::new(v, 0.0));
    efficient_variance_from(&kernel.eigenvalues, &p, alpha, kernel.t)
}

/// Closed-form backend: ⟨gₖ, Ψ^τ⟩ by central differences of ⟨q(θ), Ψ^τ⟩,
/// which is smooth in θ because the atom tuples are fixed.
pub fn efficient_variance_closed(engine: &ClosedForm, kernel: &MomentKernel, spec: &MixingSpec, alpha: f64) -> Result<VarianceReport> {
    let base = spec.theta.angles().to_vec();
    let n = spec.n();
    let dim = base.len();
    let r = kernel.eigenvalues.len();
    let mut p = DMatrix::zeros(r, dim);
    for k in 0..dim {
        let h = 1e-5 * base[k].abs().max(1.0);
        let mut up = base.clone();
        let mut dn = base.clone();
        up[k] += h;
        dn[k] -= h;
        let bu = engine.inner(&MixingSpec::from_raw(&up, n)?, kernel);
        let bd = engine.inner(&MixingSpec::from_raw(&dn, n)?, kernel);
        let db: Vec<Complex64> = bu.iter().zip(&bd).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        for (c, v) in kernel.projections(&db).into_iter().enumerate() {
            p[(c, k)] = v;
        }
    }
    efficient_variance_from(&kernel.eigenvalues, &p, alpha, kernel.m.nrows())
}

/// Weighting for the first-stage objective Σ_g w_g x_g' W_g x_g, with
/// x_g = (Re q, Im q) at node g.
#[derive(Debug, Clone)]
pub enum WeightSpec {
    /// W_g = I at every node: the flat objective ∫|q|² dπ.
    Identity,
    /// One symmetric 2×2 block per half node (mirror nodes reuse it with
    /// the imaginary sign flipped).
    Blocks(Vec<Matrix2<f64>>),
}

/// Sandwich variance B V B'/T of the estimator minimizing the W-weighted
/// objective, with K from the complex level kernel. Integration over (r, s)
/// uses the tensor grid with `nodes_per_axis` nodes; a warning is attached
/// when doubling the nodes moves B by more than 1%.
pub fn sandwich_variance(panel: &SensorPanel, spec: &MixingSpec, w: &WeightSpec, nodes_per_axis: usize) -> Result<VarianceReport> {
    let (b_inv, d, wts) = sandwich_bread(panel, spec, w, nodes_per_axis)?;
    let b = invert_bracket(&b_inv)?;
    let hlen = d.len();
    let dim = spec.theta.dim();
    // Kernel blocks at every half-node pair.
    let grid = TensorGrid::new(spec.n(), nodes_per_axis);
    let half = grid.half();
    let mut v = DMatrix::zeros(dim, dim);
    let weighted: Vec<DMatrix<f64>> = (0..hlen).map(|h| wmat(w, h) * &d[h] * (2.0 * wts[h])).collect();
    let blocks: Vec<Vec<Matrix2<f64>>> = (0..hlen)
        .into_par_iter()
        .map(|a| {
            let r = &grid.points[half[a]];
            (0..hlen)
                .map(|b| {
                    let s = &grid.points[half[b]];
                    let neg: Vec<f64> = s.iter().map(|x| -x).collect();
                    blocks_from_complex(cov_kernel_level(panel, spec, r, s), cov_kernel_level(panel, spec, r, &neg))
                })
                .collect()
        })
        .collect();
    for a in 0..hlen {
        for bb in 0..hlen {
            let kb = DMatrix::from_column_slice(2, 2, blocks[a][bb].as_slice());
            v += weighted[a].transpose() * kb * &weighted[bb];
        }
    }
    let mut warnings = Vec::new();
    let (b_inv2, _, _) = sandwich_bread(panel, spec, w, 2 * nodes_per_axis)?;
    let change = (&b_inv2 - &b_inv).norm() / b_inv.norm();
    if matches!(w, WeightSpec::Identity) && change > 0.01 {
        warnings.push(format!(
            "quadrature grid too coarse: bracket changes by {:.2}% when nodes are doubled",
            100.0 * change
        ));
    }
    Ok(report(b, v, panel.t(), VarianceMethod::Sandwich, warnings))
}

fn wmat(w: &WeightSpec, h: usize) -> DMatrix<f64> {
    match w {
        WeightSpec::Identity => DMatrix::identity(2, 2),
        WeightSpec::Blocks(b) => DMatrix::from_column_slice(2, 2, b[h].as_slice()),
    }
}

/// Bracket Σ_h 2w_h d_h' W_h d_h with d_h the 2×dim real derivative block.
fn sandwich_bread(
    panel: &SensorPanel,
    spec: &MixingSpec,
    w: &WeightSpec,
    nodes_per_axis: usize,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>, Vec<f64>)> {
    let grid = TensorGrid::new(spec.n(), nodes_per_axis);
    let half = grid.half();
    if let WeightSpec::Blocks(b) = w {
        if b.len() != half.len() && nodes_per_axis == grid.per_axis {
            return Err(Error::Config(format!("expected {} weight blocks, got {}", half.len(), b.len())));
        }
    }
    let mode = if spec.n() == 2 { JacobianMode::Analytic } else { JacobianMode::Numeric };
    let jac = projector_jacobian(spec, mode)?;
    let dim = spec.theta.dim();
    let d: Vec<DMatrix<f64>> = half
        .par_iter()
        .map(|&g| {
            let dq = dq_dtheta_with(panel, spec, &jac, &grid.points[g], MomentForm::Level, 0.0)?;
            let mut m = DMatrix::zeros(2, dim);
            for k in 0..dim {
                m[(0, k)] = dq[k].re;
                m[(1, k)] = dq[k].im;
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let wts: Vec<f64> = half.iter().map(|&g| grid.weights[g]).collect();
    let mut bread = DMatrix::zeros(dim, dim);
    let blocks_ok = matches!(w, WeightSpec::Blocks(b) if b.len() == half.len());
    for h in 0..half.len() {
        let wm = if blocks_ok || matches!(w, WeightSpec::Identity) { wmat(w, h) } else { DMatrix::identity(2, 2) };
        bread += d[h].transpose() * wm * &d[h] * (2.0 * wts[h]);
    }
    Ok((bread, d, wts))
}

/// Covariance of vec(Θ̂) by the delta method.
pub fn delta_to_theta(var_theta: &DMatrix<f64>, theta: &AngleVector) -> DMatrix<f64> {
    let j = mixing_jacobian(theta);
    symmetrize(&(&j * var_theta * j.transpose()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecTestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Σ λ²/(λ² + α).
    pub degrees: f64,
    /// α Σ λ⁴/(λ² + α)².
    pub side_condition: f64,
    /// T·Q*_T(θ̂).
    pub scaled_norm: f64,
}

/// (T·Q* − Σλ²/(λ²+α)) / √(2 Σλ⁴/(λ²+α)²), one-sided.
pub fn spec_test_from(eigenvalues: &[f64], scaled_norm: f64, alpha: f64) -> Result<SpecTestResult> {
    if !eigenvalues.iter().any(|&l| l > 0.0) {
        return Err(Error::TestUndefined("all kernel eigenvalues are zero".into()));
    }
    if !scaled_norm.is_finite() {
        return Err(Error::TestUndefined("objective is not finite at the estimate".into()));
    }
    let degrees: f64 = eigenvalues.iter().map(|l| l * l / (l * l + alpha)).sum();
    let quartic: f64 = eigenvalues.iter().map(|l| (l * l / (l * l + alpha)).powi(2)).sum();
    let statistic = (scaled_norm - degrees) / (2.0 * quartic).sqrt();
    let normal = Normal::standard();
    let p_value = (1.0 - normal.cdf(statistic)).clamp(0.0, 1.0);
    Ok(SpecTestResult { statistic, p_value, degrees, side_condition: alpha * quartic, scaled_norm })
}

/// Specification test on the grid backend with the kernel built at θ̂.
pub fn spec_test(engine: &GridEngine, kernel: &GridKernel, spec: &MixingSpec, alpha: f64) -> Result<SpecTestResult> {
    let q = engine.objective(spec, kernel, alpha);
    spec_test_from(&kernel.eigenvalues, kernel.t as f64 * q, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Rows of the sensor panel (moving blocks when a block length is set).
    Iid,
    /// Residual resampling with rebuilt VAR paths; see the svar module.
    Recursive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub level: f64,
    pub draws: usize,
    pub failed: usize,
    pub theta_lo: Vec<f64>,
    pub theta_hi: Vec<f64>,
    /// Bands for vec(Θ), column-major.
    pub mixing_lo: Vec<f64>,
    pub mixing_hi: Vec<f64>,
    /// Aligned column angles of every successful draw.
    pub theta_draws: Vec<Vec<f64>>,
}

pub const MIN_BOOTSTRAP_DRAWS: usize = 100;
pub const MAX_FAILURE_SHARE: f64 = 0.10;

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Column angles of an estimate after alignment to a reference.
pub fn aligned_angles(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let al = align_matrix(estimate, reference);
    let n = reference.ncols();
    let mut angles = Vec::with_capacity(n * (n - 1));
    for j in 0..n {
        let col: Vec<f64> = al.aligned.column(j).iter().copied().collect();
        angles.extend(crate::param::column_angles(&col));
    }
    (angles, al.aligned)
}

/// Percentile intervals per coordinate.
pub fn percentile_bands(draws: &[Vec<f64>], level: f64) -> (Vec<f64>, Vec<f64>) {
    let dim = draws.first().map_or(0, |d| d.len());
    let tail = (1.0 - level) / 2.0;
    let mut lo = Vec::with_capacity(dim);
    let mut hi = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut v: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        v.sort_by(f64::total_cmp);
        lo.push(quantile(&v, tail));
        hi.push(quantile(&v, 1.0 - tail));
    }
    (lo, hi)
}

/// Moving-block row indices; block = 1 is the plain iid bootstrap and
/// block = T reproduces the panel.
pub fn block_indices<R: Rng>(t: usize, block: usize, rng: &mut R) -> Vec<usize> {
    let block = block.clamp(1, t);
    let mut idx = Vec::with_capacity(t);
    while idx.len() < t {
        let start = rng.random_range(0..=t - block);
        idx.extend((start..start + block).take(t - idx.len()));
    }
    idx
}

/// Row-resampling bootstrap around a point estimate. Draws warm-start from
/// the point estimate and skip inference; failures are dropped and counted.
pub fn bootstrap_iid(
    panel: &SensorPanel,
    config: &EstimatorConfig,
    point: &EstimateResult,
    draws: usize,
    level: f64,
    block: Option<usize>,
) -> Result<BootstrapResult> {
    if draws < MIN_BOOTSTRAP_DRAWS {
        return Err(Error::Config(format!("bootstrap needs at least {MIN_BOOTSTRAP_DRAWS} draws, got {draws}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let t = panel.t();
    let reference = point.mixing.mixing.clone();
    let outcomes: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream(config.seed, &[TAG_BOOTSTRAP, d as u64]);
            let idx = block_indices(t, block.unwrap_or(1), &mut rng);
            let sample = panel.select_rows(&idx);
            let cfg = EstimatorConfig {
                inference: false,
                refine_starts: 1,
                seed: derive_seed(config.seed, &[TAG_BOOTSTRAP, d as u64, 1]),
                ..config.clone()
            };
            let est = estimate_warm(&sample, &cfg, &point.theta_hat).ok()?;
            let (angles, aligned) = aligned_angles(&est.mixing.mixing, &reference);
            Some((angles, aligned.iter().copied().collect()))
        })
        .collect();
    collect_bootstrap(outcomes, level)
}

pub(crate) fn collect_bootstrap(outcomes: Vec<Option<(Vec<f64>, Vec<f64>)>>, level: f64) -> Result<BootstrapResult> {
    let draws = outcomes.len();
    let ok: Vec<(Vec<f64>, Vec<f64>)> = outcomes.into_iter().flatten().collect();
    let failed = draws - ok.len();
    if failed as f64 > MAX_FAILURE_SHARE * draws as f64 {
        return Err(Error::Bootstrap { failed, draws });
    }
    let thetas: Vec<Vec<f64>> = ok.iter().map(|o| o.0.clone()).collect();
    let mixes: Vec<Vec<f64>> = ok.iter().map(|o| o.1.clone()).collect();
    let (theta_lo, theta_hi) = percentile_bands(&thetas, level);
    let (mixing_lo, mixing_hi) = percentile_bands(&mixes, level);
    Ok(BootstrapResult { level, draws, failed, theta_lo, theta_hi, mixing_lo, mixing_hi, theta_draws: thetas })
}
