//! Closed-form kernel matrix and the efficient objective on atom expansions.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use super::atoms::{build_atoms, gaussian_inner, q_atoms, MomentAtoms, QTuples, Subsample};
use super::{kept_count, regularized_sum, Spectral};
use crate::ecf::SensorPanel;
use crate::error::{Error, Result};
use crate::param::{AngleVector, MixingSpec};

/// Product-term tuples of q_T are enumerated exhaustively up to this count.
pub const Q_TUPLE_CAP: usize = 4096;

#[derive(Debug, Clone)]
pub struct MomentKernel {
    /// M[τ̃][τ] = ∫ conj(Ψ^τ) Ψ^τ̃ dπ.
    pub m: DMatrix<Complex64>,
    /// Kept eigenvalues of M/T, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors of M/T, one column per kept eigenvalue.
    pub eigenvectors: DMatrix<Complex64>,
    /// χₜ = Σ_τ coefficients[(τ, t)] Ψ^τ, normalized so ‖χₜ‖ = 1.
    pub coefficients: DMatrix<Complex64>,
    pub alpha: Option<f64>,
    pub theta_at: AngleVector,
    pub atoms: MomentAtoms,
}

impl Spectral for MomentKernel {
    fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
    fn sample_size(&self) -> usize {
        self.m.nrows()
    }
}

/// Entry-wise Gaussian inner products; each entry is summed in a fixed order
/// so the result does not depend on thread scheduling.
pub fn assemble_m(atoms: &MomentAtoms) -> DMatrix<Complex64> {
    let t = atoms.t();
    let rows: Vec<Vec<Complex64>> = (0..t)
        .into_par_iter()
        .map(|a| (0..=a).map(|b| gaussian_inner(&atoms.per_obs[b], &atoms.per_obs[a])).collect())
        .collect();
    let mut m = DMatrix::zeros(t, t);
    for (a, row) in rows.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            m[(a, b)] = *v;
            m[(b, a)] = v.conj();
        }
    }
    m
}

pub fn build_kernel(atoms: MomentAtoms) -> Result<MomentKernel> {
    let m = assemble_m(&atoms);
    let t = m.nrows();
    let scaled = &m / Complex64::new(t as f64, 0.0);
    let eig = SymmetricEigen::try_new(scaled, 1e-14, 100_000).ok_or_else(|| Error::Eigen {
        condition: condition_estimate(&m),
    })?;
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let kept = kept_count(&sorted);
    let mut vecs = DMatrix::zeros(t, kept);
    let mut coef = DMatrix::zeros(t, kept);
    for (c, &i) in order.iter().take(kept).enumerate() {
        let scale = 1.0 / (t as f64 * sorted[c]).sqrt();
        for r in 0..t {
            let v = eig.eigenvectors[(r, i)];
            vecs[(r, c)] = v;
            coef[(r, c)] = v.conj() * scale;
        }
    }
    Ok(MomentKernel {
        m,
        eigenvalues: sorted[..kept].to_vec(),
        eigenvectors: vecs,
        coefficients: coef,
        alpha: None,
        theta_at: atoms.theta.clone(),
        atoms,
    })
}

fn condition_estimate(m: &DMatrix<Complex64>) -> f64 {
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)].re.abs()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

impl MomentKernel {
    /// ⟨q, χₜ⟩ from bτ = ⟨q, Ψ^τ⟩.
    pub fn projections(&self, b: &[Complex64]) -> Vec<Complex64> {
        (0..self.eigenvalues.len())
            .map(|c| (0..b.len()).map(|tau| self.coefficients[(tau, c)] * b[tau]).sum())
            .collect()
    }

    /// Eigenfunction Gram matrix ⟨χₛ, χₜ⟩; identity up to round-off.
    pub fn eigenfunction_gram(&self) -> DMatrix<Complex64> {
        let beta = &self.coefficients;
        // ⟨χₛ, χₜ⟩ = Σ conj(βτₛ) βσₜ M[σ][τ].
        beta.transpose() * &self.m * beta.map(|z| z.conj())
    }
}

/// Q* from the inner products bτ = ⟨q, Ψ^τ⟩.
pub fn objective_from_inner(kernel: &MomentKernel, b: &[Complex64], alpha: f64) -> f64 {
    let p: Vec<f64> = kernel.projections(b).iter().map(|z| z.norm_sqr()).collect();
    regularized_sum(&kernel.eigenvalues, &p, alpha)
}

/// Q*_T(θ) with the kernel held at its construction point.
pub fn efficient_objective(panel: &SensorPanel, spec: &MixingSpec, kernel: &MomentKernel, alpha: f64) -> Result<f64> {
    let engine = ClosedForm::new(panel, kernel.atoms.subsample)?;
    engine.objective(spec, kernel, alpha)
}

/// Closed-form backend bound to a panel, with the q_T tuples fixed.
pub struct ClosedForm<'a> {
    panel: &'a SensorPanel,
    subsample: Subsample,
    q_tuples: QTuples,
}

impl<'a> ClosedForm<'a> {
    pub fn new(panel: &'a SensorPanel, subsample: Subsample) -> Result<Self> {
        let q_tuples = QTuples::new(panel.t(), panel.n(), subsample, Q_TUPLE_CAP)?;
        Ok(Self { panel, subsample, q_tuples })
    }

    pub fn panel(&self) -> &SensorPanel {
        self.panel
    }

    /// ∫ |q_T(s, θ)|² dπ.
    pub fn flat_objective(&self, spec: &MixingSpec) -> f64 {
        let q = q_atoms(self.panel, spec, &self.q_tuples);
        gaussian_inner(&q, &q).re
    }

    pub fn kernel(&self, spec: &MixingSpec) -> Result<MomentKernel> {
        build_kernel(build_atoms(self.panel, spec, self.subsample)?)
    }

    /// bτ = ⟨q_T(·, θ), Ψ^τ⟩ against the kernel's atoms.
    pub fn inner(&self, spec: &MixingSpec, kernel: &MomentKernel) -> Vec<Complex64> {
        let q = q_atoms(self.panel, spec, &self.q_tuples);
        kernel.atoms.per_obs.par_iter().map(|psi| gaussian_inner(&q, psi)).collect()
    }

    pub fn objective(&self, spec: &MixingSpec, kernel: &MomentKernel, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(objective_from_inner(kernel, &self.inner(spec, kernel), alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecf::PanelSource;
    use crate::param::theta_to_mixing;
    use std::f64::consts::PI;

    fn tiny(t: usize) -> (SensorPanel, MixingSpec) {
        let vals: Vec<f64> = (0..2 * t).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let p = SensorPanel::new_unchecked(DMatrix::from_row_slice(t, 2, &vals), PanelSource::Observed);
        (p, theta_to_mixing(&AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap()).unwrap())
    }

    #[test]
    fn spectral_identities() {
        let (p, spec) = tiny(6);
        let k = build_kernel(build_atoms(&p, &spec, Subsample::Exhaustive).unwrap()).unwrap();
        let herm = (&k.m - k.m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(herm < 1e-12);
        let trace = k.m.trace().re / 6.0;
        let sum: f64 = k.eigenvalues.iter().sum();
        assert!((trace - sum).abs() < 1e-10 * trace.max(1.0));
        let g = k.eigenfunction_gram();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - target).norm() < 1e-6, "gram {i},{j} = {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn flat_objective_is_grand_mean_of_m() {
        let (p, spec) = tiny(5);
        let cf = ClosedForm::new(&p, Subsample::Exhaustive).unwrap();
        let k = cf.kernel(&spec).unwrap();
        let grand = k.m.iter().sum::<Complex64>() / 25.0;
        assert!((cf.flat_objective(&spec) - grand.re).abs() < 1e-12);
        assert!(grand.im.abs() < 1e-12);
    }

    #[test]
    fn objective_rejects_nonpositive_alpha() {
        let (p, spec) = tiny(5);
        let cf = ClosedForm::new(&p, Subsample::Exhaustive).unwrap();
        let k = cf.kernel(&spec).unwrap();
        assert!(cf.objective(&spec, &k, 0.0).is_err());
        let q1 = cf.objective(&spec, &k, 0.01).unwrap();
        let q2 = cf.objective(&spec, &k, 0.1).unwrap();
        assert!(q2 <= q1);
    }
}
