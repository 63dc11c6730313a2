//! Independent quadrature oracle for the closed-form kernel, shared by the
//! kernel tests and the acceptance run.
#![allow(dead_code)]

use cfica::ecf::{PanelSource, SensorPanel};
use cfica::param::{theta_to_mixing, AngleVector, MixingSpec};
use cfica::simlab::{generate_panel, SourceDgp, SourceKind};
use nalgebra::DMatrix;
use num_complex::Complex64;
use std::f64::consts::PI;

/// Orthonormal probabilists' Hermite values p_0..p_m at x.
pub fn orthonormal(m: usize, x: f64) -> Vec<f64> {
    let mut p = vec![1.0, x];
    for k in 1..m {
        // p_{k+1} = (x p_k − √k p_{k−1}) / √(k+1).
        p.push((x * p[k] - (k as f64).sqrt() * p[k - 1]) / ((k + 1) as f64).sqrt());
    }
    p.truncate(m + 1);
    p
}

/// Gauss–Hermite rule for the standard normal measure: roots of p_m found by
/// bracketing sign changes and bisecting, Christoffel weights 1/Σ_{k<m} p_k².
pub fn hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let reach = 2.0 * (m as f64).sqrt() + 2.0;
    let steps = 40_000;
    let f = |x: f64| orthonormal(m, x)[m];
    let mut nodes = Vec::with_capacity(m);
    let mut prev = (-reach, f(-reach));
    for i in 1..=steps {
        let x = -reach + 2.0 * reach * i as f64 / steps as f64;
        let v = f(x);
        if prev.1 == 0.0 || prev.1.signum() != v.signum() {
            let (mut lo, mut hi) = (prev.0, x);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if f(lo).signum() == f(mid).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            nodes.push(0.5 * (lo + hi));
        }
        prev = (x, v);
    }
    assert_eq!(nodes.len(), m, "root count");
    let weights = nodes.iter().map(|&x| 1.0 / orthonormal(m, x)[..m].iter().map(|v| v * v).sum::<f64>()).collect();
    (nodes, weights)
}

pub fn ecf_at(data: &DMatrix<f64>, s: &[f64]) -> Complex64 {
    let t = data.nrows();
    (0..t).map(|r| Complex64::from_polar(1.0, s[0] * data[(r, 0)] + s[1] * data[(r, 1)])).sum::<Complex64>() / t as f64
}

/// Ψ^τ(s) = e^{isη_τ} − Πφ̂(sPⱼ) − Σⱼ [e^{isPⱼη_τ} − φ̂(sPⱼ)] Π_{m≠j} φ̂(sPₘ).
pub fn psi(data: &DMatrix<f64>, spec: &MixingSpec, tau: usize, s: &[f64]) -> Complex64 {
    let sp: Vec<Vec<f64>> = spec
        .projectors
        .iter()
        .map(|p| {
            let v = p.transpose() * nalgebra::DVector::from_column_slice(s);
            v.iter().copied().collect()
        })
        .collect();
    let phi: Vec<Complex64> = sp.iter().map(|u| ecf_at(data, u)).collect();
    let at = |u: &[f64]| Complex64::from_polar(1.0, u[0] * data[(tau, 0)] + u[1] * data[(tau, 1)]);
    let mut v = at(s) - phi[0] * phi[1];
    v -= (at(&sp[0]) - phi[0]) * phi[1];
    v -= (at(&sp[1]) - phi[1]) * phi[0];
    v
}

pub fn toy_panel() -> SensorPanel {
    let spec = theta_to_mixing(&AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap()).unwrap();
    let p = generate_panel(&SourceDgp::new(SourceKind::Uniform), &spec, 8, 21);
    SensorPanel::new_unchecked(p.data().clone(), PanelSource::Observed)
}

/// Max abs difference between the closed-form M and 40-node quadrature.
pub fn closed_form_vs_quadrature(panel: &SensorPanel, spec: &MixingSpec) -> f64 {
    use cfica::cgmm::atoms::{build_atoms, Subsample};
    use cfica::cgmm::kernel::assemble_m;
    let atoms = build_atoms(panel, spec, Subsample::Exhaustive).unwrap();
    let closed = assemble_m(&atoms);
    let (x, w) = hermite(40);
    let t = panel.t();
    let mut oracle = DMatrix::<Complex64>::zeros(t, t);
    for (a, wa) in x.iter().zip(&w) {
        for (b, wb) in x.iter().zip(&w) {
            let s = [*a, *b];
            let vals: Vec<Complex64> = (0..t).map(|tau| psi(panel.data(), spec, tau, &s)).collect();
            for i in 0..t {
                for j in 0..t {
                    oracle[(i, j)] += wa * wb * vals[j].conj() * vals[i];
                }
            }
        }
    }
    (0..t * t).map(|k| (closed[(k % t, k / t)] - oracle[(k % t, k / t)]).norm()).fold(0.0, f64::max)
}
