//! Exponential-atom expansions of the per-observation moment functions.
//!
//! For observation τ the level moment's influence function is
//!
//!   Ψ^τ(s) = e^{isη_τ} − Σⱼ e^{isPⱼη_τ} Π_{m≠j} φ̂(sPₘ) + (n−1) Πⱼ φ̂(sPⱼ),
//!
//! whose τ-average is q_T(s). Each product of ECFs is a sum over time tuples
//! of exponentials, so Ψ^τ is a finite sum Σ cₖ e^{isvₖ}. Large tuple groups
//! are replaced by uniform draws with replacement.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ecf::SensorPanel;
use crate::error::{Error, Result};
use crate::param::{AngleVector, MixingSpec};
use crate::rng::{stream, TAG_TUPLES};

/// Largest tuple group enumerated exhaustively.
pub const EXHAUSTIVE_CAP: usize = 1 << 20;

/// Σₖ cₖ exp(i s'vₖ), frequencies stored flat.
#[derive(Debug, Clone, Default)]
pub struct AtomSet {
    pub coef: Vec<Complex64>,
    pub freq: Vec<f64>,
    pub n: usize,
}

impl AtomSet {
    pub fn new(n: usize) -> Self {
        Self { coef: Vec::new(), freq: Vec::new(), n }
    }

    pub fn len(&self) -> usize {
        self.coef.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coef.is_empty()
    }

    pub fn push(&mut self, c: Complex64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.n);
        self.coef.push(c);
        self.freq.extend_from_slice(v);
    }

    pub fn freq(&self, k: usize) -> &[f64] {
        &self.freq[k * self.n..(k + 1) * self.n]
    }

    pub fn eval(&self, s: &[f64]) -> Complex64 {
        (0..self.len())
            .map(|k| {
                let x: f64 = s.iter().zip(self.freq(k)).map(|(a, b)| a * b).sum();
                self.coef[k] * Complex64::new(0.0, x).exp()
            })
            .sum()
    }
}

/// ∫ conj(u(s)) w(s) N(0,I)(ds) = Σₖ Σₗ conj(cₖ) dₗ exp(−½‖vₗ − vₖ‖²).
pub fn gaussian_inner(u: &AtomSet, w: &AtomSet) -> Complex64 {
    let n = u.n;
    let mut re = 0.0;
    let mut im = 0.0;
    for k in 0..u.len() {
        let vk = u.freq(k);
        let ck = u.coef[k].conj();
        let mut acc = Complex64::new(0.0, 0.0);
        for l in 0..w.len() {
            let vl = &w.freq[l * n..(l + 1) * n];
            let d2: f64 = vk.iter().zip(vl).map(|(a, b)| (a - b) * (a - b)).sum();
            acc += w.coef[l] * (-0.5 * d2).exp();
        }
        let p = ck * acc;
        re += p.re;
        im += p.im;
    }
    Complex64::new(re, im)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Subsample {
    Exhaustive,
    Random { draws: usize, seed: u64 },
}

impl Subsample {
    /// R = min(100, T) draws.
    pub fn default_for(t: usize, seed: u64) -> Self {
        Subsample::Random { draws: t.min(100), seed }
    }
}

#[derive(Debug, Clone)]
pub struct MomentAtoms {
    pub per_obs: Vec<AtomSet>,
    pub subsample: Subsample,
    pub theta: AngleVector,
}

impl MomentAtoms {
    pub fn t(&self) -> usize {
        self.per_obs.len()
    }

    /// τ-average of the atom expansions at s.
    pub fn mean_eval(&self, s: &[f64]) -> Complex64 {
        self.per_obs.iter().map(|a| a.eval(s)).sum::<Complex64>() / self.t() as f64
    }
}

/// Pⱼηₜ for every j and t: proj[j][t] is an n-vector.
pub(crate) fn projected_obs(panel: &SensorPanel, spec: &MixingSpec) -> Vec<Vec<Vec<f64>>> {
    let n = spec.n();
    (0..n)
        .map(|j| {
            let pe = panel.data() * spec.projectors[j].transpose();
            (0..panel.t()).map(|t| pe.row(t).iter().copied().collect()).collect()
        })
        .collect()
}

/// All tuples in 0..T of the given length, odometer order.
fn all_tuples(t: usize, len: usize) -> Vec<Vec<usize>> {
    let total = t.pow(len as u32);
    (0..total)
        .map(|mut idx| {
            (0..len)
                .map(|_| {
                    let v = idx % t;
                    idx /= t;
                    v
                })
                .collect()
        })
        .collect()
}

fn random_tuples(t: usize, len: usize, draws: usize, seed: u64, path: &[u64]) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, path);
    (0..draws).map(|_| (0..len).map(|_| rng.random_range(0..t)).collect()).collect()
}

/// Tuple list and per-tuple weight for a group of population T^len.
fn group(t: usize, len: usize, sub: Subsample, path: &[u64]) -> Result<(Vec<Vec<usize>>, f64)> {
    let population = (t as f64).powi(len as i32);
    match sub {
        Subsample::Random { draws, seed } if (draws as f64) < population => {
            Ok((random_tuples(t, len, draws, seed, path), 1.0 / draws as f64))
        }
        _ => {
            if population > EXHAUSTIVE_CAP as f64 {
                return Err(Error::Config(format!(
                    "exhaustive tuple group of size {population} exceeds the cap; use random subsampling"
                )));
            }
            Ok((all_tuples(t, len), 1.0 / population))
        }
    }
}

pub fn build_atoms(panel: &SensorPanel, spec: &MixingSpec, subsample: Subsample) -> Result<MomentAtoms> {
    if let Subsample::Random { draws: 0, .. } = subsample {
        return Err(Error::Config("subsample draws must be at least 1".into()));
    }
    let n = spec.n();
    let t = panel.t();
    let proj = projected_obs(panel, spec);
    let nm1 = (n - 1) as f64;
    let mut per_obs = Vec::with_capacity(t);
    let mut v = vec![0.0; n];
    for tau in 0..t {
        let mut set = AtomSet::new(n);
        set.push(Complex64::new(1.0, 0.0), panel.data().row(tau).iter().copied().collect::<Vec<_>>().as_slice());
        for j in 0..n {
            let (tuples, w) = group(t, n - 1, subsample, &[TAG_TUPLES, tau as u64, j as u64])?;
            for tup in &tuples {
                v.copy_from_slice(&proj[j][tau]);
                let mut slot = 0;
                for m in (0..n).filter(|&m| m != j) {
                    for (x, y) in v.iter_mut().zip(&proj[m][tup[slot]]) {
                        *x += y;
                    }
                    slot += 1;
                }
                set.push(Complex64::new(-w, 0.0), &v);
            }
        }
        let (tuples, w) = group(t, n, subsample, &[TAG_TUPLES, tau as u64, n as u64])?;
        for tup in &tuples {
            v.iter_mut().for_each(|x| *x = 0.0);
            for (m, &tm) in tup.iter().enumerate() {
                for (x, y) in v.iter_mut().zip(&proj[m][tm]) {
                    *x += y;
                }
            }
            set.push(Complex64::new(nm1 * w, 0.0), &v);
        }
        per_obs.push(set);
    }
    Ok(MomentAtoms { per_obs, subsample, theta: spec.theta.clone() })
}

/// Time tuples for the product term of q_T, fixed across θ so that the
/// objective is a smooth function of the angles.
#[derive(Debug, Clone)]
pub struct QTuples {
    pub tuples: Vec<Vec<usize>>,
    pub weight: f64,
}

impl QTuples {
    /// Exhaustive when T^n ≤ cap, otherwise max(4T, R) seeded draws.
    pub fn new(t: usize, n: usize, subsample: Subsample, cap: usize) -> Result<Self> {
        let population = (t as f64).powi(n as i32);
        let sub = match subsample {
            Subsample::Random { draws, seed } if population > cap as f64 => {
                Subsample::Random { draws: (4 * t).max(draws), seed }
            }
            _ => Subsample::Exhaustive,
        };
        let (tuples, weight) = group(t, n, sub, &[TAG_TUPLES, u64::MAX])?;
        Ok(Self { tuples, weight })
    }
}

/// q_T(·, θ) as atoms: (1/T, ηₜ) minus the product term.
pub fn q_atoms(panel: &SensorPanel, spec: &MixingSpec, tuples: &QTuples) -> AtomSet {
    let n = spec.n();
    let t = panel.t();
    let proj = projected_obs(panel, spec);
    let mut set = AtomSet::new(n);
    for tau in 0..t {
        set.push(Complex64::new(1.0 / t as f64, 0.0), panel.data().row(tau).iter().copied().collect::<Vec<_>>().as_slice());
    }
    let mut v = vec![0.0; n];
    for tup in &tuples.tuples {
        v.iter_mut().for_each(|x| *x = 0.0);
        for (m, &tm) in tup.iter().enumerate() {
            for (x, y) in v.iter_mut().zip(&proj[m][tm]) {
                *x += y;
            }
        }
        set.push(Complex64::new(-tuples.weight, 0.0), &v);
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecf::{q_level, PanelSource};
    use crate::param::theta_to_mixing;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn tiny(t: usize) -> (SensorPanel, MixingSpec) {
        let vals: Vec<f64> = (0..2 * t).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let p = SensorPanel::new_unchecked(DMatrix::from_row_slice(t, 2, &vals), PanelSource::Observed);
        (p, theta_to_mixing(&AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap()).unwrap())
    }

    #[test]
    fn exhaustive_average_is_q() {
        let (p, spec) = tiny(3);
        let atoms = build_atoms(&p, &spec, Subsample::Exhaustive).unwrap();
        assert_eq!(atoms.per_obs[0].len(), 1 + 2 * 3 + 9);
        let s = [0.7, -0.3];
        let diff = atoms.mean_eval(&s) - q_level(&p, &spec, &s);
        assert!(diff.norm() < 1e-12, "{diff}");
        for a in &atoms.per_obs {
            assert!(a.eval(&[0.0, 0.0]).norm() < 1e-14);
        }
        let q = q_atoms(&p, &spec, &QTuples::new(3, 2, Subsample::Exhaustive, 100).unwrap());
        assert!((q.eval(&s) - q_level(&p, &spec, &s)).norm() < 1e-12);
    }

    #[test]
    fn random_atoms_vanish_at_origin() {
        let (p, spec) = tiny(6);
        let atoms = build_atoms(&p, &spec, Subsample::Random { draws: 2, seed: 9 }).unwrap();
        assert_eq!(atoms.per_obs[0].len(), 1 + 2 * 2 + 2);
        for a in &atoms.per_obs {
            assert!(a.eval(&[0.0, 0.0]).norm() < 1e-14);
        }
    }

    #[test]
    fn inner_product_identities() {
        let mut u = AtomSet::new(2);
        u.push(Complex64::new(1.0, 0.0), &[1.0, 0.0]);
        let mut w = AtomSet::new(2);
        w.push(Complex64::new(1.0, 0.0), &[0.0, 0.0]);
        assert!((gaussian_inner(&u, &w).re - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_inner(&u, &u).re - 1.0).abs() < 1e-15);
    }
}
