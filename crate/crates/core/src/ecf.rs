//! Empirical characteristic functions and the moment function built on them.
//!
//! The sign vector a = (1, −1, …, −1) with P₀ = I is implicit throughout:
//! index 0 is the joint term, indices 1..=n the projected terms.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::MixingSpec;

pub const DEFAULT_TRIM: f64 = 0.05;
pub const RAY_POINTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelSource {
    Observed,
    FirstStageResiduals,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorPanel {
    data: DMatrix<f64>,
    source: PanelSource,
}

impl SensorPanel {
    pub fn new(data: DMatrix<f64>, source: PanelSource) -> Result<Self> {
        let (t, n) = data.shape();
        if n < 2 {
            return Err(Error::InvalidPanel(format!("need at least 2 sensors, got {n}")));
        }
        if t < n + 2 {
            return Err(Error::InvalidPanel(format!("T = {t} is below n + 2 = {}", n + 2)));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPanel(format!(
                "non-finite entry at row {}, column {}",
                pos % t,
                pos / t
            )));
        }
        Ok(Self { data, source })
    }

    /// Skips the T ≥ n + 2 check; used for the tiny panels in oracles.
    pub fn new_unchecked(data: DMatrix<f64>, source: PanelSource) -> Self {
        Self { data, source }
    }

    pub fn t(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn source(&self) -> PanelSource {
        self.source
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.data.row(t).transpose()
    }

    /// Panel built from the given row indices (with repetition).
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self { data: self.data.select_rows(idx), source: self.source }
    }

    /// Sources implied by a candidate unmixing: ε̂ = Θ⁻¹ η, as a T×n matrix.
    pub fn unmix(&self, spec: &MixingSpec) -> DMatrix<f64> {
        &self.data * spec.inverse.transpose()
    }
}

#[inline]
pub fn mean_exp(y: impl Iterator<Item = f64>) -> Complex64 {
    let mut re = 0.0;
    let mut im = 0.0;
    let mut count = 0usize;
    for v in y {
        let (s, c) = v.sin_cos();
        re += c;
        im += s;
        count += 1;
    }
    Complex64::new(re / count as f64, im / count as f64)
}

/// φ̂(s) = (1/T) Σₜ exp(i s'ηₜ).
pub fn ecf(panel: &SensorPanel, s: &[f64]) -> Complex64 {
    let s = DVector::from_column_slice(s);
    let y = &panel.data * s;
    mean_exp(y.iter().copied())
}

/// Row vector s Pⱼ as a column vector.
fn project(spec: &MixingSpec, j: usize, s: &[f64]) -> Vec<f64> {
    let s = DVector::from_column_slice(s);
    (spec.projectors[j].transpose() * s).iter().copied().collect()
}

/// Point sPⱼ for j = 0..=n, with P₀ = I.
pub fn projected_points(spec: &MixingSpec, s: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![s.to_vec()];
    out.extend((0..spec.n()).map(|j| project(spec, j, s)));
    out
}

/// Values φ̂(s), φ̂(sP₁), …, φ̂(sPₙ).
pub fn projected_ecf(panel: &SensorPanel, spec: &MixingSpec, s: &[f64]) -> Vec<Complex64> {
    projected_points(spec, s).iter().map(|p| ecf(panel, p)).collect()
}

/// q_T(s, θ) = φ̂(s) − Πⱼ φ̂(sPⱼ).
pub fn q_level(panel: &SensorPanel, spec: &MixingSpec, s: &[f64]) -> Complex64 {
    let v = projected_ecf(panel, spec, s);
    v[0] - v[1..].iter().product::<Complex64>()
}

/// Outcome of a log-form evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogEval {
    Value(Complex64),
    Trimmed { modulus: f64 },
}

impl LogEval {
    pub fn value(self) -> Option<Complex64> {
        match self {
            LogEval::Value(v) => Some(v),
            LogEval::Trimmed { .. } => None,
        }
    }
}

/// Continuous complex log of φ̂ at u, tracked along the ray t·u from the
/// origin. Returns Trimmed if the modulus anywhere on the ray drops below
/// `trim`.
pub fn tracked_log(panel: &SensorPanel, u: &[f64], trim: f64) -> Result<LogEval> {
    let y = &panel.data * DVector::from_column_slice(u);
    tracked_log_projection(y.as_slice(), trim)
}

/// Same as [`tracked_log`] for a precomputed projection yₜ = u'ηₜ.
pub fn tracked_log_projection(y: &[f64], trim: f64) -> Result<LogEval> {
    let mut phase = 0.0;
    let mut prev = Complex64::new(1.0, 0.0);
    let mut last = prev;
    for k in 1..=RAY_POINTS {
        let frac = k as f64 / RAY_POINTS as f64;
        let v = mean_exp(y.iter().map(|x| frac * x));
        let m = v.norm();
        if m < trim {
            return Ok(LogEval::Trimmed { modulus: m });
        }
        let step = (v / prev).arg();
        if step.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::BranchTracking { step });
        }
        phase += step;
        prev = v;
        last = v;
    }
    Ok(LogEval::Value(Complex64::new(last.norm().ln(), phase)))
}

/// Σⱼ aⱼ Log φ̂(sPⱼ) with branch tracking along rays.
pub fn q_log(panel: &SensorPanel, spec: &MixingSpec, s: &[f64], trim: f64) -> Result<LogEval> {
    let mut total = Complex64::new(0.0, 0.0);
    for (j, p) in projected_points(spec, s).iter().enumerate() {
        match tracked_log(panel, p, trim)? {
            LogEval::Value(v) => {
                total += if j == 0 { v } else { -v };
            }
            t @ LogEval::Trimmed { .. } => return Ok(t),
        }
    }
    Ok(LogEval::Value(total))
}

/// Leave-one-out products φⱼ(s) = Π_{m≠j} φ̂(sPₘ) for j = 1..=n, with φ₀ = 1.
fn weights(proj: &[Complex64]) -> Vec<Complex64> {
    let n = proj.len() - 1;
    let mut w = vec![Complex64::new(1.0, 0.0)];
    for j in 1..=n {
        w.push((1..=n).filter(|&m| m != j).map(|m| proj[m]).product());
    }
    w
}

fn sign(j: usize) -> f64 {
    if j == 0 {
        1.0
    } else {
        -1.0
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Complex covariance kernel of the level moment,
/// K(r,s) = E[Ψ(r) conj Ψ(s)] with Ψ the per-observation influence function.
/// Valid whether or not any characteristic function vanishes.
pub fn cov_kernel_level(panel: &SensorPanel, spec: &MixingSpec, r: &[f64], s: &[f64]) -> Complex64 {
    let rp = projected_points(spec, r);
    let sp = projected_points(spec, s);
    let fr: Vec<Complex64> = rp.iter().map(|p| ecf(panel, p)).collect();
    let fs: Vec<Complex64> = sp.iter().map(|p| ecf(panel, p)).collect();
    let wr = weights(&fr);
    let ws = weights(&fs);
    let mut k = Complex64::new(0.0, 0.0);
    for a in 0..rp.len() {
        for b in 0..sp.len() {
            let cov = ecf(panel, &sub(&rp[a], &sp[b])) - fr[a] * fs[b].conj();
            k += sign(a) * sign(b) * wr[a] * ws[b].conj() * cov;
        }
    }
    k
}

/// Real/imaginary covariance block [[Cov(Re,Re), Cov(Re,Im)], [Cov(Im,Re), Cov(Im,Im)]]
/// of (Ψ(r), Ψ(s)), assembled from K(r,s) and K(r,−s). Requires every ECF
/// modulus at the projected points to be at least `trim`.
pub fn cov_kernel_level_block(
    panel: &SensorPanel,
    spec: &MixingSpec,
    r: &[f64],
    s: &[f64],
    trim: f64,
) -> Result<Matrix2<f64>> {
    for p in projected_points(spec, r).iter().chain(projected_points(spec, s).iter()) {
        let m = ecf(panel, p).norm();
        if m < trim {
            return Err(Error::Trimmed { modulus: m, trim });
        }
    }
    let neg: Vec<f64> = s.iter().map(|v| -v).collect();
    Ok(blocks_from_complex(cov_kernel_level(panel, spec, r, s), cov_kernel_level(panel, spec, r, &neg)))
}

/// Real/imaginary blocks from K(r,s) and K(r,−s), using Ψ(−s) = conj Ψ(s).
pub fn blocks_from_complex(k_pos: Complex64, k_neg: Complex64) -> Matrix2<f64> {
    let sum = k_pos + k_neg;
    let dif = k_neg - k_pos;
    Matrix2::new(0.5 * sum.re, 0.5 * dif.im, 0.5 * sum.im, 0.5 * (k_pos.re - k_neg.re))
}

/// Complex kernel recovered from its real/imaginary block.
pub fn complex_from_block(b: &Matrix2<f64>) -> Complex64 {
    Complex64::new(b[(0, 0)] + b[(1, 1)], b[(1, 0)] - b[(0, 1)])
}

/// Covariance kernel of the log moment:
/// Σₖ Σⱼ aₖ aⱼ [φ̂(rₖ − sⱼ) / (φ̂(rₖ) conj φ̂(sⱼ)) − 1].
pub fn cov_kernel_log(panel: &SensorPanel, spec: &MixingSpec, r: &[f64], s: &[f64], trim: f64) -> Result<Complex64> {
    let rp = projected_points(spec, r);
    let sp = projected_points(spec, s);
    let fr: Vec<Complex64> = rp.iter().map(|p| ecf(panel, p)).collect();
    let fs: Vec<Complex64> = sp.iter().map(|p| ecf(panel, p)).collect();
    if let Some(m) = fr.iter().chain(fs.iter()).map(|v| v.norm()).find(|m| *m < trim) {
        return Err(Error::Trimmed { modulus: m, trim });
    }
    let mut k = Complex64::new(0.0, 0.0);
    for a in 0..rp.len() {
        for b in 0..sp.len() {
            let ratio = ecf(panel, &sub(&rp[a], &sp[b])) / (fr[a] * fs[b].conj());
            k += sign(a) * sign(b) * (ratio - 1.0);
        }
    }
    Ok(k)
}

/// ECF values at a set of points and at their projections.
#[derive(Debug, Clone)]
pub struct CfTable {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<Complex64>,
    /// projected[k][j] = φ̂(sₖ Pⱼ₊₁).
    pub projected: Vec<Vec<Complex64>>,
}

impl CfTable {
    pub fn build(panel: &SensorPanel, spec: &MixingSpec, points: Vec<Vec<f64>>, cache: Option<&EcfCache>) -> Self {
        let mut values = Vec::with_capacity(points.len());
        let mut projected = Vec::with_capacity(points.len());
        for s in &points {
            values.push(ecf(panel, s));
            let proj = match cache {
                Some(c) => c.get_or_insert(spec, s, || projected_ecf(panel, spec, s)[1..].to_vec()),
                None => projected_ecf(panel, spec, s)[1..].to_vec(),
            };
            projected.push(proj);
        }
        Self { points, values, projected }
    }

    pub fn q_level(&self) -> Vec<Complex64> {
        self.values
            .iter()
            .zip(&self.projected)
            .map(|(v, p)| v - p.iter().product::<Complex64>())
            .collect()
    }
}

/// Per-projector ECF values keyed by (θ, point) bit patterns. Safe under
/// concurrent insertion; cleared wholesale when it grows past `capacity`.
#[derive(Debug)]
pub struct EcfCache {
    map: Mutex<HashMap<(Vec<u64>, Vec<u64>), Vec<Complex64>>>,
    capacity: usize,
}

impl EcfCache {
    pub fn new(capacity: usize) -> Self {
        Self { map: Mutex::new(HashMap::new()), capacity }
    }

    pub fn get_or_insert(&self, spec: &MixingSpec, s: &[f64], f: impl FnOnce() -> Vec<Complex64>) -> Vec<Complex64> {
        let key = (
            spec.theta.angles().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            s.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        );
        if let Some(v) = self.map.lock().expect("cache poisoned").get(&key) {
            return v.clone();
        }
        let v = f();
        let mut map = self.map.lock().expect("cache poisoned");
        if map.len() >= self.capacity {
            map.clear();
        }
        map.insert(key, v.clone());
        v
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
