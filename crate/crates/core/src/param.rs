//! Angle parametrization of unit-norm mixing matrices.
//!
//! Each column of Θ is a point on the unit sphere written in hyperspherical
//! coordinates: x₁ = cos φ₁, x₂ = sin φ₁ cos φ₂, …, xₙ = sin φ₁ ⋯ sin φₙ₋₁.
//! For n = 2 this is the familiar (cos θⱼ, sin θⱼ). A column and its negative
//! describe the same source, so the canonical representative has its last
//! nonzero entry positive, which puts the final angle of every block in [0, π).
//! Column blocks are then sorted lexicographically.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.05;

const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleVector {
    angles: Vec<f64>,
    n: usize,
}

impl AngleVector {
    /// Validates range and ordering. ε-invertibility is checked when the
    /// mixing matrix is built.
    pub fn new(angles: Vec<f64>, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::UnsupportedDimension { n, what: "need at least two sources" });
        }
        let k = n - 1;
        if angles.len() != n * k {
            return Err(Error::InvalidAngles(format!(
                "expected {} angles for n = {n}, got {}",
                n * k,
                angles.len()
            )));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidAngles("non-finite angle".into()));
        }
        for (j, block) in angles.chunks(k).enumerate() {
            for (i, &a) in block.iter().enumerate() {
                let last = i + 1 == k;
                let ok = if last { (0.0..std::f64::consts::PI).contains(&a) } else { (0.0..=std::f64::consts::PI).contains(&a) };
                if !ok {
                    return Err(Error::InvalidAngles(format!(
                        "angle {i} of column {j} is {a}, outside the canonical range"
                    )));
                }
            }
        }
        for j in 1..n {
            let prev = &angles[(j - 1) * k..j * k];
            let cur = &angles[j * k..(j + 1) * k];
            if lex_cmp(prev, cur) != std::cmp::Ordering::Less {
                return Err(Error::InvalidAngles(format!(
                    "column blocks {} and {j} are not strictly increasing",
                    j - 1
                )));
            }
        }
        Ok(Self { angles, n })
    }

    pub fn n2(theta1: f64, theta2: f64) -> Result<Self> {
        Self::new(vec![theta1, theta2], 2)
    }

    /// Canonical representative of an arbitrary angle vector: build the
    /// columns, flip signs, sort. Fails only on non-finite input.
    pub fn canonical_from_raw(raw: &[f64], n: usize) -> Result<Self> {
        if raw.len() != n * (n - 1) || raw.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidAngles("raw angle vector malformed".into()));
        }
        mixing_to_theta(&raw_mixing(raw, n))
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.angles.len()
    }

    pub fn block(&self, j: usize) -> &[f64] {
        let k = self.n - 1;
        &self.angles[j * k..(j + 1) * k]
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Unit vector from one block of hyperspherical angles.
pub fn sphere_point(block: &[f64]) -> Vec<f64> {
    let n = block.len() + 1;
    let mut x = vec![0.0; n];
    let mut run = 1.0;
    for (i, &phi) in block.iter().enumerate() {
        x[i] = run * phi.cos();
        run *= phi.sin();
    }
    x[n - 1] = run;
    x
}

/// Θ from angles with no validation.
pub fn raw_mixing(angles: &[f64], n: usize) -> DMatrix<f64> {
    let k = n - 1;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let col = sphere_point(&angles[j * k..(j + 1) * k]);
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixingSpec {
    pub theta: AngleVector,
    pub mixing: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub projectors: Vec<DMatrix<f64>>,
}

impl MixingSpec {
    pub fn n(&self) -> usize {
        self.theta.n
    }

    /// Builds the spec from angles without range, ordering or ε checks.
    /// Used for finite differences and by the unconstrained simplex; fails
    /// only when Θ is numerically singular.
    pub fn from_raw(angles: &[f64], n: usize) -> Result<Self> {
        let mixing = raw_mixing(angles, n);
        let inverse = invert(&mixing, angles)?;
        let projectors = projectors(&mixing, &inverse);
        Ok(Self { theta: AngleVector { angles: angles.to_vec(), n }, mixing, inverse, projectors })
    }

    /// Smallest angle between the lines spanned by two columns.
    pub fn min_line_angle(&self) -> (f64, usize, usize) {
        min_line_angle(&self.mixing)
    }
}

fn invert(m: &DMatrix<f64>, angles: &[f64]) -> Result<DMatrix<f64>> {
    if m.nrows() == 2 {
        let (t1, t2) = (angles[0], angles[1]);
        let d = (t2 - t1).sin();
        if d.abs() < 1e-300 {
            return Err(Error::Degenerate { first: 0, second: 1, angle: 0.0, epsilon: 0.0 });
        }
        let (s1, c1) = t1.sin_cos();
        let (s2, c2) = t2.sin_cos();
        return Ok(DMatrix::from_row_slice(2, 2, &[s2 / d, -c2 / d, -s1 / d, c1 / d]));
    }
    m.clone().try_inverse().ok_or(Error::Degenerate { first: 0, second: 1, angle: 0.0, epsilon: 0.0 })
}

fn projectors(m: &DMatrix<f64>, inv: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..m.ncols()).map(|j| m.column(j) * inv.row(j)).collect()
}

pub fn min_line_angle(m: &DMatrix<f64>) -> (f64, usize, usize) {
    let n = m.ncols();
    let mut best = (f64::INFINITY, 0, 1);
    for a in 0..n {
        for b in a + 1..n {
            let dot = m.column(a).dot(&m.column(b)).abs() / (m.column(a).norm() * m.column(b).norm());
            let ang = dot.min(1.0).acos();
            if ang < best.0 {
                best = (ang, a, b);
            }
        }
    }
    best
}

pub fn theta_to_mixing(theta: &AngleVector) -> Result<MixingSpec> {
    theta_to_mixing_with(theta, DEFAULT_EPSILON)
}

pub fn theta_to_mixing_with(theta: &AngleVector, epsilon: f64) -> Result<MixingSpec> {
    let mixing = raw_mixing(&theta.angles, theta.n);
    let (angle, first, second) = min_line_angle(&mixing);
    if angle < epsilon {
        return Err(Error::Degenerate { first, second, angle, epsilon });
    }
    let inverse = invert(&mixing, &theta.angles)?;
    let projectors = projectors(&mixing, &inverse);
    Ok(MixingSpec { theta: theta.clone(), mixing, inverse, projectors })
}

/// Canonical angles of an arbitrary invertible matrix: columns are
/// normalized, sign-flipped so the last nonzero entry is positive, converted
/// to hyperspherical angles and sorted.
pub fn mixing_to_theta(m: &DMatrix<f64>) -> Result<AngleVector> {
    let n = m.nrows();
    if m.ncols() != n || n < 2 {
        return Err(Error::UnsupportedDimension { n, what: "mixing matrix must be square, n >= 2" });
    }
    let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let norm = m.column(j).norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidAngles(format!("column {j} has zero or non-finite norm")));
        }
        let mut x: Vec<f64> = m.column(j).iter().map(|v| v / norm).collect();
        if let Some(last) = x.iter().rev().find(|v| v.abs() > NORM_TOL) {
            if *last < 0.0 {
                x.iter_mut().for_each(|v| *v = -*v);
            }
        }
        blocks.push(sphere_angles(&x));
    }
    blocks.sort_by(|a, b| lex_cmp(a, b));
    AngleVector::new(blocks.concat(), n)
}

/// Hyperspherical angles of a column without sign normalization; the last
/// angle lies in (−π, π].
pub fn column_angles(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let x: Vec<f64> = x.iter().map(|v| v / norm).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n - 1);
    for i in 0..n - 2 {
        let tail = x[i + 1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push(tail.atan2(x[i]));
    }
    out.push(x[n - 1].atan2(x[n - 2]));
    out
}

fn sphere_angles(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n - 1);
    for i in 0..n - 2 {
        let tail = x[i + 1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push(tail.atan2(x[i]));
    }
    let mut last = x[n - 1].atan2(x[n - 2]);
    // Tiny negative trailing entries can survive the sign flip.
    if last < 0.0 {
        last = 0.0;
    }
    if last >= std::f64::consts::PI {
        last = 0.0;
    }
    out.push(last);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    Analytic,
    Numeric,
}

/// ∂vec(Pⱼ)/∂θ' for every j, vec taken column-major.
#[derive(Debug, Clone)]
pub struct ProjectorJacobian {
    pub d_vec_p: Vec<DMatrix<f64>>,
}

pub fn projector_jacobian(spec: &MixingSpec, mode: JacobianMode) -> Result<ProjectorJacobian> {
    match mode {
        JacobianMode::Analytic => analytic_jacobian(spec),
        JacobianMode::Numeric => numeric_jacobian(spec),
    }
}

fn analytic_jacobian(spec: &MixingSpec) -> Result<ProjectorJacobian> {
    if spec.n() != 2 {
        return Err(Error::UnsupportedDimension { n: spec.n(), what: "analytic projector Jacobian is n = 2 only" });
    }
    let a = spec.theta.angles();
    let (s1, c1) = a[0].sin_cos();
    let (s2, c2) = a[1].sin_cos();
    let d2 = (a[1] - a[0]).sin().powi(2);
    #[rustfmt::skip]
    let d1 = DMatrix::from_row_slice(4, 2, &[
        s2 * c2, -s1 * c1,
        s2 * s2, -s1 * s1,
        -c2 * c2, c1 * c1,
        -s2 * c2, s1 * c1,
    ]) / d2;
    let d2m = -&d1;
    Ok(ProjectorJacobian { d_vec_p: vec![d1, d2m] })
}

fn numeric_jacobian(spec: &MixingSpec) -> Result<ProjectorJacobian> {
    let n = spec.n();
    let base = spec.theta.angles().to_vec();
    let dim = base.len();
    let mut out = vec![DMatrix::zeros(n * n, dim); n];
    for k in 0..dim {
        let h = 1e-6 * base[k].abs().max(1.0);
        let mut up = base.clone();
        let mut dn = base.clone();
        up[k] += h;
        dn[k] -= h;
        let pu = MixingSpec::from_raw(&up, n)?;
        let pd = MixingSpec::from_raw(&dn, n)?;
        for j in 0..n {
            let diff = (&pu.projectors[j] - &pd.projectors[j]) / (2.0 * h);
            for (idx, v) in diff.iter().enumerate() {
                out[j][(idx, k)] = *v;
            }
        }
    }
    Ok(ProjectorJacobian { d_vec_p: out })
}

/// ∂vec(Θ)/∂θ'. Column block j of Θ depends only on angle block j.
pub fn mixing_jacobian(theta: &AngleVector) -> DMatrix<f64> {
    let n = theta.n;
    let k = n - 1;
    let mut j_mat = DMatrix::zeros(n * n, n * k);
    if n == 2 {
        for j in 0..2 {
            let (s, c) = theta.angles[j].sin_cos();
            j_mat[(2 * j, j)] = -s;
            j_mat[(2 * j + 1, j)] = c;
        }
        return j_mat;
    }
    for j in 0..n {
        for i in 0..k {
            let mut up = theta.block(j).to_vec();
            let mut dn = up.clone();
            let h = 1e-6 * up[i].abs().max(1.0);
            up[i] += h;
            dn[i] -= h;
            let (pu, pd) = (sphere_point(&up), sphere_point(&dn));
            for r in 0..n {
                j_mat[(j * n + r, j * k + i)] = (pu[r] - pd[r]) / (2.0 * h);
            }
        }
    }
    j_mat
}

#[derive(Debug, Clone)]
pub struct Alignment {
    /// Estimate with columns permuted and sign-flipped to match the reference.
    pub aligned: DMatrix<f64>,
    /// aligned column j is estimate column perm[j] times signs[j].
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
    pub distance: f64,
    /// Canonical spec of the aligned matrix, if its columns already satisfy
    /// the canonical sign and ordering rules.
    pub spec: Option<MixingSpec>,
}

pub fn align(estimate: &MixingSpec, reference: &MixingSpec) -> Alignment {
    align_matrix(&estimate.mixing, &reference.mixing)
}

/// Frobenius-optimal column permutation and sign flip. Given a permutation
/// the best sign of each column is the sign of its inner product with the
/// reference column, so searching all n! permutations covers all n!·2ⁿ
/// candidates. Beyond n = 6 a greedy matching is used.
pub fn align_matrix(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Alignment {
    let n = estimate.ncols();
    assert_eq!(n, reference.ncols(), "alignment needs equal dimensions");
    // score[(a, b)]: cost of putting estimate column a at slot b with best sign.
    let mut dots = DMatrix::zeros(n, n);
    let mut cost = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let d = estimate.column(a).dot(&reference.column(b));
            dots[(a, b)] = d;
            let base = estimate.column(a).norm_squared() + reference.column(b).norm_squared();
            cost[(a, b)] = base - 2.0 * d.abs();
        }
    }
    let perm = if n <= 6 { best_permutation(&cost) } else { greedy_permutation(&cost) };
    let signs: Vec<f64> = (0..n).map(|b| if dots[(perm[b], b)] < 0.0 { -1.0 } else { 1.0 }).collect();
    let mut aligned = DMatrix::zeros(n, n);
    for b in 0..n {
        aligned.set_column(b, &(estimate.column(perm[b]) * signs[b]));
    }
    let distance = (&aligned - reference).norm();
    let spec = canonical_spec_of(&aligned);
    Alignment { aligned, perm, signs, distance, spec }
}

fn canonical_spec_of(m: &DMatrix<f64>) -> Option<MixingSpec> {
    let theta = mixing_to_theta(m).ok()?;
    let rebuilt = raw_mixing(&theta.angles, theta.n);
    if (&rebuilt - m).norm() > 1e-9 * m.norm().max(1.0) {
        return None;
    }
    theta_to_mixing_with(&theta, 0.0).ok()
}

fn best_permutation(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // perm[b] = estimate column placed at slot b.
    let mut p: Vec<usize> = (0..n).collect();
    let mut best = p.clone();
    let eval = |p: &[usize]| (0..n).map(|b| cost[(p[b], b)]).sum::<f64>();
    let mut best_cost = eval(&p);
    // Heap's algorithm, iterative.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            let v = eval(&p);
            if v < best_cost - 1e-15 {
                best_cost = v;
                best = p.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn greedy_permutation(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut perm = vec![usize::MAX; n];
    let mut used_a = vec![false; n];
    let mut used_b = vec![false; n];
    for _ in 0..n {
        let mut best = (f64::INFINITY, 0, 0);
        for a in (0..n).filter(|&a| !used_a[a]) {
            for b in (0..n).filter(|&b| !used_b[b]) {
                if cost[(a, b)] < best.0 {
                    best = (cost[(a, b)], a, b);
                }
            }
        }
        used_a[best.1] = true;
        used_b[best.2] = true;
        perm[best.2] = best.1;
    }
    perm
}

/// Root sum of squared per-column line angles between the aligned estimate
/// and the reference.
pub fn angular_error(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let al = align_matrix(estimate, reference);
    (0..reference.ncols())
        .map(|j| {
            let x = al.aligned.column(j);
            let y = reference.column(j);
            let c = (x.dot(&y) / (x.norm() * y.norm())).abs().min(1.0);
            c.acos().powi(2)
        })
        .sum::<f64>()
        .sqrt()
}
