//! Quadrature backend.
//!
//! Integrals against N(0, I) become weighted sums over a tensor
//! Gauss–Hermite grid. Every moment function here satisfies
//! f(−s) = conj f(s), so each mirror pair of nodes collapses to one real
//! feature pair (√(2w) Re f, √(2w) Im f) and all inner products become real
//! dot products. The kernel is then Z Zᵀ for the T×D feature matrix Z, and
//! its nonzero spectrum is that of the D×D matrix S = ZᵀZ/T. With (λₜ, uₜ)
//! the eigenpairs of S, the scalar product ⟨q, χₜ⟩ reduces to uₜ'z(q).
//!
//! Projected ECFs are cheap to evaluate: sPⱼη = (s'Θ·ⱼ) ε̂ⱼ with ε̂ = Θ⁻¹η, so
//! φ̂(sPⱼ) is the one-dimensional ECF of the j-th unmixed series at
//! ωⱼ = s'Θ·ⱼ. On a tensor grid the exponentials factor over axes.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use super::{kept_count, make_alpha, regularized_sum, MomentForm, RegularizationPolicy, Spectral};
use crate::ecf::{mean_exp, tracked_log_projection, LogEval, SensorPanel};
use crate::error::{Error, Result};
use crate::inference::dq_dtheta_with;
use crate::param::{projector_jacobian, AngleVector, JacobianMode, MixingSpec};
use crate::quadrature::TensorGrid;

/// Stage-2 log evaluations tolerate moduli down to trim / FLOOR_DIVISOR on
/// nodes the kernel kept.
const FLOOR_DIVISOR: f64 = 5.0;
/// Largest allowed phase step between neighbouring unwrap points.
const MAX_PHASE_STEP: f64 = std::f64::consts::FRAC_PI_2;
/// Unwrap points per unit of the largest frequency.
const UNWRAP_SEGMENTS: f64 = 16.0;

pub fn default_nodes(n: usize) -> usize {
    match n {
        2 => 14,
        _ => (200f64.powf(1.0 / n as f64).round() as usize).max(3),
    }
}

/// Projected ECF values at every half node for one θ.
#[derive(Debug, Clone)]
pub struct NodeEval {
    n: usize,
    /// psi[h·n + j] = φ̂(s_h Pⱼ).
    pub psi: Vec<Complex64>,
    /// omega[h·n + j] = s_h'Θ·ⱼ.
    pub omega: Vec<f64>,
    /// Tracked logs, None where trimmed. Log form only.
    pub log_psi: Option<Vec<Option<Complex64>>>,
    pub unmixed: DMatrix<f64>,
    /// exp(i ω_hj ε̂_tj) at index (t·H + h)·n + j, kept only when requested.
    src: Option<Vec<Complex64>>,
}

impl NodeEval {
    fn psi(&self, h: usize, j: usize) -> Complex64 {
        self.psi[h * self.n + j]
    }
}

pub struct GridEngine<'a> {
    panel: &'a SensorPanel,
    form: MomentForm,
    trim: f64,
    grid: TensorGrid,
    /// Grid indices of one node per mirror pair.
    half: Vec<usize>,
    /// Per half node, per axis node index.
    axis_idx: Vec<Vec<usize>>,
    /// Flattened a·m + axis_idx[h][a], row h.
    offsets: Vec<usize>,
    origin_weight: f64,
    /// exp(i s_h'ηₜ), T × H.
    joint_exp: DMatrix<Complex64>,
    joint: Vec<Complex64>,
    joint_log: Vec<Option<Complex64>>,
}

impl<'a> GridEngine<'a> {
    pub fn new(panel: &'a SensorPanel, form: MomentForm, nodes_per_axis: usize, trim: f64) -> Result<Self> {
        if nodes_per_axis < 2 {
            return Err(Error::Config("need at least 2 quadrature nodes per axis".into()));
        }
        if !(trim > 0.0 && trim < 1.0) {
            return Err(Error::Config(format!("trim must lie in (0, 1), got {trim}")));
        }
        let n = panel.n();
        let grid = TensorGrid::new(n, nodes_per_axis);
        let half = grid.half();
        let origin_weight = (0..grid.len()).filter(|&g| grid.mirror[g] == g).map(|g| grid.weights[g]).sum();
        let axis_idx: Vec<Vec<usize>> = half
            .iter()
            .map(|&g| {
                let mut rem = g;
                (0..n)
                    .map(|_| {
                        let i = rem % nodes_per_axis;
                        rem /= nodes_per_axis;
                        i
                    })
                    .collect()
            })
            .collect();
        let t = panel.t();
        let mut joint_exp = DMatrix::zeros(t, half.len());
        let mut joint_log = vec![None; half.len()];
        let mut joint = Vec::with_capacity(half.len());
        for (h, &g) in half.iter().enumerate() {
            let s = DVector::from_column_slice(&grid.points[g]);
            let y = panel.data() * &s;
            for tt in 0..t {
                let (sn, cs) = y[tt].sin_cos();
                joint_exp[(tt, h)] = Complex64::new(cs, sn);
            }
            joint.push(joint_exp.column(h).sum() / t as f64);
            if form == MomentForm::Log {
                joint_log[h] = match tracked_log_projection(y.as_slice(), trim) {
                    Ok(LogEval::Value(v)) => Some(v),
                    _ => None,
                };
            }
        }
        let offsets = axis_idx.iter().flat_map(|idx: &Vec<usize>| idx.iter().enumerate().map(|(a, &i)| a * nodes_per_axis + i).collect::<Vec<_>>()).collect();
        Ok(Self { panel, form, trim, grid, half, axis_idx, offsets, origin_weight, joint_exp, joint, joint_log })
    }

    pub fn form(&self) -> MomentForm {
        self.form
    }

    pub fn panel(&self) -> &SensorPanel {
        self.panel
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.grid.per_axis
    }

    pub fn half_len(&self) -> usize {
        self.half.len()
    }

    pub fn node(&self, h: usize) -> &[f64] {
        &self.grid.points[self.half[h]]
    }

    fn weight(&self, h: usize) -> f64 {
        self.grid.weights[self.half[h]]
    }

    /// Projected ECFs at all half nodes. For the log form, logs are tracked
    /// down to modulus `threshold`.
    pub fn evaluate(&self, spec: &MixingSpec, threshold: f64) -> NodeEval {
        self.evaluate_with(spec, threshold, false)
    }

    fn evaluate_with(&self, spec: &MixingSpec, threshold: f64, keep_src: bool) -> NodeEval {
        let n = spec.n();
        let m = self.grid.per_axis;
        let t = self.panel.t();
        let hlen = self.half.len();
        let unmixed = self.panel.unmix(spec);
        // Grid index i < m has axis-0 node i and zeros elsewhere.
        let nodes1d: Vec<f64> = (0..m).map(|i| self.grid.points[i][0]).collect();
        let mut omega = vec![0.0; hlen * n];
        for h in 0..hlen {
            for j in 0..n {
                omega[h * n + j] = (0..n).map(|a| nodes1d[self.axis_idx[h][a]] * spec.mixing[(a, j)]).sum();
            }
        }
        let mut acc = vec![Complex64::new(0.0, 0.0); hlen * n];
        let mut src = keep_src.then(|| vec![Complex64::new(0.0, 0.0); t * hlen * n]);
        let mut ax = vec![Complex64::new(0.0, 0.0); n * m];
        for j in 0..n {
            for tt in 0..t {
                let e = unmixed[(tt, j)];
                for a in 0..n {
                    let f = spec.mixing[(a, j)] * e;
                    // Nodes are symmetric about 0, so the upper half are conjugates.
                    for i in 0..m.div_ceil(2) {
                        let (sn, cs) = (nodes1d[i] * f).sin_cos();
                        ax[a * m + i] = Complex64::new(cs, sn);
                        ax[a * m + m - 1 - i] = Complex64::new(cs, -sn);
                    }
                }
                for (h, off) in self.offsets.chunks_exact(n).enumerate() {
                    let mut p = ax[off[0]];
                    for &o in &off[1..] {
                        p *= ax[o];
                    }
                    acc[h * n + j] += p;
                    if let Some(src) = src.as_mut() {
                        src[(tt * hlen + h) * n + j] = p;
                    }
                }
            }
        }
        let inv_t = 1.0 / t as f64;
        let psi: Vec<Complex64> = acc.into_iter().map(|z| z * inv_t).collect();
        let log_psi = (self.form == MomentForm::Log).then(|| self.unwrap_logs(&unmixed, &omega, &psi, n, threshold));
        NodeEval { n, psi, omega, log_psi, unmixed, src }
    }

    /// Continuous log of each source ECF along |ω|, walking outward from 0.
    /// Points past the first failure (small modulus or fast winding) are
    /// trimmed.
    fn unwrap_logs(&self, unmixed: &DMatrix<f64>, omega: &[f64], psi: &[Complex64], n: usize, threshold: f64) -> Vec<Option<Complex64>> {
        let hlen = self.half.len();
        let mut out = vec![None; hlen * n];
        for j in 0..n {
            let col = unmixed.column(j);
            let mut order: Vec<usize> = (0..hlen).collect();
            order.sort_by(|&a, &b| omega[a * n + j].abs().total_cmp(&omega[b * n + j].abs()));
            let wmax = order.last().map(|&h| omega[h * n + j].abs()).unwrap_or(0.0);
            let gap = (wmax / UNWRAP_SEGMENTS).max(1e-12);
            let mut prev_x = 0.0;
            let mut prev = Complex64::new(1.0, 0.0);
            let mut phase = 0.0;
            let mut failed = false;
            for &h in &order {
                let w = omega[h * n + j];
                let x = w.abs();
                let step_ok = |v: Complex64, prev: &mut Complex64, phase: &mut f64| -> bool {
                    if v.norm() < threshold {
                        return false;
                    }
                    let d = (v / *prev).arg();
                    if d.abs() > MAX_PHASE_STEP {
                        return false;
                    }
                    *phase += d;
                    *prev = v;
                    true
                };
                while !failed && x - prev_x > gap {
                    prev_x += gap;
                    let v = mean_exp(col.iter().map(|e| prev_x * e));
                    failed = !step_ok(v, &mut prev, &mut phase);
                }
                if failed {
                    break;
                }
                let val = if w < 0.0 { psi[h * n + j].conj() } else { psi[h * n + j] };
                if !step_ok(val, &mut prev, &mut phase) {
                    break;
                }
                prev_x = x;
                let l = Complex64::new(val.norm().ln(), phase);
                out[h * n + j] = Some(if w < 0.0 { l.conj() } else { l });
            }
        }
        out
    }

    /// q_T at half node h, None when trimmed.
    fn q_at(&self, ev: &NodeEval, h: usize) -> Option<Complex64> {
        let n = ev.n;
        match self.form {
            MomentForm::Level => Some(self.joint[h] - (0..n).map(|j| ev.psi(h, j)).product::<Complex64>()),
            MomentForm::Log => {
                let logs = ev.log_psi.as_ref().expect("log form evaluation");
                let mut v = self.joint_log[h]?;
                for j in 0..n {
                    v -= logs[h * n + j]?;
                }
                Some(v)
            }
        }
    }

    /// ∫|q_T|² dπ on the grid; trimmed nodes dropped with weights
    /// renormalized. Infinite when more than half the mass is trimmed.
    pub fn flat_objective(&self, spec: &MixingSpec) -> f64 {
        let ev = self.evaluate(spec, self.trim);
        let mut total = 0.0;
        let mut mass = self.origin_weight;
        for h in 0..self.half.len() {
            if let Some(q) = self.q_at(&ev, h) {
                let w = 2.0 * self.weight(h);
                total += w * q.norm_sqr();
                mass += w;
            }
        }
        if mass < 0.5 {
            return f64::INFINITY;
        }
        total / mass
    }

    /// Mass of trimmed nodes at θ.
    pub fn trimmed(&self, spec: &MixingSpec) -> (usize, f64) {
        if self.form == MomentForm::Level {
            return (0, 0.0);
        }
        let ev = self.evaluate(spec, self.trim);
        let mut count = 0;
        let mut mass = 0.0;
        for h in 0..self.half.len() {
            if self.q_at(&ev, h).is_none() {
                count += 2;
                mass += 2.0 * self.weight(h);
            }
        }
        (count, mass)
    }

    pub fn kernel(&self, spec: &MixingSpec) -> Result<GridKernel> {
        let ev = self.evaluate_with(spec, self.trim, true);
        self.kernel_from(spec, &ev)
    }

    /// Q*_T(θ) with the kernel rebuilt at θ. The moment is then the mean of
    /// the per-observation features, so one evaluation serves both.
    pub fn continuous_objective(&self, spec: &MixingSpec, policy: &RegularizationPolicy) -> Result<f64> {
        let ev = self.evaluate_with(spec, self.trim, true);
        let kernel = self.kernel_from(spec, &ev)?;
        let alpha = make_alpha(policy, &kernel)?;
        let t = kernel.features.nrows() as f64;
        let zbar = DVector::from_iterator(kernel.features.ncols(), kernel.features.column_iter().map(|c| c.sum() / t));
        Ok(kernel.objective_from_features(&zbar, alpha))
    }

    fn kernel_from(&self, spec: &MixingSpec, ev: &NodeEval) -> Result<GridKernel> {
        let n = spec.n();
        let hlen = self.half.len();
        let exps = ev.src.as_ref().expect("evaluation kept source exponentials");
        let t = self.panel.t();
        let mut nodes = Vec::new();
        let mut qs = Vec::new();
        let mut mass = self.origin_weight;
        let mut trimmed_mass = 0.0;
        for h in 0..self.half.len() {
            match self.q_at(ev, h) {
                Some(q) => {
                    nodes.push(h);
                    qs.push(q);
                    mass += 2.0 * self.weight(h);
                }
                None => trimmed_mass += 2.0 * self.weight(h),
            }
        }
        if trimmed_mass > 0.5 {
            return Err(Error::ExcessiveTrimming { percent: 100.0 * trimmed_mass });
        }
        if nodes.is_empty() {
            return Err(Error::DegenerateKernel("no quadrature node survived trimming".into()));
        }
        let scale: Vec<f64> = nodes.iter().map(|&h| (2.0 * self.weight(h) / mass).sqrt()).collect();
        let d = 2 * nodes.len();
        let mut z = DMatrix::zeros(t, d);
        let mut src = vec![Complex64::new(0.0, 0.0); n];
        for (k, &h) in nodes.iter().enumerate() {
            let psi: Vec<Complex64> = (0..n).map(|j| ev.psi(h, j)).collect();
            let loo: Vec<Complex64> = (0..n)
                .map(|j| (0..n).filter(|&m| m != j).map(|m| psi[m]).product())
                .collect();
            let prod: Complex64 = psi.iter().product();
            for tt in 0..t {
                for j in 0..n {
                    src[j] = exps[(tt * hlen + h) * n + j];
                }
                let e = self.joint_exp[(tt, h)];
                let v = match self.form {
                    MomentForm::Level => {
                        let mut v = e + (n as f64 - 1.0) * prod;
                        for j in 0..n {
                            v -= src[j] * loo[j];
                        }
                        v
                    }
                    MomentForm::Log => {
                        let mut v = qs[k] + (e / self.joint[h] - 1.0);
                        for j in 0..n {
                            v -= src[j] / psi[j] - 1.0;
                        }
                        v
                    }
                };
                z[(tt, 2 * k)] = scale[k] * v.re;
                z[(tt, 2 * k + 1)] = scale[k] * v.im;
            }
        }
        let s = z.transpose() * &z / t as f64;
        let eig = SymmetricEigen::try_new(s, 1e-14, 100_000).ok_or(Error::Eigen { condition: f64::NAN })?;
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let sorted: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let kept = kept_count(&sorted);
        let mut u = DMatrix::zeros(d, kept);
        for (c, &i) in order.iter().take(kept).enumerate() {
            u.set_column(c, &eig.eigenvectors.column(i));
        }
        Ok(GridKernel {
            nodes,
            scale,
            eigenvalues: sorted[..kept].to_vec(),
            eigenvectors: u,
            features: z,
            theta_at: spec.theta.clone(),
            t,
            trimmed_mass,
            trimmed_count: 2 * (self.half.len()) - 2 * qs.len(),
        })
    }

    /// Feature vector z(q_T(·, θ)) on the kernel's nodes; None when a kept
    /// node cannot be evaluated at θ.
    pub fn moment_features(&self, spec: &MixingSpec, kernel: &GridKernel) -> Option<DVector<f64>> {
        let ev = self.evaluate(spec, self.trim / FLOOR_DIVISOR);
        let mut z = DVector::zeros(2 * kernel.nodes.len());
        for (k, &h) in kernel.nodes.iter().enumerate() {
            let q = self.q_at(&ev, h)?;
            z[2 * k] = kernel.scale[k] * q.re;
            z[2 * k + 1] = kernel.scale[k] * q.im;
        }
        Some(z)
    }

    /// Q*_T(θ); infinite if θ cannot be evaluated on the kernel's nodes.
    pub fn objective(&self, spec: &MixingSpec, kernel: &GridKernel, alpha: f64) -> f64 {
        match self.moment_features(spec, kernel) {
            Some(z) => kernel.objective_from_features(&z, alpha),
            None => f64::INFINITY,
        }
    }

    /// Features of ∂q_T/∂θ' on the kernel's nodes, D × dim(θ).
    pub fn derivative_features(&self, spec: &MixingSpec, kernel: &GridKernel) -> Result<DMatrix<f64>> {
        let dim = spec.theta.dim();
        let mode = if spec.n() == 2 { JacobianMode::Analytic } else { JacobianMode::Numeric };
        let jac = projector_jacobian(spec, mode)?;
        let mut g = DMatrix::zeros(2 * kernel.nodes.len(), dim);
        for (k, &h) in kernel.nodes.iter().enumerate() {
            let d = dq_dtheta_with(self.panel, spec, &jac, self.node(h), self.form, 0.0)?;
            for c in 0..dim {
                g[(2 * k, c)] = kernel.scale[k] * d[c].re;
                g[(2 * k + 1, c)] = kernel.scale[k] * d[c].im;
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone)]
pub struct GridKernel {
    /// Half-node positions kept after trimming.
    pub nodes: Vec<usize>,
    /// √(2w) per kept node, weights renormalized over kept mass.
    pub scale: Vec<f64>,
    /// Kept eigenvalues of S = ZᵀZ/T (equivalently of M/T), descending.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// Per-observation features, T × D.
    pub features: DMatrix<f64>,
    pub theta_at: AngleVector,
    pub t: usize,
    pub trimmed_mass: f64,
    pub trimmed_count: usize,
}

impl Spectral for GridKernel {
    fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
    fn sample_size(&self) -> usize {
        self.t
    }
}

impl GridKernel {
    /// ⟨f, χₜ⟩ = uₜ'z(f) for every kept t.
    pub fn projections(&self, z: &DVector<f64>) -> DVector<f64> {
        self.eigenvectors.tr_mul(z)
    }

    pub fn objective_from_features(&self, z: &DVector<f64>, alpha: f64) -> f64 {
        let p: Vec<f64> = self.projections(z).iter().map(|v| v * v).collect();
        regularized_sum(&self.eigenvalues, &p, alpha)
    }

    /// The T×T kernel matrix M = Z Zᵀ; for tests and small T only.
    pub fn m_matrix(&self) -> DMatrix<f64> {
        &self.features * self.features.transpose()
    }
}
