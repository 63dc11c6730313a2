//! Two-stage estimation: a consistent first stage under flat weighting,
//! then minimization of the regularized efficient objective with the kernel
//! held at the first-stage point.
//!
//! The objective depends on θ only through the projectors, which do not
//! change when a column flips sign or columns are permuted. The simplex
//! therefore runs on unconstrained angles and the minimizer is mapped to
//! the canonical representative afterwards. Points violating
//! ε-invertibility evaluate to +∞.

use std::borrow::Cow;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cgmm::grid::default_nodes;
use crate::cgmm::{
    make_alpha, summarize, ClosedForm, GridEngine, GridKernel, MomentForm, MomentKernel, RegularizationPolicy,
    Spectral, SpectrumSummary, Subsample,
};
use crate::ecf::{SensorPanel, DEFAULT_TRIM};
use crate::error::{Error, Result};
use crate::inference::{self, SpecTestResult, VarianceReport};
use crate::optim::{nelder_mead, SimplexOptions};
use crate::normality::normality_p_value;
use crate::param::{min_line_angle, raw_mixing, theta_to_mixing_with, AngleVector, MixingSpec, DEFAULT_EPSILON};
use crate::rng::{stream, TAG_STARTS};

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

/// Normality is not rejected at this level when flagging Gaussian sources.
pub const NORMALITY_LEVEL: f64 = 0.05;

/// Grid spread below which the first-stage objective counts as flat.
pub const FLAT_SPREAD: f64 = 1e-3;
/// Same check scaled by T, so that flatness is judged relative to sampling noise.
pub const FLAT_SPREAD_T: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Exact Gaussian integrals over exponential atoms; cost O(T²R²).
    ClosedForm,
    /// Tensor Gauss–Hermite grid; required by the log form.
    Quadrature,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" | "closed_form" | "closed-form" => Ok(Backend::ClosedForm),
            "quadrature" | "grid" => Ok(Backend::Quadrature),
            other => Err(Error::Config(format!("unknown backend '{other}' (closed-form|quadrature)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub form: MomentForm,
    pub backend: Backend,
    pub stage1_grid_resolution: f64,
    pub refine_starts: usize,
    pub simplex_tolerance: f64,
    pub max_iterations: usize,
    pub regularization: RegularizationPolicy,
    /// Random tuple draws R for the closed-form backend; None means min(100, T).
    pub subsample: Option<usize>,
    pub seed: u64,
    pub epsilon: f64,
    pub trim: f64,
    /// Gauss–Hermite nodes per axis; None picks a dimension-dependent default.
    pub quadrature_nodes: Option<usize>,
    pub continuous_update: bool,
    /// Compute variance and the specification test.
    pub inference: bool,
    /// Divide the panel by one common scale before estimating. Angles are
    /// unchanged by a common rescaling; the Gaussian reference measure is not.
    #[serde(default = "yes")]
    pub standardize: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            form: MomentForm::Level,
            backend: Backend::Quadrature,
            stage1_grid_resolution: std::f64::consts::PI / 24.0,
            refine_starts: 3,
            simplex_tolerance: 1e-6,
            max_iterations: 500,
            regularization: RegularizationPolicy::default(),
            subsample: None,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            trim: DEFAULT_TRIM,
            quadrature_nodes: None,
            continuous_update: true,
            inference: true,
            standardize: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let h = self.stage1_grid_resolution;
        if !(h > 0.0) || std::f64::consts::PI / h < 8.0 - 1e-9 {
            return Err(Error::Config(format!("grid resolution {h} must split (0, pi) into at least 8 cells")));
        }
        if self.refine_starts == 0 || self.max_iterations == 0 {
            return Err(Error::Config("refine_starts and max_iterations must be positive".into()));
        }
        if !(self.simplex_tolerance > 0.0) {
            return Err(Error::Config("simplex tolerance must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.trim > 0.0 && self.trim < 1.0) {
            return Err(Error::Config("trim must lie in (0, 1)".into()));
        }
        if self.subsample == Some(0) || self.quadrature_nodes.is_some_and(|m| m < 2) {
            return Err(Error::Config("subsample draws and quadrature nodes must be positive".into()));
        }
        self.regularization.validate()
    }

    /// The log form has no closed-form path.
    pub fn effective_backend(&self) -> Backend {
        match self.form {
            MomentForm::Log => Backend::Quadrature,
            MomentForm::Level => self.backend,
        }
    }

    fn subsample_for(&self, t: usize) -> Subsample {
        match self.subsample {
            Some(r) => Subsample::Random { draws: r, seed: self.seed },
            None => Subsample::default_for(t, self.seed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub backend: Backend,
    pub form: MomentForm,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub spectrum: SpectrumSummary,
    pub trimmed_count: usize,
    pub trimmed_mass: f64,
    pub stage1_spread: f64,
    pub flat_objective: bool,
    /// Normality p-value of each recovered source.
    #[serde(default)]
    pub normality_p: Vec<f64>,
    /// Two or more recovered sources look Gaussian.
    #[serde(default)]
    pub non_identified: bool,
    pub warnings: Vec<String>,
    /// Common factor the panel was divided by.
    #[serde(default = "one")]
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta_hat: AngleVector,
    pub mixing: MixingSpec,
    /// Q*_T at θ̂, under the kernel rebuilt at θ̂ when continuously updating
    /// and under the first-stage kernel otherwise.
    pub objective_value: f64,
    pub objective_at_stage1: f64,
    pub stage1_theta: AngleVector,
    pub stage1_objective: f64,
    pub vcov_theta: Option<DMatrix<f64>>,
    #[serde(rename = "vcov_Theta")]
    pub vcov_mixing: Option<DMatrix<f64>>,
    pub variance: Option<VarianceReport>,
    pub spec_test: Option<SpecTestResult>,
    pub alpha_used: f64,
    pub diagnostics: Diagnostics,
    pub config: EstimatorConfig,
}

impl EstimateResult {
    pub fn se_theta(&self) -> Option<Vec<f64>> {
        self.vcov_theta.as_ref().map(|v| (0..v.nrows()).map(|i| v[(i, i)].max(0.0).sqrt()).collect())
    }

    pub fn se_mixing(&self) -> Option<Vec<f64>> {
        self.vcov_mixing.as_ref().map(|v| (0..v.nrows()).map(|i| v[(i, i)].max(0.0).sqrt()).collect())
    }
}

/// Either backend behind one interface.
pub enum Engine<'a> {
    Grid(GridEngine<'a>),
    Closed(ClosedForm<'a>),
}

#[derive(Debug, Clone)]
pub enum Kernel {
    Grid(GridKernel),
    Closed(MomentKernel),
}

impl Kernel {
    pub fn eigenvalues(&self) -> &[f64] {
        match self {
            Kernel::Grid(k) => k.eigenvalues(),
            Kernel::Closed(k) => k.eigenvalues(),
        }
    }

    pub fn alpha(&self, policy: &RegularizationPolicy) -> Result<f64> {
        match self {
            Kernel::Grid(k) => make_alpha(policy, k),
            Kernel::Closed(k) => make_alpha(policy, k),
        }
    }
}

impl<'a> Engine<'a> {
    pub fn new(panel: &'a SensorPanel, config: &EstimatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config.effective_backend() {
            Backend::Quadrature => {
                let nodes = config.quadrature_nodes.unwrap_or_else(|| default_nodes(panel.n()));
                Engine::Grid(GridEngine::new(panel, config.form, nodes, config.trim)?)
            }
            Backend::ClosedForm => Engine::Closed(ClosedForm::new(panel, config.subsample_for(panel.t()))?),
        })
    }

    pub fn panel(&self) -> &SensorPanel {
        match self {
            Engine::Grid(g) => g.panel(),
            Engine::Closed(c) => c.panel(),
        }
    }

    pub fn flat_objective(&self, spec: &MixingSpec) -> f64 {
        match self {
            Engine::Grid(g) => g.flat_objective(spec),
            Engine::Closed(c) => c.flat_objective(spec),
        }
    }

    pub fn kernel(&self, spec: &MixingSpec) -> Result<Kernel> {
        Ok(match self {
            Engine::Grid(g) => Kernel::Grid(g.kernel(spec)?),
            Engine::Closed(c) => Kernel::Closed(c.kernel(spec)?),
        })
    }

    pub fn objective(&self, spec: &MixingSpec, kernel: &Kernel, alpha: f64) -> f64 {
        match (self, kernel) {
            (Engine::Grid(g), Kernel::Grid(k)) => g.objective(spec, k, alpha),
            (Engine::Closed(c), Kernel::Closed(k)) => c.objective(spec, k, alpha).unwrap_or(f64::INFINITY),
            _ => panic!("kernel built by a different backend"),
        }
    }

    pub fn continuous_objective(&self, spec: &MixingSpec, policy: &RegularizationPolicy) -> Result<f64> {
        match self {
            Engine::Grid(g) => g.continuous_objective(spec, policy),
            Engine::Closed(c) => {
                let k = c.kernel(spec)?;
                let alpha = make_alpha(policy, &k)?;
                c.objective(spec, &k, alpha)
            }
        }
    }

    pub fn variance(&self, spec: &MixingSpec, kernel: &Kernel, alpha: f64) -> Result<VarianceReport> {
        match (self, kernel) {
            (Engine::Grid(g), Kernel::Grid(k)) => inference::efficient_variance_grid(g, k, spec, alpha),
            (Engine::Closed(c), Kernel::Closed(k)) => inference::efficient_variance_closed(c, k, spec, alpha),
            _ => panic!("kernel built by a different backend"),
        }
    }

    pub fn trimmed(&self, spec: &MixingSpec) -> (usize, f64) {
        match self {
            Engine::Grid(g) => g.trimmed(spec),
            Engine::Closed(_) => (0, 0.0),
        }
    }
}

/// Spec from unconstrained angles, None when ε-invertibility fails.
pub fn feasible_spec(raw: &[f64], n: usize, epsilon: f64) -> Option<MixingSpec> {
    if raw.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let (angle, _, _) = min_line_angle(&raw_mixing(raw, n));
    if angle < epsilon {
        return None;
    }
    MixingSpec::from_raw(raw, n).ok()
}

fn canonical(raw: &[f64], n: usize, epsilon: f64) -> Result<MixingSpec> {
    let theta = AngleVector::canonical_from_raw(raw, n)?;
    theta_to_mixing_with(&theta, epsilon)
}

pub struct Stage1 {
    pub theta: AngleVector,
    pub objective: f64,
    pub spread: f64,
    pub flat: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Grid search over the ordered angle region (n = 2) or seeded random
/// starts (n > 2), then simplex refinement of the best candidates.
pub fn stage1(engine: &Engine, config: &EstimatorConfig) -> Result<Stage1> {
    stage1_from(engine, config, None)
}

/// First stage; with a warm start the global search is skipped and only
/// the simplex runs from the given point.
pub fn stage1_from(engine: &Engine, config: &EstimatorConfig, warm: Option<&AngleVector>) -> Result<Stage1> {
    let panel = engine.panel();
    let n = panel.n();
    let dim = n * (n - 1);
    let h = config.stage1_grid_resolution;
    let mut candidates: Vec<(Vec<f64>, f64)> = Vec::new();
    if let Some(start) = warm {
        let raw = start.angles().to_vec();
        let v = feasible_spec(&raw, n, config.epsilon).map_or(f64::INFINITY, |s| engine.flat_objective(&s));
        candidates.push((raw, v));
    } else if n == 2 {
        let k = (std::f64::consts::PI / h).round() as usize;
        for a in 0..k {
            for b in a + 1..k {
                let raw = [a as f64 * h, b as f64 * h];
                if let Some(spec) = feasible_spec(&raw, n, config.epsilon) {
                    candidates.push((raw.to_vec(), engine.flat_objective(&spec)));
                }
            }
        }
    } else {
        let mut rng = stream(config.seed, &[TAG_STARTS, 0]);
        let count = (std::f64::consts::PI / h).powi(2).round() as usize * 2;
        for _ in 0..count {
            let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..std::f64::consts::PI)).collect();
            if let Some(spec) = feasible_spec(&raw, n, config.epsilon) {
                candidates.push((raw, engine.flat_objective(&spec)));
            }
        }
    }
    candidates.retain(|c| c.1.is_finite());
    if candidates.is_empty() {
        return Err(Error::Config(format!(
            "no feasible first-stage candidate: epsilon {} too large for the grid",
            config.epsilon
        )));
    }
    let lo = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let hi = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let spread = if warm.is_some() { f64::NAN } else { hi - lo };
    let flat = warm.is_none() && spread < FLAT_SPREAD || spread * (panel.t() as f64) < FLAT_SPREAD_T;
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1));
    let opts = SimplexOptions {
        tolerance: config.simplex_tolerance,
        max_iterations: config.max_iterations,
        initial_step: h / 2.0,
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut iterations = 0;
    let mut evaluations = candidates.len();
    for (start, _) in candidates.iter().take(config.refine_starts) {
        let r = nelder_mead(
            |x| feasible_spec(x, n, config.epsilon).map_or(f64::INFINITY, |s| engine.flat_objective(&s)),
            start,
            &opts,
        );
        iterations += r.iterations;
        evaluations += r.evaluations;
        if best.as_ref().is_none_or(|b| r.value < b.1) {
            best = Some((r.point, r.value));
        }
    }
    let (raw, objective) = best.expect("at least one start");
    let theta = AngleVector::canonical_from_raw(&raw, n)?;
    Ok(Stage1 { theta, objective, spread, flat, iterations, evaluations })
}

/// Root mean sensor variance.
pub fn common_scale(panel: &SensorPanel) -> f64 {
    let t = panel.t() as f64;
    let d = panel.data();
    let mean_var = d
        .column_iter()
        .map(|c| {
            let m = c.sum() / t;
            c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t
        })
        .sum::<f64>()
        / panel.n() as f64;
    mean_var.sqrt()
}

/// The panel the engine sees, with the factor it was divided by.
pub fn prepare<'a>(panel: &'a SensorPanel, config: &EstimatorConfig) -> (Cow<'a, SensorPanel>, f64) {
    let scale = common_scale(panel);
    if !config.standardize || !(scale > 0.0) || !scale.is_finite() {
        return (Cow::Borrowed(panel), 1.0);
    }
    let scaled = SensorPanel::new_unchecked(panel.data() / scale, panel.source());
    (Cow::Owned(scaled), scale)
}

pub fn stage1_estimate(panel: &SensorPanel, config: &EstimatorConfig) -> Result<AngleVector> {
    let (panel, _) = prepare(panel, config);
    let engine = Engine::new(&panel, config)?;
    Ok(stage1(&engine, config)?.theta)
}

pub fn efficient_estimate(panel: &SensorPanel, config: &EstimatorConfig) -> Result<EstimateResult> {
    let (panel, scale) = prepare(panel, config);
    let engine = Engine::new(&panel, config)?;
    let mut est = estimate_with(&engine, config)?;
    est.diagnostics.scale = scale;
    Ok(est)
}

/// Same pipeline on log moments evaluated on the quadrature grid.
pub fn log_form_estimate(panel: &SensorPanel, config: &EstimatorConfig) -> Result<EstimateResult> {
    let cfg = EstimatorConfig { form: MomentForm::Log, backend: Backend::Quadrature, ..config.clone() };
    efficient_estimate(panel, &cfg)
}

/// Efficient estimate whose first stage starts from `start` instead of the
/// global grid; used for bootstrap draws.
pub fn estimate_warm(panel: &SensorPanel, config: &EstimatorConfig, start: &AngleVector) -> Result<EstimateResult> {
    let (panel, scale) = prepare(panel, config);
    let engine = Engine::new(&panel, config)?;
    let mut est = estimate_from(&engine, config, Some(start))?;
    est.diagnostics.scale = scale;
    Ok(est)
}

pub fn estimate_with(engine: &Engine, config: &EstimatorConfig) -> Result<EstimateResult> {
    estimate_from(engine, config, None)
}

pub fn estimate_from(engine: &Engine, config: &EstimatorConfig, warm: Option<&AngleVector>) -> Result<EstimateResult> {
    let n = engine.panel().n();
    let s1 = stage1_from(engine, config, warm)?;
    let mut warnings = Vec::new();
    if s1.flat {
        warnings.push(format!(
            "first-stage objective nearly flat (grid spread {:.3e}); sources may be close to Gaussian and the mixing is not identified",
            s1.spread
        ));
    }
    let stage1_spec = theta_to_mixing_with(&s1.theta, config.epsilon)?;
    let kernel = engine.kernel(&stage1_spec)?;
    let alpha = kernel.alpha(&config.regularization)?;
    let objective_at_stage1 = engine.objective(&stage1_spec, &kernel, alpha);

    let opts = SimplexOptions {
        tolerance: config.simplex_tolerance,
        max_iterations: config.max_iterations,
        initial_step: 0.05,
    };
    let base = s1.theta.angles().to_vec();
    let mut starts = vec![base.clone()];
    let mut rng = stream(config.seed, &[TAG_STARTS, 1]);
    for _ in 1..config.refine_starts {
        starts.push(base.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect());
    }

    let mut stage2_iterations = 0;
    let mut evaluations = 0;
    let mut converged = false;
    let mut best: (Vec<f64>, f64) = (base.clone(), f64::INFINITY);
    for start in &starts {
        let r = if config.continuous_update {
            nelder_mead(|x| continuous_objective(engine, x, n, config), start, &opts)
        } else {
            nelder_mead(
                |x| feasible_spec(x, n, config.epsilon).map_or(f64::INFINITY, |s| engine.objective(&s, &kernel, alpha)),
                start,
                &opts,
            )
        };
        stage2_iterations += r.iterations;
        evaluations += r.evaluations;
        if r.value < best.1 {
            converged = r.converged;
            best = (r.point, r.value);
        }
    }
    if !best.1.is_finite() {
        best = (base.clone(), objective_at_stage1);
    }
    if !converged {
        warnings.push("second-stage simplex did not meet the tolerance; best point returned".into());
    }

    let mixing = canonical(&best.0, n, config.epsilon)?;
    let theta_hat = mixing.theta.clone();
    let objective_value = best.1;
    let (trimmed_count, trimmed_mass) = engine.trimmed(&mixing);
    let sources = engine.panel().unmix(&mixing);
    let normality_p: Vec<f64> = sources.column_iter().map(|c| normality_p_value(c.as_slice())).collect();
    let gaussian_like = normality_p.iter().filter(|&&p| p >= NORMALITY_LEVEL).count();
    let non_identified = gaussian_like >= 2;
    if non_identified {
        warnings.push(format!(
            "{gaussian_like} recovered sources are consistent with Gaussianity (level {NORMALITY_LEVEL}); the mixing is not identified"
        ));
    }

    let mut vcov_theta = None;
    let mut vcov_mixing = None;
    let mut variance = None;
    let mut spec_test = None;
    let mut alpha_used = alpha;
    let mut spectrum = summarize(kernel.eigenvalues(), alpha);
    if config.inference {
        match inference_at(engine, &mixing, config) {
            Ok((v, st, a, k)) => {
                vcov_mixing = Some(inference::delta_to_theta(&v.vcov, &theta_hat));
                vcov_theta = Some(v.vcov.clone());
                variance = Some(v);
                alpha_used = a;
                spectrum = summarize(k.eigenvalues(), a);
                if st.side_condition < 1.0 {
                    warnings.push(format!(
                        "specification test side condition {:.3} below 1; normal approximation doubtful",
                        st.side_condition
                    ));
                }
                spec_test = Some(st);
            }
            Err(e) => warnings.push(format!("inference unavailable: {e}")),
        }
    }

    Ok(EstimateResult {
        theta_hat,
        mixing,
        objective_value,
        objective_at_stage1,
        stage1_theta: s1.theta,
        stage1_objective: s1.objective,
        vcov_theta,
        vcov_mixing,
        variance,
        spec_test,
        alpha_used,
        diagnostics: Diagnostics {
            backend: config.effective_backend(),
            form: config.form,
            stage1_iterations: s1.iterations,
            stage2_iterations,
            evaluations: evaluations + s1.evaluations,
            converged,
            spectrum,
            trimmed_count,
            trimmed_mass,
            stage1_spread: s1.spread,
            flat_objective: s1.flat,
            normality_p,
            non_identified,
            warnings,
            scale: 1.0,
        },
        config: config.clone(),
    })
}

/// Q* with the kernel and α rebuilt at the evaluation point.
fn continuous_objective(engine: &Engine, raw: &[f64], n: usize, config: &EstimatorConfig) -> f64 {
    let Some(spec) = feasible_spec(raw, n, config.epsilon) else {
        return f64::INFINITY;
    };
    engine.continuous_objective(&spec, &config.regularization).unwrap_or(f64::INFINITY)
}

/// Kernel rebuilt at θ̂, then efficient variance and specification test.
fn inference_at(
    engine: &Engine,
    spec: &MixingSpec,
    config: &EstimatorConfig,
) -> Result<(VarianceReport, SpecTestResult, f64, Kernel)> {
    let kernel = engine.kernel(spec)?;
    let alpha = kernel.alpha(&config.regularization)?;
    let q = engine.objective(spec, &kernel, alpha);
    let t = engine.panel().t() as f64;
    let st = inference::spec_test_from(kernel.eigenvalues(), t * q, alpha)?;
    let v = engine.variance(spec, &kernel, alpha)?;
    Ok((v, st, alpha, kernel))
}
