//! SVAR front end: VAR by OLS with an intercept, AIC lag choice, residuals
//! as sensors, impulse responses Ψ_h = A(L)⁻¹Θ and recursive bootstrap bands.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecf::{PanelSource, SensorPanel};
use crate::error::{Error, Result};
use crate::estimator::{efficient_estimate, estimate_warm, EstimateResult, EstimatorConfig};
use crate::inference::{percentile_bands, SpecTestResult, MAX_FAILURE_SHARE, MIN_BOOTSTRAP_DRAWS};
use crate::param::{align_matrix, theta_to_mixing, AngleVector, MixingSpec};
use crate::rng::{derive_seed, stream, TAG_BOOTSTRAP, TAG_PANEL};
use crate::simlab::SourceKind;

/// Regressor sets whose centered columns carry less variation than this
/// (relative to the data) are treated as constant.
const CONSTANT_TOL: f64 = 1e-12;
/// Smallest accepted ratio of extreme singular values of the centered regressors.
const COLLINEARITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagChoice {
    Fixed(usize),
    Auto,
}

impl std::str::FromStr for LagChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LagChoice::Auto);
        }
        match s.parse::<usize>() {
            Ok(p) if p > 0 => Ok(LagChoice::Fixed(p)),
            _ => Err(Error::Config(format!("lags must be 'auto' or a positive integer, got '{s}'"))),
        }
    }
}

/// A multivariate series with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub names: Vec<String>,
    pub dates: Option<Vec<String>>,
    /// T × n.
    pub data: DMatrix<f64>,
}

impl Series {
    pub fn new(names: Vec<String>, data: DMatrix<f64>) -> Self {
        Self { names, dates: None, data }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = Vec::new();
        if self.dates.is_some() {
            header.push("date".into());
        }
        header.extend(self.names.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for t in 0..self.data.nrows() {
            let mut row: Vec<String> = Vec::new();
            if let Some(d) = &self.dates {
                row.push(d[t].clone());
            }
            row.extend(self.data.row(t).iter().map(|v| v.to_string()));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Parses the series CSV: header row, one row per period, optional leading
/// "date" column, no missing values. Lines starting with `#` are skipped.
pub fn parse_series_csv(text: &str) -> Result<Series> {
    let mut rd =
        csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    if header.is_empty() {
        return Err(Error::Parse { line: 1, message: "empty header".into() });
    }
    let has_date = header[0].eq_ignore_ascii_case("date");
    let names: Vec<String> = header.iter().skip(usize::from(has_date)).map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::Parse { line: 1, message: "no series columns".into() });
    }
    let n = names.len();
    let mut values = Vec::new();
    let mut dates = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != n + usize::from(has_date) {
            return Err(Error::Parse { line, message: format!("expected {} fields, found {}", n + usize::from(has_date), rec.len()) });
        }
        let mut fields = rec.iter();
        if has_date {
            dates.push(fields.next().unwrap_or_default().to_string());
        }
        for (k, f) in fields.enumerate() {
            if f.is_empty() {
                return Err(Error::Parse { line, message: format!("missing value in column '{}'", names[k]) });
            }
            let v: f64 = f.parse().map_err(|_| Error::Parse { line, message: format!("'{f}' is not a number in column '{}'", names[k]) })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite value in column '{}'", names[k]) });
            }
            values.push(v);
        }
    }
    let t = values.len() / n;
    if t == 0 {
        return Err(Error::Parse { line: 2, message: "no data rows".into() });
    }
    Ok(Series { names, dates: has_date.then_some(dates), data: DMatrix::from_row_slice(t, n, &values) })
}

pub fn read_series_csv(path: &Path) -> Result<Series> {
    parse_series_csv(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LagCandidate {
    pub p: usize,
    pub log_likelihood: f64,
    pub aic: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarModel {
    pub lag_order: usize,
    /// A_1..A_p, each n × n.
    pub coefficients: Vec<DMatrix<f64>>,
    pub intercept: DVector<f64>,
    /// One row w_t = (1, y'_{t−1}, …, y'_{t−p}) per residual.
    pub regressors: DMatrix<f64>,
    /// Stacked coefficients, (1 + np) × n; column i is equation i.
    pub beta: DMatrix<f64>,
    pub residuals: SensorPanel,
    pub sigma: DMatrix<f64>,
    pub log_likelihood: f64,
    pub aic: f64,
    /// Candidates compared on the common sample (auto mode only).
    pub candidates: Vec<LagCandidate>,
    pub spectral_radius: f64,
    pub warnings: Vec<String>,
}

impl VarModel {
    pub fn n(&self) -> usize {
        self.intercept.len()
    }

    /// Companion matrix of the lag polynomial.
    pub fn companion(&self) -> DMatrix<f64> {
        companion(&self.coefficients)
    }
}

pub fn companion(a: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = a[0].nrows();
    let p = a.len();
    let mut c = DMatrix::zeros(n * p, n * p);
    for (k, ak) in a.iter().enumerate() {
        c.view_mut((0, k * n), (n, n)).copy_from(ak);
    }
    for i in n..n * p {
        c[(i, i - n)] = 1.0;
    }
    c
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

struct OlsFit {
    beta: DMatrix<f64>,
    residuals: DMatrix<f64>,
    regressors: DMatrix<f64>,
    sigma: DMatrix<f64>,
    constant_regressors: bool,
}

/// Rows `start..T` of y regressed on an intercept and p lags.
fn ols(y: &DMatrix<f64>, p: usize, start: usize) -> Result<OlsFit> {
    let (t, n) = y.shape();
    let rows = t - start;
    let k = n * p;
    let mut lags = DMatrix::zeros(rows, k);
    let mut lhs = DMatrix::zeros(rows, n);
    for r in 0..rows {
        let tt = start + r;
        lhs.set_row(r, &y.row(tt));
        for l in 1..=p {
            lags.view_mut((r, (l - 1) * n), (1, n)).copy_from(&y.row(tt - l));
        }
    }
    // Centering absorbs the intercept and keeps the solve well conditioned.
    let lag_mean = DVector::from_iterator(k, lags.column_iter().map(|c| c.mean()));
    let lhs_mean = DVector::from_iterator(n, lhs.column_iter().map(|c| c.mean()));
    let mut xc = lags.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-lag_mean[j]);
    }
    let mut yc = lhs.clone();
    for (j, mut col) in yc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-lhs_mean[j]);
    }
    let scale = y.amax().max(1.0) * (rows as f64).sqrt();
    let svd = xc.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let constant_regressors = smax <= CONSTANT_TOL * scale;
    let a_stack = if constant_regressors {
        // No variation to explain: the minimum-norm solution puts all weight
        // on the intercept.
        DMatrix::zeros(k, n)
    } else {
        if smin < COLLINEARITY_TOL * smax {
            return Err(Error::Collinearity);
        }
        svd.solve(&yc, 0.0).map_err(|_| Error::Collinearity)?
    };
    let intercept = lhs_mean - a_stack.transpose() * lag_mean;
    let mut beta = DMatrix::zeros(1 + k, n);
    beta.set_row(0, &intercept.transpose());
    beta.view_mut((1, 0), (k, n)).copy_from(&a_stack);
    let mut regressors = DMatrix::from_element(rows, 1 + k, 1.0);
    regressors.view_mut((0, 1), (rows, k)).copy_from(&lags);
    let residuals = &lhs - &regressors * &beta;
    let sigma = residuals.tr_mul(&residuals) / rows as f64;
    Ok(OlsFit { beta, residuals, regressors, sigma, constant_regressors })
}

fn log_likelihood(sigma: &DMatrix<f64>, rows: usize) -> f64 {
    let n = sigma.nrows() as f64;
    let logdet = sigma.determinant().max(f64::MIN_POSITIVE).ln();
    -0.5 * rows as f64 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + n)
}

fn aic(sigma: &DMatrix<f64>, p: usize, rows: usize) -> f64 {
    let n = sigma.nrows() as f64;
    sigma.determinant().max(f64::MIN_POSITIVE).ln() + 2.0 * (p as f64 * n * n + n) / rows as f64
}

/// OLS VAR with intercept. In auto mode every p in 1..=p_max is fitted on
/// the common sample starting at p_max, the AIC minimizer is kept and then
/// refitted on the longest sample its lag order allows.
pub fn fit_var(data: &DMatrix<f64>, lags: LagChoice, p_max: usize) -> Result<VarModel> {
    let (t, n) = data.shape();
    if n < 2 {
        return Err(Error::InvalidPanel(format!("a VAR needs at least 2 series, got {n}")));
    }
    let p_cap = match lags {
        LagChoice::Fixed(p) => p,
        LagChoice::Auto => p_max,
    };
    if p_cap == 0 {
        return Err(Error::Config("lag order must be positive".into()));
    }
    if t <= n * p_cap + p_cap + 10 {
        return Err(Error::InvalidPanel(format!(
            "{t} observations are too few for {n} series with up to {p_cap} lags (need more than {})",
            n * p_cap + p_cap + 10
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPanel("series contain non-finite values".into()));
    }
    let mut candidates = Vec::new();
    let p = match lags {
        LagChoice::Fixed(p) => p,
        LagChoice::Auto => {
            let rows = t - p_max;
            for p in 1..=p_max {
                let fit = ols(data, p, p_max)?;
                candidates.push(LagCandidate { p, log_likelihood: log_likelihood(&fit.sigma, rows), aic: aic(&fit.sigma, p, rows) });
            }
            candidates.iter().min_by(|a, b| a.aic.total_cmp(&b.aic)).map(|c| c.p).unwrap_or(1)
        }
    };
    let fit = ols(data, p, p)?;
    let rows = t - p;
    let coefficients: Vec<DMatrix<f64>> =
        (0..p).map(|l| fit.beta.view((1 + l * n, 0), (n, n)).transpose()).collect();
    let intercept = fit.beta.row(0).transpose();
    let radius = spectral_radius(&companion(&coefficients));
    let mut warnings = Vec::new();
    if radius >= 1.0 {
        warnings.push(format!("companion spectral radius {radius:.4} is not below 1; the VAR is not stable"));
    }
    if fit.constant_regressors {
        warnings.push("lagged regressors are constant; lag coefficients set to zero".into());
    }
    Ok(VarModel {
        lag_order: p,
        coefficients,
        intercept,
        regressors: fit.regressors,
        beta: fit.beta,
        residuals: SensorPanel::new_unchecked(fit.residuals, PanelSource::FirstStageResiduals),
        log_likelihood: log_likelihood(&fit.sigma, rows),
        aic: aic(&fit.sigma, p, rows),
        sigma: fit.sigma,
        candidates,
        spectral_radius: radius,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrfResult {
    /// Ψ_0..Ψ_H; entry (i, j) is the response of variable i to shock j.
    pub psi: Vec<DMatrix<f64>>,
    pub variables: Vec<String>,
    pub shocks: Vec<String>,
    pub level: Option<f64>,
    pub lo: Option<Vec<DMatrix<f64>>>,
    pub hi: Option<Vec<DMatrix<f64>>>,
    pub bootstrap_draws: usize,
    pub bootstrap_failed: usize,
}

impl IrfResult {
    pub fn horizon(&self) -> usize {
        self.psi.len() - 1
    }

    /// Columns: horizon, response_var, shock, point, lo, hi. Bands are
    /// empty when no bootstrap ran.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["horizon", "response_var", "shock", "point", "lo", "hi"]).expect("in-memory write");
        let n = self.variables.len();
        for (h, m) in self.psi.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    let band = |b: &Option<Vec<DMatrix<f64>>>| b.as_ref().map_or(String::new(), |v| v[h][(i, j)].to_string());
                    w.write_record([
                        h.to_string(),
                        self.variables[i].clone(),
                        self.shocks[j].clone(),
                        m[(i, j)].to_string(),
                        band(&self.lo),
                        band(&self.hi),
                    ])
                    .expect("in-memory write");
                }
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Ψ_0 = Θ, Ψ_h = Σ_{k ≤ min(h, p)} A_k Ψ_{h−k}.
pub fn irf_matrices(coefficients: &[DMatrix<f64>], mixing: &DMatrix<f64>, horizon: usize) -> Vec<DMatrix<f64>> {
    let mut psi: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);
    psi.push(mixing.clone());
    for h in 1..=horizon {
        let mut m = DMatrix::zeros(mixing.nrows(), mixing.ncols());
        for k in 1..=h.min(coefficients.len()) {
            m += &coefficients[k - 1] * &psi[h - k];
        }
        psi.push(m);
    }
    psi
}

pub fn irf(model: &VarModel, mixing: &MixingSpec, horizon: usize, variables: &[String]) -> IrfResult {
    let n = model.n();
    let variables = if variables.len() == n { variables.to_vec() } else { (1..=n).map(|i| format!("y{i}")).collect() };
    IrfResult {
        psi: irf_matrices(&model.coefficients, &mixing.mixing, horizon),
        variables,
        shocks: (1..=n).map(|j| format!("shock{j}")).collect(),
        level: None,
        lo: None,
        hi: None,
        bootstrap_draws: 0,
        bootstrap_failed: 0,
    }
}

/// Simulates y_t = c + Σ A_k y_{t−k} + η_t from the given initial rows.
pub fn simulate_var(
    intercept: &DVector<f64>,
    coefficients: &[DMatrix<f64>],
    initial: &DMatrix<f64>,
    shocks: &DMatrix<f64>,
) -> DMatrix<f64> {
    let p = coefficients.len();
    let n = intercept.len();
    let t = initial.nrows() + shocks.nrows();
    let mut y = DMatrix::zeros(t, n);
    y.view_mut((0, 0), (initial.nrows(), n)).copy_from(initial);
    for tt in initial.nrows()..t {
        let mut v = intercept.clone() + shocks.row(tt - initial.nrows()).transpose();
        for k in 1..=p.min(tt) {
            v += &coefficients[k - 1] * y.row(tt - k).transpose();
        }
        y.set_row(tt, &v.transpose());
    }
    y
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvarConfig {
    pub lags: LagChoice,
    pub p_max: usize,
    pub horizon: usize,
    /// Recursive bootstrap draws; 0 skips the bands.
    pub bootstrap: usize,
    pub level: f64,
    pub estimator: EstimatorConfig,
}

impl Default for SvarConfig {
    fn default() -> Self {
        Self { lags: LagChoice::Auto, p_max: 4, horizon: 10, bootstrap: 500, level: 0.90, estimator: EstimatorConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvarRun {
    pub model: VarModel,
    pub estimate: EstimateResult,
    pub irf: IrfResult,
    pub spec_test: Option<SpecTestResult>,
    /// Sample variance of each recovered shock ε̂ = Θ̂⁻¹η̂.
    pub shock_variances: Vec<f64>,
    /// Choices the method leaves open, recorded with every run.
    pub notes: Vec<String>,
}

pub const PIPELINE_NOTES: [&str; 3] = [
    "VAR estimated with an intercept",
    "bootstrap paths start from the first p observed rows and resample VAR residuals with replacement",
    "lag order held fixed across bootstrap draws",
];

/// Recursive-design bootstrap of IRF bands. Each draw rebuilds a path from
/// resampled residuals, refits the VAR at the same lag order, re-estimates
/// Θ from the point estimate and aligns it to Θ̂.
pub fn bootstrap_irf(
    data: &DMatrix<f64>,
    model: &VarModel,
    point: &EstimateResult,
    config: &SvarConfig,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, usize)> {
    let draws = config.bootstrap;
    if draws < MIN_BOOTSTRAP_DRAWS {
        return Err(Error::Config(format!("bootstrap needs at least {MIN_BOOTSTRAP_DRAWS} draws, got {draws}")));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {}", config.level)));
    }
    let p = model.lag_order;
    let n = model.n();
    let resid = model.residuals.data();
    let rows = resid.nrows();
    let initial = data.rows(0, p).into_owned();
    let reference = &point.mixing.mixing;
    let seed = config.estimator.seed;
    let outcomes: Vec<Option<Vec<f64>>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream(seed, &[TAG_BOOTSTRAP, d as u64]);
            let idx: Vec<usize> = (0..rows).map(|_| rng.random_range(0..rows)).collect();
            let shocks = resid.select_rows(&idx);
            let path = simulate_var(&model.intercept, &model.coefficients, &initial, &shocks);
            let refit = fit_var(&path, LagChoice::Fixed(p), p).ok()?;
            let cfg = EstimatorConfig {
                inference: false,
                refine_starts: 1,
                seed: derive_seed(seed, &[TAG_BOOTSTRAP, d as u64, 1]),
                ..config.estimator.clone()
            };
            let est = estimate_warm(&refit.residuals, &cfg, &point.theta_hat).ok()?;
            let aligned = align_matrix(&est.mixing.mixing, reference).aligned;
            let psi = irf_matrices(&refit.coefficients, &aligned, config.horizon);
            Some(psi.iter().flat_map(|m| m.iter().copied().collect::<Vec<_>>()).collect())
        })
        .collect();
    let ok: Vec<Vec<f64>> = outcomes.into_iter().flatten().collect();
    let failed = draws - ok.len();
    if failed as f64 > MAX_FAILURE_SHARE * draws as f64 {
        return Err(Error::Bootstrap { failed, draws });
    }
    let (lo, hi) = percentile_bands(&ok, config.level);
    let unflatten = |v: &[f64]| -> Vec<DMatrix<f64>> {
        v.chunks(n * n).map(|c| DMatrix::from_column_slice(n, n, c)).collect()
    };
    Ok((unflatten(&lo), unflatten(&hi), failed))
}

pub fn svar_from_series(series: &Series, config: &SvarConfig) -> Result<SvarRun> {
    let model = fit_var(&series.data, config.lags, config.p_max)?;
    let estimate = efficient_estimate(&model.residuals, &config.estimator)?;
    let mut irf = irf(&model, &estimate.mixing, config.horizon, &series.names);
    if config.bootstrap > 0 {
        let (lo, hi, failed) = bootstrap_irf(&series.data, &model, &estimate, config)?;
        irf.level = Some(config.level);
        irf.lo = Some(lo);
        irf.hi = Some(hi);
        irf.bootstrap_draws = config.bootstrap;
        irf.bootstrap_failed = failed;
    }
    let shocks = model.residuals.unmix(&estimate.mixing);
    let shock_variances = shocks
        .column_iter()
        .map(|c| {
            let m = c.mean();
            c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64
        })
        .collect();
    Ok(SvarRun {
        spec_test: estimate.spec_test.clone(),
        model,
        estimate,
        irf,
        shock_variances,
        notes: PIPELINE_NOTES.iter().map(|s| s.to_string()).collect(),
    })
}

pub fn svar_pipeline(csv_path: &Path, config: &SvarConfig) -> Result<SvarRun> {
    svar_from_series(&read_series_csv(csv_path)?, config)
}

/// Synthetic VAR(1) used as the bundled fixture.
#[derive(Debug, Clone)]
pub struct VarFixture {
    pub intercept: DVector<f64>,
    pub a1: DMatrix<f64>,
    pub theta: AngleVector,
    pub kind: SourceKind,
    /// Scale of a hidden third shock loading on both sources.
    pub common_shock: Option<f64>,
}

impl Default for VarFixture {
    fn default() -> Self {
        Self {
            intercept: DVector::from_vec(vec![0.2, -0.1]),
            a1: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]),
            theta: AngleVector::n2(std::f64::consts::FRAC_PI_4, 2.0 * std::f64::consts::FRAC_PI_3).expect("valid angles"),
            kind: SourceKind::Uniform,
            common_shock: None,
        }
    }
}

impl VarFixture {
    pub fn mixing(&self) -> MixingSpec {
        theta_to_mixing(&self.theta).expect("fixture angles are well separated")
    }

    /// Structural shocks and the series they drive. A burn-in of 100 periods
    /// from zero is discarded.
    pub fn generate(&self, t: usize, seed: u64) -> (DMatrix<f64>, Series) {
        const BURN: usize = 100;
        let dgp = crate::simlab::SourceDgp { kind: self.kind.clone(), common_shock: self.common_shock };
        let eps = crate::simlab::generate_sources(&dgp, 2, t + BURN, derive_seed(seed, &[TAG_PANEL]));
        let eta = &eps * self.mixing().mixing.transpose();
        let y = simulate_var(&self.intercept, std::slice::from_ref(&self.a1), &DMatrix::zeros(1, 2), &eta.rows(1, t + BURN - 1).into_owned());
        let y = y.rows(BURN, t).into_owned();
        let eta = eta.rows(BURN, t).into_owned();
        (eta, Series::new(vec!["y1".into(), "y2".into()], y))
    }
}
