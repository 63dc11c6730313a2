//! Monte Carlo lab: source generators, replication driver and aligned
//! bias/SD/RMSE tables.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecf::{PanelSource, SensorPanel};
use crate::error::{Error, Result};
use crate::estimator::{efficient_estimate, EstimateResult, EstimatorConfig};
use crate::inference::aligned_angles;
use crate::param::{align_matrix, angular_error, AngleVector, MixingSpec};
use crate::rng::{derive_seed, stream, TAG_COMMON, TAG_PANEL, TAG_REPLICATION};

/// Replications may fail up to this share before the run is rejected.
pub const MAX_FAILURE_SHARE: f64 = 0.05;
pub const DEFAULT_REPS: usize = 500;

type Sampler = Arc<dyn Fn(&mut ChaCha8Rng) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum SourceKind {
    Student3,
    Uniform,
    /// Binomial(20, 0.3) minus its mean 6.
    Binomial,
    /// Gamma(shape 5, scale 1/7) minus its mean 5/7.
    Gamma,
    Gaussian,
    /// User sampler; `offset` is subtracted from every draw.
    Custom { name: String, sampler: Sampler, offset: f64 },
}

impl fmt::Debug for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl SourceKind {
    pub fn name(&self) -> String {
        match self {
            SourceKind::Student3 => "student3".into(),
            SourceKind::Uniform => "uniform".into(),
            SourceKind::Binomial => "binomial".into(),
            SourceKind::Gamma => "gamma".into(),
            SourceKind::Gaussian => "gaussian".into(),
            SourceKind::Custom { name, .. } => format!("custom:{name}"),
        }
    }

    /// Centering offset subtracted from raw draws.
    pub fn offset(&self) -> f64 {
        match self {
            SourceKind::Binomial => 6.0,
            SourceKind::Gamma => 5.0 / 7.0,
            SourceKind::Custom { offset, .. } => *offset,
            _ => 0.0,
        }
    }

    /// Population variance of the centered draw, where finite and known.
    pub fn variance(&self) -> Option<f64> {
        match self {
            SourceKind::Student3 => Some(3.0),
            SourceKind::Uniform => Some(1.0 / 3.0),
            SourceKind::Binomial => Some(4.2),
            SourceKind::Gamma => Some(5.0 / 49.0),
            SourceKind::Gaussian => Some(1.0),
            SourceKind::Custom { .. } => None,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let raw = match self {
            SourceKind::Student3 => StudentT::new(3.0).expect("valid dof").sample(rng),
            SourceKind::Uniform => Uniform::new_inclusive(-1.0, 1.0).expect("valid range").sample(rng),
            SourceKind::Binomial => Binomial::new(20, 0.3).expect("valid binomial").sample(rng) as f64,
            SourceKind::Gamma => Gamma::new(5.0, 1.0 / 7.0).expect("valid gamma").sample(rng),
            SourceKind::Gaussian => StandardNormal.sample(rng),
            SourceKind::Custom { sampler, .. } => sampler(rng),
        };
        raw - self.offset()
    }
}

impl FromStr for SourceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "student3" | "t3" | "student" => Ok(SourceKind::Student3),
            "uniform" => Ok(SourceKind::Uniform),
            "binomial" => Ok(SourceKind::Binomial),
            "gamma" => Ok(SourceKind::Gamma),
            "gaussian" | "normal" => Ok(SourceKind::Gaussian),
            other => Err(Error::Config(format!(
                "unknown distribution '{other}' (expected student3, uniform, binomial, gamma or gaussian)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SourceDgp {
    pub kind: SourceKind,
    /// Scale of a hidden shock added to every source; it breaks independence
    /// so the two-source representation no longer holds.
    pub common_shock: Option<f64>,
}

impl SourceDgp {
    pub fn new(kind: SourceKind) -> Self {
        Self { kind, common_shock: None }
    }

    pub fn with_common_shock(mut self, scale: f64) -> Self {
        self.common_shock = Some(scale);
        self
    }

    pub fn describe(&self) -> String {
        match self.common_shock {
            Some(c) => format!("{}+common({c})", self.kind.name()),
            None => self.kind.name(),
        }
    }
}

/// T draws of η = Θε. Source draws come from the panel stream of `seed`,
/// the common shock from its own stream, so adding one leaves the other intact.
pub fn generate_sources(dgp: &SourceDgp, n: usize, t: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, &[TAG_PANEL]);
    let mut eps = DMatrix::zeros(t, n);
    for r in 0..t {
        for j in 0..n {
            eps[(r, j)] = dgp.kind.sample(&mut rng);
        }
    }
    if let Some(c) = dgp.common_shock {
        let mut rng = stream(seed, &[TAG_COMMON]);
        for r in 0..t {
            let nu = c * dgp.kind.sample(&mut rng);
            for j in 0..n {
                eps[(r, j)] += nu;
            }
        }
    }
    eps
}

pub fn generate_panel(dgp: &SourceDgp, theta0: &MixingSpec, t: usize, seed: u64) -> SensorPanel {
    let eps = generate_sources(dgp, theta0.n(), t, seed);
    SensorPanel::new_unchecked(eps * theta0.mixing.transpose(), PanelSource::Observed)
}

/// What the harness keeps from one estimate.
#[derive(Debug, Clone)]
pub struct McOutcome {
    pub mixing: DMatrix<f64>,
    pub objective: f64,
    pub p_value: Option<f64>,
    /// Standard errors of the canonical angles, in canonical column order.
    pub se_theta: Option<Vec<f64>>,
    pub flat: bool,
}

impl McOutcome {
    pub fn from_estimate(est: &EstimateResult) -> Self {
        Self {
            mixing: est.mixing.mixing.clone(),
            objective: est.objective_value,
            p_value: est.spec_test.as_ref().map(|s| s.p_value),
            se_theta: est.se_theta(),
            flat: est.diagnostics.flat_objective || est.diagnostics.non_identified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub rep: usize,
    pub seed: u64,
    pub ok: bool,
    /// Angles of the estimate after alignment to the truth.
    pub theta: Vec<f64>,
    /// Aligned vec(Θ̂), column-major.
    pub mixing: Vec<f64>,
    /// Angle SEs reordered to the aligned columns.
    pub se_theta: Option<Vec<f64>>,
    pub objective: f64,
    pub angular_error: f64,
    pub p_value: Option<f64>,
    pub flat: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryStats {
    pub entry: String,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
}

/// The tabulated part of a report; this is what CSV emission carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTable {
    pub entries: Vec<EntryStats>,
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub dgp: String,
    pub t: usize,
    pub theta0: Vec<f64>,
    pub seed: u64,
    pub table: McTable,
    pub flat_count: usize,
    pub warnings: Vec<String>,
    pub config: serde_json::Value,
    pub records: Vec<McRecord>,
}

fn entry_names(n: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(n * n);
    for c in 0..n {
        for r in 0..n {
            names.push(format!("Theta[{},{}]", r + 1, c + 1));
        }
    }
    names
}

impl McReport {
    pub fn successes(&self) -> impl Iterator<Item = &McRecord> {
        self.records.iter().filter(|r| r.ok)
    }

    pub fn rmse(&self) -> Vec<f64> {
        self.table.entries.iter().map(|e| e.rmse).collect()
    }

    pub fn bias(&self) -> Vec<f64> {
        self.table.entries.iter().map(|e| e.bias).collect()
    }

    pub fn rejection_rate(&self, level: f64) -> Option<f64> {
        let p: Vec<f64> = self.successes().filter_map(|r| r.p_value).collect();
        if p.is_empty() {
            return None;
        }
        Some(p.iter().filter(|&&v| v < level).count() as f64 / p.len() as f64)
    }

    pub fn median_angular_error(&self) -> f64 {
        let mut e: Vec<f64> = self.successes().map(|r| r.angular_error).collect();
        e.sort_by(f64::total_cmp);
        crate::inference::quantile(&e, 0.5)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["entry", "truth", "bias", "sd", "rmse", "reps", "failures"]).expect("in-memory write");
        for e in &self.table.entries {
            w.write_record([
                e.entry.clone(),
                e.truth.to_string(),
                e.bias.to_string(),
                e.sd.to_string(),
                e.rmse.to_string(),
                self.table.reps.to_string(),
                self.table.failures.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Long format, one row per (entry, statistic).
    pub fn to_long_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dgp", "T", "entry", "statistic", "value"]).expect("in-memory write");
        for e in &self.table.entries {
            for (stat, v) in [("bias", e.bias), ("sd", e.sd), ("rmse", e.rmse)] {
                w.write_record([self.dgp.clone(), self.t.to_string(), e.entry.clone(), stat.into(), v.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let header = ["entry", "truth", "bias", "sd", "rmse"];
        let rows: Vec<[String; 5]> = self
            .table
            .entries
            .iter()
            .map(|e| {
                [e.entry.clone(), format!("{:.3}", e.truth), format!("{:.3}", e.bias), format!("{:.3}", e.sd), format!("{:.3}", e.rmse)]
            })
            .collect();
        let mut width = header.map(str::len);
        for r in &rows {
            for (k, c) in r.iter().enumerate() {
                width[k] = width[k].max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(k, c)| if k == 0 { format!("{c:<w$}", w = width[k]) } else { format!("{c:>w$}", w = width[k]) })
                .collect();
            format!("| {} |\n", parts.join(" | "))
        };
        let mut out = format!(
            "{} sources, T = {}, {} replications, {} failures\n\n",
            self.dgp, self.t, self.table.reps, self.table.failures
        );
        out += &line(header.to_vec());
        let rule: Vec<String> =
            width.iter().enumerate().map(|(k, w)| if k == 0 { format!(":{}", "-".repeat(w - 1)) } else { format!("{}:", "-".repeat(w - 1)) }).collect();
        out += &format!("| {} |\n", rule.join(" | "));
        for r in &rows {
            out += &line(r.iter().map(String::as_str).collect());
        }
        for w in &self.warnings {
            out += &format!("\nwarning: {w}\n");
        }
        out
    }
}

/// Reads back a table written by [`McReport::to_csv`]; `#` lines are skipped.
pub fn parse_table_csv(text: &str) -> Result<McTable> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut entries = Vec::new();
    let mut reps = 0;
    let mut failures = 0;
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 7 {
            return Err(Error::Parse { line, message: format!("expected 7 fields, found {}", rec.len()) });
        }
        let num = |k: usize| -> Result<f64> {
            rec[k].trim().parse().map_err(|_| Error::Parse { line, message: format!("bad number '{}'", &rec[k]) })
        };
        let count = |k: usize| -> Result<usize> {
            rec[k].trim().parse().map_err(|_| Error::Parse { line, message: format!("bad count '{}'", &rec[k]) })
        };
        entries.push(EntryStats { entry: rec[0].to_string(), truth: num(1)?, bias: num(2)?, sd: num(3)?, rmse: num(4)? });
        reps = count(5)?;
        failures = count(6)?;
    }
    Ok(McTable { entries, reps, failures })
}

/// Bias, SD (divisor N) and RMSE per entry of aligned vec(Θ̂).
pub fn summarize_entries(truth: &[f64], draws: &[Vec<f64>]) -> Vec<EntryStats> {
    let n = (truth.len() as f64).sqrt().round() as usize;
    let names = entry_names(n);
    let count = draws.len().max(1) as f64;
    truth
        .iter()
        .enumerate()
        .map(|(k, &tv)| {
            // Deviations from the truth, so an exact estimator gives exact zeros.
            let bias = draws.iter().map(|d| d[k] - tv).sum::<f64>() / count;
            let var = draws.iter().map(|d| (d[k] - tv - bias).powi(2)).sum::<f64>() / count;
            EntryStats { entry: names[k].clone(), truth: tv, bias, sd: var.sqrt(), rmse: (bias * bias + var).sqrt() }
        })
        .collect()
}

/// Replication driver with a pluggable estimator. Replication r uses the
/// seed derived from (root, r); results are aggregated in index order.
pub fn run_mc_with<F>(
    dgp: &SourceDgp,
    theta0: &AngleVector,
    t: usize,
    reps: usize,
    seed: u64,
    config_echo: serde_json::Value,
    estimator: F,
) -> Result<McReport>
where
    F: Fn(&SensorPanel, u64) -> Result<McOutcome> + Sync,
{
    if reps < 2 {
        return Err(Error::Config(format!("need at least 2 replications, got {reps}")));
    }
    let truth_spec = crate::param::theta_to_mixing(theta0)?;
    let truth = &truth_spec.mixing;
    let n = truth_spec.n();
    let records: Vec<McRecord> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, &[TAG_REPLICATION, rep as u64]);
            let panel = generate_panel(dgp, &truth_spec, t, rep_seed);
            match estimator(&panel, rep_seed) {
                Ok(out) => {
                    let al = align_matrix(&out.mixing, truth);
                    let (theta, _) = aligned_angles(&out.mixing, truth);
                    let per_col = n - 1;
                    let se_theta = out.se_theta.as_ref().map(|se| {
                        al.perm.iter().flat_map(|&src| se[src * per_col..(src + 1) * per_col].to_vec()).collect()
                    });
                    McRecord {
                        rep,
                        seed: rep_seed,
                        ok: true,
                        theta,
                        mixing: al.aligned.iter().copied().collect(),
                        se_theta,
                        objective: out.objective,
                        angular_error: angular_error(&out.mixing, truth),
                        p_value: out.p_value,
                        flat: out.flat,
                        error: None,
                    }
                }
                Err(e) => McRecord {
                    rep,
                    seed: rep_seed,
                    ok: false,
                    theta: Vec::new(),
                    mixing: Vec::new(),
                    se_theta: None,
                    objective: f64::NAN,
                    angular_error: f64::NAN,
                    p_value: None,
                    flat: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let failures = records.iter().filter(|r| !r.ok).count();
    if failures as f64 > MAX_FAILURE_SHARE * reps as f64 {
        return Err(Error::Harness { failed: failures, reps });
    }
    let draws: Vec<Vec<f64>> = records.iter().filter(|r| r.ok).map(|r| r.mixing.clone()).collect();
    let truth_vec: Vec<f64> = truth.iter().copied().collect();
    let entries = summarize_entries(&truth_vec, &draws);
    let flat_count = records.iter().filter(|r| r.ok && r.flat).count();
    let mut warnings = Vec::new();
    if flat_count * 2 > draws.len() {
        warnings.push(format!(
            "non-identification flagged in {flat_count} of {} replications; sources look Gaussian and the mixing is not identified",
            draws.len()
        ));
    }
    if failures > 0 {
        warnings.push(format!("{failures} replications failed and were excluded"));
    }
    Ok(McReport {
        dgp: dgp.describe(),
        t,
        theta0: theta0.angles().to_vec(),
        seed,
        table: McTable { entries, reps, failures },
        flat_count,
        warnings,
        config: config_echo,
        records,
    })
}

/// Replications with the efficient estimator.
pub fn run_mc(dgp: &SourceDgp, theta0: &AngleVector, t: usize, reps: usize, config: &EstimatorConfig) -> Result<McReport> {
    config.validate()?;
    let echo = serde_json::to_value(config)?;
    run_mc_with(dgp, theta0, t, reps, config.seed, echo, |panel, rep_seed| {
        let cfg = EstimatorConfig { seed: rep_seed, ..config.clone() };
        efficient_estimate(panel, &cfg).map(|e| McOutcome::from_estimate(&e))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::theta_to_mixing;
    use std::f64::consts::PI;

    fn theta0() -> AngleVector {
        AngleVector::n2(PI / 4.0, 2.0 * PI / 3.0).unwrap()
    }

    #[test]
    fn stub_has_zero_error() {
        let spec = theta_to_mixing(&theta0()).unwrap();
        let rep = run_mc_with(&SourceDgp::new(SourceKind::Uniform), &theta0(), 50, 10, 3, serde_json::Value::Null, |_, _| {
            Ok(McOutcome { mixing: spec.mixing.clone(), objective: 0.0, p_value: None, se_theta: None, flat: false })
        })
        .unwrap();
        for e in &rep.table.entries {
            assert_eq!(e.bias, 0.0);
            assert_eq!(e.sd, 0.0);
            assert_eq!(e.rmse, 0.0);
        }
    }

    #[test]
    fn swapped_stub_is_realigned() {
        let spec = theta_to_mixing(&theta0()).unwrap();
        let mut m = spec.mixing.clone();
        m.swap_columns(0, 1);
        m.column_mut(0).neg_mut();
        let rep = run_mc_with(&SourceDgp::new(SourceKind::Uniform), &theta0(), 50, 4, 3, serde_json::Value::Null, |_, _| {
            Ok(McOutcome { mixing: m.clone(), objective: 0.0, p_value: None, se_theta: Some(vec![0.1, 0.2]), flat: false })
        })
        .unwrap();
        assert!(rep.rmse().iter().all(|&r| r < 1e-14));
        assert_eq!(rep.records[0].se_theta, Some(vec![0.2, 0.1]));
    }

    #[test]
    fn failures_counted_and_capped() {
        let spec = theta_to_mixing(&theta0()).unwrap();
        let dgp = SourceDgp::new(SourceKind::Uniform);
        let ok = |panel: &SensorPanel, _| {
            if panel.data()[(0, 0)] > 0.9 {
                Err(Error::Collinearity)
            } else {
                Ok(McOutcome { mixing: spec.mixing.clone(), objective: 0.0, p_value: None, se_theta: None, flat: false })
            }
        };
        match run_mc_with(&dgp, &theta0(), 20, 40, 1, serde_json::Value::Null, ok) {
            Ok(r) => assert!(r.table.failures <= 2),
            Err(Error::Harness { failed, reps }) => assert!(failed > 2 && reps == 40),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let spec = theta_to_mixing(&theta0()).unwrap();
        let rep = run_mc_with(&SourceDgp::new(SourceKind::Gamma), &theta0(), 30, 5, 9, serde_json::Value::Null, |p, _| {
            let mut m = spec.mixing.clone();
            m[(0, 0)] += p.data()[(0, 0)] * 0.1;
            Ok(McOutcome { mixing: m, objective: 0.0, p_value: None, se_theta: None, flat: false })
        })
        .unwrap();
        assert_eq!(parse_table_csv(&rep.to_csv()).unwrap(), rep.table);
        assert_eq!(parse_table_csv(&format!("# cfica meta\n{}", rep.to_csv())).unwrap(), rep.table);
        assert!(rep.to_markdown().contains("Theta[2,2]"));
        assert_eq!(rep.to_long_csv().lines().count(), 1 + 12);
    }

    #[test]
    fn common_shock_keeps_source_stream() {
        let spec = theta_to_mixing(&theta0()).unwrap();
        let a = generate_sources(&SourceDgp::new(SourceKind::Uniform), 2, 10, 4);
        let b = generate_sources(&SourceDgp::new(SourceKind::Uniform).with_common_shock(0.0), 2, 10, 4);
        assert_eq!(a, b);
        let p = generate_panel(&SourceDgp::new(SourceKind::Uniform), &spec, 10, 4);
        assert!((p.data() - a * spec.mixing.transpose()).norm() < 1e-15);
    }

    #[test]
    fn unknown_distribution_rejected() {
        assert!("cauchy".parse::<SourceKind>().is_err());
        assert_eq!("t3".parse::<SourceKind>().unwrap().name(), "student3");
    }
}
