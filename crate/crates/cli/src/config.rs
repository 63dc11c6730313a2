//! Run configuration: defaults, then a `key = value` file, then environment
//! overrides, then command-line flags.

use std::path::{Path, PathBuf};

use cfica::cgmm::{AlphaMode, MomentForm, RegularizationPolicy, DEFAULT_ALPHA_EXPONENT, DEFAULT_ALPHA_SCALE};
use cfica::estimator::{Backend, EstimatorConfig};
use cfica::param::{AngleVector, DEFAULT_EPSILON};
use cfica::svar::{LagChoice, SvarConfig};
use cfica::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Estimate,
    Svar,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub dist: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub reps: usize,
    pub theta0: Vec<f64>,
    pub common_shock: Option<f64>,
    pub form: MomentForm,
    pub backend: Backend,
    pub alpha_mode: AlphaMode,
    /// α itself in fixed mode, the constant c of α = c·λmax·T^exponent in rate mode.
    pub alpha: f64,
    pub alpha_exponent: f64,
    pub nodes: Option<usize>,
    pub subsample: Option<usize>,
    pub refine_starts: usize,
    pub max_iterations: usize,
    pub epsilon: f64,
    pub trim: f64,
    pub continuous_update: bool,
    pub standardize: bool,
    pub inference: bool,
    pub lags: LagChoice,
    pub pmax: usize,
    pub horizon: usize,
    pub bootstrap: usize,
    pub level: f64,
    pub threads: Option<usize>,
    pub log: String,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        let est = EstimatorConfig::default();
        let svar = SvarConfig::default();
        Self {
            command,
            input: None,
            out: PathBuf::from("out"),
            seed: 7,
            dist: "student3".into(),
            t: 150,
            reps: cfica::simlab::DEFAULT_REPS,
            theta0: vec![std::f64::consts::FRAC_PI_4, 2.0 * std::f64::consts::FRAC_PI_3],
            common_shock: None,
            form: MomentForm::Log,
            backend: est.backend,
            alpha_mode: AlphaMode::Rate,
            alpha: DEFAULT_ALPHA_SCALE,
            alpha_exponent: DEFAULT_ALPHA_EXPONENT,
            nodes: None,
            subsample: None,
            refine_starts: est.refine_starts,
            max_iterations: est.max_iterations,
            epsilon: DEFAULT_EPSILON,
            trim: est.trim,
            continuous_update: est.continuous_update,
            standardize: est.standardize,
            inference: est.inference,
            lags: svar.lags,
            pmax: svar.p_max,
            horizon: svar.horizon,
            bootstrap: svar.bootstrap,
            level: svar.level,
            threads: None,
            log: "warn".into(),
        }
    }

    /// Applies one setting. Keys ignore case and treat '-' like '_'.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim().to_ascii_lowercase().replace('-', "_");
        let v = value.trim();
        match k.as_str() {
            "input" => self.input = Some(PathBuf::from(v)),
            "out" | "output" => self.out = PathBuf::from(v),
            "seed" => self.seed = num(&k, v)?,
            "dist" => self.dist = v.to_string(),
            "t" => self.t = num(&k, v)?,
            "reps" => self.reps = num(&k, v)?,
            "theta0" => {
                self.theta0 = v.split(',').map(|x| num::<f64>(&k, x.trim())).collect::<Result<_>>()?;
            }
            "common_shock" => self.common_shock = optional(&k, v)?,
            "form" => self.form = v.parse()?,
            "backend" => self.backend = v.parse()?,
            "alpha_mode" => {
                self.alpha_mode = match v {
                    "fixed" => AlphaMode::Fixed,
                    "rate" => AlphaMode::Rate,
                    _ => return Err(Error::Config(format!("alpha_mode must be 'fixed' or 'rate', got '{v}'"))),
                }
            }
            "alpha" => self.alpha = num(&k, v)?,
            "alpha_exponent" => self.alpha_exponent = num(&k, v)?,
            "nodes" => self.nodes = optional(&k, v)?,
            "subsample" => self.subsample = optional(&k, v)?,
            "refine_starts" => self.refine_starts = num(&k, v)?,
            "max_iterations" => self.max_iterations = num(&k, v)?,
            "epsilon" => self.epsilon = num(&k, v)?,
            "trim" => self.trim = num(&k, v)?,
            "continuous_update" => self.continuous_update = flag(&k, v)?,
            "standardize" => self.standardize = flag(&k, v)?,
            "inference" => self.inference = flag(&k, v)?,
            "lags" => self.lags = v.parse()?,
            "pmax" | "p_max" => self.pmax = num(&k, v)?,
            "horizon" => self.horizon = num(&k, v)?,
            "bootstrap" => self.bootstrap = num(&k, v)?,
            "level" => self.level = num(&k, v)?,
            "threads" => self.threads = optional(&k, v)?,
            "log" | "log_level" => self.log = v.to_string(),
            _ => return Err(Error::Config(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected 'key = value', found '{line}'") })?;
            self.set(k, v).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_file_text(&std::fs::read_to_string(path)?)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("CFICA_THREADS") {
            self.set("threads", &v)?;
        }
        if let Ok(v) = std::env::var("CFICA_LOG") {
            self.set("log", &v)?;
        }
        Ok(())
    }

    pub fn regularization(&self) -> RegularizationPolicy {
        match self.alpha_mode {
            AlphaMode::Fixed => RegularizationPolicy::fixed(self.alpha),
            AlphaMode::Rate => RegularizationPolicy { mode: AlphaMode::Rate, c: self.alpha, exponent: self.alpha_exponent },
        }
    }

    pub fn estimator(&self) -> Result<EstimatorConfig> {
        let cfg = EstimatorConfig {
            form: self.form,
            backend: self.backend,
            refine_starts: self.refine_starts,
            max_iterations: self.max_iterations,
            regularization: self.regularization(),
            subsample: self.subsample,
            seed: self.seed,
            epsilon: self.epsilon,
            trim: self.trim,
            quadrature_nodes: self.nodes,
            continuous_update: self.continuous_update,
            inference: self.inference,
            standardize: self.standardize,
            ..EstimatorConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn svar(&self) -> Result<SvarConfig> {
        Ok(SvarConfig {
            lags: self.lags,
            p_max: self.pmax,
            horizon: self.horizon,
            bootstrap: self.bootstrap,
            level: self.level,
            estimator: self.estimator()?,
        })
    }

    pub fn theta0(&self) -> Result<AngleVector> {
        if self.theta0.len() != 2 {
            return Err(Error::Config(format!("theta0 needs 2 angles for n = 2, got {}", self.theta0.len())));
        }
        AngleVector::n2(self.theta0[0], self.theta0[1]).map_err(|e| Error::Config(e.to_string()))
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("'{v}' is not a valid value for {key}")))
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("'{v}' is not a boolean for {key}"))),
    }
}
