//! Commands behind the `cfica` binary. Every artifact carries the resolved
//! configuration, the root seed, the library version and wall-clock timing.

pub mod config;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use cfica::ecf::{PanelSource, SensorPanel};
use cfica::estimator::{efficient_estimate, EstimateResult};
use cfica::simlab::{run_mc, SourceDgp, SourceKind};
use cfica::svar::{read_series_csv, svar_from_series, SvarRun};
use cfica::{Error, Result};
use serde_json::{json, Value};

pub use config::{Command, RunConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit codes: success, numerical failure, usage or input error.
pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_usage() {
        EXIT_USAGE
    } else {
        EXIT_NUMERICAL
    }
}

struct Clock {
    started: SystemTime,
    timer: Instant,
}

impl Clock {
    fn start() -> Self {
        Self { started: SystemTime::now(), timer: Instant::now() }
    }
}

/// Metadata block embedded in every artifact.
fn meta(config: &RunConfig, clock: &Clock) -> Value {
    json!({
        "tool": "cfica",
        "version": VERSION,
        "seed": config.seed,
        "config": config,
        "wall_clock": {
            "started_unix": clock.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            "elapsed_seconds": clock.timer.elapsed().as_secs_f64(),
        },
    })
}

/// The same metadata as `#` comment lines for CSV and Markdown artifacts.
fn meta_comment(meta: &Value) -> String {
    format!(
        "# cfica {} seed={}\n# config {}\n# wall_clock {}\n",
        VERSION,
        meta["seed"],
        meta["config"],
        meta["wall_clock"]
    )
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text)?;
    log::info!("wrote {}", path.display());
    written.push(path);
    Ok(())
}

fn write_json(path: PathBuf, value: &Value, written: &mut Vec<PathBuf>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text, written)
}

/// Runs the configured command and returns the artifacts written. On a
/// numerical failure a diagnostic JSON document is still written.
pub fn run(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let clock = Clock::start();
    std::fs::create_dir_all(&config.out)?;
    let mut written = Vec::new();
    let outcome = match config.command {
        Command::Simulate => simulate(config, &clock, &mut written),
        Command::Estimate => estimate(config, &clock, &mut written),
        Command::Svar => svar(config, &clock, &mut written),
    };
    if let Err(e) = &outcome {
        if !e.is_usage() {
            let name = match config.command {
                Command::Estimate => "estimate.json",
                _ => "error.json",
            };
            let doc = json!({ "meta": meta(config, &clock), "status": "failed", "error": e.to_string() });
            write_json(config.out.join(name), &doc, &mut written)?;
        }
    }
    outcome.map(|_| written)
}

fn simulate(config: &RunConfig, clock: &Clock, written: &mut Vec<PathBuf>) -> Result<()> {
    let kind: SourceKind = config.dist.parse()?;
    let mut dgp = SourceDgp::new(kind);
    if let Some(c) = config.common_shock {
        dgp = dgp.with_common_shock(c);
    }
    let theta0 = config.theta0()?;
    let est = config.estimator()?;
    log::info!("simulating {} at T = {} with {} replications", dgp.describe(), config.t, config.reps);
    let report = run_mc(&dgp, &theta0, config.t, config.reps, &est)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let m = meta(config, clock);
    let comment = meta_comment(&m);
    write(config.out.join("report.csv"), &(comment.clone() + &report.to_csv()), written)?;
    write(config.out.join("report_long.csv"), &(comment.clone() + &report.to_long_csv()), written)?;
    let md = format!("{}\n```\n{}```\n", report.to_markdown(), comment);
    write(config.out.join("report.md"), &md, written)?;
    let doc = json!({
        "meta": m,
        "status": "ok",
        "median_angular_error": report.median_angular_error(),
        "rejection_rate_5pct": report.rejection_rate(0.05),
        "report": report,
    });
    write_json(config.out.join("report.json"), &doc, written)
}

fn require_input(config: &RunConfig) -> Result<&Path> {
    config.input.as_deref().ok_or_else(|| Error::Config("--input is required".into()))
}

fn estimate_summary(est: &EstimateResult) -> Value {
    json!({
        "theta_hat": est.theta_hat.angles(),
        "Theta_hat": est.mixing.mixing,
        "se_theta": est.se_theta(),
        "se_Theta": est.se_mixing(),
        "vcov_theta": est.vcov_theta,
        "vcov_Theta": est.vcov_mixing,
        "alpha_used": est.alpha_used,
        "form": est.diagnostics.form,
        "spec_test": est.spec_test,
        "objective_value": est.objective_value,
        "diagnostics": est.diagnostics,
    })
}

fn estimate(config: &RunConfig, clock: &Clock, written: &mut Vec<PathBuf>) -> Result<()> {
    let series = read_series_csv(require_input(config)?)?;
    let panel = SensorPanel::new(series.data, PanelSource::Observed)?;
    let est_cfg = config.estimator()?;
    let est = efficient_estimate(&panel, &est_cfg)?;
    for w in &est.diagnostics.warnings {
        log::warn!("{w}");
    }
    let mut doc = json!({ "meta": meta(config, clock), "status": "ok", "sensors": series.names });
    merge(&mut doc, estimate_summary(&est));
    doc["result"] = serde_json::to_value(&est)?;
    write_json(config.out.join("estimate.json"), &doc, written)
}

fn merge(into: &mut Value, from: Value) {
    if let (Some(a), Value::Object(b)) = (into.as_object_mut(), from) {
        a.extend(b);
    }
}

fn svar(config: &RunConfig, clock: &Clock, written: &mut Vec<PathBuf>) -> Result<()> {
    let series = read_series_csv(require_input(config)?)?;
    let cfg = config.svar()?;
    let run: SvarRun = svar_from_series(&series, &cfg)?;
    for w in run.model.warnings.iter().chain(&run.estimate.diagnostics.warnings) {
        log::warn!("{w}");
    }
    let m = meta(config, clock);
    let var_doc = json!({
        "meta": m,
        "variables": series.names,
        "lag_order": run.model.lag_order,
        "lag_choice": cfg.lags,
        "candidates": run.model.candidates,
        "intercept": run.model.intercept,
        "coefficients": run.model.coefficients,
        "sigma": run.model.sigma,
        "log_likelihood": run.model.log_likelihood,
        "aic": run.model.aic,
        "spectral_radius": run.model.spectral_radius,
        "warnings": run.model.warnings,
    });
    write_json(config.out.join("var.json"), &var_doc, written)?;
    let mut est_doc = json!({ "meta": m, "status": "ok" });
    merge(&mut est_doc, estimate_summary(&run.estimate));
    write_json(config.out.join("estimate.json"), &est_doc, written)?;
    write(config.out.join("irf.csv"), &(meta_comment(&m) + &run.irf.to_csv()), written)?;
    let mut summary = json!({
        "meta": m,
        "status": "ok",
        "lag_order": run.model.lag_order,
        "shock_variances": run.shock_variances,
        "horizon": run.irf.horizon(),
        "band_level": run.irf.level,
        "bootstrap_draws": run.irf.bootstrap_draws,
        "bootstrap_failed": run.irf.bootstrap_failed,
        "notes": run.notes,
    });
    merge(&mut summary, estimate_summary(&run.estimate));
    write_json(config.out.join("summary.json"), &summary, written)
}
