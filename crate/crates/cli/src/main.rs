use std::path::PathBuf;
use std::process::ExitCode;

use cfica_cli::{exit_code, run, Command, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfica", version, about = "Efficient ICA from empirical characteristic functions")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Monte Carlo replications of the estimator on a source design.
    Simulate(Flags),
    /// Estimate the mixing matrix of a sensor panel CSV.
    Estimate(Flags),
    /// VAR, structural mixing and impulse responses with bootstrap bands.
    Svar(Flags),
}

/// Every flag maps to the configuration key of the same name.
#[derive(Args)]
struct Flags {
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// student3, uniform, binomial, gamma or gaussian.
    #[arg(long)]
    dist: Option<String>,
    #[arg(long = "T", visible_alias = "t")]
    t: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    /// Comma-separated true angles.
    #[arg(long)]
    theta0: Option<String>,
    /// Scale of a shock shared by all sources.
    #[arg(long)]
    common_shock: Option<String>,
    /// level or log.
    #[arg(long)]
    form: Option<String>,
    /// quadrature or closed-form.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// fixed or rate.
    #[arg(long)]
    alpha_mode: Option<String>,
    #[arg(long)]
    alpha_exponent: Option<String>,
    #[arg(long)]
    nodes: Option<String>,
    #[arg(long)]
    subsample: Option<String>,
    #[arg(long)]
    refine_starts: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    trim: Option<String>,
    #[arg(long)]
    continuous_update: Option<String>,
    #[arg(long)]
    standardize: Option<String>,
    #[arg(long)]
    inference: Option<String>,
    /// auto or a fixed lag order.
    #[arg(long)]
    lags: Option<String>,
    #[arg(long)]
    pmax: Option<String>,
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    bootstrap: Option<String>,
    #[arg(long)]
    level: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    log: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("input", &self.input),
            ("out", &self.out),
            ("seed", &self.seed),
            ("dist", &self.dist),
            ("t", &self.t),
            ("reps", &self.reps),
            ("theta0", &self.theta0),
            ("common_shock", &self.common_shock),
            ("form", &self.form),
            ("backend", &self.backend),
            ("alpha", &self.alpha),
            ("alpha_mode", &self.alpha_mode),
            ("alpha_exponent", &self.alpha_exponent),
            ("nodes", &self.nodes),
            ("subsample", &self.subsample),
            ("refine_starts", &self.refine_starts),
            ("max_iterations", &self.max_iterations),
            ("epsilon", &self.epsilon),
            ("trim", &self.trim),
            ("continuous_update", &self.continuous_update),
            ("standardize", &self.standardize),
            ("inference", &self.inference),
            ("lags", &self.lags),
            ("pmax", &self.pmax),
            ("horizon", &self.horizon),
            ("bootstrap", &self.bootstrap),
            ("level", &self.level),
            ("threads", &self.threads),
            ("log", &self.log),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }
}

fn resolve(command: Command, flags: &Flags) -> cfica::Result<RunConfig> {
    let mut config = RunConfig::new(command);
    if let Some(path) = &flags.config {
        config.apply_file(path)?;
    }
    config.apply_env()?;
    for (k, v) in flags.pairs() {
        config.set(k, v)?;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match &cli.command {
        Sub::Simulate(f) => (Command::Simulate, f),
        Sub::Estimate(f) => (Command::Estimate, f),
        Sub::Svar(f) => (Command::Svar, f),
    };
    let outcome = resolve(command, flags).and_then(|config| {
        env_logger::Builder::new().parse_filters(&config.log).format_timestamp(None).init();
        if let Some(n) = config.threads {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("thread pool setup failed: {e}");
            }
        }
        run(&config)
    });
    match outcome {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
