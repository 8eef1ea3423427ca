use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qfmux::config::RunConfig;
use qfmux::control::Policy;
use qfmux::equilibrium::{check_feasibility, solve_common_utility, solve_equilibrium};
use qfmux::error::Error;
use qfmux::linearization::{analyze, assemble_a, tune_gains};
use qfmux::output::{eigen_rows, write_csv, write_run, write_toml};
use qfmux::sim::run;
use qfmux::source::{correlation_r2, fit_model, FitOptions, ModelFamily, RateUtilitySample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "qfmux", version, about = "Quality-fair multiplexing simulator and analysis tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed-loop simulation and write timeseries.csv, channel.csv and summary.toml.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Override the configured policy (qf, trf, ummf).
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Print the equilibrium of the streams active at slot 1.
    Equilibrium {
        #[command(flatten)]
        common: Common,
    },
    /// Linearize at the equilibrium and classify stability; writes eigenvalues.csv.
    Stability {
        #[command(flatten)]
        common: Common,
    },
    /// Random search for gains stable over random characteristic sets.
    TuneGains {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Fit a rate-utility model to samples from a CSV with columns rate,utility.
    FitModel {
        samples: PathBuf,
        #[arg(long)]
        family: ModelFamily,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out_dir.clone().or_else(|| cfg.output.as_ref().and_then(|o| o.dir.clone())).unwrap_or_else(|| PathBuf::from("."))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Io(_) | Error::Csv(_) => 2,
        Error::Infeasible(_) | Error::Solver(_) | Error::Fit(_) | Error::Tuning(_) | Error::Allocation(_) | Error::Undefined(_) => 3,
        _ => 4,
    }
}

fn print_toml<T: Serialize>(v: &T) -> Result<(), Error> {
    print!("{}", toml::to_string(v).map_err(|e| Error::Config(e.to_string()))?);
    Ok(())
}

#[derive(Serialize)]
struct MetricsOut<'a> {
    out_dir: &'a Path,
    metrics: qfmux::sim::MetricsSummary,
}

fn simulate(common: &Common, policy: Option<Policy>) -> Result<(), Error> {
    let mut cfg = common.load()?;
    if let Some(p) = policy {
        cfg.policy = p;
    }
    let out = run(&cfg.scenario()?)?;
    let dir = common.out_dir(&cfg);
    let summary = write_run(&dir, &cfg, &out)?;
    print_toml(&MetricsOut { out_dir: &dir, metrics: summary.metrics })
}

fn equilibrium(common: &Common) -> Result<(), Error> {
    let cfg = common.load()?;
    let params = cfg.initial_params()?;
    let feas = check_feasibility(&params, cfg.channel.rate);
    if !feas.feasible {
        return Err(Error::Infeasible(feas.diagnostic));
    }
    let eq = solve_equilibrium(&params, cfg.channel.rate, &cfg.gains, &cfg.plant, &cfg.limits)?;
    print_toml(&eq)
}

#[derive(Serialize)]
struct StabilityOut {
    stable: bool,
    state_dim: usize,
    structural_unit_count: usize,
    spectral_radius_excl: f64,
    margin: f64,
}

fn stability(common: &Common) -> Result<(), Error> {
    let cfg = common.load()?;
    let params = cfg.initial_params()?;
    let (_, rates) = solve_common_utility(&params, cfg.channel.rate)?;
    let report = analyze(&assemble_a(&cfg.gains, &params, &rates, &cfg.plant)?)?;
    let dir = common.out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    write_csv(&dir.join("eigenvalues.csv"), &eigen_rows(&report))?;
    let out = StabilityOut {
        stable: report.stable,
        state_dim: report.state_dim,
        structural_unit_count: report.structural_unit_count,
        spectral_radius_excl: report.spectral_radius_excl,
        margin: report.margin,
    };
    write_toml(&dir.join("stability.toml"), &out)?;
    print_toml(&out)
}

fn tune(common: &Common, budget: Option<usize>, realizations: Option<usize>) -> Result<(), Error> {
    let cfg = common.load()?;
    let mut tc = cfg.tune_config()?;
    tc.budget = budget.unwrap_or(tc.budget);
    tc.realizations = realizations.unwrap_or(tc.realizations);
    let report = tune_gains(&tc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let dir = common.out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    write_toml(&dir.join("gains.toml"), &report)?;
    #[derive(Serialize)]
    struct Brief {
        gains: qfmux::control::ControllerGains,
        min_margin: f64,
        margins: Vec<f64>,
        stable_candidates: usize,
        candidates: usize,
    }
    print_toml(&Brief {
        gains: report.gains,
        min_margin: report.min_margin,
        margins: report.margins,
        stable_candidates: report.stable_candidates,
        candidates: report.candidates,
    })
}

#[derive(Serialize)]
struct FitOut {
    model: ModelFamily,
    a1: f64,
    a2: f64,
    r2: f64,
    samples: usize,
}

fn fit(samples: &Path, family: ModelFamily, out_dir: Option<&Path>) -> Result<(), Error> {
    let mut rdr = csv::Reader::from_path(samples)?;
    let rows: Vec<RateUtilitySample> = rdr.deserialize().collect::<Result<_, _>>()?;
    if rows.len() < 2 {
        return Err(Error::Config(format!("{}: need at least 2 samples, found {}", samples.display(), rows.len())));
    }
    let p = fit_model(family, &rows, &FitOptions::default())?;
    let observed: Vec<f64> = rows.iter().map(|s| s.utility).collect();
    let predicted = rows.iter().map(|s| p.utility(s.rate)).collect::<Result<Vec<_>, _>>()?;
    let out = FitOut { model: p.model, a1: p.a1, a2: p.a2, r2: correlation_r2(&observed, &predicted)?, samples: rows.len() };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_toml(&dir.join("params.toml"), &out)?;
    }
    print_toml(&out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, policy } => simulate(common, *policy),
        Command::Equilibrium { common } => equilibrium(common),
        Command::Stability { common } => stability(common),
        Command::TuneGains { common, budget, realizations } => tune(common, *budget, *realizations),
        Command::FitModel { samples, family, out_dir } => fit(samples, *family, out_dir.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
