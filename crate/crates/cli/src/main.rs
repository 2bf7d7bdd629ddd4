//! `causal-es`: command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or failed fit, 2 a fit did not
//! converge (reports are still written and flagged), 64 usage error.

use anyhow::Context;
use causal_es::ate::{bootstrap_ate, fit_ate, EsConfig};
use causal_es::bootstrap::BootConfig;
use causal_es::cohort::{parse_cohort, summarize, Cohort, CovariateSchema};
use causal_es::propensity::{balance_table, estimate_weights, LogisticPropensity};
use causal_es::report::{
    ate_report, membership_csv, pe_report, posterior_csv, to_json, write_artifact, Manifest, Timing,
};
use causal_es::sensitivity::{
    ate_beta_y_sweep, export_grid, pe_offset_grid, Axis, SensitivityGrid, SweepConfig, DEFAULT_BETA_Y_AXIS,
    DEFAULT_PE_AXES,
};
use causal_es::simulate::{oracle_truth_with, simulate_cohort, DgpParams, ORACLE_DRAWS};
use causal_es::strata::{bootstrap_pe, fit_pe_with, membership, OffsetSpec, PeInit, PeOptions};
use causal_es::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "causal-es", version, about = "Causal effects with an MNAR binary outcome in left-truncated cohorts")]
struct Cli {
    /// More log output (-v: one line per ES iteration, -vv: debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Worker threads for bootstrap and grids (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Output {
    /// Output directory.
    #[arg(long, env = "CAUSAL_ES_OUT", default_value = ".")]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct Input {
    /// Cohort CSV.
    #[arg(long)]
    input: PathBuf,
    /// Covariate schema `name:kind,...`; inferred from the file when omitted.
    #[arg(long)]
    schema: Option<String>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug, Clone)]
struct Fitting {
    /// Propensity covariates, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Convergence threshold on the L² parameter change.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    /// Plain ES updates without squared extrapolation.
    #[arg(long)]
    no_accelerate: bool,
    /// Bootstrap replicates; 0 disables the bootstrap.
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Outcome and observed-group counts.
    Summarize {
        #[command(flatten)]
        input: Input,
    },
    /// Propensity fit and covariate balance before and after weighting.
    Balance {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_delimiter = ',')]
        covariates: Option<Vec<String>>,
    },
    /// Average treatment effect fit.
    FitAte {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        fit: Fitting,
        /// Hold β_Y at this value.
        #[arg(long)]
        beta_y: Option<f64>,
    },
    /// Principal-strata fit.
    FitPe {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        fit: Fitting,
        /// Offset parameters, e.g. `a0NS=-1,a0NN=-1,aDNN=0`.
        #[arg(long, default_value = "a0NS=-1,a0NN=-1,aDNN=0")]
        offsets: String,
        #[arg(long)]
        beta_y: Option<f64>,
    },
    /// ATE refits over a grid of fixed β_Y.
    SensitivityAte {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        fit: Fitting,
        #[arg(long, default_value = DEFAULT_BETA_Y_AXIS)]
        axis: String,
    },
    /// Principal-strata refits over a grid of offsets.
    SensitivityPe {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        fit: Fitting,
        /// Offset axes `name=lo:hi:step,...`.
        #[arg(long, default_value = DEFAULT_PE_AXES)]
        offsets: String,
        /// Offsets held fixed for every cell.
        #[arg(long, default_value = "")]
        base: String,
    },
    /// Simulated cohort from a data-generating configuration.
    Simulate {
        /// JSON parameters; the built-in defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Start from the principal-strata defaults instead of the ATE ones.
        #[arg(long)]
        pe: bool,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Monte Carlo draws for the true estimands (ATE mode).
        #[arg(long, default_value_t = ORACLE_DRAWS)]
        truth_draws: usize,
        #[command(flatten)]
        output: Output,
    },
}

/// Files written by a run plus the manifest describing them.
struct Run {
    dir: PathBuf,
    stem: &'static str,
    force: bool,
    manifest: Manifest,
}

impl Run {
    fn new(output: &Output, stem: &'static str, command: &str, config: serde_json::Value) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&output.out).with_context(|| format!("creating {}", output.out.display()))?;
        Ok(Self { dir: output.out.clone(), stem, force: output.force, manifest: Manifest::new(command, config) })
    }

    fn write(&mut self, artifact: &str, contents: &str) -> anyhow::Result<()> {
        let name = format!("{}_{artifact}", self.stem);
        write_artifact(&self.dir.join(&name), contents, self.force)?;
        self.manifest.outputs.push(name);
        Ok(())
    }

    fn record(&mut self, paths: Vec<PathBuf>) {
        self.manifest.outputs.extend(paths.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()));
    }

    fn finish(mut self, code: u8, started: Instant, jobs: Option<usize>) -> anyhow::Result<u8> {
        let timing_name = format!("{}_timing.json", self.stem);
        self.manifest.timing_file = timing_name.clone();
        self.manifest.exit_code = i32::from(code);
        let manifest = to_json(&self.manifest)?;
        write_artifact(&self.dir.join(format!("{}_manifest.json", self.stem)), &manifest, self.force)?;
        let timing = Timing { wall_seconds: started.elapsed().as_secs_f64(), jobs };
        write_artifact(&self.dir.join(timing_name), &to_json(&timing)?, self.force)?;
        Ok(code)
    }
}

fn load(input: &Input) -> anyhow::Result<Cohort<f64>> {
    let text = std::fs::read_to_string(&input.input).with_context(|| format!("reading {}", input.input.display()))?;
    let schema = match &input.schema {
        Some(s) => CovariateSchema::parse(s)?,
        None => CovariateSchema::infer(&text)?,
    };
    Ok(parse_cohort(&text, &schema)?)
}

fn es_config(fit: &Fitting, beta_y: Option<f64>) -> anyhow::Result<EsConfig> {
    if !(fit.tol > 0.0) {
        anyhow::bail!(Error::Config("--tol must be positive".into()));
    }
    Ok(EsConfig { tol: fit.tol, max_iter: fit.max_iter, fixed_beta_y: beta_y, accelerate: !fit.no_accelerate, ..Default::default() })
}

fn boot_config(fit: &Fitting, jobs: Option<usize>) -> BootConfig {
    BootConfig { replicates: fit.bootstrap, jobs, ..Default::default() }
}

fn propensity(covariates: &Option<Vec<String>>) -> LogisticPropensity {
    LogisticPropensity { covariates: covariates.clone(), ..Default::default() }
}

fn fitting_echo(fit: &Fitting) -> serde_json::Value {
    json!({
        "covariates": fit.covariates,
        "tol": fit.tol,
        "max_iter": fit.max_iter,
        "accelerate": !fit.no_accelerate,
        "bootstrap": fit.bootstrap,
        "seed": fit.seed,
    })
}

fn input_echo(input: &Input) -> serde_json::Value {
    json!({ "input": input.input.display().to_string(), "schema": input.schema })
}

fn grid_code(grid: &SensitivityGrid) -> u8 {
    if grid.cells.iter().all(|c| c.converged) {
        0
    } else {
        EXIT_NOT_CONVERGED
    }
}

fn execute(cli: Cli) -> anyhow::Result<u8> {
    let started = Instant::now();
    let jobs = cli.jobs;
    match &cli.command {
        Command::Summarize { input } => {
            let mut run = Run::new(&input.output, "summarize", "summarize", input_echo(input))?;
            let cohort = load(input)?;
            run.write("tables.json", &to_json(&summarize(&cohort))?)?;
            run.finish(0, started, jobs)
        }
        Command::Balance { input, covariates } => {
            let config = json!({ "input": input_echo(input), "covariates": covariates });
            let mut run = Run::new(&input.output, "balance", "balance", config)?;
            let cohort = load(input)?;
            let (w, fit) = estimate_weights(&cohort, &propensity(covariates))?;
            let table = balance_table(&cohort, &w)?.with_clipped(fit.clipped_count);
            run.write("table.csv", &table.to_csv())?;
            let model = json!({
                "names": fit.names,
                "coefficients": fit.coefficients,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "clipped_count": fit.clipped_count,
                "max_weight": w.max(),
            });
            run.write("propensity.json", &to_json(&model)?)?;
            run.finish(0, started, jobs)
        }
        Command::FitAte { input, fit, beta_y } => {
            let config = json!({ "input": input_echo(input), "fit": fitting_echo(fit), "beta_y": beta_y });
            let mut run = Run::new(&input.output, "ate", "fit-ate", config)?;
            let cohort = load(input)?;
            let es = es_config(fit, *beta_y)?;
            let model = propensity(&fit.covariates);
            let (w, _) = estimate_weights(&cohort, &model)?;
            let result = fit_ate(&cohort, &w, &es)?;
            let boot = if fit.bootstrap > 0 {
                Some(bootstrap_ate(&cohort, &model, &es, &boot_config(fit, jobs), fit.seed, Some(&result.theta))?)
            } else {
                None
            };
            let report = ate_report(&result, cohort.len(), *beta_y, boot.as_ref().map(|b| (b, fit.seed)));
            run.write("fit.json", &to_json(&report)?)?;
            run.write("posterior.csv", &posterior_csv(&cohort, &result))?;
            run.finish(if result.converged { 0 } else { EXIT_NOT_CONVERGED }, started, jobs)
        }
        Command::FitPe { input, fit, offsets, beta_y } => {
            let config =
                json!({ "input": input_echo(input), "fit": fitting_echo(fit), "offsets": offsets, "beta_y": beta_y });
            let mut run = Run::new(&input.output, "pe", "fit-pe", config)?;
            let cohort = load(input)?;
            let offsets = OffsetSpec::parse(offsets)?;
            let es = es_config(fit, *beta_y)?;
            let model = propensity(&fit.covariates);
            let (w, _) = estimate_weights(&cohort, &model)?;
            let result = fit_pe_with(&cohort, &w, &offsets, &es, &PeOptions::default())?;
            let boot = if fit.bootstrap > 0 {
                let opts = PeOptions { init: PeInit::Warm(result.theta.clone()), fixed_gamma: None };
                Some(bootstrap_pe(&cohort, &model, &offsets, &es, &opts, &boot_config(fit, jobs), fit.seed)?)
            } else {
                None
            };
            let report = pe_report(&result, cohort.len(), *beta_y, boot.as_ref().map(|b| (b, fit.seed)));
            run.write("fit.json", &to_json(&report)?)?;
            run.write("membership.csv", &membership_csv(&cohort, &membership(&cohort, &result.theta)?))?;
            run.finish(if result.converged { 0 } else { EXIT_NOT_CONVERGED }, started, jobs)
        }
        Command::SensitivityAte { input, fit, axis } => {
            let config = json!({ "input": input_echo(input), "fit": fitting_echo(fit), "axis": axis });
            let mut run = Run::new(&input.output, "sensitivity_ate", "sensitivity-ate", config)?;
            let cohort = load(input)?;
            let axis = Axis::parse(axis)?;
            let sweep = SweepConfig { es: es_config(fit, None)?, boot: boot_config(fit, jobs), seed: fit.seed };
            let model = propensity(&fit.covariates);
            let (w, _) = estimate_weights(&cohort, &model)?;
            let grid = ate_beta_y_sweep(&cohort, &w, &model, &axis, &sweep)?;
            run.record(export_grid(&grid, &run.dir, run.stem, run.force)?);
            run.finish(grid_code(&grid), started, jobs)
        }
        Command::SensitivityPe { input, fit, offsets, base } => {
            let config =
                json!({ "input": input_echo(input), "fit": fitting_echo(fit), "offsets": offsets, "base": base });
            let mut run = Run::new(&input.output, "sensitivity_pe", "sensitivity-pe", config)?;
            let cohort = load(input)?;
            let axes = Axis::parse_list(offsets)?;
            let base = OffsetSpec::parse(base)?;
            let sweep = SweepConfig { es: es_config(fit, None)?, boot: boot_config(fit, jobs), seed: fit.seed };
            let model = propensity(&fit.covariates);
            let (w, _) = estimate_weights(&cohort, &model)?;
            let grid = pe_offset_grid(&cohort, &w, &model, &axes, &base, &sweep)?;
            run.record(export_grid(&grid, &run.dir, run.stem, run.force)?);
            run.finish(grid_code(&grid), started, jobs)
        }
        Command::Simulate { params, pe, n, seed, truth_draws, output } => {
            let config = json!({
                "params": params.as_ref().map(|p| p.display().to_string()),
                "pe": pe,
                "n": n,
                "seed": seed,
                "truth_draws": truth_draws,
            });
            let mut run = Run::new(output, "simulate", "simulate", config)?;
            let dgp = match params {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    DgpParams::from_json(&text)?
                }
                None if *pe => DgpParams::reference_pe(),
                None => DgpParams::default(),
            };
            let cohort = simulate_cohort(&dgp, *n, *seed)?;
            run.write("cohort.csv", &cohort.to_csv())?;
            let truth = oracle_truth_with(&dgp, *truth_draws, *seed)?;
            run.write("truth.json", &to_json(&json!({ "params": dgp, "truth": truth }))?)?;
            run.finish(0, started, jobs)
        }
    }
}

/// Library errors caused by the input map to exit code 1 like everything
/// else that is not a usage error.
fn report_error(e: &anyhow::Error) -> u8 {
    eprintln!("error: {e:#}");
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => ExitCode::from(report_error(&e)),
    }
}
