use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gbs_tn::exact_oracle::DENSE_SIDE_LIMIT;
use gbs_tn::fock_local::PhaseDistribution;
use gbs_tn::harness::{
    calibrate, oracle_check, run_seed, run_sweep, write_csv, write_layer_csv, ExperimentConfig,
    HarnessError, ModeCount, PowerLaw, SweepConfig, SweepReport,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(
    name = "gbs-tn",
    version,
    about = "Operator entanglement of noisy Gaussian boson sampling circuits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Haar samples at a single parameter point.
    Run {
        #[command(flatten)]
        params: Params,
        #[command(flatten)]
        output: Output,
    },
    /// Every combination of the listed inputs and noise widths.
    Sweep {
        #[command(flatten)]
        params: Params,
        #[command(flatten)]
        output: Output,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compare the tensor network with dense evolution on a small instance.
    OracleCheck {
        #[command(flatten)]
        params: Params,
        #[arg(long, default_value_t = DENSE_SIDE_LIMIT)]
        dense_limit: usize,
        #[arg(long, default_value_t = 1e-8)]
        entropy_tol: f64,
        #[arg(long, default_value_t = 1e-10)]
        density_tol: f64,
    },
    /// Search for the smallest bond dimension meeting the trace budget.
    Calibrate {
        #[command(flatten)]
        params: Params,
        #[arg(long, default_value_t = 16)]
        chi_start: usize,
        #[arg(long, default_value_t = 256)]
        chi_cap: usize,
        /// Bisection steps after the doubling phase.
        #[arg(long, default_value_t = 3)]
        refine_steps: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    None,
    Wrapped,
    Uniform,
}

#[derive(Args)]
struct Params {
    /// JSON configuration; flags given alongside override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of squeezed inputs; a comma list for sweeps.
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<usize>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    squeezing: Option<f64>,
    #[arg(long, value_enum)]
    dist: Option<DistArg>,
    /// Wrapped-Gaussian width; a comma list for sweeps.
    #[arg(long, value_delimiter = ',')]
    sigma: Vec<f64>,
    #[arg(long, requires = "sigma_gamma")]
    sigma_beta: Option<f64>,
    #[arg(long, requires = "sigma_beta")]
    sigma_gamma: Option<f64>,
    #[arg(long, requires = "loss_gamma")]
    loss_beta: Option<f64>,
    #[arg(long, requires = "loss_beta")]
    loss_gamma: Option<f64>,
    #[arg(long)]
    local_dim: Option<usize>,
    /// Bond dimension limit; 0 means unbounded.
    #[arg(long)]
    chi: Option<usize>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    #[arg(long)]
    verbose_trace: bool,
}

#[derive(Args)]
struct Output {
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary JSON destination; stderr when absent.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Exit with status 3 if any run exceeds the trace budget.
    #[arg(long)]
    strict: bool,
    /// Write 0 in the wall_ms column for byte-identical reruns.
    #[arg(long)]
    no_timing: bool,
}

enum Failure {
    Config(String),
    Budget(String),
    Other(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_)
            | HarnessError::Fock(_)
            | HarnessError::Json(_)
            | HarnessError::LossExceedsUnity { .. } => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

impl Params {
    /// Applies scalar flags on top of `cfg`; list-valued flags are left to the caller.
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(m) = self.modes {
            cfg.modes = ModeCount::Explicit(m);
        }
        if let Some(r) = self.squeezing {
            cfg.squeezing = r;
        }
        if let (Some(beta), Some(gamma)) = (self.sigma_beta, self.sigma_gamma) {
            cfg.sigma_of_n = Some(PowerLaw { beta, gamma });
        }
        if let (Some(beta), Some(gamma)) = (self.loss_beta, self.loss_gamma) {
            cfg.loss = Some(PowerLaw { beta, gamma });
        }
        if let Some(d) = self.local_dim {
            cfg.local_dim = d;
        }
        if let Some(chi) = self.chi {
            cfg.chi_max = (chi > 0).then_some(chi);
        }
        if let Some(c) = self.cutoff {
            cfg.svd_cutoff = c;
        }
        if let Some(b) = self.budget {
            cfg.trace_error_budget = b;
        }
        if let Some(s) = self.samples {
            cfg.num_haar_samples = s;
        }
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if !self.alpha.is_empty() {
            cfg.alphas = self.alpha.clone();
        }
        if self.verbose_trace {
            cfg.verbose_trace = true;
        }
    }

    fn dists(&self, fallback: PhaseDistribution) -> Result<Vec<PhaseDistribution>, Failure> {
        let wrapped =
            |s: f64| PhaseDistribution::wrapped(s).map_err(|e| Failure::Config(e.to_string()));
        match self.dist {
            Some(DistArg::None) => Ok(vec![PhaseDistribution::None]),
            Some(DistArg::Uniform) => Ok(vec![PhaseDistribution::Uniform]),
            Some(DistArg::Wrapped) if self.sigma.is_empty() => {
                Err(Failure::Config("--dist wrapped needs --sigma".into()))
            }
            Some(DistArg::Wrapped) => self.sigma.iter().map(|&s| wrapped(s)).collect(),
            None if !self.sigma.is_empty() => self.sigma.iter().map(|&s| wrapped(s)).collect(),
            None => Ok(vec![fallback]),
        }
    }

    fn single(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => read_json(p)?,
            None => ExperimentConfig::default(),
        };
        self.apply(&mut cfg);
        match self.inputs.as_slice() {
            [] => {}
            [n] => cfg.inputs = *n,
            _ => {
                return Err(Failure::Config(
                    "this command takes a single --inputs value".into(),
                ))
            }
        }
        let dists = self.dists(cfg.dist)?;
        if dists.len() != 1 {
            return Err(Failure::Config(
                "this command takes a single --sigma value".into(),
            ));
        }
        cfg.dist = dists[0];
        cfg.validate()?;
        Ok(cfg)
    }

    fn sweep(&self) -> Result<SweepConfig, Failure> {
        let mut sweep: SweepConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => SweepConfig {
                base: ExperimentConfig::default(),
                inputs: vec![],
                squeezings: vec![],
                dists: vec![],
                losses: vec![],
            },
        };
        self.apply(&mut sweep.base);
        if !self.inputs.is_empty() {
            sweep.inputs = self.inputs.clone();
        }
        if sweep.inputs.is_empty() {
            return Err(Failure::Config("a sweep needs --inputs".into()));
        }
        if self.dist.is_some() || !self.sigma.is_empty() {
            sweep.dists = self.dists(sweep.base.dist)?;
        }
        Ok(sweep)
    }
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => {
            Box::new(File::create(p).map_err(|e| Failure::Other(format!("{}: {e}", p.display())))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(report: &SweepReport, output: &Output) -> Result<(), Failure> {
    write_csv(sink(&output.out)?, &report.runs, !output.no_timing)?;
    if report.runs.iter().any(|r| r.layer_records.is_some()) {
        let layers = output.out.as_ref().map(|p| p.with_extension("layers.csv"));
        write_layer_csv(sink(&layers)?, &report.runs)?;
    }
    let summary =
        serde_json::to_string_pretty(report).map_err(|e| Failure::Other(e.to_string()))?;
    match &output.summary {
        Some(p) => std::fs::write(p, summary + "\n")?,
        None => eprintln!("{summary}"),
    }
    let invalid = report.runs.iter().filter(|r| !r.valid).count();
    if invalid > 0 {
        let msg = format!(
            "{invalid} of {} runs exceeded the trace budget",
            report.runs.len()
        );
        if output.strict {
            return Err(Failure::Budget(msg));
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { params, output } => {
            let cfg = params.single()?;
            let sweep = SweepConfig {
                inputs: vec![cfg.inputs],
                dists: vec![cfg.dist],
                squeezings: vec![],
                losses: vec![],
                base: cfg,
            };
            emit(&run_sweep(&sweep, None)?, &output)
        }
        Command::Sweep {
            params,
            output,
            workers,
        } => emit(&run_sweep(&params.sweep()?, workers)?, &output),
        Command::OracleCheck {
            params,
            dense_limit,
            entropy_tol,
            density_tol,
        } => {
            let cfg = params.single()?;
            let seed = run_seed(cfg.base_seed, cfg.inputs, cfg.num_modes(), 0);
            let check = oracle_check(&cfg, seed, dense_limit)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&check).map_err(|e| Failure::Other(e.to_string()))?
            );
            if check.entropy_error > entropy_tol || check.site_density_error > density_tol {
                return Err(Failure::Other(format!(
                    "mismatch: entropy error {:e}, site density error {:e}",
                    check.entropy_error, check.site_density_error
                )));
            }
            Ok(())
        }
        Command::Calibrate {
            params,
            chi_start,
            chi_cap,
            refine_steps,
        } => {
            let cfg = params.single()?;
            let seed = run_seed(cfg.base_seed, cfg.inputs, cfg.num_modes(), 0);
            let cal = calibrate(&cfg, seed, chi_start, chi_cap, refine_steps)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&cal).map_err(|e| Failure::Other(e.to_string()))?
            );
            match cal.chi {
                Some(_) => Ok(()),
                None => Err(Failure::Budget(format!(
                    "no bond dimension up to {chi_cap} meets the trace budget"
                ))),
            }
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Budget(msg)) => {
            eprintln!("trace budget: {msg}");
            ExitCode::from(EXIT_BUDGET)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
