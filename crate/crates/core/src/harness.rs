//! Experiment orchestration: configuration, single runs, seeded sweeps,
//! averaging, linear fits, bond-dimension calibration and CSV/JSON output.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{bond_entropies, max_entropy, EntropyError, EntropyRecord};
use crate::exact_oracle::{
    dense_evolve_history, dense_operator_schmidt, dense_product, dense_site_density,
};
use crate::fock_local::{
    dephase_local, squeezed_vacuum_amplitudes, FockError, LocalDensity, PhaseDistribution,
};
use crate::interferometer::{sample_haar_layers_seeded, CircuitError};
use crate::tn_engine::{TnConfig, TnError, TnState};
use crate::util::splitmix64;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss scaling gives transmissivity {eta} > 1 at N = {inputs}")]
    LossExceedsUnity { eta: f64, inputs: usize },
    #[error(transparent)]
    Tn(#[from] TnError),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type HarnessResult<T> = Result<T, HarnessError>;

/// Rule for the interferometer size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeRule {
    /// `M = max(20, 4N)`.
    #[serde(rename = "max(20, 4N)")]
    FourPerInputAtLeastTwenty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModeCount {
    Explicit(usize),
    Rule(ModeRule),
}

impl Default for ModeCount {
    fn default() -> Self {
        Self::Rule(ModeRule::FourPerInputAtLeastTwenty)
    }
}

impl ModeCount {
    pub fn resolve(self, inputs: usize) -> usize {
        match self {
            Self::Explicit(m) => m,
            Self::Rule(ModeRule::FourPerInputAtLeastTwenty) => 20.max(4 * inputs),
        }
    }
}

/// `y = beta * x^gamma`, used both for noise growth and loss scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLaw {
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub inputs: usize,
    pub modes: ModeCount,
    pub squeezing: f64,
    pub dist: PhaseDistribution,
    /// When set, overrides `dist` with a wrapped Gaussian of width `beta * N^gamma`.
    pub sigma_of_n: Option<PowerLaw>,
    /// Output photon number `beta * <N_in>^gamma`, realised as uniform input loss.
    pub loss: Option<PowerLaw>,
    pub local_dim: usize,
    pub chi_max: Option<usize>,
    pub svd_cutoff: f64,
    pub trace_error_budget: f64,
    pub num_haar_samples: usize,
    pub base_seed: u64,
    pub alphas: Vec<f64>,
    /// Rescale each truncated input to unit trace before evolution.
    pub normalize_inputs: bool,
    /// Keep per-layer, per-bond entropies in the result.
    pub verbose_trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            inputs: 2,
            modes: ModeCount::default(),
            squeezing: 0.4,
            dist: PhaseDistribution::None,
            sigma_of_n: None,
            loss: None,
            local_dim: 4,
            chi_max: Some(64),
            svd_cutoff: 1e-12,
            trace_error_budget: 0.01,
            num_haar_samples: 100,
            base_seed: 0,
            alphas: vec![1.0],
            normalize_inputs: true,
            verbose_trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn num_modes(&self) -> usize {
        self.modes.resolve(self.inputs)
    }

    pub fn validate(&self) -> HarnessResult<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let m = self.num_modes();
        if m == 0 {
            return bad("at least one mode is required".into());
        }
        if self.inputs > m {
            return bad(format!("{} inputs exceed {m} modes", self.inputs));
        }
        if !(self.trace_error_budget > 0.0 && self.trace_error_budget < 1.0) {
            return bad(format!(
                "trace error budget {} outside (0, 1)",
                self.trace_error_budget
            ));
        }
        if self.num_haar_samples == 0 {
            return bad("need at least one Haar sample".into());
        }
        if self.local_dim == 0 {
            return bad("local dimension must be positive".into());
        }
        if self.chi_max == Some(0) {
            return bad("bond dimension limit must be positive".into());
        }
        if !(self.squeezing.is_finite() && self.squeezing >= 0.0) {
            return bad(format!(
                "squeezing {} must be finite and nonnegative",
                self.squeezing
            ));
        }
        if !(self.svd_cutoff >= 0.0) {
            return bad(format!(
                "svd cutoff {} must be nonnegative",
                self.svd_cutoff
            ));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad(format!("entropy orders {:?} must be positive", self.alphas));
        }
        if let PhaseDistribution::WrappedGaussian { sigma } = self.dist {
            PhaseDistribution::wrapped(sigma)?;
        }
        if let Some(p) = self.sigma_of_n {
            sigma_of_n(p.beta, p.gamma, self.inputs.max(1))?;
        }
        if let Some(p) = self.loss {
            if !(p.beta > 0.0 && p.gamma.is_finite()) {
                return bad(format!("loss scaling {p:?} needs beta > 0"));
            }
        }
        Ok(())
    }

    /// The phase distribution after applying `sigma_of_n`, if configured.
    pub fn effective_dist(&self) -> HarnessResult<PhaseDistribution> {
        match self.sigma_of_n {
            Some(p) => Ok(PhaseDistribution::wrapped(sigma_of_n(
                p.beta,
                p.gamma,
                self.inputs,
            )?)?),
            None => Ok(self.dist),
        }
    }

    /// Input transmissivity; 1 without loss.
    pub fn transmissivity(&self) -> HarnessResult<f64> {
        match self.loss {
            Some(p) if self.inputs > 0 => {
                loss_transmissivity(p.beta, p.gamma, self.inputs, self.squeezing)
            }
            _ => Ok(1.0),
        }
    }
}

/// `η = β <N_in>^(γ-1)` with `<N_in> = N sinh² r`.
pub fn loss_transmissivity(beta: f64, gamma: f64, inputs: usize, r: f64) -> HarnessResult<f64> {
    let mean_in = inputs as f64 * r.sinh().powi(2);
    if !(beta > 0.0) || !(mean_in > 0.0) {
        return Err(HarnessError::Config(format!("loss scaling needs beta > 0 and a nonzero input photon number (beta {beta}, <N> {mean_in})")));
    }
    let eta = beta * mean_in.powf(gamma - 1.0);
    if eta > 1.0 {
        return Err(HarnessError::LossExceedsUnity { eta, inputs });
    }
    Ok(eta)
}

/// `σ = β N^γ`.
pub fn sigma_of_n(beta: f64, gamma: f64, inputs: usize) -> HarnessResult<f64> {
    if !(beta > 0.0 && gamma > 0.0) {
        return Err(HarnessError::Config(format!(
            "sigma scaling needs beta, gamma > 0 (got {beta}, {gamma})"
        )));
    }
    Ok(beta * (inputs as f64).powf(gamma))
}

/// Outcome of one Haar sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub inputs: usize,
    pub modes: usize,
    pub squeezing: f64,
    pub dist: PhaseDistribution,
    pub loss: Option<PowerLaw>,
    pub local_dim: usize,
    pub chi_max: Option<usize>,
    /// Maximum entropy per configured order.
    pub maxima: Vec<EntropyRecord>,
    /// Every `(layer, bond, alpha)` entropy when verbose tracing is on.
    pub layer_records: Option<Vec<EntropyRecord>>,
    pub trace_error: f64,
    pub valid: bool,
    pub wall_ms: u64,
}

fn squeezed_input(
    cfg: &ExperimentConfig,
    eta: f64,
    dist: &PhaseDistribution,
) -> HarnessResult<LocalDensity> {
    let mut rho = LocalDensity::squeezed(cfg.squeezing, cfg.local_dim)?;
    if cfg.normalize_inputs {
        rho = rho.normalized();
    }
    if eta < 1.0 {
        rho = rho.with_loss(eta)?;
    }
    Ok(dephase_local(&rho, dist))
}

fn builds_pure_state(dist: &PhaseDistribution, eta: f64) -> bool {
    let coherent = match dist {
        PhaseDistribution::None => true,
        PhaseDistribution::WrappedGaussian { sigma } => *sigma == 0.0,
        PhaseDistribution::Uniform => false,
    };
    coherent && eta == 1.0
}

/// Evolves one Haar sample and records entropies after every layer.
///
/// Noise-free lossless inputs run as a pure MPS; operator entropies are then
/// twice the state entropies at every cut and every order.
pub fn run_single(cfg: &ExperimentConfig, haar_seed: u64) -> HarnessResult<RunResult> {
    run_single_with_id(cfg, haar_seed, "single".to_string())
}

fn run_single_with_id(
    cfg: &ExperimentConfig,
    haar_seed: u64,
    run_id: String,
) -> HarnessResult<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let m = cfg.num_modes();
    let dist = cfg.effective_dist()?;
    let eta = cfg.transmissivity()?;
    let tn_cfg = TnConfig {
        chi_max: cfg.chi_max,
        svd_cutoff: cfg.svd_cutoff,
        trace_budget: cfg.trace_error_budget,
        ..TnConfig::default()
    };
    let pure = builds_pure_state(&dist, eta);
    let mut state = if pure {
        let mut psi = squeezed_vacuum_amplitudes(cfg.squeezing, cfg.local_dim)?;
        if cfg.normalize_inputs {
            let n = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            psi.iter_mut().for_each(|z| *z /= n);
        }
        TnState::init_pure(&vec![psi; cfg.inputs], m, tn_cfg)?
    } else {
        let rho = squeezed_input(cfg, eta, &dist)?;
        TnState::init_mixed(&vec![rho; cfg.inputs], m, tn_cfg)?
    };
    let circuit = sample_haar_layers_seeded(m, haar_seed)?;
    let factor = if pure { 2.0 } else { 1.0 };

    let mut history: Vec<Vec<Vec<f64>>> = Vec::with_capacity(circuit.layers.len());
    let mut traces = Vec::with_capacity(circuit.layers.len());
    for layer in &circuit.layers {
        state.apply_beamsplitter_layer(layer, false)?;
        state.canonicalize()?;
        traces.push(1.0 - state.trace());
        history.push(state.all_spectra());
    }
    if let Some(phases) = &circuit.output_phases {
        for (site, &phi) in phases.iter().enumerate() {
            state.apply_output_phase(site, phi)?;
        }
    }
    let trace_error = 1.0 - state.trace();

    let mut maxima = Vec::with_capacity(cfg.alphas.len());
    for &alpha in &cfg.alphas {
        let (value, layer, bond) = max_entropy(&history, alpha)?;
        maxima.push(EntropyRecord {
            layer,
            bond,
            alpha,
            value: factor * value,
            trace_error: traces[layer - 1],
        });
    }
    let layer_records = if cfg.verbose_trace {
        let mut out = Vec::new();
        for (l, snapshot) in history.iter().enumerate() {
            for &alpha in &cfg.alphas {
                for (b, s) in bond_entropies(snapshot, alpha)?.into_iter().enumerate() {
                    out.push(EntropyRecord {
                        layer: l + 1,
                        bond: b + 1,
                        alpha,
                        value: factor * s,
                        trace_error: traces[l],
                    });
                }
            }
        }
        Some(out)
    } else {
        None
    };
    Ok(RunResult {
        run_id,
        seed: haar_seed,
        inputs: cfg.inputs,
        modes: m,
        squeezing: cfg.squeezing,
        dist,
        loss: cfg.loss,
        local_dim: cfg.local_dim,
        chi_max: cfg.chi_max,
        maxima,
        layer_records,
        trace_error,
        valid: trace_error <= cfg.trace_error_budget,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Axes of a sweep; every combination becomes one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Shared settings; its `inputs`, `squeezing`, `dist` and `loss` are
    /// replaced per grid point.
    pub base: ExperimentConfig,
    pub inputs: Vec<usize>,
    #[serde(default)]
    pub squeezings: Vec<f64>,
    #[serde(default)]
    pub dists: Vec<PhaseDistribution>,
    #[serde(default)]
    pub losses: Vec<Option<PowerLaw>>,
}

impl SweepConfig {
    /// Grid points in `(squeezing, dist, loss, inputs)` order, inputs fastest.
    pub fn grid(&self) -> Vec<ExperimentConfig> {
        let squeezings = if self.squeezings.is_empty() {
            vec![self.base.squeezing]
        } else {
            self.squeezings.clone()
        };
        let dists = if self.dists.is_empty() {
            vec![self.base.dist]
        } else {
            self.dists.clone()
        };
        let losses = if self.losses.is_empty() {
            vec![self.base.loss]
        } else {
            self.losses.clone()
        };
        let mut out = Vec::new();
        for &r in &squeezings {
            for &dist in &dists {
                for &loss in &losses {
                    for &n in &self.inputs {
                        out.push(ExperimentConfig {
                            inputs: n,
                            squeezing: r,
                            dist,
                            loss,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Seed of sample `sample` at a grid point with `inputs` inputs on `modes`
/// modes. Noise and loss settings do not enter, so every noise level sees the
/// same interferometers.
pub fn run_seed(base_seed: u64, inputs: usize, modes: usize, sample: usize) -> u64 {
    let point = splitmix64((inputs as u64) << 32 | modes as u64);
    splitmix64(base_seed ^ splitmix64(point ^ splitmix64(sample as u64)))
}

/// Mean, sample standard deviation and counts at one grid point and order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub inputs: usize,
    pub modes: usize,
    pub squeezing: f64,
    pub dist: PhaseDistribution,
    pub loss: Option<PowerLaw>,
    pub alpha: f64,
    pub mean: Option<f64>,
    pub std_dev: Option<f64>,
    pub valid_count: usize,
    pub invalid_count: usize,
    pub skipped_count: usize,
}

impl PointSummary {
    pub fn std_error(&self) -> Option<f64> {
        self.std_dev.map(|s| s / (self.valid_count as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares `y ≈ slope x + intercept`; `None` with fewer than two points.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Mean entropy against `N` for one `(r, dist, loss, alpha)` series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesFit {
    pub squeezing: f64,
    pub dist: PhaseDistribution,
    pub loss: Option<PowerLaw>,
    pub alpha: f64,
    pub inputs: Vec<usize>,
    pub means: Vec<f64>,
    pub fit: Option<LinearFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entropy_unit: String,
    pub points: Vec<PointSummary>,
    pub series: Vec<SeriesFit>,
    #[serde(skip)]
    pub runs: Vec<RunResult>,
}

enum JobOutcome {
    Done(RunResult),
    Skipped,
}

/// Runs every grid point for `base.num_haar_samples` Haar samples.
/// `workers = None` uses the global pool.
pub fn run_sweep(sweep: &SweepConfig, workers: Option<usize>) -> HarnessResult<SweepReport> {
    let grid = sweep.grid();
    if grid.is_empty() {
        return Err(HarnessError::Config("sweep grid is empty".into()));
    }
    for cfg in &grid {
        cfg.validate()?;
    }
    let samples = sweep.base.num_haar_samples;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|p| (0..samples).map(move |s| (p, s)))
        .collect();
    let execute = || -> Vec<HarnessResult<JobOutcome>> {
        jobs.par_iter()
            .map(|&(p, s)| {
                let cfg = &grid[p];
                let seed = run_seed(cfg.base_seed, cfg.inputs, cfg.num_modes(), s);
                match run_single_with_id(cfg, seed, format!("p{p}-s{s}")) {
                    Ok(r) => Ok(JobOutcome::Done(r)),
                    Err(HarnessError::LossExceedsUnity { .. }) => Ok(JobOutcome::Skipped),
                    Err(e) => Err(e),
                }
            })
            .collect()
    };
    let outcomes = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .install(execute),
        None => execute(),
    };

    let mut per_point: Vec<(Vec<RunResult>, usize)> = vec![(Vec::new(), 0); grid.len()];
    for (&(p, _), outcome) in jobs.iter().zip(outcomes) {
        match outcome? {
            JobOutcome::Done(r) => per_point[p].0.push(r),
            JobOutcome::Skipped => per_point[p].1 += 1,
        }
    }

    let mut points = Vec::new();
    for (cfg, (runs, skipped)) in grid.iter().zip(&per_point) {
        let dist = cfg.effective_dist()?;
        for (k, &alpha) in cfg.alphas.iter().enumerate() {
            let mut valid: Vec<(u64, f64)> = runs
                .iter()
                .filter(|r| r.valid)
                .map(|r| (r.seed, r.maxima[k].value))
                .collect();
            valid.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let values: Vec<f64> = valid.iter().map(|v| v.1).collect();
            let (mean, std_dev) = mean_std(&values);
            points.push(PointSummary {
                inputs: cfg.inputs,
                modes: cfg.num_modes(),
                squeezing: cfg.squeezing,
                dist,
                loss: cfg.loss,
                alpha,
                mean,
                std_dev,
                valid_count: values.len(),
                invalid_count: runs.len() - values.len(),
                skipped_count: *skipped,
            });
        }
    }
    let series = fit_series(sweep, &points);
    let runs = per_point.into_iter().flat_map(|(r, _)| r).collect();
    Ok(SweepReport {
        entropy_unit: "nats".into(),
        points,
        series,
        runs,
    })
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

fn fit_series(sweep: &SweepConfig, points: &[PointSummary]) -> Vec<SeriesFit> {
    let mut series: Vec<SeriesFit> = Vec::new();
    for p in points {
        let Some(mean) = p.mean else { continue };
        // With sigma_of_n the distribution varies along N; group by the configured one.
        let key_dist = if sweep.base.sigma_of_n.is_some() {
            sweep.base.dist
        } else {
            p.dist
        };
        let found = series.iter_mut().find(|s| {
            s.squeezing == p.squeezing
                && s.dist == key_dist
                && s.loss == p.loss
                && s.alpha == p.alpha
        });
        match found {
            Some(s) => {
                s.inputs.push(p.inputs);
                s.means.push(mean);
            }
            None => series.push(SeriesFit {
                squeezing: p.squeezing,
                dist: key_dist,
                loss: p.loss,
                alpha: p.alpha,
                inputs: vec![p.inputs],
                means: vec![mean],
                fit: None,
            }),
        }
    }
    for s in &mut series {
        let x: Vec<f64> = s.inputs.iter().map(|&n| n as f64).collect();
        s.fit = linear_fit(&x, &s.means);
    }
    series
}

/// Column order of the CSV output.
pub const CSV_HEADER: [&str; 18] = [
    "run_id",
    "seed",
    "N",
    "M",
    "r",
    "dist",
    "sigma",
    "loss_beta",
    "loss_gamma",
    "d",
    "chi",
    "alpha",
    "max_entropy",
    "argmax_layer",
    "argmax_bond",
    "trace_error",
    "valid",
    "wall_ms",
];

/// Writes one row per run and entropy order. With `timing = false` the
/// wall-clock column is written as 0 so repeated runs are byte-identical.
pub fn write_csv<W: Write>(out: W, runs: &[RunResult], timing: bool) -> HarnessResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in runs {
        let sigma = match r.dist {
            PhaseDistribution::None => 0.0,
            PhaseDistribution::WrappedGaussian { sigma } => sigma,
            PhaseDistribution::Uniform => f64::INFINITY,
        };
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for rec in &r.maxima {
            w.write_record([
                r.run_id.clone(),
                r.seed.to_string(),
                r.inputs.to_string(),
                r.modes.to_string(),
                r.squeezing.to_string(),
                r.dist.label().to_string(),
                sigma.to_string(),
                opt(r.loss.map(|l| l.beta)),
                opt(r.loss.map(|l| l.gamma)),
                r.local_dim.to_string(),
                r.chi_max.map_or(String::new(), |c| c.to_string()),
                rec.alpha.to_string(),
                rec.value.to_string(),
                rec.layer.to_string(),
                rec.bond.to_string(),
                r.trace_error.to_string(),
                r.valid.to_string(),
                if timing {
                    r.wall_ms.to_string()
                } else {
                    "0".into()
                },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-layer records as CSV, for verbose tracing.
pub fn write_layer_csv<W: Write>(out: W, runs: &[RunResult]) -> HarnessResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run_id",
        "seed",
        "layer",
        "bond",
        "alpha",
        "entropy",
        "trace_error",
    ])?;
    for r in runs {
        for rec in r.layer_records.iter().flatten() {
            w.write_record([
                r.run_id.clone(),
                r.seed.to_string(),
                rec.layer.to_string(),
                rec.bond.to_string(),
                rec.alpha.to_string(),
                rec.value.to_string(),
                rec.trace_error.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One calibration attempt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub chi: usize,
    pub trace_error: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Smallest tried bond dimension meeting the budget, if any.
    pub chi: Option<usize>,
    pub trace_error: Option<f64>,
    pub steps: Vec<CalibrationStep>,
}

/// Doubles `χ` from `chi_start` until the final trace error meets the
/// budget or `chi_cap` is reached, then spends at most `refine_steps`
/// bisections between the last failing and first passing value, stopping
/// early once the gap is `max(1, hi / 8)`.
pub fn calibrate(
    cfg: &ExperimentConfig,
    haar_seed: u64,
    chi_start: usize,
    chi_cap: usize,
    refine_steps: usize,
) -> HarnessResult<Calibration> {
    if chi_start == 0 || chi_cap < chi_start {
        return Err(HarnessError::Config(format!(
            "bad calibration range {chi_start}..={chi_cap}"
        )));
    }
    let mut steps = Vec::new();
    let attempt = |chi: usize, steps: &mut Vec<CalibrationStep>| -> HarnessResult<f64> {
        let run = run_single(
            &ExperimentConfig {
                chi_max: Some(chi),
                ..cfg.clone()
            },
            haar_seed,
        )?;
        steps.push(CalibrationStep {
            chi,
            trace_error: run.trace_error,
            wall_ms: run.wall_ms,
        });
        Ok(run.trace_error)
    };
    let budget = cfg.trace_error_budget;
    let mut lo = 0;
    let mut chi = chi_start;
    let (mut hi, mut hi_err) = loop {
        let err = attempt(chi, &mut steps)?;
        if err <= budget {
            break (chi, err);
        }
        if chi >= chi_cap {
            return Ok(Calibration {
                chi: None,
                trace_error: None,
                steps,
            });
        }
        lo = chi;
        chi = (2 * chi).min(chi_cap);
    };
    for _ in 0..refine_steps {
        if lo == 0 || hi - lo <= (hi / 8).max(1) {
            break;
        }
        let mid = (lo + hi) / 2;
        let err = attempt(mid, &mut steps)?;
        if err <= budget {
            hi = mid;
            hi_err = err;
        } else {
            lo = mid;
        }
    }
    Ok(Calibration {
        chi: Some(hi),
        trace_error: Some(hi_err),
        steps,
    })
}

/// Tensor network against the dense reference on one small instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub seed: u64,
    pub alpha: f64,
    pub network_max: (f64, usize, usize),
    pub dense_max: (f64, usize, usize),
    /// Largest entropy difference over every layer and bond.
    pub entropy_error: f64,
    /// Largest entrywise single-site density difference after the last layer.
    pub site_density_error: f64,
    pub network_trace: f64,
    pub dense_trace: f64,
}

/// Evolves the configured instance as a vectorized operator with the
/// configured truncation and compares with dense evolution. Output phases are
/// left out of the network run, since they do not change any spectrum.
pub fn oracle_check(
    cfg: &ExperimentConfig,
    haar_seed: u64,
    dense_limit: usize,
) -> HarnessResult<OracleCheck> {
    cfg.validate()?;
    let m = cfg.num_modes();
    let d = cfg.local_dim;
    let dist = cfg.effective_dist()?;
    let eta = cfg.transmissivity()?;
    let rho = squeezed_input(cfg, eta, &dist)?;
    let mut inputs = vec![rho; cfg.inputs];
    inputs.resize(m, LocalDensity::vacuum(d)?);
    let mut circuit = sample_haar_layers_seeded(m, haar_seed)?;
    circuit.output_phases = None;
    let history = dense_evolve_history(&inputs, &circuit, d, dense_limit)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let dense_spectra = history
        .iter()
        .map(|r| {
            (1..m)
                .map(|k| dense_operator_schmidt(r, k, d, m))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| HarnessError::Config(e.to_string()))?;

    let tn_cfg = TnConfig {
        chi_max: cfg.chi_max,
        svd_cutoff: cfg.svd_cutoff,
        trace_budget: cfg.trace_error_budget,
        ..TnConfig::default()
    };
    let mut state = TnState::init_mixed(&inputs[..cfg.inputs], m, tn_cfg)?;
    let mut tn_spectra = Vec::with_capacity(circuit.layers.len());
    for layer in &circuit.layers {
        state.apply_beamsplitter_layer(layer, false)?;
        state.canonicalize()?;
        tn_spectra.push(state.all_spectra());
    }

    let alpha = cfg.alphas[0];
    let mut entropy_error = 0.0_f64;
    for (a, b) in tn_spectra.iter().zip(&dense_spectra) {
        let ea = bond_entropies(a, alpha)?;
        let eb = bond_entropies(b, alpha)?;
        for (x, y) in ea.iter().zip(&eb) {
            entropy_error = entropy_error.max((x - y).abs());
        }
    }
    let last = history.last().cloned().unwrap_or(
        dense_product(&inputs, dense_limit).map_err(|e| HarnessError::Config(e.to_string()))?,
    );
    let mut site_density_error = 0.0_f64;
    for j in 0..m {
        let tn = state.reduced_site_density(j)?;
        let dense = dense_site_density(&last, j, d, m);
        for (x, y) in tn.iter().zip(dense.iter()) {
            site_density_error = site_density_error.max((x - y).norm());
        }
    }
    Ok(OracleCheck {
        seed: haar_seed,
        alpha,
        network_max: max_entropy(&tn_spectra, alpha)?,
        dense_max: max_entropy(&dense_spectra, alpha)?,
        entropy_error,
        site_density_error,
        network_trace: state.trace(),
        dense_trace: last.diag().iter().map(|z| z.re).sum(),
    })
}
