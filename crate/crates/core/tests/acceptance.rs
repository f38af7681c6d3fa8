//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 7 and 8 are the long suite (hours on a single core) and run only
//! when `GBS_TN_LONG_SUITE=1`; set `GBS_TN_LONG_SUITE_OUT=<dir>` to keep the
//! sweep CSV and summary JSON. Numeric arguments select criteria, e.g.
//! `cargo test --test acceptance -- 1 3`.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use gbs_tn::entropy::bond_entropies;
use gbs_tn::exact_oracle::{
    build_a, covariance_from_circuit, dense_evolve, dense_pattern_probability,
    dephased_probability, gbs_probability, gbs_probability_pure, hafnian, hafnian_subset_dp,
    PhotonPattern,
};
use gbs_tn::fock_local::{
    dephase_local, squeezed_vacuum_amplitudes, wrapped_gaussian_pdf, LocalDensity,
    PhaseDistribution,
};
use gbs_tn::harness::{
    calibrate, oracle_check, run_seed, run_single, run_sweep, write_csv, ExperimentConfig,
    ModeCount, PowerLaw, SweepConfig, SweepReport,
};
use gbs_tn::interferometer::{compose_circuit, sample_haar_layers_seeded};
use gbs_tn::tn_engine::{TnConfig, TnState};
use gbs_tn::C64;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LONG_SUITE_VAR: &str = "GBS_TN_LONG_SUITE";
const LONG_SUITE_OUT_VAR: &str = "GBS_TN_LONG_SUITE_OUT";

/// Settings of the long suite: Haar samples per point and the desk-scale
/// truncation for each series.
const LONG_SAMPLES: usize = 30;
const LOSS_SAMPLES: usize = 12;
const UNIFORM_DIM: usize = 5;
const UNIFORM_CHI: usize = 128;
const WRAPPED_DIM: usize = 4;
const WRAPPED_CHI: usize = 64;
const LOSS_DIM: usize = 4;
const LOSS_CHI: usize = 64;

enum Verdict {
    Pass(String),
    Fail(String),
    Skipped(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn normalized_squeezed(r: f64, d: usize) -> Vec<C64> {
    let mut psi = squeezed_vacuum_amplitudes(r, d).unwrap();
    let n = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    psi.iter_mut().for_each(|z| *z /= n);
    psi
}

fn oracle_equivalence() -> Verdict {
    let started = Instant::now();
    let mut worst_max = 0.0_f64;
    let mut worst_entropy = 0.0_f64;
    let mut worst_density = 0.0_f64;
    for dist in [
        PhaseDistribution::None,
        PhaseDistribution::wrapped(0.5).unwrap(),
        PhaseDistribution::Uniform,
    ] {
        for seed in [1, 2, 3] {
            let cfg = ExperimentConfig {
                inputs: 2,
                modes: ModeCount::Explicit(3),
                squeezing: 0.4,
                dist,
                local_dim: 4,
                chi_max: None,
                svd_cutoff: 0.0,
                ..ExperimentConfig::default()
            };
            let c = oracle_check(&cfg, seed, 4096).unwrap();
            worst_max = worst_max.max((c.network_max.0 - c.dense_max.0).abs());
            worst_entropy = worst_entropy.max(c.entropy_error);
            worst_density = worst_density.max(c.site_density_error);
        }
    }
    let elapsed = started.elapsed();
    check(
        worst_max <= 1e-8 && worst_entropy <= 1e-8 && worst_density <= 1e-10 && elapsed < Duration::from_secs(120),
        format!("max-entropy error {worst_max:.2e}, any-bond error {worst_entropy:.2e}, site density error {worst_density:.2e}, {elapsed:.1?}"),
    )
}

fn pure_factor_two() -> Verdict {
    let (m, d) = (3, 4);
    let mut worst = 0.0_f64;
    for seed in [1, 2, 3] {
        let psi = normalized_squeezed(0.4, d);
        let rho = LocalDensity::pure(&psi).unwrap();
        let cfg = TnConfig::default();
        let mut pure = TnState::init_pure(&[psi.clone(), psi], m, cfg).unwrap();
        let mut mixed = TnState::init_mixed(&[rho.clone(), rho], m, cfg).unwrap();
        for layer in &sample_haar_layers_seeded(m, seed).unwrap().layers {
            pure.apply_beamsplitter_layer(layer, false).unwrap();
            mixed.apply_beamsplitter_layer(layer, false).unwrap();
            pure.canonicalize().unwrap();
            mixed.canonicalize().unwrap();
            for alpha in [1.0, 2.0] {
                let state = bond_entropies(&pure.all_spectra(), alpha).unwrap();
                let op = bond_entropies(&mixed.all_spectra(), alpha).unwrap();
                for (s, o) in state.iter().zip(&op) {
                    worst = worst.max((o - 2.0 * s).abs());
                }
            }
        }
    }
    check(
        worst <= 1e-8,
        format!("largest |S_op - 2 S_state| {worst:.2e} over all bonds and layers"),
    )
}

fn random_complex(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<C64> {
    Array2::from_shape_fn((n, m), |_| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

/// Ryser's inclusion-exclusion formula.
fn permanent(w: &Array2<C64>) -> C64 {
    let n = w.nrows();
    let mut total = C64::new(0.0, 0.0);
    for mask in 1usize..(1 << n) {
        let mut prod = C64::new(1.0, 0.0);
        for i in 0..n {
            prod *= (0..n)
                .filter(|j| mask >> j & 1 == 1)
                .map(|j| w[[i, j]])
                .sum::<C64>();
        }
        let sign = if (n - mask.count_ones() as usize) % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        total += prod * sign;
    }
    total
}

fn hafnian_correctness() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_perm = 0.0_f64;
    for n in [3, 4] {
        for _ in 0..50 {
            let w = random_complex(&mut rng, n, n);
            let mut a = Array2::<C64>::zeros((2 * n, 2 * n));
            for i in 0..n {
                for j in 0..n {
                    a[[i, n + j]] = w[[i, j]];
                    a[[n + j, i]] = w[[i, j]];
                }
            }
            let p = permanent(&w);
            worst_perm = worst_perm.max((hafnian(&a).unwrap() - p).norm() / p.norm());
        }
    }
    let mut worst_alg = 0.0_f64;
    for n in [2, 4, 6, 8] {
        for _ in 0..20 {
            let g = random_complex(&mut rng, n, n);
            let a = &g + &g.t();
            let x = hafnian(&a).unwrap();
            let y = hafnian_subset_dp(&a).unwrap();
            worst_alg = worst_alg.max((x - y).norm() / x.norm().max(f64::MIN_POSITIVE));
        }
    }
    let elapsed = started.elapsed();
    check(
        worst_perm <= 1e-9 && worst_alg <= 1e-9 && elapsed < Duration::from_secs(30),
        format!("hafnian vs permanent {worst_perm:.2e}, two algorithms {worst_alg:.2e} (relative), {elapsed:.1?}"),
    )
}

fn probability_pipeline() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_paths = 0.0_f64;
    for m in 1..=3 {
        for trial in 0..4 {
            let u = compose_circuit(&sample_haar_layers_seeded(m, 100 + trial).unwrap()).unwrap();
            let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..0.9)).collect();
            let cov = covariance_from_circuit(&r, &u).unwrap();
            let mut counts = vec![0usize; m];
            loop {
                if counts.iter().sum::<usize>() <= 4 {
                    let pat = PhotonPattern::new(counts.clone());
                    let full = gbs_probability(&cov, &pat).unwrap();
                    let pure = gbs_probability_pure(&r, &u, &pat).unwrap();
                    worst_paths = worst_paths.max((full - pure).abs());
                }
                let Some(k) = (0..m).find(|&k| counts[k] < 4) else {
                    break;
                };
                counts[k] += 1;
                counts[..k].iter_mut().for_each(|c| *c = 0);
            }
        }
    }
    let amps = squeezed_vacuum_amplitudes(0.4, 30).unwrap();
    let single = covariance_from_circuit(&[0.4], &Array2::eye(1)).unwrap();
    let mut worst_fock = 0.0_f64;
    for n in 0..=8 {
        let p = gbs_probability(&single, &PhotonPattern::new(vec![n])).unwrap();
        worst_fock = worst_fock.max((p - amps[n].norm_sqr()).abs());
    }
    let mut vacuum_exact = true;
    for m in 1..=3 {
        let u = compose_circuit(&sample_haar_layers_seeded(m, 9).unwrap()).unwrap();
        let cov = covariance_from_circuit(&vec![0.4; m], &u).unwrap();
        let p0 = gbs_probability(&cov, &PhotonPattern::new(vec![0; m])).unwrap();
        vacuum_exact &= p0 == 1.0 / cov.determinant().unwrap().sqrt();
    }
    let c_block = {
        let u = compose_circuit(&sample_haar_layers_seeded(3, 5).unwrap()).unwrap();
        let a = build_a(&covariance_from_circuit(&[0.4, 0.4, 0.0], &u).unwrap()).unwrap();
        a.slice(ndarray::s![..3, 3..])
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    };
    check(
        worst_paths <= 1e-10 && worst_fock <= 1e-10 && vacuum_exact && c_block < 1e-12,
        format!("A-path vs B-path {worst_paths:.2e}, single mode vs Fock {worst_fock:.2e}, vacuum exact {vacuum_exact}, C block {c_block:.1e}"),
    )
}

fn dephased_probability_check() -> Verdict {
    let (m, d) = (2, 12);
    let circuit = sample_haar_layers_seeded(m, 31).unwrap();
    let dist = PhaseDistribution::wrapped(0.5).unwrap();
    let inputs: Vec<LocalDensity> = (0..m)
        .map(|_| dephase_local(&LocalDensity::squeezed(0.4, d).unwrap(), &dist))
        .collect();
    let rho = dense_evolve(&inputs, &circuit, d).unwrap();
    let mut worst_z = 0.0_f64;
    for counts in [vec![1, 1], vec![2, 0], vec![2, 2]] {
        let pat = PhotonPattern::new(counts);
        let est = dephased_probability(&[0.4, 0.4], &circuit, &dist, &pat, 100_000, 8).unwrap();
        let exact = dense_pattern_probability(&rho, &pat, d);
        worst_z = worst_z.max((est.mean - exact).abs() / est.std_error);
    }
    let u = compose_circuit(&circuit).unwrap();
    let cov = covariance_from_circuit(&[0.4, 0.4], &u).unwrap();
    let pat = PhotonPattern::new(vec![1, 1]);
    let none = dephased_probability(
        &[0.4, 0.4],
        &circuit,
        &PhaseDistribution::None,
        &pat,
        100_000,
        8,
    )
    .unwrap();
    let exact_none = none.mean == gbs_probability(&cov, &pat).unwrap();
    check(
        worst_z <= 3.0 && exact_none,
        format!("largest deviation {worst_z:.2} standard errors, no-noise path exact {exact_none}"),
    )
}

fn trace_budget() -> Verdict {
    let started = Instant::now();
    let cfg = ExperimentConfig {
        inputs: 4,
        modes: ModeCount::Explicit(20),
        squeezing: 0.4,
        dist: PhaseDistribution::wrapped(0.6).unwrap(),
        local_dim: 4,
        svd_cutoff: 0.0,
        trace_error_budget: 0.01,
        ..ExperimentConfig::default()
    };
    let seed = run_seed(cfg.base_seed, cfg.inputs, cfg.num_modes(), 0);
    let cal = calibrate(&cfg, seed, 16, 256, 0).unwrap();
    let steps: Vec<String> = cal
        .steps
        .iter()
        .map(|s| format!("chi {} -> {:.4}", s.chi, s.trace_error))
        .collect();
    let elapsed = started.elapsed();
    let within = cal.trace_error.is_some_and(|e| e <= 0.01);
    check(
        within && elapsed <= Duration::from_secs(1800),
        format!(
            "calibrated chi {:?}, 1 - Tr rho {:?} [{}], {elapsed:.0?}",
            cal.chi,
            cal.trace_error,
            steps.join(", ")
        ),
    )
}

fn save_long_report(name: &str, report: &SweepReport) {
    let Ok(dir) = std::env::var(LONG_SUITE_OUT_VAR) else {
        return;
    };
    let dir = std::path::PathBuf::from(dir);
    std::fs::create_dir_all(&dir).unwrap();
    write_csv(
        std::fs::File::create(dir.join(format!("{name}.csv"))).unwrap(),
        &report.runs,
        true,
    )
    .unwrap();
    std::fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(report).unwrap(),
    )
    .unwrap();
}

fn long_sweep(base: ExperimentConfig, dists: Vec<PhaseDistribution>) -> SweepReport {
    let sweep = SweepConfig {
        base: ExperimentConfig {
            modes: ModeCount::default(),
            squeezing: 0.4,
            ..base
        },
        inputs: vec![2, 3, 4, 5],
        squeezings: vec![],
        dists,
        losses: vec![],
    };
    run_sweep(&sweep, None).unwrap()
}

/// Per-point valid means, plus the mean over every run (valid or not) as a
/// diagnostic when the trace budget rejects samples.
fn describe_points(report: &SweepReport) -> String {
    report
        .points
        .iter()
        .map(|p| {
            let all: Vec<f64> = report
                .runs
                .iter()
                .filter(|r| r.inputs == p.inputs && r.dist == p.dist && r.loss == p.loss)
                .filter_map(|r| r.maxima.first().map(|m| m.value))
                .collect();
            let unfiltered = (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64);
            let valid = p.mean.map_or("missing".to_string(), |m| format!("{m:.3}"));
            let dist = match p.dist {
                PhaseDistribution::WrappedGaussian { sigma } => format!("wrapped({sigma})"),
                other => other.label().to_string(),
            };
            format!(
                "N{} {dist} valid={valid} ({}/{}) unfiltered={unfiltered:.3?}",
                p.inputs,
                p.valid_count,
                p.valid_count + p.invalid_count
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn linear_trend() -> Verdict {
    let uniform = long_sweep(
        ExperimentConfig {
            local_dim: UNIFORM_DIM,
            chi_max: Some(UNIFORM_CHI),
            num_haar_samples: LONG_SAMPLES,
            ..ExperimentConfig::default()
        },
        vec![PhaseDistribution::Uniform],
    );
    save_long_report("uniform", &uniform);
    let wrapped = long_sweep(
        ExperimentConfig {
            local_dim: WRAPPED_DIM,
            chi_max: Some(WRAPPED_CHI),
            num_haar_samples: LONG_SAMPLES,
            ..ExperimentConfig::default()
        },
        [0.0, 0.6, 1.2]
            .iter()
            .map(|&s| PhaseDistribution::wrapped(s).unwrap())
            .collect(),
    );
    save_long_report("wrapped", &wrapped);

    let complete = |r: &SweepReport| r.series.iter().all(|s| s.inputs.len() == 4);
    let uni = &uniform.series[0];
    let uniform_ok = complete(&uniform)
        && uni
            .fit
            .is_some_and(|f| f.r_squared >= 0.95 && f.slope > 0.0);
    let slopes: Vec<Option<f64>> = wrapped
        .series
        .iter()
        .map(|s| s.fit.map(|f| f.slope))
        .collect();
    let ordered = complete(&wrapped)
        && slopes.len() == 3
        && slopes
            .windows(2)
            .all(|w| matches!(w, [Some(a), Some(b)] if b <= a));
    check(
        uniform_ok && ordered,
        format!(
            "uniform fit {:?}; wrapped slopes (sigma 0, 0.6, 1.2) {slopes:?}; points: {} | {}",
            uni.fit,
            describe_points(&uniform),
            describe_points(&wrapped)
        ),
    )
}

fn loss_contrast() -> Verdict {
    let base = ExperimentConfig {
        local_dim: LOSS_DIM,
        chi_max: Some(LOSS_CHI),
        loss: Some(PowerLaw {
            beta: 0.6,
            gamma: 0.5,
        }),
        num_haar_samples: LOSS_SAMPLES,
        ..ExperimentConfig::default()
    };
    let report = long_sweep(base, vec![PhaseDistribution::None]);
    save_long_report("loss", &report);
    let at = |n: usize| {
        report
            .points
            .iter()
            .find(|p| p.inputs == n && p.mean.is_some())
    };
    let verdict = match (at(3), at(4), at(5)) {
        (Some(a), Some(b), Some(c)) => {
            let second = c.mean.unwrap() - 2.0 * b.mean.unwrap() + a.mean.unwrap();
            let se = (c.std_error().unwrap().powi(2)
                + 4.0 * b.std_error().unwrap().powi(2)
                + a.std_error().unwrap().powi(2))
            .sqrt();
            Some((second, se))
        }
        _ => None,
    };
    let ok = verdict.is_some_and(|(second, se)| second <= se);
    check(ok, format!("second difference over N = 3, 4, 5 (N = 2 has transmissivity > 1): {verdict:?} as (value, standard error); points: {}", describe_points(&report)))
}

fn wrapped_gaussian_facts() -> Verdict {
    let n = 4096;
    let h = 2.0 * PI / n as f64;
    let mut worst_norm = 0.0_f64;
    let mut worst_var = 0.0_f64;
    for sigma in [0.3, 1.0, 2.0] {
        let dist = PhaseDistribution::wrapped(sigma).unwrap();
        let mut mass = 0.0;
        let mut first = C64::new(0.0, 0.0);
        for k in 0..n {
            let theta = -PI + k as f64 * h;
            let p = wrapped_gaussian_pdf(theta, &dist).unwrap();
            mass += p * h;
            first += C64::from_polar(p * h, theta);
        }
        worst_norm = worst_norm.max((mass - 1.0).abs());
        let expected = 1.0 - (-sigma * sigma / 2.0).exp();
        worst_var = worst_var
            .max((1.0 - first.norm() - expected).abs())
            .max((dist.circular_variance() - expected).abs());
    }
    check(
        worst_norm <= 1e-10 && worst_var <= 1e-8,
        format!("normalization error {worst_norm:.2e}, circular variance error {worst_var:.2e}"),
    )
}

fn determinism() -> Verdict {
    let base = ExperimentConfig {
        inputs: 3,
        modes: ModeCount::Explicit(8),
        local_dim: 4,
        chi_max: Some(24),
        num_haar_samples: 3,
        alphas: vec![1.0, 2.0],
        ..ExperimentConfig::default()
    };
    let csv_of = |runs: &[gbs_tn::harness::RunResult]| {
        let mut out = Vec::new();
        write_csv(&mut out, runs, false).unwrap();
        out
    };
    let single_cfg = ExperimentConfig {
        dist: PhaseDistribution::wrapped(0.6).unwrap(),
        ..base.clone()
    };
    let a = csv_of(&[run_single(&single_cfg, 99).unwrap()]);
    let b = csv_of(&[run_single(&single_cfg, 99).unwrap()]);
    let sweep = SweepConfig {
        base,
        inputs: vec![2, 3],
        squeezings: vec![],
        dists: vec![
            PhaseDistribution::Uniform,
            PhaseDistribution::wrapped(0.6).unwrap(),
        ],
        losses: vec![],
    };
    let one = run_sweep(&sweep, Some(1)).unwrap();
    let three = run_sweep(&sweep, Some(3)).unwrap();
    let same_sweep = csv_of(&one.runs) == csv_of(&three.runs)
        && serde_json::to_string(&one).unwrap() == serde_json::to_string(&three).unwrap();
    check(
        a == b && same_sweep,
        format!(
            "repeat identical {}, 1 vs 3 workers identical {same_sweep}",
            a == b
        ),
    )
}

fn main() {
    let long = std::env::var(LONG_SUITE_VAR).is_ok_and(|v| v == "1");
    // Numeric arguments select criteria; anything else (libtest flags) is ignored.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>, bool)> = vec![
        ("oracle equivalence", Box::new(oracle_equivalence), false),
        ("pure-state factor two", Box::new(pure_factor_two), false),
        ("hafnian correctness", Box::new(hafnian_correctness), false),
        (
            "probability pipeline",
            Box::new(probability_pipeline),
            false,
        ),
        (
            "dephased probability",
            Box::new(dephased_probability_check),
            false,
        ),
        ("trace budget", Box::new(trace_budget), false),
        ("linear-scaling trend", Box::new(linear_trend), true),
        ("loss contrast", Box::new(loss_contrast), true),
        (
            "wrapped-Gaussian facts",
            Box::new(wrapped_gaussian_facts),
            false,
        ),
        ("determinism", Box::new(determinism), false),
    ];
    let mut failures = 0;
    for (i, (name, run, is_long)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let started = Instant::now();
        let verdict = if *is_long && !long {
            Verdict::Skipped(format!("long suite, run with {LONG_SUITE_VAR}=1"))
        } else {
            run()
        };
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Verdict::Pass(d) => println!("criterion {:>2} PASS {name}: {d} ({secs:.1} s)", i + 1),
            Verdict::Fail(d) => {
                failures += 1;
                println!("criterion {:>2} FAIL {name}: {d} ({secs:.1} s)", i + 1);
            }
            Verdict::Skipped(d) => println!("criterion {:>2} SKIP {name}: {d}", i + 1),
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
