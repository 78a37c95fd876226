use std::collections::BTreeMap;
use std::time::Instant;

use lyapresp::dynamics::LinearSystem;
use lyapresp::experiments::{
    autocorrelation, linear_fit_compare, quadratic_fit, response_sweep, Autocorrelation, AutocorrelationSettings,
    LinearFitReport, PerturbationSpec, QuadraticFit, SweepResult,
};
use lyapresp::lorenz96::{calibrate, initial_condition, CalibrationResult, CalibrationSettings, Lorenz96};
use lyapresp::lyapunov::{largest_lyapunov, LyapunovEstimate, LyapunovSettings};
use lyapresp::response::{
    finalize, response_curve, run_sharded, select_response_time, CorrelationFunctions, PlateauSelection,
    ResponseCurve, ResponseGridConfig, ResponseRunConfig,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SystemKind};
use crate::output::{header, indexed, num, OutputDir};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Calibrate,
    Lyapunov,
    Response,
    Sweep,
    Autocorr,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Lyapunov => "lyapunov",
            Command::Response => "response",
            Command::Sweep => "sweep",
            Command::Autocorr => "autocorr",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub calibration: Option<CalibrationResult>,
    pub wall_clock_seconds: f64,
    pub shard_seeds: Vec<u64>,
    /// SHA-256 of every file written by the command.
    pub outputs: BTreeMap<String, String>,
}

/// Stable `-0.5 I` plus a skew ring coupling.
pub fn linear_test_system(n: usize) -> LinearSystem {
    let mut a = DMatrix::from_diagonal_element(n, n, -0.5);
    for i in 0..n {
        a[(i, (i + 1) % n)] += 1.0;
        a[((i + 1) % n, i)] -= 1.0;
    }
    LinearSystem::new(a).expect("square matrix")
}

fn require_l96(config: &RunConfig, what: &str) -> Result<(), CliError> {
    match config.regime.system {
        SystemKind::L96 => Ok(()),
        SystemKind::Linear => Err(CliError::Config(format!("{what} requires regime.system = \"l96\""))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CalibrationCache {
    settings: CalibrationSettings,
    seed: u64,
    result: CalibrationResult,
}

fn calibration_settings(config: &RunConfig) -> CalibrationSettings {
    CalibrationSettings {
        dt: config.integrator.dt,
        spinup: config.integrator.spinup,
        window: config.calibration.window,
        shards: config.calibration.shards,
    }
}

/// Calibrate `(α, β)`, reusing a cached result for the same regime and settings.
pub fn calibration(config: &RunConfig, out: &OutputDir) -> Result<CalibrationResult, CliError> {
    require_l96(config, "calibration")?;
    let (f, n) = (config.regime.forcing, config.regime.n_vars);
    let settings = calibration_settings(config);
    let seed = config.run.seed;
    let cache = out.path(&format!("calibration_cache_F{f}_N{n}.json"));
    if let Ok(text) = std::fs::read_to_string(&cache) {
        if let Ok(c) = serde_json::from_str::<CalibrationCache>(&text) {
            if c.settings == settings && c.seed == seed && c.result.forcing == f && c.result.n_vars == n {
                return Ok(c.result);
            }
        }
    }
    let result = calibrate(f, n, &settings, seed)?;
    let entry = CalibrationCache { settings, seed, result };
    std::fs::write(&cache, serde_json::to_vec_pretty(&entry)?)?;
    Ok(result)
}

pub fn run_calibrate(config: &RunConfig, out: &mut OutputDir) -> Result<CalibrationResult, CliError> {
    let c = calibration(config, out)?;
    out.write_csv(
        "calibration.csv",
        &header(&["forcing", "n_vars", "alpha", "beta", "residual_mean", "residual_var", "averaging_window"]),
        [vec![
            num(c.forcing),
            c.n_vars.to_string(),
            num(c.alpha),
            num(c.beta),
            num(c.residual_mean),
            num(c.residual_var),
            num(c.averaging_window),
        ]],
    )?;
    Ok(c)
}

pub fn lyapunov_settings(config: &RunConfig) -> LyapunovSettings {
    let l = &config.lyapunov;
    LyapunovSettings {
        dt: config.integrator.dt,
        spinup: config.integrator.spinup,
        window: l.window,
        renorm_every: l.renorm_every,
        trace_every: l.trace_every,
        block_time: l.block_time,
    }
}

pub fn run_lyapunov(
    config: &RunConfig,
    calibration: Option<&CalibrationResult>,
    out: &mut OutputDir,
) -> Result<LyapunovEstimate, CliError> {
    let settings = lyapunov_settings(config);
    let n = config.regime.n_vars;
    let seed = config.run.seed;
    let x0 = initial_condition(n, seed);
    let est = match calibration {
        Some(c) => largest_lyapunov(&Lorenz96::new(c.params()), &x0, &settings, seed)?,
        None => largest_lyapunov(&linear_test_system(n), &x0, &settings, seed)?,
    };
    out.write_csv(
        "lyapunov.csv",
        &header(&["forcing", "n_vars", "lambda", "stderr", "window"]),
        [vec![num(config.regime.forcing), n.to_string(), num(est.lambda), num(est.stderr), num(est.window)]],
    )?;
    out.write_csv(
        "lyapunov_trace.csv",
        &header(&["t", "lambda"]),
        est.trace.iter().map(|&(t, l)| vec![num(t), num(l)]),
    )?;
    Ok(est)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauReport {
    pub forcing: f64,
    pub n_vars: usize,
    pub samples: u64,
    pub selection: Option<PlateauSelection>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ResponseOutcome {
    pub correlations: CorrelationFunctions,
    pub curve: ResponseCurve,
    pub plateau: PlateauReport,
    pub shard_seeds: Vec<u64>,
}

pub fn run_response(
    config: &RunConfig,
    calibration: Option<&CalibrationResult>,
    out: &mut OutputDir,
) -> Result<ResponseOutcome, CliError> {
    let r = &config.response;
    let run_cfg = ResponseRunConfig {
        dt: config.integrator.dt,
        spinup: config.integrator.spinup,
        grid: ResponseGridConfig { h: r.h, depth: r.depth, samples: r.samples, endpoint: r.endpoint },
    };
    let n = config.regime.n_vars;
    let (shards, threads, seed) = (config.run.shards, config.threads(), config.run.seed);
    let ic = |s| initial_condition(n, s);
    let run = match calibration {
        Some(c) => run_sharded(&Lorenz96::new(c.params()), ic, &run_cfg, shards, threads, seed)?,
        None => run_sharded(&linear_test_system(n), ic, &run_cfg, shards, threads, seed)?,
    };
    let corr = finalize(&run.grid)?;
    let curve = response_curve(&corr);
    write_correlations(&corr, out)?;
    write_curve(&curve, out)?;
    let selection = select_response_time(&curve, r.plateau);
    let plateau = PlateauReport {
        forcing: config.regime.forcing,
        n_vars: n,
        samples: corr.sample_count,
        selection: selection.as_ref().ok().copied(),
        error: selection.err().map(|e| e.to_string()),
    };
    out.write_json("plateau.json", &plateau)?;
    Ok(ResponseOutcome {
        correlations: corr,
        curve,
        plateau,
        shard_seeds: run.shards.iter().map(|s| s.seed).collect(),
    })
}

fn write_correlations(corr: &CorrelationFunctions, out: &mut OutputDir) -> Result<(), CliError> {
    let (n, depth, h) = (corr.dim, corr.depth, corr.h);
    let mut cols = header(&["m", "tau"]);
    cols.extend(indexed("c1", n));
    out.write_csv(
        "c1.csv",
        &cols,
        (0..=depth).map(|m| {
            let mut row = vec![m.to_string(), num(h * m as f64)];
            row.extend(corr.c1_row(m).iter().map(|&v| num(v)));
            row
        }),
    )?;
    let mut cols = header(&["m", "n", "tau", "s"]);
    cols.extend(indexed("c2", n));
    let pairs = (0..=depth).flat_map(|m| (m..=depth).map(move |k| (m, k)));
    out.write_csv(
        "c2.csv",
        &cols,
        pairs.map(|(m, k)| {
            let mut row = vec![m.to_string(), k.to_string(), num(h * m as f64), num(h * k as f64)];
            row.extend(corr.c2_row(m, k).iter().map(|&v| num(v)));
            row
        }),
    )?;
    Ok(())
}

fn write_curve(curve: &ResponseCurve, out: &mut OutputDir) -> Result<(), CliError> {
    let n = curve.vectors.first().map_or(0, Vec::len);
    let mut cols = header(&["t", "r"]);
    cols.extend(indexed("r", n));
    out.write_csv(
        "response.csv",
        &cols,
        (0..curve.len()).map(|i| {
            let mut row = vec![num(curve.times[i]), num(curve.scalar[i])];
            row.extend(curve.vectors[i].iter().map(|&v| num(v)));
            row
        }),
    )?;
    out.write_csv(
        "response_plot.csv",
        &header(&["t", "r"]),
        curve.times.iter().zip(&curve.scalar).map(|(&t, &r)| vec![num(t), num(r)]),
    )?;
    Ok(())
}

/// `r(t0)` from an earlier response run of the same regime in this output directory.
pub fn stored_prediction(config: &RunConfig, out: &OutputDir) -> Option<f64> {
    let text = std::fs::read_to_string(out.path("plateau.json")).ok()?;
    let report: PlateauReport = serde_json::from_str(&text).ok()?;
    (report.forcing == config.regime.forcing && report.n_vars == config.regime.n_vars)
        .then_some(report.selection?.r_t0)
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub linear: Option<LinearFitReport>,
    pub linear_error: Option<String>,
    pub quadratic: Option<QuadraticFit>,
    pub curvature_significance: Option<f64>,
    /// `(p, (λ_{+p} - λ_{-p}) / 2p, standard error)`
    pub central_differences: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub sweep: SweepResult,
    pub fit: FitSummary,
}

pub fn run_sweep(
    config: &RunConfig,
    calibration: &CalibrationResult,
    predicted_slope: Option<f64>,
    out: &mut OutputDir,
) -> Result<SweepOutcome, CliError> {
    let spec = PerturbationSpec {
        params: calibration.params(),
        node: config.sweep.node,
        magnitudes: config.sweep.magnitudes.clone(),
    };
    let sweep = response_sweep(&spec, &lyapunov_settings(config), config.run.seed, config.threads(), predicted_slope)?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    out.write_csv(
        "sweep.csv",
        &header(&["p", "lambda_p", "stderr", "predicted_delta_lambda", "status"]),
        sweep.rows.iter().map(|r| {
            vec![
                num(r.p),
                opt(r.lambda),
                opt(r.stderr),
                opt(sweep.predicted_change(r.p)),
                r.failure.clone().unwrap_or_else(|| "ok".into()),
            ]
        }),
    )?;
    let linear = linear_fit_compare(&sweep, predicted_slope.unwrap_or(f64::NAN), config.sweep.linear_limit);
    let quadratic = quadratic_fit(&sweep).ok();
    let mut central_differences: Vec<(f64, f64, f64)> = sweep
        .rows
        .iter()
        .filter(|r| r.p > 0.0)
        .filter_map(|r| sweep.central_difference(r.p).map(|(s, se)| (r.p, s, se)))
        .collect();
    central_differences.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fit = FitSummary {
        linear_error: linear.as_ref().err().map(|e| e.to_string()),
        linear: linear.ok(),
        curvature_significance: quadratic.as_ref().map(QuadraticFit::curvature_significance),
        quadratic,
        central_differences,
    };
    out.write_json("fit.json", &fit)?;
    Ok(SweepOutcome { sweep, fit })
}

pub fn run_autocorr(
    config: &RunConfig,
    calibration: &CalibrationResult,
    out: &mut OutputDir,
) -> Result<Autocorrelation, CliError> {
    let settings = AutocorrelationSettings {
        dt: config.integrator.dt,
        h: config.response.h,
        spinup: config.integrator.spinup,
        window: config.autocorr.window,
        lag_max: config.autocorr.lag_max,
    };
    let acf = autocorrelation(&calibration.params(), &settings, config.run.seed)?;
    out.write_csv(
        "acf.csv",
        &header(&["tau", "acf"]),
        acf.times.iter().zip(&acf.values).map(|(&t, &v)| vec![num(t), num(v)]),
    )?;
    Ok(acf)
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub calibration: CalibrationResult,
    pub lambda: f64,
    pub lambda_stderr: f64,
    pub plateau: PlateauReport,
    pub fit: FitSummary,
    pub missing_rows: usize,
    /// First lag after which `|ACF| < 0.2` for good.
    pub acf_decay_time: Option<f64>,
}

/// Outcome of a command: the manifest plus whether diverged rows were seen.
pub struct Execution {
    pub manifest: RunManifest,
    pub missing_rows: usize,
    pub plateau_error: Option<String>,
}

pub fn execute(command: Command, config: &RunConfig) -> Result<Execution, CliError> {
    config.validate()?;
    let start = Instant::now();
    let mut out = OutputDir::create(&config.run.out_dir)?;
    let mut shard_seeds = vec![config.run.seed];
    let mut missing_rows = 0;
    let mut plateau_error = None;
    let is_l96 = config.regime.system == SystemKind::L96;
    let cal = if is_l96 { Some(calibration(config, &out)?) } else { None };

    match command {
        Command::Calibrate => {
            run_calibrate(config, &mut out)?;
        }
        Command::Lyapunov => {
            run_lyapunov(config, cal.as_ref(), &mut out)?;
        }
        Command::Response => {
            let r = run_response(config, cal.as_ref(), &mut out)?;
            shard_seeds = r.shard_seeds;
            // r ≡ 0 for the linear system, so no plateau is expected there
            plateau_error = r.plateau.error.filter(|_| is_l96);
        }
        Command::Sweep => {
            require_l96(config, "sweep")?;
            let prediction = stored_prediction(config, &out);
            let s = run_sweep(config, cal.as_ref().unwrap(), prediction, &mut out)?;
            missing_rows = s.sweep.missing().count();
        }
        Command::Autocorr => {
            require_l96(config, "autocorr")?;
            run_autocorr(config, cal.as_ref().unwrap(), &mut out)?;
        }
        Command::Report => {
            require_l96(config, "report")?;
            let cal = cal.as_ref().unwrap();
            run_calibrate(config, &mut out)?;
            let lyap = run_lyapunov(config, Some(cal), &mut out)?;
            let resp = run_response(config, Some(cal), &mut out)?;
            shard_seeds = resp.shard_seeds.clone();
            let prediction = resp.plateau.selection.map(|s| s.r_t0);
            let sweep = run_sweep(config, cal, prediction, &mut out)?;
            let acf = run_autocorr(config, cal, &mut out)?;
            missing_rows = sweep.sweep.missing().count();
            plateau_error = resp.plateau.error.clone();
            let report = Report {
                calibration: *cal,
                lambda: lyap.lambda,
                lambda_stderr: lyap.stderr,
                plateau: resp.plateau,
                fit: sweep.fit,
                missing_rows,
                acf_decay_time: acf.decay_time(0.2),
            };
            out.write_json("report.json", &report)?;
        }
    }

    let manifest = RunManifest {
        command: command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        calibration: cal,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        shard_seeds,
        outputs: out.checksums().clone(),
    };
    let mut manifest_out = OutputDir::create(&config.run.out_dir)?;
    manifest_out.write_json(&format!("manifest_{}.json", command.name()), &manifest)?;
    Ok(Execution { manifest, missing_rows, plateau_error })
}

