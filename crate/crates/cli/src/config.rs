use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lyapresp::dynamics::IntegratorConfig;
use lyapresp::response::{EndpointMode, PlateauMethod};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-length averaging windows (T = 10⁶, K = 4·10⁶).
    Paper,
    /// Short windows for a single workstation (T = 5·10⁴, K = 2·10⁵).
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// Rescaled Lorenz 96, calibrated to zero mean and unit variance.
    L96,
    /// Fixed stable linear system with vanishing second derivatives.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub system: SystemKind,
    pub forcing: f64,
    pub n_vars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub dt: f64,
    pub spinup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub window: f64,
    pub shards: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSection {
    pub window: f64,
    pub renorm_every: u64,
    pub trace_every: u64,
    pub block_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSection {
    pub h: f64,
    pub depth: usize,
    pub samples: u64,
    pub endpoint: EndpointMode,
    pub plateau: PlateauMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub node: usize,
    pub magnitudes: Vec<f64>,
    pub linear_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutocorrSection {
    pub window: f64,
    pub lag_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub shards: usize,
    /// Worker threads; 0 picks one per available core, capped at the shard count.
    pub threads: usize,
    pub out_dir: PathBuf,
}

/// Every setting of a run. Loaded from TOML, all fields are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub regime: RegimeConfig,
    pub integrator: IntegratorSection,
    pub calibration: CalibrationSection,
    pub lyapunov: LyapunovSection,
    pub response: ResponseSection,
    pub sweep: SweepSection,
    pub autocorr: AutocorrSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (window, samples, acf_window) = match profile {
            Profile::Paper => (1e6, 4_000_000, 1e5),
            Profile::Desk => (5e4, 200_000, 1e4),
        };
        Self {
            regime: RegimeConfig { system: SystemKind::L96, forcing: 8.0, n_vars: 20 },
            integrator: IntegratorSection { dt: 0.01, spinup: 1e3 },
            calibration: CalibrationSection { window: 1e4, shards: 1 },
            lyapunov: LyapunovSection { window, renorm_every: 25, trace_every: 1000, block_time: 1e3 },
            response: ResponseSection {
                h: 0.25,
                depth: 60,
                samples,
                endpoint: EndpointMode::Printed,
                plateau: PlateauMethod::auto(),
            },
            sweep: SweepSection {
                node: 0,
                magnitudes: vec![-0.03, -0.02, -0.01, 0.0, 0.01, 0.02, 0.03],
                linear_limit: lyapresp::experiments::default_linear_limit(8.0),
            },
            autocorr: AutocorrSection { window: acf_window, lag_max: 60 },
            run: RunSection { seed: 1, shards: 1, threads: 0, out_dir: PathBuf::from("out") },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Shards actually run in parallel.
    pub fn threads(&self) -> usize {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        match self.run.threads {
            0 => cores.min(self.run.shards).max(1),
            t => t,
        }
    }

    /// Check every derived constraint before any computation starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let positive = |name: &str, v: f64| -> Result<(), CliError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        let r = &self.regime;
        positive("regime.forcing", r.forcing)?;
        if r.n_vars < 4 {
            return bad(format!("regime.n_vars must be >= 4, got {}", r.n_vars));
        }
        positive("integrator.dt", self.integrator.dt)?;
        if !(self.integrator.spinup >= 0.0 && self.integrator.spinup.is_finite()) {
            return bad(format!("integrator.spinup must be >= 0, got {}", self.integrator.spinup));
        }
        positive("calibration.window", self.calibration.window)?;
        if self.calibration.shards == 0 {
            return bad("calibration.shards must be >= 1".into());
        }
        let l = &self.lyapunov;
        positive("lyapunov.window", l.window)?;
        positive("lyapunov.block_time", l.block_time)?;
        if l.renorm_every == 0 || l.trace_every == 0 {
            return bad("lyapunov.renorm_every and lyapunov.trace_every must be >= 1".into());
        }

        let resp = &self.response;
        positive("response.h", resp.h)?;
        IntegratorConfig::from_history_step(self.integrator.dt, resp.h).map_err(|_| {
            CliError::Config(format!(
                "response.h = {} must be a whole multiple of integrator.dt = {}",
                resp.h, self.integrator.dt
            ))
        })?;
        if resp.depth == 0 {
            return bad("response.depth (M) must be >= 1".into());
        }
        if resp.samples == 0 {
            return bad("response.samples must be >= 1".into());
        }
        match resp.plateau {
            PlateauMethod::Manual { t0 } => {
                let i = (t0 / resp.h).round();
                if !(i >= 0.0 && i <= resp.depth as f64 && (i * resp.h - t0).abs() <= 1e-9 * resp.h.max(t0.abs())) {
                    return bad(format!(
                        "response.plateau.t0 = {t0} is not a grid time h·m with 0 <= m <= {}",
                        resp.depth
                    ));
                }
            }
            PlateauMethod::Auto { tolerance, min_points, min_time } => {
                positive("response.plateau.tolerance", tolerance)?;
                if min_points < 2 {
                    return bad("response.plateau.min_points must be >= 2".into());
                }
                if !(min_time >= 0.0) {
                    return bad("response.plateau.min_time must be >= 0".into());
                }
            }
        }

        let s = &self.sweep;
        if s.node >= r.n_vars {
            return bad(format!("sweep.node = {} out of range for n_vars = {}", s.node, r.n_vars));
        }
        if s.magnitudes.iter().any(|p| !p.is_finite()) {
            return bad("sweep.magnitudes must be finite".into());
        }
        positive("sweep.linear_limit", s.linear_limit)?;

        let a = &self.autocorr;
        if a.lag_max == 0 {
            return bad("autocorr.lag_max must be >= 1".into());
        }
        if a.window < 10.0 * resp.h * a.lag_max as f64 {
            return bad(format!(
                "autocorr.window = {} must be at least ten times the lag span {}",
                a.window,
                resp.h * a.lag_max as f64
            ));
        }
        if self.run.shards == 0 {
            return bad("run.shards must be >= 1".into());
        }
        Ok(())
    }
}
