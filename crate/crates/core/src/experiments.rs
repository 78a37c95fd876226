//! Direct-perturbation checks of the response estimate and the lag
//! autocorrelation diagnostic.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{advance, Forced, State};
use crate::error::{Error, Result};
use crate::lorenz96::{initial_condition, L96Params, Lorenz96};
use crate::lyapunov::{largest_lyapunov, LyapunovEstimate, LyapunovSettings};

/// Constant forcing `p` added at one node of a calibrated regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub params: L96Params,
    pub node: usize,
    pub magnitudes: Vec<f64>,
}

/// λ of `f(x) + p e_node`, started from the same initial state and tangent
/// seed for every `p`.
pub fn measure_perturbed_lyapunov(
    params: &L96Params,
    p: f64,
    node: usize,
    settings: &LyapunovSettings,
    seed: u64,
) -> Result<LyapunovEstimate> {
    let field = Forced::new(Lorenz96::new(*params), node, p)?;
    largest_lyapunov(&field, &initial_condition(params.n_vars, seed), settings, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub lambda: Option<f64>,
    pub stderr: Option<f64>,
    /// Why `lambda` is missing.
    pub failure: Option<String>,
}

impl SweepRow {
    pub fn is_missing(&self) -> bool {
        self.lambda.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub unperturbed: f64,
    pub unperturbed_stderr: f64,
    pub predicted_slope: Option<f64>,
}

impl SweepResult {
    pub fn row(&self, p: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.p == p)
    }

    pub fn missing(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.is_missing())
    }

    /// `r(t0) p` for each row, if a prediction was supplied.
    pub fn predicted_change(&self, p: f64) -> Option<f64> {
        self.predicted_slope.map(|s| s * p)
    }

    /// `(λ_{+p} - λ_{-p}) / 2p` and its standard error.
    pub fn central_difference(&self, p: f64) -> Option<(f64, f64)> {
        let (plus, minus) = (self.row(p)?, self.row(-p)?);
        let slope = (plus.lambda? - minus.lambda?) / (2.0 * p);
        let se = plus.stderr?.hypot(minus.stderr?) / (2.0 * p).abs();
        Some((slope, se))
    }
}

fn as_row(p: f64, result: Result<LyapunovEstimate>) -> Result<SweepRow> {
    match result {
        Ok(e) => Ok(SweepRow { p, lambda: Some(e.lambda), stderr: Some(e.stderr), failure: None }),
        Err(e @ (Error::Divergence { .. } | Error::NonFiniteStretch { .. })) => {
            Ok(SweepRow { p, lambda: None, stderr: None, failure: Some(e.to_string()) })
        }
        Err(e) => Err(e),
    }
}

/// Measure λ_p for every magnitude (plus `p = 0`) in parallel; rows come
/// back sorted by `p`. Diverged runs are kept as rows without a value.
pub fn response_sweep(
    spec: &PerturbationSpec,
    settings: &LyapunovSettings,
    seed: u64,
    threads: usize,
    predicted_slope: Option<f64>,
) -> Result<SweepResult> {
    if spec.node >= spec.params.n_vars {
        return Err(Error::InvalidParameter(format!("node {} out of range", spec.node)));
    }
    let mut ps: Vec<f64> = spec.magnitudes.clone();
    if ps.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidParameter("perturbation magnitudes must be finite".into()));
    }
    ps.push(0.0);
    ps.sort_by(f64::total_cmp);
    ps.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let rows: Vec<Result<SweepRow>> = pool.install(|| {
        ps.par_iter()
            .map(|&p| as_row(p, measure_perturbed_lyapunov(&spec.params, p, spec.node, settings, seed)))
            .collect()
    });
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let zero = rows.iter().position(|r| r.p == 0.0).expect("p = 0 is always measured");
    let (unperturbed, unperturbed_stderr) = match (rows[zero].lambda, rows[zero].stderr) {
        (Some(l), Some(s)) => (l, s),
        _ => return Err(Error::InvalidParameter(format!("unperturbed run failed: {:?}", rows[zero].failure))),
    };
    if !spec.magnitudes.contains(&0.0) {
        rows.remove(zero);
    }
    Ok(SweepResult { rows, unperturbed, unperturbed_stderr, predicted_slope })
}

/// Default half-width of the linear fitting range for forcing `F`.
pub fn default_linear_limit(forcing: f64) -> f64 {
    if forcing < 5.5 {
        0.01
    } else if forcing < 7.0 {
        0.02
    } else {
        0.03
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFitReport {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub predicted_slope: f64,
    /// `|slope - predicted| / |slope|`
    pub relative_error: f64,
    /// `(p, Δλ - fit)` for the points used.
    pub residuals: Vec<(f64, f64)>,
}

/// Ordinary least squares `a + b x`, returning `(a, b, se(b), residuals)`.
fn ols_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, Vec<f64>)> {
    let n = xs.len();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if n < 2 || sxx == 0.0 {
        return Err(Error::Underdetermined { points: n, params: 2 });
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let residuals: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - a - b * x).collect();
    let se = if n > 2 {
        (residuals.iter().map(|r| r * r).sum::<f64>() / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok((a, b, se, residuals))
}

/// Fit `Δλ = λ_p - λ_0` against `p` over `|p| <= limit` and compare the
/// slope with the predicted `r(t0)`.
pub fn linear_fit_compare(sweep: &SweepResult, r_t0: f64, limit: f64) -> Result<LinearFitReport> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = sweep
        .rows
        .iter()
        .filter(|r| r.p.abs() <= limit + 1e-12)
        .filter_map(|r| r.lambda.map(|l| (r.p, l - sweep.unperturbed)))
        .unzip();
    let (intercept, slope, slope_stderr, res) = ols_line(&xs, &ys)?;
    Ok(LinearFitReport {
        slope,
        intercept,
        slope_stderr,
        predicted_slope: r_t0,
        relative_error: (slope - r_t0).abs() / slope.abs(),
        residuals: xs.into_iter().zip(res).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    /// `(c, a, b)` in `λ_p = c + a p + b p²`.
    pub coefficients: [f64; 3],
    pub stderrs: [f64; 3],
}

impl QuadraticFit {
    /// `|b| / se(b)`
    pub fn curvature_significance(&self) -> f64 {
        self.coefficients[2].abs() / self.stderrs[2]
    }
}

/// Weighted least-squares parabola through the sweep, weights `1 / stderr²`.
pub fn quadratic_fit(sweep: &SweepResult) -> Result<QuadraticFit> {
    let pts: Vec<(f64, f64, f64)> = sweep
        .rows
        .iter()
        .filter_map(|r| Some((r.p, r.lambda?, r.stderr?)))
        .filter(|(_, _, s)| s.is_finite() && *s > 0.0)
        .collect();
    if pts.len() < 3 {
        return Err(Error::Underdetermined { points: pts.len(), params: 3 });
    }
    let x = DMatrix::from_fn(pts.len(), 3, |i, j| pts[i].0.powi(j as i32) / pts[i].2);
    let y = DVector::from_fn(pts.len(), |i, _| pts[i].1 / pts[i].2);
    let cov = (x.transpose() * &x)
        .try_inverse()
        .ok_or(Error::Underdetermined { points: pts.len(), params: 3 })?;
    let beta = &cov * x.transpose() * y;
    Ok(QuadraticFit {
        coefficients: [beta[0], beta[1], beta[2]],
        stderrs: [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()],
    })
}

/// Streaming lag products over several channels sharing one time axis.
#[derive(Debug, Clone)]
pub struct LagCorrelator {
    lag_max: usize,
    recent: VecDeque<Vec<f64>>,
    /// Per lag: pair count, Σ x(t), Σ x(t+τ), Σ x(t) x(t+τ).
    count: Vec<f64>,
    lead: Vec<f64>,
    lagged: Vec<f64>,
    product: Vec<f64>,
}

impl LagCorrelator {
    pub fn new(lag_max: usize) -> Self {
        let z = vec![0.0; lag_max + 1];
        Self {
            lag_max,
            recent: VecDeque::with_capacity(lag_max + 1),
            count: z.clone(),
            lead: z.clone(),
            lagged: z.clone(),
            product: z,
        }
    }

    pub fn push(&mut self, sample: &[f64]) {
        if self.recent.len() > self.lag_max {
            self.recent.pop_back();
        }
        self.recent.push_front(sample.to_vec());
        for (lag, past) in self.recent.iter().enumerate() {
            for (a, b) in past.iter().zip(sample) {
                self.count[lag] += 1.0;
                self.lead[lag] += a;
                self.lagged[lag] += b;
                self.product[lag] += a * b;
            }
        }
    }

    /// Mean-removed correlation at each lag, normalized so the value at lag 0 is 1.
    pub fn acf(&self) -> Vec<f64> {
        let cov = |l: usize| {
            let n = self.count[l];
            self.product[l] / n - (self.lead[l] / n) * (self.lagged[l] / n)
        };
        let c0 = cov(0);
        (0..=self.lag_max).map(|l| cov(l) / c0).collect()
    }
}

/// Sample autocorrelation of a scalar series up to `lag_max`.
pub fn sample_acf(series: &[f64], lag_max: usize) -> Result<Vec<f64>> {
    if series.len() <= 10 * lag_max {
        return Err(Error::WindowTooShort(format!("{} samples for {} lags", series.len(), lag_max)));
    }
    let mut c = LagCorrelator::new(lag_max);
    for &v in series {
        c.push(&[v]);
    }
    Ok(c.acf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutocorrelationSettings {
    pub dt: f64,
    pub h: f64,
    pub spinup: f64,
    pub window: f64,
    pub lag_max: usize,
}

impl Default for AutocorrelationSettings {
    fn default() -> Self {
        Self { dt: 0.01, h: 0.25, spinup: 1e3, window: 1e4, lag_max: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autocorrelation {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Autocorrelation {
    /// First lag time after which `|ACF|` stays below `threshold`.
    pub fn decay_time(&self, threshold: f64) -> Option<f64> {
        let last_above = self.values.iter().rposition(|v| v.abs() >= threshold)?;
        self.times.get(last_above + 1).copied()
    }
}

/// Node-pooled lag autocorrelation of `x_i(t)` sampled every `h`.
pub fn autocorrelation(params: &L96Params, settings: &AutocorrelationSettings, seed: u64) -> Result<Autocorrelation> {
    let integ = crate::dynamics::IntegratorConfig::from_history_step(settings.dt, settings.h)?;
    let span = settings.h * settings.lag_max as f64;
    if settings.window < 10.0 * span {
        return Err(Error::WindowTooShort(format!(
            "window {} must be at least ten times the lag span {span}",
            settings.window
        )));
    }
    let field = Lorenz96::new(*params);
    let spin = (settings.spinup / settings.dt).round() as u64;
    let x: State = advance(&field, &initial_condition(params.n_vars, seed), settings.dt, spin, |_, _| {})?;
    let every = integ.substeps_per_history_step as u64;
    let samples = (settings.window / settings.h).round() as u64;
    let mut corr = LagCorrelator::new(settings.lag_max);
    corr.push(x.as_slice());
    advance(&field, &x, settings.dt, samples * every, |step, state| {
        if (step + 1) % every == 0 {
            corr.push(state.as_slice());
        }
    })
    .map_err(|e| match e {
        Error::Divergence { step } => Error::Divergence { step: step + spin },
        e => e,
    })?;
    Ok(Autocorrelation {
        times: (0..=settings.lag_max).map(|l| settings.h * l as f64).collect(),
        values: corr.acf(),
    })
}
