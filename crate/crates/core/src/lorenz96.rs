//! Rescaled Lorenz 96 model on a periodic ring:
//!
//! ```text
//! dx_i/dt = (x_{i-1} + αβ)(x_{i+1} - x_{i-2}) - β x_i + β²(F - α)
//! ```
//!
//! With `α = 0, β = 1` this is the standard Lorenz 96 system. The rescaled
//! variables are related to the standard ones by `X = α + x/β` together with
//! `t_std = β t`, so `α` is the standard climatological mean and `1/β` its
//! standard deviation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Rk4, State, VectorField};
use crate::error::{Error, Result};

/// Accepted residual of `|⟨x_i⟩|` after rescaling.
pub const MEAN_TOLERANCE: f64 = 0.02;
/// Accepted residual of `|⟨x_i²⟩ - 1|` after rescaling.
pub const VARIANCE_TOLERANCE: f64 = 0.05;
/// Amplitude of the seeded uniform noise added to the zero initial state.
pub const INITIAL_NOISE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L96Params {
    pub n_vars: usize,
    pub forcing: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl L96Params {
    pub fn new(n_vars: usize, forcing: f64, alpha: f64, beta: f64) -> Result<Self> {
        if n_vars < 4 {
            return Err(Error::InvalidParameter(format!("Lorenz 96 needs N >= 4, got {n_vars}")));
        }
        if !(forcing > 0.0 && forcing.is_finite()) {
            return Err(Error::InvalidParameter(format!("forcing must be positive, got {forcing}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scaling parameters must satisfy alpha >= 0, beta > 0 (got {alpha}, {beta})"
            )));
        }
        Ok(Self { n_vars, forcing, alpha, beta })
    }

    /// The unscaled system `dX_i/dt = (X_{i+1} - X_{i-2}) X_{i-1} - X_i + F`.
    pub fn standard(n_vars: usize, forcing: f64) -> Result<Self> {
        Self::new(n_vars, forcing, 0.0, 1.0)
    }
}

/// The model as a [`VectorField`], with cyclic neighbour tables precomputed.
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    params: L96Params,
    im2: Vec<usize>,
    im1: Vec<usize>,
    ip1: Vec<usize>,
}

impl Lorenz96 {
    pub fn new(params: L96Params) -> Self {
        let n = params.n_vars;
        Self {
            params,
            im2: (0..n).map(|i| (i + n - 2) % n).collect(),
            im1: (0..n).map(|i| (i + n - 1) % n).collect(),
            ip1: (0..n).map(|i| (i + 1) % n).collect(),
        }
    }

    pub fn params(&self) -> &L96Params {
        &self.params
    }
}

impl VectorField for Lorenz96 {
    fn dim(&self) -> usize {
        self.params.n_vars
    }

    fn rhs_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        let L96Params { forcing, alpha, beta, .. } = self.params;
        let ab = alpha * beta;
        let drive = beta * beta * (forcing - alpha);
        for i in 0..x.len() {
            out[i] = (x[self.im1[i]] + ab) * (x[self.ip1[i]] - x[self.im2[i]]) - beta * x[i] + drive;
        }
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.params.n_vars;
        let (ab, beta) = (self.params.alpha * self.params.beta, self.params.beta);
        let mut j = DMatrix::zeros(n, n);
        for i in 0..n {
            let adv = x[self.im1[i]] + ab;
            j[(i, self.im2[i])] -= adv;
            j[(i, self.im1[i])] += x[self.ip1[i]] - x[self.im2[i]];
            j[(i, i)] -= beta;
            j[(i, self.ip1[i])] += adv;
        }
        j
    }

    fn jacobian_apply_into(&self, x: &DVector<f64>, v: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        let n = self.params.n_vars;
        if n <= 64 {
            let (mut adv, mut shear) = ([0.0; 64], [0.0; 64]);
            self.stencil_apply(x, v, out, &mut adv[..n], &mut shear[..n]);
        } else {
            self.stencil_apply(x, v, out, &mut vec![0.0; n], &mut vec![0.0; n]);
        }
    }

    fn hessian_contract(&self, _x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        // Only ∂²f_a/∂x_{a-1}∂x_{a+1} = 1 and ∂²f_a/∂x_{a-1}∂x_{a-2} = -1 are nonzero.
        let n = self.params.n_vars;
        let mut m = DVector::zeros(n);
        for a in 0..n {
            let (im2, im1, ip1) = (self.im2[a], self.im1[a], self.ip1[a]);
            m[ip1] += w[a] * u[im1];
            m[im1] += w[a] * (u[ip1] - u[im2]);
            m[im2] -= w[a] * u[im1];
        }
        m
    }
}

impl Lorenz96 {
    /// Four-point stencil per row; columns are contiguous in column-major storage.
    fn stencil_apply(
        &self,
        x: &DVector<f64>,
        v: &DMatrix<f64>,
        out: &mut DMatrix<f64>,
        adv: &mut [f64],
        shear: &mut [f64],
    ) {
        let n = self.params.n_vars;
        let (ab, beta) = (self.params.alpha * self.params.beta, self.params.beta);
        for i in 0..n {
            adv[i] = x[self.im1[i]] + ab;
            shear[i] = x[self.ip1[i]] - x[self.im2[i]];
        }
        let (adv, shear) = (&adv[..n], &shear[..n]);
        for (vc, oc) in v.as_slice().chunks_exact(n).zip(out.as_mut_slice().chunks_exact_mut(n)) {
            // interior nodes 2..n-1 without wrap-around, then the three boundary nodes
            let body = oc[2..n - 1].iter_mut().zip(&adv[2..n - 1]).zip(&shear[2..n - 1]);
            for (j, ((o, a), s)) in body.enumerate() {
                let i = j + 2;
                *o = a * (vc[i + 1] - vc[i - 2]) + s * vc[i - 1] - beta * vc[i];
            }
            for i in [0, 1, n - 1] {
                oc[i] = adv[i] * (vc[self.ip1[i]] - vc[self.im2[i]]) + shear[i] * vc[self.im1[i]] - beta * vc[i];
            }
        }
    }
}

fn check_len(params: &L96Params, len: usize) -> Result<()> {
    if len != params.n_vars {
        return Err(Error::DimensionMismatch { expected: params.n_vars, got: len });
    }
    Ok(())
}

pub fn l96_rhs(params: &L96Params, x: &State) -> Result<State> {
    check_len(params, x.len())?;
    Ok(Lorenz96::new(*params).rhs(x))
}

pub fn l96_jacobian(params: &L96Params, x: &State) -> Result<DMatrix<f64>> {
    check_len(params, x.len())?;
    Ok(Lorenz96::new(*params).jacobian(x))
}

pub fn l96_hessian_contract(params: &L96Params, w: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(params, w.len())?;
    check_len(params, u.len())?;
    // second derivatives do not depend on the state
    Ok(Lorenz96::new(*params).hessian_contract(&DVector::zeros(params.n_vars), w, u))
}

/// Zero state plus seeded uniform noise of amplitude [`INITIAL_NOISE`].
pub fn initial_condition(n_vars: usize, seed: u64) -> State {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(n_vars, |_, _| rng.gen_range(-INITIAL_NOISE..=INITIAL_NOISE))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub dt: f64,
    /// Discarded transient, in the integrated system's own time units.
    pub spinup: f64,
    /// Averaging window for both the climatology and the validation run.
    pub window: f64,
    /// Independent trajectory shards whose moment sums are pooled.
    pub shards: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self { dt: 0.01, spinup: 1e3, window: 1e4, shards: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub forcing: f64,
    pub n_vars: usize,
    pub alpha: f64,
    pub beta: f64,
    pub residual_mean: f64,
    pub residual_var: f64,
    pub averaging_window: f64,
}

impl CalibrationResult {
    pub fn params(&self) -> L96Params {
        L96Params { n_vars: self.n_vars, forcing: self.forcing, alpha: self.alpha, beta: self.beta }
    }
}

/// Pooled first and second moment sums over nodes and time.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MomentSums {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl MomentSums {
    pub fn merge(self, other: Self) -> Self {
        Self { count: self.count + other.count, sum: self.sum + other.sum, sum_sq: self.sum_sq + other.sum_sq }
    }
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
    pub fn second_moment(&self) -> f64 {
        self.sum_sq / self.count as f64
    }
    pub fn variance(&self) -> f64 {
        (self.second_moment() - self.mean().powi(2)).max(0.0)
    }
}

/// Node-pooled moments of a Lorenz 96 run after a discarded spin-up.
pub fn pooled_moments(params: &L96Params, settings: &CalibrationSettings, seed: u64) -> Result<MomentSums> {
    let field = Lorenz96::new(*params);
    let mut x = initial_condition(params.n_vars, seed);
    let mut rk = Rk4::new(params.n_vars);
    let spin = (settings.spinup / settings.dt).round() as u64;
    let steps = (settings.window / settings.dt).round() as u64;
    let mut m = MomentSums::default();
    for step in 0..spin + steps {
        if !rk.step(&field, &mut x, settings.dt) {
            return Err(Error::Divergence { step });
        }
        if step >= spin {
            for &v in x.iter() {
                m.sum += v;
                m.sum_sq += v * v;
            }
            m.count += x.len() as u64;
        }
    }
    Ok(m)
}

fn sharded_moments(params: &L96Params, settings: &CalibrationSettings, seed: u64) -> Result<MomentSums> {
    use rayon::prelude::*;
    let shards = settings.shards.max(1);
    let per = CalibrationSettings { window: settings.window / shards as f64, ..*settings };
    let parts: Vec<Result<MomentSums>> =
        (0..shards as u64).into_par_iter().map(|s| pooled_moments(params, &per, seed.wrapping_add(s))).collect();
    parts.into_iter().try_fold(MomentSums::default(), |acc, p| Ok(acc.merge(p?)))
}

/// Choose `(α, β)` from the standard-model climatology and verify the
/// rescaled model has mean 0 and variance 1.
pub fn calibrate(forcing: f64, n_vars: usize, settings: &CalibrationSettings, seed: u64) -> Result<CalibrationResult> {
    if settings.window <= 0.0 || settings.dt <= 0.0 || settings.spinup < 0.0 {
        return Err(Error::InvalidParameter("calibration needs dt > 0, window > 0, spinup >= 0".into()));
    }
    let standard = L96Params::standard(n_vars, forcing)?;
    let clim = sharded_moments(&standard, settings, seed)?;
    let mean = clim.mean();
    let std = clim.variance().sqrt();
    if !(std > 1e-6 * mean.abs().max(1.0)) {
        return Err(Error::CalibrationRejected {
            forcing,
            residual_mean: 0.0,
            residual_var: 1.0,
            reason: format!("degenerate attractor, climatological variance {:.3e}", std * std),
        });
    }
    let params = L96Params::new(n_vars, forcing, mean, 1.0 / std)?;
    let check = sharded_moments(&params, settings, seed.wrapping_add(0x5eed_0000))?;
    let result = CalibrationResult {
        forcing,
        n_vars,
        alpha: params.alpha,
        beta: params.beta,
        residual_mean: check.mean().abs(),
        residual_var: (check.second_moment() - 1.0).abs(),
        averaging_window: settings.window,
    };
    if result.residual_mean > MEAN_TOLERANCE || result.residual_var > VARIANCE_TOLERANCE {
        return Err(Error::CalibrationRejected {
            forcing,
            residual_mean: result.residual_mean,
            residual_var: result.residual_var,
            reason: "rescaled run fails the mean-0/variance-1 check".into(),
        });
    }
    Ok(result)
}
