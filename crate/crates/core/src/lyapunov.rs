//! Largest Lyapunov exponent by renormalized tangent propagation, and the
//! incremental tangent-map machinery used by the response estimator.
//!
//! Index convention: `T_k` is the tangent map of the history-step flow
//! starting at `x_k`, so `T_k` carries tangent vectors from `x_k` to
//! `x_{k+1}`. Products over several steps put later increments on the left.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Rk4, State, VectorField};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSettings {
    pub dt: f64,
    pub spinup: f64,
    pub window: f64,
    /// Integrator steps between renormalizations of the tangent vector.
    pub renorm_every: u64,
    /// Integrator steps between entries of the convergence trace.
    pub trace_every: u64,
    /// Block length for the standard error, capped at a tenth of the window.
    pub block_time: f64,
}

impl Default for LyapunovSettings {
    fn default() -> Self {
        Self { dt: 0.01, spinup: 1e3, window: 5e4, renorm_every: 25, trace_every: 1000, block_time: 1e3 }
    }
}

impl LyapunovSettings {
    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.window > 0.0) || self.spinup < 0.0 {
            return Err(Error::InvalidParameter("lyapunov settings need dt > 0, window > 0, spinup >= 0".into()));
        }
        if self.renorm_every == 0 || self.trace_every == 0 || !(self.block_time > 0.0) {
            return Err(Error::InvalidParameter("renorm_every, trace_every and block_time must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub lambda: f64,
    /// Standard error from non-overlapping block averages.
    pub stderr: f64,
    pub window: f64,
    /// `(t, running λ)` pairs.
    pub trace: Vec<(f64, f64)>,
    pub block_means: Vec<f64>,
}

/// Duration-weighted combination of independent estimates.
pub fn combine_estimates(estimates: &[LyapunovEstimate]) -> Option<(f64, f64)> {
    let total: f64 = estimates.iter().map(|e| e.window).sum();
    if estimates.is_empty() || total <= 0.0 {
        return None;
    }
    let lambda = estimates.iter().map(|e| e.lambda * e.window).sum::<f64>() / total;
    let var = estimates.iter().map(|e| (e.stderr * e.window / total).powi(2)).sum::<f64>();
    Some((lambda, var.sqrt()))
}

/// Unit tangent direction with its accumulated log-stretch.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentState {
    pub direction: DVector<f64>,
    pub log_norm_accumulator: f64,
    pub elapsed: f64,
}

impl TangentState {
    pub fn new(direction: DVector<f64>) -> Self {
        let n = direction.norm();
        Self { direction: direction / n, log_norm_accumulator: 0.0, elapsed: 0.0 }
    }

    /// Replace the direction by `v / ‖v‖`, adding `ln ‖v‖` to the accumulator.
    pub fn absorb(&mut self, v: &DVector<f64>, span: f64) -> Option<f64> {
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        let stretch = norm.ln();
        self.direction.copy_from(v);
        self.direction /= norm;
        self.log_norm_accumulator += stretch;
        self.elapsed += span;
        Some(stretch)
    }
}

/// Seeded isotropic unit vector.
pub fn random_direction(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a6e_9e37_79b9_7f4a);
    let v: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    let norm = v.norm();
    v / norm
}

fn steps_for(time: f64, dt: f64) -> u64 {
    (time / dt).round() as u64
}

/// Discard a transient, propagating the tangent direction along with the state
/// so that it has aligned with the leading growth direction at the end.
pub fn spin_up<F: VectorField + ?Sized>(
    field: &F,
    x0: &State,
    dt: f64,
    spinup: f64,
    renorm_every: u64,
    seed: u64,
) -> Result<(State, DVector<f64>)> {
    let n = field.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x0.len() });
    }
    let mut x = x0.clone();
    let mut v = DMatrix::from_column_slice(n, 1, random_direction(n, seed).as_slice());
    let mut rk = Rk4::with_columns(n, 1);
    let renorm_every = renorm_every.max(1);
    for step in 0..steps_for(spinup, dt) {
        if !rk.joint_step(field, &mut x, &mut v, dt) {
            return Err(Error::Divergence { step });
        }
        if (step + 1) % renorm_every == 0 {
            let norm = v.norm();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::NonFiniteStretch { step });
            }
            v /= norm;
        }
    }
    let norm = v.norm();
    Ok((x, DVector::from_column_slice(v.as_slice()) / norm))
}

/// Benettin-style estimate of the largest Lyapunov exponent.
pub fn largest_lyapunov<F: VectorField + ?Sized>(
    field: &F,
    x0: &State,
    settings: &LyapunovSettings,
    seed: u64,
) -> Result<LyapunovEstimate> {
    settings.validate()?;
    let dt = settings.dt;
    let n = field.dim();
    let (mut x, w) = spin_up(field, x0, dt, settings.spinup, settings.renorm_every, seed)?;
    let mut v = DMatrix::from_column_slice(n, 1, w.as_slice());
    let mut rk = Rk4::with_columns(n, 1);

    let total = steps_for(settings.window, dt).max(1);
    let block = steps_for(settings.block_time.min(settings.window / 10.0), dt).max(1);
    let mut log_sum = 0.0;
    let mut block_sum = 0.0;
    let mut block_means = Vec::with_capacity((total / block) as usize);
    let mut trace = Vec::with_capacity((total / settings.trace_every) as usize + 1);

    for step in 1..=total {
        if !rk.joint_step(field, &mut x, &mut v, dt) {
            return Err(Error::Divergence { step: step - 1 });
        }
        let block_end = step % block == 0;
        if step % settings.renorm_every == 0 || block_end || step == total {
            let norm = v.norm();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::NonFiniteStretch { step: step - 1 });
            }
            let stretch = norm.ln();
            log_sum += stretch;
            block_sum += stretch;
            v /= norm;
        }
        if block_end {
            block_means.push(block_sum / (block as f64 * dt));
            block_sum = 0.0;
        }
        if step % settings.trace_every == 0 {
            let t = step as f64 * dt;
            trace.push((t, (log_sum + v.norm().ln()) / t));
        }
    }
    let window = total as f64 * dt;
    Ok(LyapunovEstimate { lambda: log_sum / window, stderr: standard_error(&block_means), window, trace, block_means })
}

/// Standard error of the mean of block averages (NaN for fewer than two blocks).
pub fn standard_error(blocks: &[f64]) -> f64 {
    let nb = blocks.len();
    if nb < 2 {
        return f64::NAN;
    }
    let mean = blocks.iter().sum::<f64>() / nb as f64;
    let var = blocks.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (nb - 1) as f64;
    (var / nb as f64).sqrt()
}

/// Tangent map of the flow over one history step, anchored at `x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalTangentMap {
    pub matrix: DMatrix<f64>,
    pub anchor_index: u64,
    pub span: f64,
    /// `x_{k+1}`, produced by the same integration.
    pub end_state: State,
}

/// Reusable workspace that advances `x_k → x_{k+1}` and writes `T_k`.
#[derive(Debug, Clone)]
pub struct TangentMapper {
    rk: Rk4,
    dt: f64,
    substeps: usize,
}

impl TangentMapper {
    pub fn new(dim: usize, dt: f64, substeps: usize) -> Self {
        Self { rk: Rk4::with_columns(dim, dim), dt, substeps }
    }

    /// Advance `x` in place by one history step, overwriting `map` with `T_k`.
    /// `step_offset` only labels divergence errors.
    pub fn advance<F: VectorField + ?Sized>(
        &mut self,
        field: &F,
        x: &mut State,
        map: &mut DMatrix<f64>,
        step_offset: u64,
    ) -> Result<()> {
        map.fill_with_identity();
        for s in 0..self.substeps {
            if !self.rk.joint_step(field, x, map, self.dt) {
                return Err(Error::Divergence { step: step_offset + s as u64 });
            }
        }
        if !map.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: step_offset + self.substeps as u64 });
        }
        Ok(())
    }
}

pub fn incremental_map<F: VectorField + ?Sized>(
    field: &F,
    x_k: &State,
    dt: f64,
    substeps: usize,
) -> Result<IncrementalTangentMap> {
    let n = field.dim();
    if x_k.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x_k.len() });
    }
    let mut end_state = x_k.clone();
    let mut matrix = DMatrix::identity(n, n);
    TangentMapper::new(n, dt, substeps).advance(field, &mut end_state, &mut matrix, 0)?;
    Ok(IncrementalTangentMap { matrix, anchor_index: 0, span: dt * substeps as f64, end_state })
}

/// One history step: `(x_k, w_k, T_k)` plus the factorization of `T_k`.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub index: u64,
    pub state: State,
    pub direction: DVector<f64>,
    pub map: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

impl HistoryEntry {
    /// Factorizes `map`; fails when an LU pivot is negligible.
    pub fn new(index: u64, state: State, direction: DVector<f64>, map: DMatrix<f64>) -> Result<Self> {
        let lu = map.clone().lu();
        let pivots = lu.u().diagonal().map(f64::abs);
        let (lo, hi) = (pivots.min(), pivots.max());
        if !(lo > hi * 1e3 * f64::EPSILON) {
            return Err(Error::DegenerateMap { step: index, condition: hi / lo });
        }
        Ok(Self { index, state, direction, map, lu })
    }

    /// `T_k⁻¹ u` by the stored LU factors.
    pub fn solve(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let degenerate = || {
            let p = self.lu.u().diagonal().map(f64::abs);
            Error::DegenerateMap { step: self.index, condition: p.max() / p.min() }
        };
        let mut out = u.clone();
        if !self.lu.solve_mut(&mut out) || !out.iter().all(|v| v.is_finite()) {
            return Err(degenerate());
        }
        Ok(out)
    }
}

/// Ring buffer of the most recent history steps, contiguous in `k`.
#[derive(Debug, Clone)]
pub struct MapHistory {
    capacity: usize,
    entries: VecDeque<HistoryEntry>,
}

impl MapHistory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), entries: VecDeque::with_capacity(capacity.max(1)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Append the next step. Returns the evicted oldest entry once full.
    pub fn push(&mut self, entry: HistoryEntry) -> Result<Option<HistoryEntry>> {
        if let Some(last) = self.entries.back() {
            if entry.index != last.index + 1 {
                return Err(Error::InvalidParameter(format!(
                    "history entries must be contiguous: expected {}, got {}",
                    last.index + 1,
                    entry.index
                )));
            }
        }
        let evicted = if self.is_full() { self.entries.pop_front() } else { None };
        self.entries.push_back(entry);
        Ok(evicted)
    }

    pub fn first_index(&self) -> Option<u64> {
        self.entries.front().map(|e| e.index)
    }

    pub fn last_index(&self) -> Option<u64> {
        self.entries.back().map(|e| e.index)
    }

    pub fn get(&self, k: u64) -> Option<&HistoryEntry> {
        let first = self.first_index()?;
        let offset = k.checked_sub(first)?;
        self.entries.get(offset as usize)
    }

    /// Entry `k`, or an underflow error naming the missing span.
    pub fn entry(&self, k: u64) -> Result<&HistoryEntry> {
        self.get(k).ok_or(Error::HistoryUnderflow { from: k, to: k })
    }

    pub fn covers(&self, from: u64, to: u64) -> bool {
        match (self.first_index(), self.last_index()) {
            (Some(a), Some(b)) => from >= a && to <= b,
            _ => false,
        }
    }

    pub(crate) fn require(&self, k: u64, m: usize) -> Result<()> {
        if m == 0 {
            return Ok(());
        }
        let m = m as u64;
        if k < m || !self.covers(k - m, k - 1) {
            return Err(Error::HistoryUnderflow { from: k.saturating_sub(m), to: k.saturating_sub(1) });
        }
        Ok(())
    }
}

/// `T_{k-1} · T_{k-2} · … · T_{k-m}`: the tangent map from `x_{k-m}` to `x_k`.
pub fn forward_product(history: &MapHistory, k: u64, m: usize) -> Result<DMatrix<f64>> {
    history.require(k, m)?;
    let n = match history.entries.front() {
        Some(e) => e.map.nrows(),
        None => return Err(Error::HistoryUnderflow { from: k, to: k }),
    };
    let mut product = DMatrix::identity(n, n);
    for j in 1..=m as u64 {
        product *= &history.entry(k - j)?.map;
    }
    Ok(product)
}

/// `u_m = T_{k-m}⁻¹ ⋯ T_{k-1}⁻¹ w`: the backward tangent map applied to `w`,
/// computed by successive LU solves.
pub fn backward_direction(history: &MapHistory, k: u64, m: usize, w: &DVector<f64>) -> Result<DVector<f64>> {
    history.require(k, m)?;
    let mut u = w.clone();
    for j in 1..=m as u64 {
        u = history.entry(k - j)?.solve(&u)?;
    }
    Ok(u)
}
