//! Fluctuation-response estimate of `dλ/dp` for constant forcing.
//!
//! Along one unperturbed trajectory sampled every history step `h`, the
//! accumulator collects, for lags `τ_m = h m` and `s_n = h n` with
//! `0 <= m <= n <= M`,
//!
//! ```text
//! c1(τ_m)      += w_kᵀ D²f(x_k) : (w_k ⊗ B_m)
//! c2(τ_m, s_n) += a_m D²f(x_{k-m}) : (u_m ⊗ P_{m,n})
//! ```
//!
//! where `B_m = T_{k-1}⋯T_{k-m}`, `a_m = [(Df + Dfᵀ)(x_k) w_k]ᵀ (I - w_k w_kᵀ) B_m`,
//! `u_m = B_m⁻¹ w_k` and `P_{m,n} = T_{k-m}⋯T_{k-n}` (`n - m + 1` factors) or,
//! with [`EndpointMode::Continuum`], `T_{k-m-1}⋯T_{k-n}` (`n - m` factors).
//! The response `r(t)` is the trapezoidal integral of `c1` plus the iterated
//! trapezoidal integral of `c2` over the triangle `τ <= s <= t`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{State, VectorField};
use crate::error::{Error, Result};
use crate::lyapunov::{spin_up, HistoryEntry, MapHistory, TangentMapper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointMode {
    /// `n - m + 1` factors in the inner tangent-map product.
    #[default]
    Printed,
    /// `n - m` factors, so the product is the identity at `s = τ`.
    Continuum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseGridConfig {
    pub h: f64,
    pub depth: usize,
    pub samples: u64,
    #[serde(default)]
    pub endpoint: EndpointMode,
}

impl Default for ResponseGridConfig {
    fn default() -> Self {
        Self { h: 0.25, depth: 60, samples: 4_000_000, endpoint: EndpointMode::Printed }
    }
}

impl ResponseGridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidParameter(format!("history step h must be positive, got {}", self.h)));
        }
        if self.depth == 0 {
            return Err(Error::InvalidParameter("grid depth M must be >= 1".into()));
        }
        Ok(())
    }

    /// Ring-buffer length: `x_{k-M} .. x_k` together with `T_{k-M} .. T_k`.
    pub fn history_len(&self) -> usize {
        self.depth + 1
    }
}

fn triangle_len(depth: usize) -> usize {
    (depth + 1) * (depth + 2) / 2
}

/// Position of `(m, n)`, `m <= n <= depth`, in row-major triangular storage.
fn triangle_index(depth: usize, m: usize, n: usize) -> usize {
    debug_assert!(m <= n && n <= depth);
    m * (depth + 1) - m * m.saturating_sub(1) / 2 + (n - m)
}

/// Running sums of the sampled `c1` and `c2` terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGrid {
    pub dim: usize,
    pub depth: usize,
    pub h: f64,
    /// `(M + 1) × N`, row `m` holds the sum for `τ_m`.
    pub c1_sums: Vec<f64>,
    /// Triangular rows `(m, n)`, `m <= n`, each of length `N`.
    pub c2_sums: Vec<f64>,
    pub sample_count: u64,
}

impl CorrelationGrid {
    pub fn new(dim: usize, depth: usize, h: f64) -> Self {
        Self {
            dim,
            depth,
            h,
            c1_sums: vec![0.0; (depth + 1) * dim],
            c2_sums: vec![0.0; triangle_len(depth) * dim],
            sample_count: 0,
        }
    }

    pub fn c1_row(&self, m: usize) -> &[f64] {
        &self.c1_sums[m * self.dim..(m + 1) * self.dim]
    }

    pub fn c2_row(&self, m: usize, n: usize) -> &[f64] {
        let i = triangle_index(self.depth, m, n) * self.dim;
        &self.c2_sums[i..i + self.dim]
    }

    fn c2_row_mut(&mut self, m: usize, n: usize) -> &mut [f64] {
        let i = triangle_index(self.depth, m, n) * self.dim;
        &mut self.c2_sums[i..i + self.dim]
    }

    /// Add another grid's sums and counts.
    pub fn merge(&mut self, other: &CorrelationGrid) -> Result<()> {
        if (self.dim, self.depth) != (other.dim, other.depth) || self.h != other.h {
            return Err(Error::InvalidParameter("cannot merge correlation grids of different shapes".into()));
        }
        for (a, b) in self.c1_sums.iter_mut().zip(&other.c1_sums) {
            *a += b;
        }
        for (a, b) in self.c2_sums.iter_mut().zip(&other.c2_sums) {
            *a += b;
        }
        self.sample_count += other.sample_count;
        Ok(())
    }
}

/// Averaged correlation functions, `sums / K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFunctions {
    pub dim: usize,
    pub depth: usize,
    pub h: f64,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub sample_count: u64,
}

impl CorrelationFunctions {
    /// Build directly from component functions `c1(m, i)` and `c2(m, n, i)`.
    pub fn from_fn(
        dim: usize,
        depth: usize,
        h: f64,
        c1: impl Fn(usize, usize) -> f64,
        c2: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut g = CorrelationGrid::new(dim, depth, h);
        for m in 0..=depth {
            for i in 0..dim {
                g.c1_sums[m * dim + i] = c1(m, i);
            }
            for n in m..=depth {
                for (i, v) in g.c2_row_mut(m, n).iter_mut().enumerate() {
                    *v = c2(m, n, i);
                }
            }
        }
        Self { dim, depth, h, c1: g.c1_sums, c2: g.c2_sums, sample_count: 1 }
    }

    pub fn c1_row(&self, m: usize) -> &[f64] {
        &self.c1[m * self.dim..(m + 1) * self.dim]
    }

    pub fn c2_row(&self, m: usize, n: usize) -> &[f64] {
        let i = triangle_index(self.depth, m, n) * self.dim;
        &self.c2[i..i + self.dim]
    }
}

pub fn finalize(grid: &CorrelationGrid) -> Result<CorrelationFunctions> {
    if grid.sample_count == 0 {
        return Err(Error::ZeroSamples);
    }
    let k = grid.sample_count as f64;
    Ok(CorrelationFunctions {
        dim: grid.dim,
        depth: grid.depth,
        h: grid.h,
        c1: grid.c1_sums.iter().map(|v| v / k).collect(),
        c2: grid.c2_sums.iter().map(|v| v / k).collect(),
        sample_count: grid.sample_count,
    })
}

/// Scratch space for [`accumulate_sample`].
#[derive(Debug, Clone)]
pub struct SampleWorkspace {
    /// Column `m` holds `hessian_contract(a_m, u_m)` at `x_{k-m}`.
    contractions: DMatrix<f64>,
    columns: DMatrix<f64>,
    spare: DMatrix<f64>,
    transposed: DMatrix<f64>,
    tmp: DVector<f64>,
}

impl SampleWorkspace {
    pub fn new(dim: usize, depth: usize) -> Self {
        Self {
            contractions: DMatrix::zeros(dim, depth + 1),
            columns: DMatrix::zeros(dim, depth + 1),
            spare: DMatrix::zeros(dim, depth + 1),
            transposed: DMatrix::zeros(dim, dim),
            tmp: DVector::zeros(dim),
        }
    }
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `row ← row · T`
fn right_multiply(row: &mut DVector<f64>, t: &DMatrix<f64>, tmp: &mut DVector<f64>) {
    tmp.gemv_tr(1.0, t, row, 0.0);
    std::mem::swap(row, tmp);
}

/// Add the contributions of sample `k` to `grid`.
///
/// `history` must hold entries `k - M ..= k`; entry `j` carries `x_j`, `w_j`
/// and `T_j` (the map from `x_j` to `x_{j+1}`).
pub fn accumulate_sample<F: VectorField + ?Sized>(
    grid: &mut CorrelationGrid,
    history: &MapHistory,
    k: u64,
    field: &F,
    endpoint: EndpointMode,
    ws: &mut SampleWorkspace,
) -> Result<()> {
    let depth = grid.depth;
    let n = grid.dim;
    if k < depth as u64 || !history.covers(k - depth as u64, k) {
        return Err(Error::HistoryUnderflow { from: k.saturating_sub(depth as u64), to: k });
    }
    let at = |j: u64| history.entry(j);
    let current = at(k)?;
    let (x, w) = (&current.state, &current.direction);

    // (Df + Dfᵀ) w projected orthogonally to w
    let jac = field.jacobian(x);
    let mut g = &jac * w + jac.tr_mul(w);
    let gw = g.dot(w);
    g.axpy(-gw, w, 1.0);

    let mut c1_row = field.hessian_contract(x, w, w);
    let mut a = g;
    let mut u = w.clone();
    for m in 0..=depth {
        if m > 0 {
            let e = at(k - m as u64)?;
            right_multiply(&mut c1_row, &e.map, &mut ws.tmp);
            right_multiply(&mut a, &e.map, &mut ws.tmp);
            u = e.solve(&u)?;
        }
        add_into(&mut grid.c1_sums[m * n..(m + 1) * n], c1_row.iter().copied());
        let hm = field.hessian_contract(&at(k - m as u64)?.state, &a, &u);
        ws.contractions.set_column(m, &hm);
    }

    // Column m of `columns` carries (contraction_m · P_{m,n})ᵀ as n advances;
    // each advance applies T_{k-n}ᵀ to all active columns at once.
    for s in 0..=depth {
        at(k - s as u64)?.map.transpose_to(&mut ws.transposed);
        let tt = &ws.transposed;
        match endpoint {
            EndpointMode::Printed => {
                ws.columns.set_column(s, &ws.contractions.column(s));
                ws.spare.columns_mut(0, s + 1).gemm(1.0, tt, &ws.columns.columns(0, s + 1), 0.0);
                std::mem::swap(&mut ws.columns, &mut ws.spare);
            }
            EndpointMode::Continuum => {
                if s > 0 {
                    ws.spare.columns_mut(0, s).gemm(1.0, tt, &ws.columns.columns(0, s), 0.0);
                    std::mem::swap(&mut ws.columns, &mut ws.spare);
                }
                ws.columns.set_column(s, &ws.contractions.column(s));
            }
        }
        for m in 0..=s {
            add_into(grid.c2_row_mut(m, s), ws.columns.column(m).iter().copied());
        }
    }
    grid.sample_count += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub h: f64,
    pub times: Vec<f64>,
    /// `r(t_i)`, one `N`-vector per grid time.
    pub vectors: Vec<Vec<f64>>,
    /// Mean of the components of `r(t_i)`.
    pub scalar: Vec<f64>,
}

impl ResponseCurve {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Largest relative spread of the components around their mean at grid index `i`.
    pub fn component_spread(&self, i: usize) -> f64 {
        let mean = self.scalar[i];
        self.vectors[i].iter().map(|v| (v - mean).abs()).fold(0.0, f64::max) / mean.abs()
    }
}

/// Trapezoidal `∫₀ᵗ c1` plus inner-then-outer trapezoidal `∫₀ᵗ dτ ∫_τ^t c2 ds`
/// at every grid time `t_i = h i`.
pub fn response_curve(corr: &CorrelationFunctions) -> ResponseCurve {
    let (dim, depth, h) = (corr.dim, corr.depth, corr.h);
    let mut vectors = Vec::with_capacity(depth + 1);
    let mut inner = vec![0.0; dim];
    for i in 0..=depth {
        let mut r = vec![0.0; dim];
        for m in 0..=i {
            let w1 = if m == 0 || m == i { 0.5 } else { 1.0 };
            if i > 0 {
                add_into(&mut r, corr.c1_row(m).iter().map(|v| w1 * h * v));
            }
            // inner trapezoid over s in [τ_m, t_i]
            inner.iter_mut().for_each(|v| *v = 0.0);
            for nn in m..=i {
                let w2 = if nn == m || nn == i { 0.5 } else { 1.0 };
                if i > m {
                    add_into(&mut inner, corr.c2_row(m, nn).iter().map(|v| w2 * h * v));
                }
            }
            if i > 0 {
                add_into(&mut r, inner.iter().map(|v| w1 * h * v));
            }
        }
        vectors.push(r);
    }
    let scalar = vectors.iter().map(|r| r.iter().sum::<f64>() / dim as f64).collect();
    ResponseCurve { h, times: (0..=depth).map(|i| h * i as f64).collect(), vectors, scalar }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PlateauMethod {
    Manual { t0: f64 },
    Auto { tolerance: f64, min_points: usize, min_time: f64 },
}

impl PlateauMethod {
    pub fn auto() -> Self {
        PlateauMethod::Auto { tolerance: 0.1, min_points: 5, min_time: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauSelection {
    pub t0: f64,
    pub index: usize,
    /// Plateau bounds `(t_start, t_end)`; `None` for a manual choice.
    pub window: Option<(f64, f64)>,
    pub r_t0: f64,
}

fn is_flat(values: &[f64], tolerance: f64) -> bool {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    mean != 0.0 && values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max) / mean.abs() < tolerance
}

/// Grid index of `t0`, if `t0` is a grid time of `curve`.
pub fn grid_index(curve: &ResponseCurve, t0: f64) -> Option<usize> {
    let i = (t0 / curve.h).round();
    (i >= 0.0 && (i as usize) < curve.len() && (i * curve.h - t0).abs() <= 1e-9 * curve.h.max(t0.abs()))
        .then_some(i as usize)
}

/// Choose the finite response time `t0` on the scalar curve.
pub fn select_response_time(curve: &ResponseCurve, method: PlateauMethod) -> Result<PlateauSelection> {
    match method {
        PlateauMethod::Manual { t0 } => {
            let index = grid_index(curve, t0)
                .ok_or_else(|| Error::InvalidParameter(format!("t0 = {t0} is not on the response grid")))?;
            Ok(PlateauSelection { t0: curve.times[index], index, window: None, r_t0: curve.scalar[index] })
        }
        PlateauMethod::Auto { tolerance, min_points, min_time } => {
            let r = &curve.scalar;
            let mut best: Option<(usize, usize)> = None;
            for i in (0..r.len()).filter(|&i| curve.times[i] > min_time) {
                for j in (i + min_points.max(1) - 1)..r.len() {
                    let longer = best.is_none_or(|(a, b)| j - i > b - a);
                    if longer && is_flat(&r[i..=j], tolerance) {
                        best = Some((i, j));
                    }
                }
            }
            let (i, j) = best.ok_or(Error::NoPlateau { tolerance })?;
            let index = (i + j) / 2;
            Ok(PlateauSelection {
                t0: curve.times[index],
                index,
                window: Some((curve.times[i], curve.times[j])),
                r_t0: r[index],
            })
        }
    }
}

/// Settings for one accumulation run along a single trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseRunConfig {
    pub dt: f64,
    pub spinup: f64,
    pub grid: ResponseGridConfig,
}

/// Streams a trajectory, keeping the last `M + 1` history steps and adding
/// one sample per history step once the buffer is full.
pub struct ResponseAccumulator<'a, F: VectorField + ?Sized> {
    field: &'a F,
    endpoint: EndpointMode,
    mapper: TangentMapper,
    history: MapHistory,
    grid: CorrelationGrid,
    workspace: SampleWorkspace,
    state: State,
    direction: DVector<f64>,
    next_index: u64,
    log_stretch: f64,
    substeps: usize,
}

impl<'a, F: VectorField + ?Sized> ResponseAccumulator<'a, F> {
    pub fn new(field: &'a F, x0: &State, config: &ResponseRunConfig, seed: u64) -> Result<Self> {
        config.grid.validate()?;
        let integ = crate::dynamics::IntegratorConfig::from_history_step(config.dt, config.grid.h)?;
        let substeps = integ.substeps_per_history_step;
        let (state, direction) = spin_up(field, x0, config.dt, config.spinup, substeps as u64, seed)?;
        let n = field.dim();
        let depth = config.grid.depth;
        Ok(Self {
            field,
            endpoint: config.grid.endpoint,
            mapper: TangentMapper::new(n, config.dt, substeps),
            history: MapHistory::new(config.grid.history_len()),
            grid: CorrelationGrid::new(n, depth, config.grid.h),
            workspace: SampleWorkspace::new(n, depth),
            state,
            direction,
            next_index: 0,
            log_stretch: 0.0,
            substeps,
        })
    }

    /// Advance one history step, accumulating a sample when possible.
    pub fn step(&mut self) -> Result<bool> {
        let n = self.field.dim();
        let k = self.next_index;
        let (x_k, w_k) = (self.state.clone(), self.direction.clone());
        let mut map = DMatrix::zeros(n, n);
        self.mapper.advance(self.field, &mut self.state, &mut map, k * self.substeps as u64)?;
        // w_{k+1} = T_k w_k / ‖T_k w_k‖
        let v = &map * &w_k;
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NonFiniteStretch { step: (k + 1) * self.substeps as u64 });
        }
        self.log_stretch += norm.ln();
        self.direction = v / norm;
        self.history.push(HistoryEntry::new(k, x_k, w_k, map)?)?;
        self.next_index += 1;
        if self.history.is_full() {
            accumulate_sample(&mut self.grid, &self.history, k, self.field, self.endpoint, &mut self.workspace)?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn run(&mut self, samples: u64) -> Result<()> {
        let target = self.grid.sample_count + samples;
        while self.grid.sample_count < target {
            self.step()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> &CorrelationGrid {
        &self.grid
    }

    /// Hand out the sums so far and start a fresh grid on the same trajectory.
    pub fn take_grid(&mut self) -> CorrelationGrid {
        let fresh = CorrelationGrid::new(self.grid.dim, self.grid.depth, self.grid.h);
        std::mem::replace(&mut self.grid, fresh)
    }

    /// Largest Lyapunov exponent from the stretches seen so far.
    pub fn lyapunov(&self) -> f64 {
        self.log_stretch / (self.next_index as f64 * self.grid.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardResult {
    pub seed: u64,
    pub grid: CorrelationGrid,
    pub lyapunov: f64,
}

pub fn run_shard<F: VectorField + ?Sized>(
    field: &F,
    x0: &State,
    config: &ResponseRunConfig,
    samples: u64,
    seed: u64,
) -> Result<ShardResult> {
    let mut acc = ResponseAccumulator::new(field, x0, config, seed)?;
    acc.run(samples)?;
    Ok(ShardResult { seed, lyapunov: acc.lyapunov(), grid: acc.take_grid() })
}

/// Samples for shard `i` of `shards` so that the total is `samples`.
pub fn shard_samples(samples: u64, shards: usize, i: usize) -> u64 {
    let s = shards as u64;
    samples / s + u64::from((i as u64) < samples % s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardedRun {
    pub grid: CorrelationGrid,
    pub shards: Vec<ShardResult>,
}

/// Run independent shards (seeds `seed + i`, initial states from `initial`)
/// on `threads` workers and merge their sums in shard order.
pub fn run_sharded<F, I>(
    field: &F,
    initial: I,
    config: &ResponseRunConfig,
    shards: usize,
    threads: usize,
    seed: u64,
) -> Result<ShardedRun>
where
    F: VectorField + ?Sized,
    I: Fn(u64) -> State + Sync,
{
    if shards == 0 {
        return Err(Error::InvalidParameter("shard count must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let results: Vec<Result<ShardResult>> = pool.install(|| {
        (0..shards)
            .into_par_iter()
            .map(|i| {
                let s = seed.wrapping_add(i as u64);
                run_shard(field, &initial(s), config, shard_samples(config.grid.samples, shards, i), s)
            })
            .collect()
    });
    let shards = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut grid = CorrelationGrid::new(field.dim(), config.grid.depth, config.grid.h);
    for s in &shards {
        grid.merge(&s.grid)?;
    }
    Ok(ShardedRun { grid, shards })
}
