//! Autonomous vector fields and fixed-step RK4 integration of states and
//! tangent quantities.
//!
//! Tangent matrices are advanced with the same four stage states as the base
//! trajectory, so `V(t)` is the RK4 discretization of `dV/dt = Df(x(t)) V`
//! along exactly the trajectory the caller observes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A point on a trajectory.
pub type State = DVector<f64>;

/// An autonomous system `dx/dt = f(x)` with first and second derivatives.
///
/// Implementations hold read-only parameters and must be shareable across
/// worker threads.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn rhs_into(&self, x: &DVector<f64>, out: &mut DVector<f64>);

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `out = Df(x) · v` for an `N × m` matrix `v`.
    fn jacobian_apply_into(&self, x: &DVector<f64>, v: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        out.gemm(1.0, &self.jacobian(x), v, 0.0);
    }

    /// Row vector `m` with `m_c = Σ_{a,b} w_a ∂²f_a/∂x_b∂x_c (x) u_b`.
    fn hessian_contract(&self, x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.rhs_into(x, &mut out);
        out
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn rhs_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        (**self).rhs_into(x, out)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (**self).jacobian(x)
    }
    fn jacobian_apply_into(&self, x: &DVector<f64>, v: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        (**self).jacobian_apply_into(x, v, out)
    }
    fn hessian_contract(&self, x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (**self).hessian_contract(x, w, u)
    }
}

/// Time step and the number of integrator steps per history step `h`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub substeps_per_history_step: usize,
}

impl IntegratorConfig {
    pub fn new(dt: f64, substeps_per_history_step: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if substeps_per_history_step == 0 {
            return Err(Error::InvalidParameter("substeps_per_history_step must be >= 1".into()));
        }
        Ok(Self { dt, substeps_per_history_step })
    }

    /// Build from a history step `h` that must be an integer multiple of `dt`.
    pub fn from_history_step(dt: f64, h: f64) -> Result<Self> {
        let ratio = h / dt;
        let substeps = ratio.round();
        if !(substeps >= 1.0) || (ratio - substeps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "history step h = {h} is not an integer multiple of dt = {dt}"
            )));
        }
        Self::new(dt, substeps as usize)
    }

    pub fn history_step(&self) -> f64 {
        self.dt * self.substeps_per_history_step as f64
    }
}

/// `dst = base + a * inc`
#[inline]
fn stage(dst: &mut [f64], base: &[f64], inc: &[f64], a: f64) {
    for ((d, b), i) in dst.iter_mut().zip(base).zip(inc) {
        *d = b + a * i;
    }
}

/// Scratch buffers for allocation-free RK4 steps.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k: [DVector<f64>; 4],
    stage: DVector<f64>,
    kv: [DMatrix<f64>; 4],
    stage_v: DMatrix<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self::with_columns(dim, 0)
    }

    pub fn with_columns(dim: usize, cols: usize) -> Self {
        let v = || DVector::zeros(dim);
        let m = || DMatrix::zeros(dim, cols);
        Self { k: [v(), v(), v(), v()], stage: v(), kv: [m(), m(), m(), m()], stage_v: m() }
    }

    fn ensure_columns(&mut self, rows: usize, cols: usize) {
        if self.stage_v.ncols() != cols || self.stage_v.nrows() != rows {
            for kv in &mut self.kv {
                *kv = DMatrix::zeros(rows, cols);
            }
            self.stage_v = DMatrix::zeros(rows, cols);
        }
    }

    /// In-place classical RK4 step. Returns `false` if the new state is not finite.
    pub fn step<F: VectorField + ?Sized>(&mut self, field: &F, x: &mut DVector<f64>, dt: f64) -> bool {
        let [k1, k2, k3, k4] = &mut self.k;
        let s = &mut self.stage;

        field.rhs_into(x, k1);
        stage(s.as_mut_slice(), x.as_slice(), k1.as_slice(), 0.5 * dt);
        field.rhs_into(s, k2);
        stage(s.as_mut_slice(), x.as_slice(), k2.as_slice(), 0.5 * dt);
        field.rhs_into(s, k3);
        stage(s.as_mut_slice(), x.as_slice(), k3.as_slice(), dt);
        field.rhs_into(s, k4);

        let c = dt / 6.0;
        for i in 0..x.len() {
            x[i] += c * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        x.iter().all(|v| v.is_finite())
    }

    /// In-place fused step of `(x, V)` under `dx/dt = f(x)`, `dV/dt = Df(x) V`.
    ///
    /// The state update is arithmetically identical to [`Rk4::step`].
    pub fn joint_step<F: VectorField + ?Sized>(
        &mut self,
        field: &F,
        x: &mut DVector<f64>,
        v: &mut DMatrix<f64>,
        dt: f64,
    ) -> bool {
        self.ensure_columns(v.nrows(), v.ncols());
        let [k1, k2, k3, k4] = &mut self.k;
        let [q1, q2, q3, q4] = &mut self.kv;
        let s = &mut self.stage;
        let sv = &mut self.stage_v;

        field.rhs_into(x, k1);
        field.jacobian_apply_into(x, v, q1);

        stage(s.as_mut_slice(), x.as_slice(), k1.as_slice(), 0.5 * dt);
        stage(sv.as_mut_slice(), v.as_slice(), q1.as_slice(), 0.5 * dt);
        field.rhs_into(s, k2);
        field.jacobian_apply_into(s, sv, q2);

        stage(s.as_mut_slice(), x.as_slice(), k2.as_slice(), 0.5 * dt);
        stage(sv.as_mut_slice(), v.as_slice(), q2.as_slice(), 0.5 * dt);
        field.rhs_into(s, k3);
        field.jacobian_apply_into(s, sv, q3);

        stage(s.as_mut_slice(), x.as_slice(), k3.as_slice(), dt);
        stage(sv.as_mut_slice(), v.as_slice(), q3.as_slice(), dt);
        field.rhs_into(s, k4);
        field.jacobian_apply_into(s, sv, q4);

        let c = dt / 6.0;
        for i in 0..x.len() {
            x[i] += c * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let (vs, a, b, cc, d) =
            (v.as_mut_slice(), q1.as_slice(), q2.as_slice(), q3.as_slice(), q4.as_slice());
        for i in 0..vs.len() {
            vs[i] += c * (a[i] + 2.0 * b[i] + 2.0 * cc[i] + d[i]);
        }
        x.iter().all(|v| v.is_finite())
    }
}

fn check_dim<F: VectorField + ?Sized>(field: &F, len: usize) -> Result<()> {
    if field.dim() != len {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: len });
    }
    Ok(())
}

/// One classical RK4 step of `dx/dt = f(x)`.
pub fn rk4_step<F: VectorField + ?Sized>(field: &F, x: &State, dt: f64) -> Result<State> {
    check_dim(field, x.len())?;
    let mut out = x.clone();
    if !Rk4::new(x.len()).step(field, &mut out, dt) {
        return Err(Error::Divergence { step: 0 });
    }
    Ok(out)
}

/// One fused RK4 step of the state and an `N × m` tangent matrix.
pub fn rk4_joint_step<F: VectorField + ?Sized>(
    field: &F,
    x: &State,
    v: &DMatrix<f64>,
    dt: f64,
) -> Result<(State, DMatrix<f64>)> {
    check_dim(field, x.len())?;
    check_dim(field, v.nrows())?;
    let mut xo = x.clone();
    let mut vo = v.clone();
    let mut rk = Rk4::with_columns(x.len(), v.ncols());
    if !rk.joint_step(field, &mut xo, &mut vo, dt) {
        return Err(Error::Divergence { step: 0 });
    }
    Ok((xo, vo))
}

/// Apply `n_steps` RK4 steps, calling `observer(step_index, state)` after each.
pub fn advance<F, O>(field: &F, x0: &State, dt: f64, n_steps: u64, mut observer: O) -> Result<State>
where
    F: VectorField + ?Sized,
    O: FnMut(u64, &State),
{
    check_dim(field, x0.len())?;
    let mut x = x0.clone();
    let mut rk = Rk4::new(x.len());
    for step in 0..n_steps {
        if !rk.step(field, &mut x, dt) {
            return Err(Error::Divergence { step });
        }
        observer(step, &x);
    }
    Ok(x)
}

/// `f(x) = A x`. Second derivatives vanish identically.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidParameter("linear system matrix must be square".into()));
        }
        Ok(Self { matrix })
    }
}

impl VectorField for LinearSystem {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn rhs_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv(1.0, &self.matrix, x, 0.0);
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
    fn jacobian_apply_into(&self, _x: &DVector<f64>, v: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        out.gemm(1.0, &self.matrix, v, 0.0);
    }
    fn hessian_contract(&self, _x: &DVector<f64>, _w: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
}

/// `f(x) = c`.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub value: DVector<f64>,
}

impl VectorField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }
    fn rhs_into(&self, _x: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.value);
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }
    fn jacobian_apply_into(&self, _x: &DVector<f64>, _v: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
    }
    fn hessian_contract(&self, _x: &DVector<f64>, _w: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
}

/// `f(x) + p e_node`: constant forcing added at a single component.
#[derive(Debug, Clone)]
pub struct Forced<F> {
    pub inner: F,
    pub node: usize,
    pub magnitude: f64,
}

impl<F: VectorField> Forced<F> {
    pub fn new(inner: F, node: usize, magnitude: f64) -> Result<Self> {
        if node >= inner.dim() {
            return Err(Error::InvalidParameter(format!(
                "perturbation node {node} out of range for dimension {}",
                inner.dim()
            )));
        }
        Ok(Self { inner, node, magnitude })
    }
}

impl<F: VectorField> VectorField for Forced<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn rhs_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        self.inner.rhs_into(x, out);
        // p = 0 must follow the unperturbed arithmetic bit for bit
        if self.magnitude != 0.0 {
            out[self.node] += self.magnitude;
        }
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jacobian(x)
    }
    fn jacobian_apply_into(&self, x: &DVector<f64>, v: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        self.inner.jacobian_apply_into(x, v, out)
    }
    fn hessian_contract(&self, x: &DVector<f64>, w: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.inner.hessian_contract(x, w, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn decay() -> LinearSystem {
        LinearSystem::new(DMatrix::from_element(1, 1, -1.0)).unwrap()
    }

    fn rotation() -> LinearSystem {
        LinearSystem::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap()
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let f = ConstantField { value: DVector::zeros(5) };
        let x = DVector::from_element(5, 1.0);
        assert_eq!(rk4_step(&f, &x, 0.01).unwrap(), x);
    }

    #[test]
    fn exponential_decay_single_step() {
        let x = rk4_step(&decay(), &DVector::from_element(1, 1.0), 0.1).unwrap();
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert!((x[0] - 0.9048375).abs() < 1e-7);
    }

    #[test]
    fn fourth_order_convergence() {
        let err = |n: u64| {
            let dt = 1.0 / n as f64;
            let x = advance(&decay(), &DVector::from_element(1, 1.0), dt, n, |_, _| {}).unwrap();
            (x[0] - (-1.0f64).exp()).abs()
        };
        for n in [10, 20, 40] {
            let ratio = err(n) / err(2 * n);
            assert!((14.0..=18.0).contains(&ratio), "ratio {ratio} at n = {n}");
        }
    }

    #[test]
    fn joint_step_zero_jacobian_keeps_identity() {
        let f = ConstantField { value: DVector::from_vec(vec![1.0, -2.0, 0.5]) };
        let (_, v) = rk4_joint_step(&f, &DVector::zeros(3), &DMatrix::identity(3, 3), 0.7).unwrap();
        assert_eq!(v, DMatrix::identity(3, 3));
    }

    #[test]
    fn joint_step_rotation_matches_matrix_exponential() {
        let (s, c) = 0.25f64.sin_cos();
        let exact = DMatrix::from_row_slice(2, 2, &[c, s, -s, c]);
        // a single step of 0.25 carries the Taylor remainder 0.25^5/5!
        let (_, v) = rk4_joint_step(&rotation(), &DVector::zeros(2), &DMatrix::identity(2, 2), 0.25).unwrap();
        assert!(((&v - &exact).amax() - 0.25f64.powi(5) / 120.0).abs() < 1e-6);
        // over the history step h = 0.25 taken as 25 steps of dt = 0.01
        let mut x = DVector::zeros(2);
        let mut v = DMatrix::identity(2, 2);
        for _ in 0..25 {
            (x, v) = rk4_joint_step(&rotation(), &x, &v, 0.01).unwrap();
        }
        assert!((v - exact).amax() < 1e-6);
    }

    #[test]
    fn joint_state_matches_plain_step_bitwise() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.5, 1.0, 0.0, -1.0, -0.2, 0.3, 0.1, 0.0, -1.0]);
        let f = LinearSystem::new(a).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let plain = rk4_step(&f, &x, 0.05).unwrap();
        let (joint, _) = rk4_joint_step(&f, &x, &DMatrix::identity(3, 3), 0.05).unwrap();
        assert_eq!(plain, joint);
    }

    #[test]
    fn advance_identity_and_constant_field() {
        let c = DVector::from_vec(vec![0.5, -1.0]);
        let f = ConstantField { value: c.clone() };
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(advance(&f, &x0, 0.1, 0, |_, _| {}).unwrap(), x0);
        let x = advance(&f, &x0, 0.01, 100, |_, _| {}).unwrap();
        assert_relative_eq!(x, x0 + c, epsilon = 1e-12);
    }

    #[test]
    fn advance_observer_called_once_per_step() {
        let mut calls = 0u64;
        advance(&decay(), &DVector::from_element(1, 1.0), 0.01, 1000, |_, _| calls += 1).unwrap();
        assert_eq!(calls, 1000);
    }

    #[test]
    fn divergence_reports_step_index() {
        let f = LinearSystem::new(DMatrix::from_element(1, 1, 50.0)).unwrap();
        match advance(&f, &DVector::from_element(1, 1.0), 1.0, 1000, |_, _| {}) {
            Err(Error::Divergence { step }) => assert!(step > 0 && step < 1000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn history_step_must_be_multiple_of_dt() {
        assert_eq!(IntegratorConfig::from_history_step(0.01, 0.25).unwrap().substeps_per_history_step, 25);
        assert!(IntegratorConfig::from_history_step(0.01, 0.255).is_err());
        assert!(IntegratorConfig::new(0.0, 1).is_err());
    }

    #[test]
    fn forced_zero_is_bitwise_unperturbed() {
        let f = rotation();
        let g = Forced::new(rotation(), 1, 0.0).unwrap();
        let x = DVector::from_vec(vec![-0.0, 0.3]);
        assert_eq!(f.rhs(&x), g.rhs(&x));
        assert!(Forced::new(rotation(), 2, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn joint_step_is_linear_in_tangent(
            a in -2.0f64..2.0, b in -2.0f64..2.0,
            v1 in proptest::collection::vec(-1.0f64..1.0, 6),
            v2 in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let m = DMatrix::from_row_slice(3, 3, &[-0.5, 1.0, 0.0, -1.0, -0.2, 0.3, 0.1, 0.0, -1.0]);
            let f = LinearSystem::new(m).unwrap();
            let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
            let v1 = DMatrix::from_vec(3, 2, v1);
            let v2 = DMatrix::from_vec(3, 2, v2);
            let (_, o1) = rk4_joint_step(&f, &x, &v1, 0.1).unwrap();
            let (_, o2) = rk4_joint_step(&f, &x, &v2, 0.1).unwrap();
            let (_, o) = rk4_joint_step(&f, &x, &(&v1 * a + &v2 * b), 0.1).unwrap();
            prop_assert!((o - (o1 * a + o2 * b)).amax() < 1e-13);
        }
    }
}
