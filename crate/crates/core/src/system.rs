//! Control-affine agent model `ż = f(z) + g(z) u`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::linalg::finite_difference_jacobian;
use crate::scalar::{lit, Real};

pub type VectorField<T> = Arc<dyn Fn(&DVector<T>) -> DVector<T> + Send + Sync>;
pub type MatrixField<T> = Arc<dyn Fn(&DVector<T>) -> DMatrix<T> + Send + Sync>;
pub type ScalarField<T> = Arc<dyn Fn(&DVector<T>) -> T + Send + Sync>;

/// Default step for finite-difference Jacobians.
pub const DEFAULT_JACOBIAN_STEP: f64 = 1e-6;

#[derive(Clone)]
pub struct ControlAffineSystem<T: Real> {
    state_dim: usize,
    input_dim: usize,
    drift: VectorField<T>,
    input_matrix: MatrixField<T>,
    drift_jacobian: Option<MatrixField<T>>,
    jacobian_step: T,
}

impl<T: Real> fmt::Debug for ControlAffineSystem<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("analytic_jacobian", &self.drift_jacobian.is_some())
            .finish()
    }
}

impl<T: Real> ControlAffineSystem<T> {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        drift: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        input_matrix: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            state_dim,
            input_dim,
            drift: Arc::new(drift),
            input_matrix: Arc::new(input_matrix),
            drift_jacobian: None,
            jacobian_step: lit(DEFAULT_JACOBIAN_STEP),
        }
    }

    pub fn with_jacobian(mut self, jac: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static) -> Self {
        self.drift_jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_jacobian_step(mut self, h: T) -> Self {
        self.jacobian_step = h;
        self
    }

    /// `ż = A z + B u`.
    pub fn linear(a: DMatrix<T>, b: DMatrix<T>) -> Self {
        let (n, p) = (a.nrows(), b.ncols());
        let a_jac = a.clone();
        Self::new(n, p, move |z| &a * z, move |_| b.clone()).with_jacobian(move |_| a_jac.clone())
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn drift(&self, z: &DVector<T>) -> DVector<T> {
        (self.drift)(z)
    }

    pub fn input_matrix(&self, z: &DVector<T>) -> DMatrix<T> {
        (self.input_matrix)(z)
    }

    pub fn drift_field(&self) -> &VectorField<T> {
        &self.drift
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.drift_jacobian.is_some()
    }

    /// `∂f/∂z`, analytic when supplied, central differences otherwise.
    pub fn jacobian(&self, z: &DVector<T>) -> DMatrix<T> {
        match &self.drift_jacobian {
            Some(jac) => jac(z),
            None => self.finite_difference_jacobian(z),
        }
    }

    pub fn finite_difference_jacobian(&self, z: &DVector<T>) -> DMatrix<T> {
        finite_difference_jacobian(|x| (self.drift)(x), z, self.jacobian_step)
    }

    /// `f(z) + g(z) u`.
    pub fn velocity(&self, z: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        self.drift(z) + self.input_matrix(z) * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let sys = ControlAffineSystem::<f64>::new(
            2,
            1,
            |z| DVector::from_vec(vec![z[1].sin() * z[0], -z[0] * z[0]]),
            |_| DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        )
        .with_jacobian(|z| DMatrix::from_row_slice(2, 2, &[z[1].sin(), z[0] * z[1].cos(), -2.0 * z[0], 0.0]));
        let z = DVector::from_vec(vec![0.4, -1.3]);
        assert_abs_diff_eq!(sys.jacobian(&z), sys.finite_difference_jacobian(&z), epsilon = 1e-8);
    }

    #[test]
    fn linear_system_velocity() {
        let sys = ControlAffineSystem::linear(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        );
        let v = sys.velocity(&DVector::from_vec(vec![1.0, 2.0]), &DVector::from_vec(vec![3.0]));
        assert_eq!(v, DVector::from_vec(vec![2.0, 2.0]));
    }
}
