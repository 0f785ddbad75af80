//! Classical fixed-step fourth-order Runge–Kutta.

use nalgebra::DVector;

use crate::scalar::{lit, Real};

/// One RK4 step of `ẏ = rhs(y)` with step `h` (which may be negative).
pub fn rk4_step<T, F>(rhs: F, y: &DVector<T>, h: T) -> DVector<T>
where
    T: Real,
    F: Fn(&DVector<T>) -> DVector<T>,
{
    let half = lit::<T>(0.5) * h;
    let k1 = rhs(y);
    let k2 = rhs(&(y + &k1 * half));
    let k3 = rhs(&(y + &k2 * half));
    let k4 = rhs(&(y + &k3 * h));
    y + (k1 + (k2 + k3) * lit::<T>(2.0) + k4) * (h / lit::<T>(6.0))
}
