//! Named example systems with analytic derivatives.
//!
//! * `scalar-sine`: `ż = sin z + u`, `P = 1`, `U = z`, `α = 1`, `ρ = 4`, `Q = 2`.
//! * `unstable-scalar`: `ż = z + u` with the same certificate shape.
//! * `linear-rotation`: `ż = [[0, 1], [−1, 0]] z + (0, 1)ᵀ u` with the constant
//!   metric solving `Aᵀ P + P A − P G Gᵀ P = −I`.
//! * `planar-a`: the planar subsystem
//!   `ż_a = (−z_1 + sin z_2 cos z_1 + z_2, 0) + (0, 2 + sin z_1) z_b` with
//!   `P_a = [[2, 1], [1, 2]]`, `U_a = z_1 + 2 z_2`, `α_a = 1 / (2 + sin z_1)`,
//!   `q_a = 2 + sin z_1`.
//! * `planar`: its strict-feedback composite with `ż_b = u`.
//! * `<base>-backstepped`: the augmented certificate of a strict-feedback entry,
//!   built with the default `η` and `M_b = 1`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::backstepping::{
    augment_certificate, choose_eta, ASubCertificate, AugmentedCertificate, BacksteppingError, StrictFeedbackSystem,
};
use crate::certificate::{MetricCertificate, SampleSet};
use crate::scalar::{lit, Real};
use crate::system::ControlAffineSystem;

/// Names accepted by [`lookup`].
pub const NAMES: &[&str] =
    &["scalar-sine", "unstable-scalar", "linear-rotation", "planar-a", "planar", "planar-backstepped"];

/// Default `M_b` used for `-backstepped` entries.
pub const DEFAULT_M_B: f64 = 1.0;

/// A system with its certificate data.
#[derive(Clone)]
pub enum Example<T: Real> {
    /// A control-affine system with a metric certificate (declared `ρ`, `Q`) and box.
    Metric { sys: ControlAffineSystem<T>, cert: MetricCertificate<T>, q: DMatrix<T>, bounds: Vec<(T, T)> },
    /// A constant-metric system `g ≡ G` for the global law.
    ConstantMetric { sys: ControlAffineSystem<T>, p: DMatrix<T>, g: DMatrix<T>, q: DMatrix<T>, bounds: Vec<(T, T)> },
    /// A strict-feedback system with its `a`-subsystem certificate.
    StrictFeedback { sfs: StrictFeedbackSystem<T>, a: ASubCertificate<T> },
}

impl<T: Real> Example<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Example::Metric { .. } => "metric",
            Example::ConstantMetric { .. } => "constant-metric",
            Example::StrictFeedback { .. } => "strict-feedback",
        }
    }
}

fn dv<T: Real>(v: &[f64]) -> DVector<T> {
    DVector::from_iterator(v.len(), v.iter().map(|&x| lit(x)))
}

fn dm<T: Real>(r: usize, c: usize, v: &[f64]) -> DMatrix<T> {
    DMatrix::from_row_iterator(r, c, v.iter().map(|&x| lit(x)))
}

fn scalar_example<T: Real>(
    drift: impl Fn(T) -> T + Send + Sync + 'static,
    slope: impl Fn(T) -> T + Send + Sync + 'static,
    half_width: f64,
) -> Example<T> {
    let sys = ControlAffineSystem::new(
        1,
        1,
        move |z: &DVector<T>| DVector::from_element(1, drift(z[0])),
        |_| DMatrix::identity(1, 1),
    )
    .with_jacobian(move |z| DMatrix::from_element(1, 1, slope(z[0])));
    let cert = MetricCertificate::constant_metric(DMatrix::identity(1, 1), 1, |z| z[0], |_| dv(&[1.0]), |_| dv(&[1.0]))
        .with_bounds(T::one(), T::one())
        .with_rho(lit(4.0))
        .with_q_margin(lit(2.0));
    let q = dm(1, 1, &[2.0]);
    Example::Metric { sys, cert, q, bounds: vec![(lit(-half_width), lit(half_width))] }
}

/// `ż = sin z + u`.
pub fn scalar_sine<T: Real>() -> Example<T> {
    scalar_example(|z: T| z.sin(), |z: T| z.cos(), 10.0)
}

/// `ż = z + u`.
pub fn unstable_scalar<T: Real>() -> Example<T> {
    scalar_example(|z| z, |_| T::one(), 10.0)
}

/// Harmonic oscillator with a Riccati metric; `Q = I/2`.
pub fn linear_rotation<T: Real>() -> Example<T> {
    let a = dm::<T>(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let g = dm::<T>(2, 1, &[0.0, 1.0]);
    let b = 2f64.sqrt() - 1.0;
    let c = (2.0 * 2f64.sqrt() - 1.0).sqrt();
    let p = dm::<T>(2, 2, &[2f64.sqrt() * c, b, b, c]);
    let q = DMatrix::identity(2, 2) * lit::<T>(0.5);
    Example::ConstantMetric {
        sys: ControlAffineSystem::linear(a, g.clone()),
        p,
        g,
        q,
        bounds: vec![(lit(-5.0), lit(5.0)); 2],
    }
}

/// The planar strict-feedback example and its subsystem certificate on `[−π, π]²`.
pub fn planar<T: Real>() -> Example<T> {
    let two = lit::<T>(2.0);
    let sfs = StrictFeedbackSystem::new(
        2,
        |z: &DVector<T>| DVector::from_vec(vec![-z[0] + z[1].sin() * z[0].cos() + z[1], T::zero()]),
        move |z: &DVector<T>| DVector::from_vec(vec![T::zero(), two + z[0].sin()]),
        |_| T::zero(),
        |_| T::one(),
        (T::one(), T::one()),
        move |z: &DVector<T>| two + z[0].sin(),
        |z: &DVector<T>| DVector::from_vec(vec![z[0].cos(), T::zero()]),
    )
    .with_hess_q_a(|z: &DVector<T>| DMatrix::from_row_slice(2, 2, &[-z[0].sin(), T::zero(), T::zero(), T::zero()]))
    .with_derivatives(
        |z: &DVector<T>| {
            DMatrix::from_row_slice(
                2,
                2,
                &[-T::one() - z[1].sin() * z[0].sin(), z[1].cos() * z[0].cos() + T::one(), T::zero(), T::zero()],
            )
        },
        |z: &DVector<T>| DMatrix::from_row_slice(2, 2, &[T::zero(), T::zero(), z[0].cos(), T::zero()]),
        |_| DVector::zeros(3),
        |_| DVector::zeros(3),
    );
    let cert = MetricCertificate::constant_metric(
        dm(2, 2, &[2.0, 1.0, 1.0, 2.0]),
        1,
        move |z: &DVector<T>| z[0] + two * z[1],
        |_| dv(&[1.0, 2.0]),
        move |z: &DVector<T>| DVector::from_element(1, T::one() / (two + z[0].sin())),
    )
    .with_bounds(T::one(), lit(3.0))
    .with_rho(lit(4.0))
    .with_q_margin(T::one());
    let a = ASubCertificate::new(cert, DMatrix::identity(2, 2), vec![(lit(-PI), lit(PI)); 2])
        .with_hess_u_a(|_| DMatrix::zeros(2, 2));
    Example::StrictFeedback { sfs, a }
}

/// The planar subsystem alone, as a metric example.
pub fn planar_a<T: Real>() -> Example<T> {
    match planar::<T>() {
        Example::StrictFeedback { sfs, a } => {
            Example::Metric { sys: sfs.a_subsystem(), cert: a.cert, q: a.q, bounds: a.bounds }
        }
        _ => unreachable!("planar is strict-feedback"),
    }
}

/// Augments a strict-feedback example with `choose_eta` on a 21-point grid and `M_b`.
pub fn backstep<T: Real>(
    sfs: &StrictFeedbackSystem<T>,
    a: &ASubCertificate<T>,
    eta: Option<T>,
    m_b: T,
) -> Result<AugmentedCertificate<T>, BacksteppingError> {
    let eta = match eta {
        Some(eta) => eta,
        None => choose_eta(a, sfs, &SampleSet::uniform_grid(&a.bounds, 21))?,
    };
    augment_certificate(a, sfs, eta, m_b)
}

/// Resolves a registry name; `<base>-backstepped` is built on demand.
pub fn lookup<T: Real>(name: &str) -> Option<Example<T>> {
    match name {
        "scalar-sine" => Some(scalar_sine()),
        "unstable-scalar" => Some(unstable_scalar()),
        "linear-rotation" => Some(linear_rotation()),
        "planar-a" => Some(planar_a()),
        "planar" => Some(planar()),
        _ => {
            let base = name.strip_suffix("-backstepped")?;
            match lookup::<T>(base)? {
                Example::StrictFeedback { sfs, a } => {
                    let aug = backstep(&sfs, &a, None, lit(DEFAULT_M_B)).ok()?;
                    let n = aug.cert.dim();
                    Some(Example::Metric {
                        sys: sfs.composite(),
                        cert: aug.cert,
                        q: DMatrix::zeros(n, n),
                        bounds: aug.bounds,
                    })
                }
                _ => None,
            }
        }
    }
}
