//! Recursive construction of a metric certificate for strict-feedback systems
//!
//! ```text
//! ż_a = f_a(z_a) + g_a(z_a) z_b,    ż_b = f_b(z) + g_b(z) u,    z_b ∈ R.
//! ```
//!
//! From an `a`-subsystem certificate `(P_a, U_a, α_a, ρ_a, Q_a)` and a function
//! `q_a` making `g_a / q_a` a Killing field of `P_a`, the composite certificate is
//!
//! ```text
//! S_a = (∂q_a/∂z_a)ᵀ z_b + η α_a P_a g_a
//! P_b = [[P_a, 0], [0, 0]] + w wᵀ,   w = (S_a; q_a)
//! U_b = η U_a + q_a z_b,   α_b = 1 / (q_a g_b),   q_b = q_a g_b.
//! ```
//!
//! The output is again a certificate with a Killing normalizer, so the construction
//! chains for triangular systems of any depth.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::certificate::{
    check_bounds, check_cmf_kernel, check_integrability, check_killing, check_strengthened_with_rho, point_of,
    scan_points, BoundsReport, CertificateError, CheckSettings, KillingField, MetricCertificate, SampleSet,
    VerificationReport,
};
use crate::scalar::{lit, max, to_f64, Real};
use crate::system::{ControlAffineSystem, MatrixField, ScalarField, VectorField};

/// Default multiplier on the smallest admissible `η`.
pub const DEFAULT_ETA_SAFETY: f64 = 1.1;
/// Number of doublings tried when searching for `ρ_b`.
pub const RHO_LADDER_STEPS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BacksteppingError {
    #[error("rho_a must be positive, got {0}")]
    NonPositiveRho(f64),
    #[error("alpha_a q_a = {value} is not positive at {point:?}")]
    SignConvention { point: Vec<f64>, value: f64 },
    #[error("M_b must be positive, got {0}")]
    NonPositiveBound(f64),
    #[error("eta must be positive, got {0}")]
    NonPositiveEta(f64),
    #[error("declared bounds on g_b must satisfy 0 < lower <= upper, got [{0}, {1}]")]
    InputBounds(f64, f64),
    #[error("a-subsystem must have a scalar input, got {0}")]
    InputDimension(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}

/// The strict-feedback composite with the normalizer `q_a` of the `a`-subsystem.
///
/// Optional derivatives enable analytic Jacobians and an analytic metric derivative
/// for the augmented certificate; without them finite differences are used.
#[derive(Clone)]
pub struct StrictFeedbackSystem<T: Real> {
    pub na: usize,
    pub f_a: VectorField<T>,
    pub g_a: VectorField<T>,
    pub f_b: ScalarField<T>,
    pub g_b: ScalarField<T>,
    /// Declared `0 < g̲_b ≤ g_b ≤ ḡ_b`.
    pub g_b_bounds: (T, T),
    pub q_a: ScalarField<T>,
    pub grad_q_a: VectorField<T>,
    pub hess_q_a: Option<MatrixField<T>>,
    pub jac_f_a: Option<MatrixField<T>>,
    pub jac_g_a: Option<MatrixField<T>>,
    pub grad_f_b: Option<VectorField<T>>,
    pub grad_g_b: Option<VectorField<T>>,
}

fn split<T: Real>(na: usize, z: &DVector<T>) -> (DVector<T>, T) {
    (z.rows(0, na).into_owned(), z[na])
}

impl<T: Real> StrictFeedbackSystem<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        na: usize,
        f_a: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        g_a: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        f_b: impl Fn(&DVector<T>) -> T + Send + Sync + 'static,
        g_b: impl Fn(&DVector<T>) -> T + Send + Sync + 'static,
        g_b_bounds: (T, T),
        q_a: impl Fn(&DVector<T>) -> T + Send + Sync + 'static,
        grad_q_a: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            na,
            f_a: Arc::new(f_a),
            g_a: Arc::new(g_a),
            f_b: Arc::new(f_b),
            g_b: Arc::new(g_b),
            g_b_bounds,
            q_a: Arc::new(q_a),
            grad_q_a: Arc::new(grad_q_a),
            hess_q_a: None,
            jac_f_a: None,
            jac_g_a: None,
            grad_f_b: None,
            grad_g_b: None,
        }
    }

    pub fn with_hess_q_a(mut self, h: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static) -> Self {
        self.hess_q_a = Some(Arc::new(h));
        self
    }

    /// Analytic derivatives of `f_a`, `g_a`, `f_b` and `g_b`.
    pub fn with_derivatives(
        mut self,
        jac_f_a: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
        jac_g_a: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
        grad_f_b: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        grad_g_b: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
    ) -> Self {
        self.jac_f_a = Some(Arc::new(jac_f_a));
        self.jac_g_a = Some(Arc::new(jac_g_a));
        self.grad_f_b = Some(Arc::new(grad_f_b));
        self.grad_g_b = Some(Arc::new(grad_g_b));
        self
    }

    pub fn dim(&self) -> usize {
        self.na + 1
    }

    /// `ż_a = f_a(z_a) + g_a(z_a) v` with `v = z_b` as input.
    pub fn a_subsystem(&self) -> ControlAffineSystem<T> {
        let (f_a, g_a, na) = (self.f_a.clone(), self.g_a.clone(), self.na);
        let sys = ControlAffineSystem::new(
            na,
            1,
            move |z| f_a(z),
            move |z| DMatrix::from_column_slice(na, 1, g_a(z).as_slice()),
        );
        match &self.jac_f_a {
            Some(j) => {
                let j = j.clone();
                sys.with_jacobian(move |z| j(z))
            }
            None => sys,
        }
    }

    /// The composite `(f_a + g_a z_b, f_b)`, `g = (0, …, 0, g_b)`.
    pub fn composite(&self) -> ControlAffineSystem<T> {
        let na = self.na;
        let (f_a, g_a, f_b, g_b) = (self.f_a.clone(), self.g_a.clone(), self.f_b.clone(), self.g_b.clone());
        let drift = move |z: &DVector<T>| {
            let (za, zb) = split(na, z);
            let top = f_a(&za) + g_a(&za) * zb;
            DVector::from_iterator(na + 1, top.iter().copied().chain(std::iter::once(f_b(z))))
        };
        let input = move |z: &DVector<T>| {
            let mut g = DMatrix::zeros(na + 1, 1);
            g[(na, 0)] = g_b(z);
            g
        };
        let sys = ControlAffineSystem::new(na + 1, 1, drift, input);
        match (&self.jac_f_a, &self.jac_g_a, &self.grad_f_b) {
            (Some(jf), Some(jg), Some(gf)) => {
                let (jf, jg, gf, g_a) = (jf.clone(), jg.clone(), gf.clone(), self.g_a.clone());
                sys.with_jacobian(move |z| {
                    let (za, zb) = split(na, z);
                    let mut j = DMatrix::zeros(na + 1, na + 1);
                    j.view_mut((0, 0), (na, na)).copy_from(&(jf(&za) + jg(&za) * zb));
                    j.view_mut((0, na), (na, 1)).copy_from(&g_a(&za));
                    j.view_mut((na, 0), (1, na + 1)).copy_from(&gf(z).transpose());
                    j
                })
            }
            _ => sys,
        }
    }

    /// The field `g_a / q_a` on the `a`-subsystem.
    pub fn a_killing_field(&self) -> KillingField<T> {
        let (g_a, q_a) = (self.g_a.clone(), self.q_a.clone());
        KillingField::new(move |z| g_a(z), move |z| q_a(z))
    }
}

/// Assumption data of the `a`-subsystem: certificate (with `ρ_a`), `Q_a`, the box
/// `C_a`, and optionally the Hessian of `U_a` for analytic augmented derivatives.
#[derive(Clone)]
pub struct ASubCertificate<T: Real> {
    pub cert: MetricCertificate<T>,
    pub q: DMatrix<T>,
    pub bounds: Vec<(T, T)>,
    pub hess_u_a: Option<MatrixField<T>>,
}

impl<T: Real> ASubCertificate<T> {
    pub fn new(cert: MetricCertificate<T>, q: DMatrix<T>, bounds: Vec<(T, T)>) -> Self {
        Self { cert, q, bounds, hess_u_a: None }
    }

    pub fn with_hess_u_a(mut self, h: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static) -> Self {
        self.hess_u_a = Some(Arc::new(h));
        self
    }

    pub fn rho(&self) -> Result<T, BacksteppingError> {
        let rho = self.cert.rho.ok_or(CertificateError::MissingRho)?;
        if rho <= T::zero() {
            return Err(BacksteppingError::NonPositiveRho(to_f64(rho)));
        }
        Ok(rho)
    }
}

/// Reports for the `a`-subsystem assumptions.
#[derive(Debug, Clone, PartialEq)]
pub struct ASubReports<T: Real> {
    pub bounds: BoundsReport<T>,
    pub integrability: VerificationReport<T>,
    pub strengthened: VerificationReport<T>,
    pub killing: VerificationReport<T>,
}

impl<T: Real> ASubReports<T> {
    pub fn pass(&self) -> bool {
        self.bounds.report.pass && self.integrability.pass && self.strengthened.pass && self.killing.pass
    }

    pub fn reports(&self) -> [&VerificationReport<T>; 4] {
        [&self.bounds.report, &self.integrability, &self.strengthened, &self.killing]
    }
}

pub fn verify_a_subsystem<T: Real>(
    cert_a: &ASubCertificate<T>,
    sfs: &StrictFeedbackSystem<T>,
    samples: &SampleSet<T>,
    settings: &CheckSettings<T>,
) -> Result<ASubReports<T>, BacksteppingError> {
    let sys = sfs.a_subsystem();
    let rho = cert_a.rho()?;
    Ok(ASubReports {
        bounds: check_bounds(&cert_a.cert, samples, settings)?,
        integrability: check_integrability(&sys, &cert_a.cert, samples, settings)?,
        strengthened: check_strengthened_with_rho(&sys, &cert_a.cert, rho, samples, &cert_a.q, settings)?,
        killing: check_killing(&sfs.a_killing_field(), &cert_a.cert, samples, settings)?,
    })
}

/// `η = (ρ_a / 2) · max α_a q_a · safety` over `samples` (a grid of `C_a`).
pub fn choose_eta_with_safety<T: Real>(
    cert_a: &ASubCertificate<T>,
    sfs: &StrictFeedbackSystem<T>,
    samples: &SampleSet<T>,
    safety: T,
) -> Result<T, BacksteppingError> {
    let rho = cert_a.rho()?;
    if cert_a.cert.input_dim() != 1 {
        return Err(BacksteppingError::InputDimension(cert_a.cert.input_dim()));
    }
    let scan = scan_points(samples.points(), |z| Ok(-(cert_a.cert.scaling(z)[0] * (sfs.q_a)(z))))?;
    // The scan keeps the largest of −α q, i.e. the smallest product.
    if -scan.worst_margin <= T::zero() {
        return Err(BacksteppingError::SignConvention {
            point: point_of(&scan.worst_point),
            value: to_f64(-scan.worst_margin),
        });
    }
    let largest = scan_points(samples.points(), |z| Ok(cert_a.cert.scaling(z)[0] * (sfs.q_a)(z)))?.worst_margin;
    Ok(rho / lit::<T>(2.0) * largest * safety)
}

pub fn choose_eta<T: Real>(
    cert_a: &ASubCertificate<T>,
    sfs: &StrictFeedbackSystem<T>,
    samples: &SampleSet<T>,
) -> Result<T, BacksteppingError> {
    choose_eta_with_safety(cert_a, sfs, samples, lit(DEFAULT_ETA_SAFETY))
}

/// The composite certificate with its Killing normalizer `q_b` and box `C_b`.
#[derive(Clone)]
pub struct AugmentedCertificate<T: Real> {
    pub cert: MetricCertificate<T>,
    pub eta: T,
    pub q_a: ScalarField<T>,
    pub grad_q_a: VectorField<T>,
    pub q_b: ScalarField<T>,
    pub bounds: Vec<(T, T)>,
    /// `Hess U_b`, available when the inputs provide enough derivatives; enables
    /// analytic derivatives when the certificate is augmented again.
    pub hess_u_b: Option<MatrixField<T>>,
    pub analytic_metric_derivative: bool,
}

impl<T: Real> AugmentedCertificate<T> {
    /// `g / q_b` for the composite. Since `q_b = q_a g_b` the field is `e_n / q_a`,
    /// whose Jacobian has the single nonzero row `−(∇q_a; 0)ᵀ / q_a²`.
    pub fn killing_field(&self, composite: &ControlAffineSystem<T>) -> KillingField<T> {
        let sys = composite.clone();
        let n = self.cert.dim();
        let na = n - 1;
        let mut field = KillingField::new(move |z| sys.input_matrix(z).column(0).into_owned(), {
            let q_b = self.q_b.clone();
            move |z| q_b(z)
        });
        let (q_a, grad_q_a) = (self.q_a.clone(), self.grad_q_a.clone());
        field.jacobian = Some(Arc::new(move |z: &DVector<T>| {
            let za = z.rows(0, na).into_owned();
            let q = q_a(&za);
            let mut j = DMatrix::zeros(n, n);
            j.view_mut((na, 0), (1, na)).copy_from(&(grad_q_a(&za) * (-T::one() / (q * q))).transpose());
            j
        }));
        field
    }

    /// The `a`-subsystem view of this certificate for another backstepping step.
    pub fn as_a_subsystem(&self, q: DMatrix<T>) -> ASubCertificate<T> {
        ASubCertificate { cert: self.cert.clone(), q, bounds: self.bounds.clone(), hess_u_a: self.hess_u_b.clone() }
    }
}

/// Builds `(P_b, U_b, α_b, q_b)` on `C_a × [−M_b, M_b]`.
pub fn augment_certificate<T: Real>(
    cert_a: &ASubCertificate<T>,
    sfs: &StrictFeedbackSystem<T>,
    eta: T,
    m_b: T,
) -> Result<AugmentedCertificate<T>, BacksteppingError> {
    if m_b <= T::zero() {
        return Err(BacksteppingError::NonPositiveBound(to_f64(m_b)));
    }
    if eta <= T::zero() {
        return Err(BacksteppingError::NonPositiveEta(to_f64(eta)));
    }
    let (lo, hi) = sfs.g_b_bounds;
    if lo <= T::zero() || hi < lo {
        return Err(BacksteppingError::InputBounds(to_f64(lo), to_f64(hi)));
    }
    if cert_a.cert.input_dim() != 1 {
        return Err(BacksteppingError::InputDimension(cert_a.cert.input_dim()));
    }
    let na = sfs.na;
    if cert_a.cert.dim() != na || cert_a.bounds.len() != na {
        return Err(BacksteppingError::Dimension(format!(
            "a-certificate is {}-dimensional with a {}-axis box, subsystem has {na} states",
            cert_a.cert.dim(),
            cert_a.bounds.len()
        )));
    }
    let n = na + 1;

    let a = cert_a.cert.clone();
    let (g_a, q_a, grad_q_a) = (sfs.g_a.clone(), sfs.q_a.clone(), sfs.grad_q_a.clone());
    // w(z) = (S_a(z); q_a(z_a)).
    let w = Arc::new(move |z: &DVector<T>| -> DVector<T> {
        let (za, zb) = split(na, z);
        let s_a = grad_q_a(&za) * zb + a.metric(&za) * g_a(&za) * (eta * a.scaling(&za)[0]);
        DVector::from_iterator(n, s_a.iter().copied().chain(std::iter::once(q_a(&za))))
    });

    let metric = {
        let (a, w) = (cert_a.cert.clone(), w.clone());
        move |z: &DVector<T>| {
            let (za, _) = split(na, z);
            let wz = w(z);
            let mut p = &wz * wz.transpose();
            let mut block = p.view_mut((0, 0), (na, na));
            block += a.metric(&za);
            p
        }
    };
    let potential = {
        let (a, q_a) = (cert_a.cert.clone(), sfs.q_a.clone());
        move |z: &DVector<T>| {
            let (za, zb) = split(na, z);
            eta * a.potential(&za) + q_a(&za) * zb
        }
    };
    let gradient = {
        let (a, q_a, grad_q_a) = (cert_a.cert.clone(), sfs.q_a.clone(), sfs.grad_q_a.clone());
        move |z: &DVector<T>| {
            let (za, zb) = split(na, z);
            let top = a.potential_gradient(&za) * eta + grad_q_a(&za) * zb;
            DVector::from_iterator(n, top.iter().copied().chain(std::iter::once(q_a(&za))))
        }
    };
    let q_b: ScalarField<T> = {
        let (q_a, g_b) = (sfs.q_a.clone(), sfs.g_b.clone());
        Arc::new(move |z: &DVector<T>| q_a(&z.rows(0, na).into_owned()) * g_b(z))
    };
    let scaling = {
        let q_b = q_b.clone();
        move |z: &DVector<T>| DVector::from_element(1, T::one() / q_b(z))
    };

    let mut cert = MetricCertificate::new(n, 1, metric, potential, gradient, scaling);
    if cert_a.cert.gradient_is_approximate() {
        cert = cert.mark_gradient_approximate();
    }

    // 𝔡_v P_b = [[𝔡_{v_a} P_a, 0], [0, 0]] + d wᵀ + w dᵀ with d = (∂w/∂z) v and
    // ∂w/∂z = [[Hess q_a z_b + η Hess U_a, ∇q_a], [∇q_aᵀ, 0]].
    let analytic = cert_a.cert.metric_derivative().is_some() && sfs.hess_q_a.is_some() && cert_a.hess_u_a.is_some();
    let hess_u_b: Option<MatrixField<T>> = match (&sfs.hess_q_a, &cert_a.hess_u_a) {
        (Some(hq), Some(hu)) => {
            let (hq, hu, grad_q_a) = (hq.clone(), hu.clone(), sfs.grad_q_a.clone());
            Some(Arc::new(move |z: &DVector<T>| {
                let (za, zb) = split(na, z);
                let mut h = DMatrix::zeros(n, n);
                h.view_mut((0, 0), (na, na)).copy_from(&(hu(&za) * eta + hq(&za) * zb));
                let gq = grad_q_a(&za);
                h.view_mut((0, na), (na, 1)).copy_from(&gq);
                h.view_mut((na, 0), (1, na)).copy_from(&gq.transpose());
                h
            }))
        }
        _ => None,
    };
    if analytic {
        let dp_a = cert_a.cert.metric_derivative().expect("checked").clone();
        let dw = hess_u_b.clone().expect("checked");
        let w = w.clone();
        cert = cert.with_metric_derivative(move |v, z| {
            let (za, _) = split(na, z);
            let va = v.rows(0, na).into_owned();
            let wz = w(z);
            let d = dw(z) * v;
            let mut out = &d * wz.transpose() + &wz * d.transpose();
            let mut block = out.view_mut((0, 0), (na, na));
            block += dp_a(&va, &za);
            out
        });
    }

    let mut bounds = cert_a.bounds.clone();
    bounds.push((-m_b, m_b));
    Ok(AugmentedCertificate {
        cert,
        eta,
        q_a: sfs.q_a.clone(),
        grad_q_a: sfs.grad_q_a.clone(),
        q_b,
        bounds,
        hess_u_b,
        analytic_metric_derivative: analytic,
    })
}

/// Verification bundle for an augmented certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedReport<T: Real> {
    pub bounds: BoundsReport<T>,
    pub integrability: VerificationReport<T>,
    pub killing: VerificationReport<T>,
    /// Kernel inequality with `Q = 0`; its margin sets `ε`.
    pub kernel: VerificationReport<T>,
    /// Strengthened inequality at the accepted `ρ_b` (or the last rung tried).
    pub strengthened: VerificationReport<T>,
    pub rho_b: Option<T>,
    pub epsilon: T,
    pub q_b: DMatrix<T>,
}

impl<T: Real> AugmentedReport<T> {
    pub fn pass(&self) -> bool {
        self.bounds.report.pass
            && self.integrability.pass
            && self.killing.pass
            && self.kernel.pass
            && self.rho_b.is_some()
    }

    pub fn reports(&self) -> [&VerificationReport<T>; 5] {
        [&self.bounds.report, &self.integrability, &self.killing, &self.kernel, &self.strengthened]
    }

    /// Reason for a failed `ρ_b` search.
    pub fn diagnostic(&self) -> Option<&'static str> {
        if self.rho_b.is_some() {
            None
        } else if !self.kernel.pass {
            Some("kernel inequality fails: compact set too large or eta too small")
        } else {
            Some("rho ladder exhausted: compact set too large or eta too small")
        }
    }

    /// The certificate with `ρ_b` and `ε` recorded, when the search succeeded.
    pub fn certified(&self, cert: &MetricCertificate<T>) -> Option<MetricCertificate<T>> {
        self.rho_b.map(|rho| cert.clone().with_rho(rho).with_q_margin(self.epsilon))
    }
}

/// Bounds, integrability, Killing (with `q_b`), and the smallest `ρ_b` on
/// `ρ_a · 2^k`, `k = 0..=20`, for which the strengthened inequality holds with
/// `Q_b = ε I`, `ε` half the observed kernel margin.
pub fn verify_augmented<T: Real>(
    aug: &AugmentedCertificate<T>,
    composite: &ControlAffineSystem<T>,
    rho_a: T,
    samples: &SampleSet<T>,
    settings: &CheckSettings<T>,
) -> Result<AugmentedReport<T>, BacksteppingError> {
    let cert = &aug.cert;
    let n = cert.dim();
    if composite.state_dim() != n {
        return Err(BacksteppingError::Dimension(format!(
            "composite has {} states, certificate {n}",
            composite.state_dim()
        )));
    }
    if rho_a <= T::zero() {
        return Err(BacksteppingError::NonPositiveRho(to_f64(rho_a)));
    }
    let bounds = check_bounds(cert, samples, settings)?;
    let integrability = check_integrability(composite, cert, samples, settings)?;
    let killing = check_killing(&aug.killing_field(composite), cert, samples, settings)?;
    let zero = DMatrix::zeros(n, n);
    let kernel = check_cmf_kernel(composite, cert, samples, &zero, settings)?;
    let epsilon = max(T::zero(), -kernel.worst_margin / lit::<T>(2.0));
    let q_b = DMatrix::identity(n, n) * epsilon;

    let mut rho = rho_a;
    let mut last = None;
    let mut rho_b = None;
    if kernel.pass && epsilon > T::zero() {
        for _ in 0..=RHO_LADDER_STEPS {
            let report = check_strengthened_with_rho(composite, cert, rho, samples, &q_b, settings)?;
            let pass = report.pass;
            last = Some(report);
            if pass {
                rho_b = Some(rho);
                break;
            }
            rho *= lit::<T>(2.0);
        }
    }
    let strengthened = match last {
        Some(r) => r,
        None => check_strengthened_with_rho(composite, cert, rho_a, samples, &q_b, settings)?,
    };
    Ok(AugmentedReport { bounds, integrability, killing, kernel, strengthened, rho_b, epsilon, q_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::{integrability_residual, killing_residual};
    use crate::registry::{planar, Example};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn example() -> (StrictFeedbackSystem<f64>, ASubCertificate<f64>) {
        match planar::<f64>() {
            Example::StrictFeedback { sfs, a } => (sfs, a),
            _ => unreachable!(),
        }
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn metric_at_origin_with_unit_eta() {
        let (sfs, a) = example();
        let aug = augment_certificate(&a, &sfs, 1.0, 1.0).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[3.0, 3.0, 2.0, 3.0, 6.0, 4.0, 2.0, 4.0, 4.0]);
        assert_eq!(aug.cert.metric(&DVector::zeros(3)), expected);
        assert!(aug.analytic_metric_derivative);
        assert_eq!(aug.bounds[2], (-1.0, 1.0));
    }

    #[test]
    fn metric_is_block_plus_outer_product() {
        let (sfs, a) = example();
        let eta = 1.7;
        let aug = augment_certificate(&a, &sfs, eta, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let z = dv(&[rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-1.0..1.0)]);
            let (z1, zb) = (z[0], z[2]);
            let q = 2.0 + z1.sin();
            // S_a = (cos z1, 0) z_b + η (1/q) [[2,1],[1,2]] (0, q) = (z_b cos z1 + η, 2η).
            let w = dv(&[zb * z1.cos() + eta, 2.0 * eta, q]);
            let mut expected = &w * w.transpose();
            expected[(0, 0)] += 2.0;
            expected[(0, 1)] += 1.0;
            expected[(1, 0)] += 1.0;
            expected[(1, 1)] += 2.0;
            assert!((aug.cert.metric(&z) - expected).abs().max() < 1e-12);
        }
    }

    #[test]
    fn constructed_identities_hold_on_grid() {
        let (sfs, a) = example();
        let aug = augment_certificate(&a, &sfs, 1.0, 1.0).unwrap();
        let comp = sfs.composite();
        let settings = CheckSettings::default();
        let killing = aug.killing_field(&comp);
        for z in SampleSet::uniform_grid(&aug.bounds, 11).points() {
            assert!(integrability_residual(&comp, &aug.cert, z).unwrap() <= 1e-10);
            assert!(killing_residual(&killing, &aug.cert, z, &settings).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn analytic_metric_derivative_matches_flow_derivative() {
        let (sfs, a) = example();
        let aug = augment_certificate(&a, &sfs, 2.2, 1.0).unwrap();
        let comp = sfs.composite();
        let dp = aug.cert.metric_derivative().unwrap();
        for z in [dv(&[0.3, -1.2, 0.4]), dv(&[2.5, 0.7, -0.9])] {
            let flow = crate::certificate::flow_tensor_derivative(&comp, &aug.cert, &z, 1e-4).unwrap();
            assert!((dp(&comp.drift(&z), &z) - flow).abs().max() < 1e-6);
        }
    }

    #[test]
    fn eta_selection() {
        let (sfs, a) = example();
        let grid = SampleSet::uniform_grid(&a.bounds, 21);
        // α_a q_a ≡ 1, so η = (4 / 2) · 1 · 1.1.
        assert!((choose_eta(&a, &sfs, &grid).unwrap() - 2.2).abs() < 1e-12);

        let doubled = ASubCertificate {
            cert: MetricCertificate::constant_metric(
                DMatrix::identity(2, 2),
                1,
                |_| 0.0,
                |_| DVector::zeros(2),
                |_| dv(&[2.0]),
            )
            .with_rho(1.0),
            ..a.clone()
        };
        let unit_q = StrictFeedbackSystem { q_a: Arc::new(|_: &DVector<f64>| 1.0), ..sfs.clone() };
        assert!((choose_eta(&doubled, &unit_q, &grid).unwrap() - 1.1).abs() < 1e-12);

        let zero_rho = ASubCertificate { cert: a.cert.clone().with_rho(0.0), ..a.clone() };
        assert_eq!(choose_eta(&zero_rho, &sfs, &grid), Err(BacksteppingError::NonPositiveRho(0.0)));

        let flipped = StrictFeedbackSystem { q_a: Arc::new(|z: &DVector<f64>| -2.0 - z[0].sin()), ..sfs.clone() };
        assert!(matches!(choose_eta(&a, &flipped, &grid), Err(BacksteppingError::SignConvention { .. })));
    }

    #[test]
    fn rejects_bad_parameters() {
        let (sfs, a) = example();
        assert_eq!(augment_certificate(&a, &sfs, 1.0, 0.0).err(), Some(BacksteppingError::NonPositiveBound(0.0)));
        assert_eq!(augment_certificate(&a, &sfs, 0.0, 1.0).err(), Some(BacksteppingError::NonPositiveEta(0.0)));
        let bad = StrictFeedbackSystem { g_b_bounds: (0.0, 1.0), ..sfs };
        assert_eq!(augment_certificate(&a, &bad, 1.0, 1.0).err(), Some(BacksteppingError::InputBounds(0.0, 1.0)));
    }

    #[test]
    fn verification_passes_at_chosen_eta_and_fails_for_small_eta() {
        let (sfs, a) = example();
        let comp = sfs.composite();
        let settings = CheckSettings::default();
        let grid = SampleSet::uniform_grid(&a.bounds, 21);
        let eta = choose_eta(&a, &sfs, &grid).unwrap();
        let aug = augment_certificate(&a, &sfs, eta, 1.0).unwrap();
        let samples = SampleSet::uniform_grid(&aug.bounds, 11);
        let report = verify_augmented(&aug, &comp, 4.0, &samples, &settings).unwrap();
        assert!(report.pass(), "{:?}", report.reports());
        assert!(report.diagnostic().is_none());
        let rho_b = report.rho_b.unwrap();
        assert!(rho_b >= 4.0 && (rho_b / 4.0).log2().fract() == 0.0);

        let weak = augment_certificate(&a, &sfs, 0.5, 1.0).unwrap();
        let report = verify_augmented(&weak, &comp, 4.0, &samples, &settings).unwrap();
        assert!(!report.pass());
        assert!(report.rho_b.is_none());
        assert!(report.diagnostic().unwrap().contains("eta too small"));
        assert!(!report.strengthened.pass);
        assert!(samples.contains(&report.strengthened.worst_point));
    }

    #[test]
    fn chained_step_preserves_identities() {
        // Second step: ż = (f(z) + g(z) z_c, u) with q = q_b = 2 + sin z_1.
        let (sfs, a) = example();
        let first = augment_certificate(&a, &sfs, 2.2, 1.0).unwrap();
        let comp = sfs.composite();
        let (drift, input) = (comp.clone(), comp.clone());
        let jac_sys = comp.clone();
        let second_sfs = StrictFeedbackSystem::new(
            3,
            move |z| drift.drift(z),
            move |z| input.input_matrix(z).column(0).into_owned(),
            |_| 0.0,
            |_| 1.0,
            (1.0, 1.0),
            |z: &DVector<f64>| 2.0 + z[0].sin(),
            |z: &DVector<f64>| dv(&[z[0].cos(), 0.0, 0.0]),
        )
        .with_hess_q_a(|z: &DVector<f64>| {
            let mut h = DMatrix::zeros(3, 3);
            h[(0, 0)] = -z[0].sin();
            h
        })
        .with_derivatives(
            move |z| jac_sys.jacobian(z),
            |_| DMatrix::zeros(3, 3),
            |_| DVector::zeros(4),
            |_| DVector::zeros(4),
        );
        let a2 = first.as_a_subsystem(DMatrix::identity(3, 3) * 0.1);
        let a2 = ASubCertificate { cert: a2.cert.with_rho(128.0), ..a2 };
        let second = augment_certificate(&a2, &second_sfs, 1.0, 1.0).unwrap();
        assert!(second.analytic_metric_derivative);
        let comp2 = second_sfs.composite();
        let settings = CheckSettings::default();
        let killing = second.killing_field(&comp2);
        for z in SampleSet::uniform_grid(&second.bounds, 4).points() {
            assert!(integrability_residual(&comp2, &second.cert, z).unwrap() <= 1e-10);
            assert!(killing_residual(&killing, &second.cert, z, &settings).unwrap() <= 1e-6);
            assert!(crate::linalg::lambda_min(&second.cert.metric(z)) > 0.0);
        }
    }
}
