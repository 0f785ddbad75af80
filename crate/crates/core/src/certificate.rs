//! Metric certificates `(P, U, α)` and sampling-based verifiers for the pointwise
//! matrix inequalities a synchronizer needs.
//!
//! Every verifier scans a [`SampleSet`] and reports the worst margin, where the
//! margin is the largest left-hand side once all terms are moved to one side. A
//! check passes when the worst margin is at most the tolerance declared for it.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{
    finite_difference_gradient, finite_difference_jacobian, lambda_max, left_null_space, max_abs, sym_eigenvalues,
    symmetrize,
};
use crate::ode::rk4_step;
use crate::scalar::{abs, is_finite, lit, max, min, to_f64, Real};
use crate::system::{ControlAffineSystem, MatrixField, ScalarField, VectorField};

/// Directional derivative `(v, z) ↦ 𝔡_v P(z) = Σ_k v_k ∂P/∂z_k(z)`.
pub type TensorDerivative<T> = Arc<dyn Fn(&DVector<T>, &DVector<T>) -> DMatrix<T> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertificateError {
    #[error("non-finite {quantity} at {point:?}")]
    NonFinite { quantity: &'static str, point: Vec<f64> },
    #[error("vanishing q at {point:?} (|q| = {value:e})")]
    VanishingQ { point: Vec<f64>, value: f64 },
    #[error("certificate declares no rho")]
    MissingRho,
    #[error("sample set is empty")]
    EmptySamples,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub(crate) fn point_of<T: Real>(z: &DVector<T>) -> Vec<f64> {
    z.iter().map(|&v| to_f64(v)).collect()
}

fn ensure_finite_matrix<T: Real>(
    m: &DMatrix<T>,
    quantity: &'static str,
    z: &DVector<T>,
) -> Result<(), CertificateError> {
    if m.iter().all(|&v| is_finite(v)) {
        Ok(())
    } else {
        Err(CertificateError::NonFinite { quantity, point: point_of(z) })
    }
}

fn ensure_finite_vector<T: Real>(
    v: &DVector<T>,
    quantity: &'static str,
    z: &DVector<T>,
) -> Result<(), CertificateError> {
    if v.iter().all(|&x| is_finite(x)) {
        Ok(())
    } else {
        Err(CertificateError::NonFinite { quantity, point: point_of(z) })
    }
}

/// Metric `P`, potential `U` with gradient, scaling `α`, and the constants that
/// accompany them.
#[derive(Clone)]
pub struct MetricCertificate<T: Real> {
    dim: usize,
    input_dim: usize,
    metric: MatrixField<T>,
    metric_derivative: Option<TensorDerivative<T>>,
    potential: ScalarField<T>,
    /// `(∂U/∂z)ᵀ` as a column.
    potential_gradient: VectorField<T>,
    scaling: VectorField<T>,
    pub p_lower: Option<T>,
    pub p_upper: Option<T>,
    pub rho: Option<T>,
    pub q_margin: Option<T>,
    gradient_is_approximate: bool,
}

impl<T: Real> fmt::Debug for MetricCertificate<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricCertificate")
            .field("dim", &self.dim)
            .field("input_dim", &self.input_dim)
            .field("analytic_metric_derivative", &self.metric_derivative.is_some())
            .field("p_lower", &self.p_lower)
            .field("p_upper", &self.p_upper)
            .field("rho", &self.rho)
            .field("q_margin", &self.q_margin)
            .finish()
    }
}

impl<T: Real> MetricCertificate<T> {
    pub fn new(
        dim: usize,
        input_dim: usize,
        metric: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
        potential: impl Fn(&DVector<T>) -> T + Send + Sync + 'static,
        potential_gradient: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        scaling: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            input_dim,
            metric: Arc::new(metric),
            metric_derivative: None,
            potential: Arc::new(potential),
            potential_gradient: Arc::new(potential_gradient),
            scaling: Arc::new(scaling),
            p_lower: None,
            p_upper: None,
            rho: None,
            q_margin: None,
            gradient_is_approximate: false,
        }
    }

    /// Constant metric; `𝔡_v P` is identically zero.
    pub fn constant_metric(
        p: DMatrix<T>,
        input_dim: usize,
        potential: impl Fn(&DVector<T>) -> T + Send + Sync + 'static,
        potential_gradient: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        scaling: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
    ) -> Self {
        let n = p.nrows();
        Self::new(n, input_dim, move |_| p.clone(), potential, potential_gradient, scaling)
            .with_metric_derivative(move |_, _| DMatrix::zeros(n, n))
    }

    /// Builds a certificate from `(P, U, α)` only; the gradient of `U` comes from
    /// central differences and checks use finite-difference tolerances.
    pub fn with_numeric_gradient(
        dim: usize,
        input_dim: usize,
        metric: impl Fn(&DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
        potential: impl Fn(&DVector<T>) -> T + Send + Sync + 'static,
        scaling: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
    ) -> Self {
        let potential: ScalarField<T> = Arc::new(potential);
        let for_gradient = potential.clone();
        let h = lit::<T>(1e-6);
        let mut cert = Self::new(
            dim,
            input_dim,
            metric,
            move |z| potential(z),
            move |z| finite_difference_gradient(|x| for_gradient(x), z, h),
            scaling,
        );
        cert.gradient_is_approximate = true;
        cert
    }

    /// Marks the gradient as approximate so checks use finite-difference tolerances.
    pub fn mark_gradient_approximate(mut self) -> Self {
        self.gradient_is_approximate = true;
        self
    }

    pub fn with_metric_derivative(
        mut self,
        derivative: impl Fn(&DVector<T>, &DVector<T>) -> DMatrix<T> + Send + Sync + 'static,
    ) -> Self {
        self.metric_derivative = Some(Arc::new(derivative));
        self
    }

    pub fn with_bounds(mut self, lower: T, upper: T) -> Self {
        self.p_lower = Some(lower);
        self.p_upper = Some(upper);
        self
    }

    pub fn with_rho(mut self, rho: T) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn with_q_margin(mut self, q: T) -> Self {
        self.q_margin = Some(q);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn metric(&self, z: &DVector<T>) -> DMatrix<T> {
        (self.metric)(z)
    }

    pub fn metric_field(&self) -> &MatrixField<T> {
        &self.metric
    }

    pub fn metric_derivative(&self) -> Option<&TensorDerivative<T>> {
        self.metric_derivative.as_ref()
    }

    pub fn potential(&self, z: &DVector<T>) -> T {
        (self.potential)(z)
    }

    pub fn potential_field(&self) -> &ScalarField<T> {
        &self.potential
    }

    pub fn potential_gradient(&self, z: &DVector<T>) -> DVector<T> {
        (self.potential_gradient)(z)
    }

    pub fn gradient_field(&self) -> &VectorField<T> {
        &self.potential_gradient
    }

    pub fn scaling(&self, z: &DVector<T>) -> DVector<T> {
        (self.scaling)(z)
    }

    pub fn scaling_field(&self) -> &VectorField<T> {
        &self.scaling
    }

    pub fn gradient_is_approximate(&self) -> bool {
        self.gradient_is_approximate
    }

    /// Default `Q = q_margin · I`, if a margin is declared.
    pub fn default_q(&self) -> Option<DMatrix<T>> {
        self.q_margin.map(|q| DMatrix::identity(self.dim, self.dim) * q)
    }
}

/// Points of a compact box: a full tensor grid, optionally augmented with seeded
/// uniform random points.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T: Real> {
    bounds: Vec<(T, T)>,
    grid_counts: Vec<usize>,
    random_count: usize,
    seed: u64,
    points: Vec<DVector<T>>,
}

/// Default grid density per axis.
pub const DEFAULT_GRID: usize = 21;
/// Default number of extra random points.
pub const DEFAULT_RANDOM: usize = 1000;

impl<T: Real> SampleSet<T> {
    /// Tensor grid with `counts[k]` evenly spaced points along axis `k`, endpoints
    /// included. A count of one selects the interval midpoint.
    pub fn grid(bounds: &[(T, T)], counts: &[usize]) -> Self {
        assert_eq!(bounds.len(), counts.len(), "one grid count per axis");
        let axes: Vec<Vec<T>> = bounds
            .iter()
            .zip(counts)
            .map(|(&(lo, hi), &count)| match count {
                0 => Vec::new(),
                1 => vec![(lo + hi) * lit::<T>(0.5)],
                _ => (0..count).map(|k| lo + (hi - lo) * lit::<T>(k as f64 / (count - 1) as f64)).collect(),
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut points = Vec::with_capacity(total);
        if !axes.is_empty() {
            let mut index = vec![0usize; axes.len()];
            for _ in 0..total {
                points.push(DVector::from_iterator(axes.len(), index.iter().zip(&axes).map(|(&i, axis)| axis[i])));
                for k in (0..axes.len()).rev() {
                    index[k] += 1;
                    if index[k] < axes[k].len() {
                        break;
                    }
                    index[k] = 0;
                }
            }
        }
        Self { bounds: bounds.to_vec(), grid_counts: counts.to_vec(), random_count: 0, seed: 0, points }
    }

    pub fn uniform_grid(bounds: &[(T, T)], per_axis: usize) -> Self {
        Self::grid(bounds, &vec![per_axis; bounds.len()])
    }

    /// Defaults: 21 points per axis plus 1000 seeded random points.
    pub fn standard(bounds: &[(T, T)], seed: u64) -> Self {
        Self::uniform_grid(bounds, DEFAULT_GRID).with_random(DEFAULT_RANDOM, seed)
    }

    /// Appends `count` uniform random points drawn from a ChaCha8 stream seeded by `seed`.
    pub fn with_random(mut self, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..count {
            let point = DVector::from_iterator(
                self.bounds.len(),
                self.bounds.iter().map(|&(lo, hi)| lo + (hi - lo) * lit::<T>(rng.random::<f64>())),
            );
            self.points.push(point);
        }
        self.random_count += count;
        self.seed = seed;
        self
    }

    /// Explicit points; the box is their bounding box.
    pub fn from_points(points: Vec<DVector<T>>) -> Self {
        let dim = points.first().map_or(0, |p| p.len());
        let bounds = (0..dim)
            .map(|k| points.iter().fold((points[0][k], points[0][k]), |(lo, hi), p| (min(lo, p[k]), max(hi, p[k]))))
            .collect();
        Self { bounds, grid_counts: Vec::new(), random_count: 0, seed: 0, points }
    }

    pub fn points(&self) -> &[DVector<T>] {
        &self.points
    }

    pub fn bounds(&self) -> &[(T, T)] {
        &self.bounds
    }

    pub fn grid_counts(&self) -> &[usize] {
        &self.grid_counts
    }

    pub fn random_count(&self) -> usize {
        self.random_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, z: &DVector<T>) -> bool {
        z.len() == self.bounds.len() && z.iter().zip(&self.bounds).all(|(&v, &(lo, hi))| v >= lo && v <= hi)
    }
}

/// Numerical settings shared by the verifiers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSettings<T: Real> {
    /// Step of the RK4 flow used for `𝔡_f P` when no analytic derivative is given.
    pub flow_step: T,
    /// Tolerance for checks on analytic quantities only.
    pub analytic_tolerance: T,
    /// Tolerance once any finite difference participates.
    pub finite_difference_tolerance: T,
    /// Relative singular-value cutoff for kernel computations.
    pub rank_cutoff: T,
    /// `|q|` below this counts as vanishing.
    pub vanishing_q: T,
}

impl<T: Real> Default for CheckSettings<T> {
    fn default() -> Self {
        Self {
            flow_step: lit(1e-4),
            analytic_tolerance: lit(1e-9),
            finite_difference_tolerance: lit(1e-6),
            rank_cutoff: lit(1e-10),
            vanishing_q: lit(1e-9),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Property {
    Bounds,
    Integrability,
    CmfKernel,
    CmfStrengthened,
    Killing,
    Sparsity,
    VanishingOnManifold,
    GlobalGainBlock,
}

impl Property {
    pub fn name(self) -> &'static str {
        match self {
            Property::Bounds => "bounds",
            Property::Integrability => "integrability",
            Property::CmfKernel => "cmf-kernel",
            Property::CmfStrengthened => "cmf-strengthened",
            Property::Killing => "killing",
            Property::Sparsity => "sparsity",
            Property::VanishingOnManifold => "vanishing-on-manifold",
            Property::GlobalGainBlock => "global-gain-block",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport<T: Real> {
    pub property: Property,
    pub worst_margin: T,
    pub worst_point: DVector<T>,
    pub pass: bool,
    pub samples_checked: usize,
    pub tolerance: T,
}

impl<T: Real> VerificationReport<T> {
    pub(crate) fn from_scan(property: Property, scan: Scan<T>, tolerance: T) -> Self {
        Self {
            property,
            pass: scan.worst_margin <= tolerance,
            worst_margin: scan.worst_margin,
            worst_point: scan.worst_point,
            samples_checked: scan.samples,
            tolerance,
        }
    }
}

impl<T: Real> fmt::Display for VerificationReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {} margin={:+.6e} tol={:.1e} samples={} worst={:?}",
            self.property.name(),
            if self.pass { "PASS" } else { "FAIL" },
            to_f64(self.worst_margin),
            to_f64(self.tolerance),
            self.samples_checked,
            point_of(&self.worst_point),
        )
    }
}

pub(crate) struct Scan<T: Real> {
    pub worst_margin: T,
    pub worst_point: DVector<T>,
    pub samples: usize,
}

/// Evaluates `margin` at every sample in parallel and keeps the largest value
/// (earliest sample on ties). The first error in sample order wins.
pub(crate) fn scan_points<T, F>(points: &[DVector<T>], margin: F) -> Result<Scan<T>, CertificateError>
where
    T: Real,
    F: Fn(&DVector<T>) -> Result<T, CertificateError> + Sync,
{
    scan_indexed(points, |_, z| margin(z))
}

/// [`scan_points`] with the sample index passed alongside the point.
pub(crate) fn scan_indexed<T, F>(points: &[DVector<T>], margin: F) -> Result<Scan<T>, CertificateError>
where
    T: Real,
    F: Fn(usize, &DVector<T>) -> Result<T, CertificateError> + Sync,
{
    if points.is_empty() {
        return Err(CertificateError::EmptySamples);
    }
    let results: Vec<Result<T, CertificateError>> = points.par_iter().enumerate().map(|(k, z)| margin(k, z)).collect();
    let mut best: Option<(T, usize)> = None;
    for (index, result) in results.into_iter().enumerate() {
        let value = result?;
        // ±∞ is a legitimate margin (vacuous kernel condition); NaN is not.
        #[allow(clippy::eq_op)]
        if value != value {
            return Err(CertificateError::NonFinite { quantity: "margin", point: point_of(&points[index]) });
        }
        if best.is_none_or(|(b, _)| value > b) {
            best = Some((value, index));
        }
    }
    let (worst_margin, index) = best.expect("non-empty");
    Ok(Scan { worst_margin, worst_point: points[index].clone(), samples: points.len() })
}

/// Central difference `[P(Z(z, h)) − P(Z(z, −h))] / 2h` of the metric along the flow
/// of `field`, each flow point reached by one RK4 step.
pub fn flow_derivative_along<T: Real>(
    field: &(dyn Fn(&DVector<T>) -> DVector<T> + Sync),
    metric: &(dyn Fn(&DVector<T>) -> DMatrix<T> + Sync),
    z: &DVector<T>,
    h: T,
) -> Result<DMatrix<T>, CertificateError> {
    ensure_finite_vector(&field(z), "vector field", z)?;
    let forward = rk4_step(field, z, h);
    let backward = rk4_step(field, z, -h);
    ensure_finite_vector(&forward, "flow", z)?;
    ensure_finite_vector(&backward, "flow", z)?;
    let p_forward = metric(&forward);
    let p_backward = metric(&backward);
    ensure_finite_matrix(&p_forward, "metric", &forward)?;
    ensure_finite_matrix(&p_backward, "metric", &backward)?;
    Ok(symmetrize(&((p_forward - p_backward) / (h + h))))
}

/// Flow-based `𝔡_f P(z)` for the drift of `sys`.
pub fn flow_tensor_derivative<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    z: &DVector<T>,
    h: T,
) -> Result<DMatrix<T>, CertificateError> {
    let drift = sys.drift_field();
    let metric = cert.metric_field();
    flow_derivative_along(&|x| drift(x), &|x| metric(x), z, h)
}

/// `𝔡_v P(z)` for the vector field `field`, analytic when the certificate carries a
/// derivative, flow-based otherwise.
fn derivative_along<T: Real>(
    field: &(dyn Fn(&DVector<T>) -> DVector<T> + Sync),
    cert: &MetricCertificate<T>,
    z: &DVector<T>,
    settings: &CheckSettings<T>,
) -> Result<DMatrix<T>, CertificateError> {
    match cert.metric_derivative() {
        Some(dp) => {
            let v = field(z);
            ensure_finite_vector(&v, "vector field", z)?;
            Ok(dp(&v, z))
        }
        None => {
            let metric = cert.metric_field();
            flow_derivative_along(field, &|x| metric(x), z, settings.flow_step)
        }
    }
}

/// `L_v P = 𝔡_v P + P ∂v/∂z + (∂v/∂z)ᵀ P`.
pub fn lie_derivative_along<T: Real>(
    field: &(dyn Fn(&DVector<T>) -> DVector<T> + Sync),
    field_jacobian: &DMatrix<T>,
    cert: &MetricCertificate<T>,
    z: &DVector<T>,
    settings: &CheckSettings<T>,
) -> Result<DMatrix<T>, CertificateError> {
    let dp = derivative_along(field, cert, z, settings)?;
    let p = cert.metric(z);
    ensure_finite_matrix(&p, "metric", z)?;
    ensure_finite_matrix(field_jacobian, "jacobian", z)?;
    let pj = &p * field_jacobian;
    Ok(symmetrize(&(dp + &pj + pj.transpose())))
}

/// `L_f P(z)` for the drift of `sys`.
pub fn lie_derivative_tensor<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    z: &DVector<T>,
    settings: &CheckSettings<T>,
) -> Result<DMatrix<T>, CertificateError> {
    let drift = sys.drift_field();
    lie_derivative_along(&|x| drift(x), &sys.jacobian(z), cert, z, settings)
}

fn uses_finite_differences<T: Real>(sys: &ControlAffineSystem<T>, cert: &MetricCertificate<T>) -> bool {
    !sys.has_analytic_jacobian() || cert.metric_derivative().is_none()
}

fn check_dims<T: Real>(sys: &ControlAffineSystem<T>, cert: &MetricCertificate<T>) -> Result<(), CertificateError> {
    if sys.state_dim() != cert.dim() || sys.input_dim() != cert.input_dim() {
        return Err(CertificateError::Dimension(format!(
            "system is {}×{}, certificate is {}×{}",
            sys.state_dim(),
            sys.input_dim(),
            cert.dim(),
            cert.input_dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport<T: Real> {
    pub report: VerificationReport<T>,
    pub p_lower_estimate: T,
    pub p_upper_estimate: T,
}

/// Estimates `p̲ = min λ_min(P)` and `p̄ = max λ_max(P)` over the samples and checks
/// them against any declared bounds.
pub fn check_bounds<T: Real>(
    cert: &MetricCertificate<T>,
    samples: &SampleSet<T>,
    settings: &CheckSettings<T>,
) -> Result<BoundsReport<T>, CertificateError> {
    if samples.is_empty() {
        return Err(CertificateError::EmptySamples);
    }
    let spectra: Vec<Result<(T, T), CertificateError>> = samples
        .points()
        .par_iter()
        .map(|z| {
            let p = cert.metric(z);
            ensure_finite_matrix(&p, "metric", z)?;
            let ev = sym_eigenvalues(&p);
            Ok((ev[0], ev[ev.len() - 1]))
        })
        .collect();
    let spectra: Vec<(T, T)> = spectra.into_iter().collect::<Result<_, _>>()?;
    let p_lower_estimate = spectra.iter().fold(spectra[0].0, |acc, s| min(acc, s.0));
    let p_upper_estimate = spectra.iter().fold(spectra[0].1, |acc, s| max(acc, s.1));

    let margin_at = |(lo, hi): (T, T)| {
        let mut m = -lo;
        if let Some(declared) = cert.p_lower {
            m = max(m, declared - lo);
        }
        if let Some(declared) = cert.p_upper {
            m = max(m, hi - declared);
        }
        m
    };
    let (index, worst_margin) = spectra
        .iter()
        .map(|&s| margin_at(s))
        .enumerate()
        .fold((0, margin_at(spectra[0])), |(bi, bm), (i, m)| if m > bm { (i, m) } else { (bi, bm) });
    let tolerance = settings.analytic_tolerance;
    let report = VerificationReport {
        property: Property::Bounds,
        pass: p_lower_estimate > T::zero() && worst_margin <= tolerance,
        worst_margin,
        worst_point: samples.points()[index].clone(),
        samples_checked: samples.len(),
        tolerance,
    };
    Ok(BoundsReport { report, p_lower_estimate, p_upper_estimate })
}

/// Residual `‖(∂U/∂z)ᵀ − P g α‖_∞`.
pub fn integrability_residual<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    z: &DVector<T>,
) -> Result<T, CertificateError> {
    let grad = cert.potential_gradient(z);
    let rhs = cert.metric(z) * sys.input_matrix(z) * cert.scaling(z);
    let diff = grad - rhs;
    ensure_finite_vector(&diff, "integrability residual", z)?;
    Ok(diff.iter().fold(T::zero(), |acc, &v| max(acc, abs(v))))
}

pub fn check_integrability<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    samples: &SampleSet<T>,
    settings: &CheckSettings<T>,
) -> Result<VerificationReport<T>, CertificateError> {
    check_dims(sys, cert)?;
    let scan = scan_points(samples.points(), |z| integrability_residual(sys, cert, z))?;
    let tolerance =
        if cert.gradient_is_approximate() { settings.finite_difference_tolerance } else { settings.analytic_tolerance };
    Ok(VerificationReport::from_scan(Property::Integrability, scan, tolerance))
}

/// `λ_max(Wᵀ (L_f P + Q) W)` with `W` an orthonormal basis of `ker (P g)ᵀ`; `−∞` when
/// the kernel is trivial.
pub fn cmf_kernel_margin<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    q: &DMatrix<T>,
    z: &DVector<T>,
    settings: &CheckSettings<T>,
) -> Result<T, CertificateError> {
    let lie = lie_derivative_tensor(sys, cert, z, settings)?;
    let pg = cert.metric(z) * sys.input_matrix(z);
    ensure_finite_matrix(&pg, "P g", z)?;
    let w = left_null_space(&pg, settings.rank_cutoff);
    if w.ncols() == 0 {
        return Ok(lit(f64::NEG_INFINITY));
    }
    Ok(lambda_max(&(w.transpose() * (lie + q) * &w)))
}

pub fn check_cmf_kernel<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    samples: &SampleSet<T>,
    q: &DMatrix<T>,
    settings: &CheckSettings<T>,
) -> Result<VerificationReport<T>, CertificateError> {
    check_dims(sys, cert)?;
    let scan = scan_points(samples.points(), |z| cmf_kernel_margin(sys, cert, q, z, settings))?;
    let tolerance = if uses_finite_differences(sys, cert) {
        settings.finite_difference_tolerance
    } else {
        settings.analytic_tolerance
    };
    Ok(VerificationReport::from_scan(Property::CmfKernel, scan, tolerance))
}

/// `λ_max(L_f P − ρ ∇U ∇Uᵀ + Q)`.
pub fn cmf_strengthened_margin<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    rho: T,
    q: &DMatrix<T>,
    z: &DVector<T>,
    settings: &CheckSettings<T>,
) -> Result<T, CertificateError> {
    let lie = lie_derivative_tensor(sys, cert, z, settings)?;
    let grad = cert.potential_gradient(z);
    ensure_finite_vector(&grad, "potential gradient", z)?;
    Ok(lambda_max(&(lie - &grad * grad.transpose() * rho + q)))
}

pub fn check_cmf_strengthened<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    samples: &SampleSet<T>,
    q: &DMatrix<T>,
    settings: &CheckSettings<T>,
) -> Result<VerificationReport<T>, CertificateError> {
    let rho = cert.rho.ok_or(CertificateError::MissingRho)?;
    check_strengthened_with_rho(sys, cert, rho, samples, q, settings)
}

/// Strengthened check with an explicit `ρ` instead of the declared one.
pub fn check_strengthened_with_rho<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    rho: T,
    samples: &SampleSet<T>,
    q: &DMatrix<T>,
    settings: &CheckSettings<T>,
) -> Result<VerificationReport<T>, CertificateError> {
    check_dims(sys, cert)?;
    let scan = scan_points(samples.points(), |z| cmf_strengthened_margin(sys, cert, rho, q, z, settings))?;
    let tolerance = if uses_finite_differences(sys, cert) || cert.gradient_is_approximate() {
        settings.finite_difference_tolerance
    } else {
        settings.analytic_tolerance
    };
    Ok(VerificationReport::from_scan(Property::CmfStrengthened, scan, tolerance))
}

/// The field `g / q` whose flow should leave the metric invariant.
#[derive(Clone)]
pub struct KillingField<T: Real> {
    pub field: VectorField<T>,
    pub normalizer: ScalarField<T>,
    /// Analytic Jacobian of `g / q`; finite differences otherwise.
    pub jacobian: Option<MatrixField<T>>,
}

impl<T: Real> KillingField<T> {
    pub fn new(
        field: impl Fn(&DVector<T>) -> DVector<T> + Send + Sync + 'static,
        normalizer: impl Fn(&DVector<T>) -> T + Send + Sync + 'static,
    ) -> Self {
        Self { field: Arc::new(field), normalizer: Arc::new(normalizer), jacobian: None }
    }

    fn normalized(&self, z: &DVector<T>) -> DVector<T> {
        (self.field)(z) / (self.normalizer)(z)
    }
}

/// `‖L_{g/q} P(z)‖_∞` (largest absolute entry).
pub fn killing_residual<T: Real>(
    field: &KillingField<T>,
    cert: &MetricCertificate<T>,
    z: &DVector<T>,
    settings: &CheckSettings<T>,
) -> Result<T, CertificateError> {
    let q = (field.normalizer)(z);
    if !is_finite(q) || abs(q) < settings.vanishing_q {
        return Err(CertificateError::VanishingQ { point: point_of(z), value: to_f64(q) });
    }
    let normalized = |x: &DVector<T>| field.normalized(x);
    let jac = match &field.jacobian {
        Some(j) => j(z),
        None => finite_difference_jacobian(normalized, z, lit(crate::system::DEFAULT_JACOBIAN_STEP)),
    };
    let lie = lie_derivative_along(&normalized, &jac, cert, z, settings)?;
    Ok(max_abs(&lie))
}

pub fn check_killing<T: Real>(
    field: &KillingField<T>,
    cert: &MetricCertificate<T>,
    samples: &SampleSet<T>,
    settings: &CheckSettings<T>,
) -> Result<VerificationReport<T>, CertificateError> {
    let scan = scan_points(samples.points(), |z| killing_residual(field, cert, z, settings))?;
    Ok(VerificationReport::from_scan(Property::Killing, scan, settings.finite_difference_tolerance))
}
