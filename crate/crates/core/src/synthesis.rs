//! Distributed synchronizing feedback laws and the gain selection behind them.
//!
//! Two laws are built here:
//!
//! * the local law `φ_i(x) = −ℓ α(x_i) Σ_j L_ij U(x_j)` for a metric certificate
//!   satisfying integrability and the strengthened inequality, with
//!   `ℓ ≥ ρ / ν` where `S A + Aᵀ S ≤ −ν S` and `A = −L̄`;
//! * the constant-metric law `φ_i(x) = −ℓ c_i Σ_j L_ij Gᵀ P x_j` with
//!   `c = (c₁, 1, …, 1)` from the coupling search, and `ℓ` chosen so that
//!   `P J(z) + J(z)ᵀ P − ℓ μ P G Gᵀ P ≤ −Q` on the sample box.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::certificate::{
    check_cmf_strengthened, check_integrability, point_of, scan_indexed, scan_points, CertificateError, CheckSettings,
    MetricCertificate, Property, SampleSet, Scan, VerificationReport,
};
use crate::graph::{coupling_matrix, find_c1, reduced_laplacian, CommGraph, CouplingMatrix, GraphError};
use crate::linalg::{eigenvalues, lambda_max, lambda_min, solve_lyapunov};
use crate::scalar::{abs, lit, max, to_f64, Real};
use crate::system::{ControlAffineSystem, ScalarField, VectorField};

/// Default multiplier applied to the minimal gain.
pub const DEFAULT_SAFETY_FACTOR: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error("matrix is not Hurwitz: eigenvalue {re} + {im}i")]
    NotHurwitz { re: f64, im: f64 },
    #[error("Lyapunov equation is singular")]
    SingularLyapunov,
    #[error("gain {gain} is below the minimum {minimum}")]
    GainBelowMinimum { gain: f64, minimum: f64 },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("coupling margin mu is zero")]
    NoCouplingMargin,
    #[error("prerequisite {property} failed: margin {margin:e} at {point:?}")]
    PrerequisiteFailed { property: Property, margin: f64, point: Vec<f64> },
    #[error("global gain block check failed: margin {margin:e} at {point:?}")]
    BlockCheckFailed { margin: f64, point: Vec<f64> },
    #[error("no gain up to 2^60 satisfies the block check")]
    GainSearchExhausted,
    #[error("certificate declares no rho")]
    MissingRho,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}

/// `S` solving `S A + Aᵀ S = −I` and the largest `ν` with `S A + Aᵀ S ≤ −ν S`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovMargin<T: Real> {
    pub s: DMatrix<T>,
    pub nu: T,
}

pub fn solve_lyapunov_margin<T: Real>(a: &DMatrix<T>) -> Result<LyapunovMargin<T>, SynthesisError> {
    if let Some(bad) = eigenvalues(a).into_iter().find(|ev| ev.re >= T::zero()) {
        return Err(SynthesisError::NotHurwitz { re: to_f64(bad.re), im: to_f64(bad.im) });
    }
    let k = a.nrows();
    let s = solve_lyapunov(a, &DMatrix::identity(k, k)).ok_or(SynthesisError::SingularLyapunov)?;
    // S A + Aᵀ S = −I ≤ −ν S exactly when ν λ_max(S) ≤ 1.
    let nu = T::one() / lambda_max(&s);
    Ok(LyapunovMargin { s, nu })
}

/// `ℓ̲ = ρ / ν`.
pub fn local_min_gain<T: Real>(cert: &MetricCertificate<T>, nu: T) -> Result<T, SynthesisError> {
    let rho = cert.rho.ok_or(SynthesisError::MissingRho)?;
    Ok(rho / nu)
}

/// Evidence behind a synthesized gain.
#[derive(Debug, Clone, PartialEq)]
pub struct GainCertificate<T: Real> {
    pub s: DMatrix<T>,
    pub nu: T,
    pub ell_min: T,
    pub safety_factor: T,
    pub c1: Option<T>,
    pub mu: Option<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Local,
    Global,
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerKind::Local => "local",
            ControllerKind::Global => "global",
        })
    }
}

#[derive(Clone)]
enum Payload<T: Real> {
    Local { potential: ScalarField<T>, gradient: VectorField<T>, scaling: VectorField<T> },
    Global { p: DMatrix<T>, g: DMatrix<T>, feedback: DMatrix<T> },
}

/// The stacked feedback `φ = (φ_1, …, φ_N)`; immutable once built.
#[derive(Clone)]
pub struct SyncController<T: Real> {
    kind: ControllerKind,
    gain: T,
    weights: DVector<T>,
    graph: CommGraph,
    laplacian: DMatrix<T>,
    neighbours: Vec<Vec<usize>>,
    state_dim: usize,
    input_dim: usize,
    payload: Payload<T>,
}

impl<T: Real> fmt::Debug for SyncController<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyncController")
            .field("kind", &self.kind)
            .field("gain", &self.gain)
            .field("weights", &self.weights.as_slice())
            .field("agents", &self.graph.node_count())
            .finish()
    }
}

impl<T: Real> SyncController<T> {
    fn new(
        kind: ControllerKind,
        gain: T,
        weights: DVector<T>,
        graph: &CommGraph,
        state_dim: usize,
        input_dim: usize,
        payload: Payload<T>,
    ) -> Self {
        let neighbours = (0..graph.node_count()).map(|i| graph.laplacian_support(i)).collect();
        Self {
            kind,
            gain,
            weights,
            laplacian: graph.laplacian_as(),
            graph: graph.clone(),
            neighbours,
            state_dim,
            input_dim,
            payload,
        }
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn gain(&self) -> T {
        self.gain
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.weights
    }

    pub fn graph(&self) -> &CommGraph {
        &self.graph
    }

    pub fn agents(&self) -> usize {
        self.graph.node_count()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// The constant metric of a global controller.
    pub fn constant_metric(&self) -> Option<&DMatrix<T>> {
        match &self.payload {
            Payload::Global { p, .. } => Some(p),
            Payload::Local { .. } => None,
        }
    }

    /// The constant input matrix of a global controller.
    pub fn constant_input(&self) -> Option<&DMatrix<T>> {
        match &self.payload {
            Payload::Global { g, .. } => Some(g),
            Payload::Local { .. } => None,
        }
    }

    /// Input of agent `i` (0-based); reads only agents `j` with `L_ij ≠ 0`.
    pub fn agent_input(&self, i: usize, x: &DVector<T>) -> DVector<T> {
        let n = self.state_dim;
        let agent = |j: usize| x.rows(j * n, n).into_owned();
        let scale = -self.gain * self.weights[i];
        match &self.payload {
            Payload::Local { potential, scaling, .. } => {
                let coupling = self.neighbours[i]
                    .iter()
                    .fold(T::zero(), |acc, &j| acc + self.laplacian[(i, j)] * potential(&agent(j)));
                scaling(&agent(i)) * (scale * coupling)
            }
            Payload::Global { feedback, .. } => {
                let mut sum = DVector::<T>::zeros(n);
                for &j in &self.neighbours[i] {
                    sum += agent(j) * self.laplacian[(i, j)];
                }
                feedback * sum * scale
            }
        }
    }

    /// `φ(x)` for the stacked state `x ∈ R^{N n}`.
    pub fn evaluate(&self, x: &DVector<T>) -> DVector<T> {
        let p = self.input_dim;
        let mut u = DVector::<T>::zeros(self.agents() * p);
        for i in 0..self.agents() {
            u.rows_mut(i * p, p).copy_from(&self.agent_input(i, x));
        }
        u
    }

    /// `∂φ/∂x` on the manifold point `𝟙 ⊗ z` for a local controller:
    /// `−ℓ L ⊗ (α(z) ∂U/∂z(z))`.
    pub fn manifold_jacobian(&self, z: &DVector<T>) -> Option<DMatrix<T>> {
        match &self.payload {
            Payload::Local { gradient, scaling, .. } => {
                let block = scaling(z) * gradient(z).transpose() * (-self.gain);
                Some(self.laplacian.kronecker(&block))
            }
            Payload::Global { .. } => None,
        }
    }
}

/// Builds the local law. `gains.ell_min` is enforced unless `allow_below_min`.
pub fn make_local_controller<T: Real>(
    cert: &MetricCertificate<T>,
    graph: &CommGraph,
    gain: T,
    gains: &GainCertificate<T>,
    allow_below_min: bool,
) -> Result<SyncController<T>, SynthesisError> {
    if !graph.is_connected() {
        return Err(SynthesisError::Disconnected);
    }
    if gain < gains.ell_min && !allow_below_min {
        return Err(SynthesisError::GainBelowMinimum { gain: to_f64(gain), minimum: to_f64(gains.ell_min) });
    }
    let payload = Payload::Local {
        potential: cert.potential_field().clone(),
        gradient: cert.gradient_field().clone(),
        scaling: cert.scaling_field().clone(),
    };
    let weights = DVector::from_element(graph.node_count(), T::one());
    Ok(SyncController::new(ControllerKind::Local, gain, weights, graph, cert.dim(), cert.input_dim(), payload))
}

/// How the constant-metric gain condition is established.
#[derive(Debug, Clone, Copy)]
pub enum GainCheck<'a, T: Real> {
    /// Check the block inequality on every sample.
    Sampled(&'a SampleSet<T>),
    /// Accept without sampling (Jacobian bounded globally and the bound verified elsewhere).
    AssumeGlobalBound,
}

/// Per-sample data of the block inequality `P J + Jᵀ P + Q − ℓ μ P G Gᵀ P ≤ 0`.
struct BlockData<T: Real> {
    base: Vec<DMatrix<T>>,
    coupling: DMatrix<T>,
}

fn block_data<T: Real>(
    sys: &ControlAffineSystem<T>,
    p: &DMatrix<T>,
    g: &DMatrix<T>,
    mu: T,
    q: &DMatrix<T>,
    samples: &SampleSet<T>,
) -> BlockData<T> {
    let base = samples
        .points()
        .par_iter()
        .map(|z| {
            let pj = p * sys.jacobian(z);
            &pj + pj.transpose() + q
        })
        .collect();
    let pg = p * g;
    let coupling = &pg * pg.transpose() * mu;
    BlockData { base, coupling }
}

fn block_scan<T: Real>(data: &BlockData<T>, samples: &SampleSet<T>, gain: T) -> Result<Scan<T>, CertificateError> {
    scan_indexed(samples.points(), |k, _| Ok(lambda_max(&(&data.base[k] - &data.coupling * gain))))
}

/// Block-inequality report for a given gain.
#[allow(clippy::too_many_arguments)]
pub fn global_block_check<T: Real>(
    sys: &ControlAffineSystem<T>,
    p: &DMatrix<T>,
    g: &DMatrix<T>,
    mu: T,
    q: &DMatrix<T>,
    gain: T,
    samples: &SampleSet<T>,
    settings: &CheckSettings<T>,
) -> Result<VerificationReport<T>, SynthesisError> {
    let data = block_data(sys, p, g, mu, q, samples);
    let scan = block_scan(&data, samples, gain)?;
    let tolerance =
        if sys.has_analytic_jacobian() { settings.analytic_tolerance } else { settings.finite_difference_tolerance };
    Ok(VerificationReport::from_scan(Property::GlobalGainBlock, scan, tolerance))
}

/// Smallest gain (to bisection precision) passing the block inequality on the samples.
pub fn min_global_gain<T: Real>(
    sys: &ControlAffineSystem<T>,
    p: &DMatrix<T>,
    g: &DMatrix<T>,
    mu: T,
    q: &DMatrix<T>,
    samples: &SampleSet<T>,
) -> Result<T, SynthesisError> {
    if mu <= T::zero() {
        return Err(SynthesisError::NoCouplingMargin);
    }
    let data = block_data(sys, p, g, mu, q, samples);
    let passes = |gain: T| block_scan(&data, samples, gain).map(|s| s.worst_margin <= T::zero());
    if passes(T::zero())? {
        return Ok(T::zero());
    }
    let two = lit::<T>(2.0);
    let mut hi = T::one();
    let mut doublings = 0;
    while !passes(hi)? {
        hi *= two;
        doublings += 1;
        if doublings > 60 {
            return Err(SynthesisError::GainSearchExhausted);
        }
    }
    let mut lo = T::zero();
    for _ in 0..80 {
        let mid = (lo + hi) / two;
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Builds the constant-metric law for `g(z) ≡ G`.
#[allow(clippy::too_many_arguments)]
pub fn make_global_controller<T: Real>(
    sys: &ControlAffineSystem<T>,
    p: &DMatrix<T>,
    g: &DMatrix<T>,
    graph: &CommGraph,
    gain: T,
    coupling: &CouplingMatrix<T>,
    q: &DMatrix<T>,
    check: GainCheck<'_, T>,
    settings: &CheckSettings<T>,
) -> Result<SyncController<T>, SynthesisError> {
    let n = sys.state_dim();
    if p.shape() != (n, n) || g.shape() != (n, sys.input_dim()) {
        return Err(SynthesisError::Dimension(format!(
            "P is {:?}, G is {:?}, system is {}×{}",
            p.shape(),
            g.shape(),
            n,
            sys.input_dim()
        )));
    }
    if coupling.mu <= T::zero() {
        return Err(SynthesisError::NoCouplingMargin);
    }
    if let GainCheck::Sampled(samples) = check {
        let report = global_block_check(sys, p, g, coupling.mu, q, gain, samples, settings)?;
        if !report.pass {
            return Err(SynthesisError::BlockCheckFailed {
                margin: to_f64(report.worst_margin),
                point: point_of(&report.worst_point),
            });
        }
    }
    let mut weights = DVector::from_element(graph.node_count(), T::one());
    weights[0] = coupling.c1;
    let payload = Payload::Global { p: p.clone(), g: g.clone(), feedback: g.transpose() * p };
    Ok(SyncController::new(ControllerKind::Global, gain, weights, graph, n, sys.input_dim(), payload))
}

/// Options for the end-to-end synthesis helpers.
#[derive(Debug, Clone, Copy)]
pub struct SynthesisOptions<T: Real> {
    pub safety_factor: T,
    /// Explicit gain; `safety_factor · ℓ̲` otherwise.
    pub gain: Option<T>,
    /// Permit gains below the minimum and failed prerequisites.
    pub override_checks: bool,
}

impl<T: Real> Default for SynthesisOptions<T> {
    fn default() -> Self {
        Self { safety_factor: lit(DEFAULT_SAFETY_FACTOR), gain: None, override_checks: false }
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis<T: Real> {
    pub controller: SyncController<T>,
    pub gains: GainCertificate<T>,
    pub prerequisites: Vec<VerificationReport<T>>,
}

fn refuse_on_failure<T: Real>(report: &VerificationReport<T>, override_checks: bool) -> Result<(), SynthesisError> {
    if report.pass || override_checks {
        Ok(())
    } else {
        Err(SynthesisError::PrerequisiteFailed {
            property: report.property,
            margin: to_f64(report.worst_margin),
            point: point_of(&report.worst_point),
        })
    }
}

/// Verifies prerequisites, derives `ν` from the graph and builds the local law.
pub fn synthesize_local<T: Real>(
    sys: &ControlAffineSystem<T>,
    cert: &MetricCertificate<T>,
    graph: &CommGraph,
    samples: &SampleSet<T>,
    q: &DMatrix<T>,
    options: &SynthesisOptions<T>,
    settings: &CheckSettings<T>,
) -> Result<Synthesis<T>, SynthesisError> {
    if !graph.is_connected() {
        return Err(SynthesisError::Disconnected);
    }
    let integrability = check_integrability(sys, cert, samples, settings)?;
    refuse_on_failure(&integrability, options.override_checks)?;
    let strengthened = check_cmf_strengthened(sys, cert, samples, q, settings)?;
    refuse_on_failure(&strengthened, options.override_checks)?;

    let a = -reduced_laplacian::<T>(graph)?;
    let margin = solve_lyapunov_margin(&a)?;
    let ell_min = local_min_gain(cert, margin.nu)?;
    let gain = options.gain.unwrap_or(ell_min * options.safety_factor);
    let gains = GainCertificate {
        s: margin.s,
        nu: margin.nu,
        ell_min,
        safety_factor: options.safety_factor,
        c1: None,
        mu: None,
    };
    let controller = make_local_controller(cert, graph, gain, &gains, options.override_checks)?;
    Ok(Synthesis { controller, gains, prerequisites: vec![integrability, strengthened] })
}

/// Finds `c₁`, the minimal gain, and builds the constant-metric law.
///
/// With `S = I` the coupling margin doubles as `ν = μ`, which is what the gain
/// certificate records.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_global<T: Real>(
    sys: &ControlAffineSystem<T>,
    p: &DMatrix<T>,
    g: &DMatrix<T>,
    graph: &CommGraph,
    q: &DMatrix<T>,
    check: GainCheck<'_, T>,
    options: &SynthesisOptions<T>,
    settings: &CheckSettings<T>,
) -> Result<Synthesis<T>, SynthesisError> {
    if !graph.is_connected() {
        return Err(SynthesisError::Disconnected);
    }
    let coupling = find_c1::<T>(graph)?;
    let (ell_min, prerequisites) = match check {
        GainCheck::Sampled(samples) => {
            let ell_min = min_global_gain(sys, p, g, coupling.mu, q, samples)?;
            (ell_min, Vec::new())
        }
        GainCheck::AssumeGlobalBound => (T::zero(), Vec::new()),
    };
    let default_gain = if ell_min > T::zero() { ell_min * options.safety_factor } else { T::one() };
    let gain = options.gain.unwrap_or(default_gain);
    if gain < ell_min && !options.override_checks {
        return Err(SynthesisError::GainBelowMinimum { gain: to_f64(gain), minimum: to_f64(ell_min) });
    }
    let effective_check = if options.override_checks { GainCheck::AssumeGlobalBound } else { check };
    let controller = make_global_controller(sys, p, g, graph, gain, &coupling, q, effective_check, settings)?;
    let mut prerequisites = prerequisites;
    if let GainCheck::Sampled(samples) = check {
        prerequisites.push(global_block_check(sys, p, g, coupling.mu, q, gain, samples, settings)?);
    }
    let k = graph.node_count() - 1;
    let gains = GainCertificate {
        s: DMatrix::identity(k, k),
        nu: coupling.mu,
        ell_min,
        safety_factor: options.safety_factor,
        c1: Some(coupling.c1),
        mu: Some(coupling.mu),
    };
    Ok(Synthesis { controller, gains, prerequisites })
}

/// Recomputes `A(c₁)` for a global controller's weights.
pub fn controller_coupling<T: Real>(ctrl: &SyncController<T>) -> Result<CouplingMatrix<T>, GraphError> {
    coupling_matrix(ctrl.graph(), ctrl.weights()[0])
}

/// Sparsity and vanishing-on-manifold reports.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport<T: Real> {
    pub sparsity: VerificationReport<T>,
    pub vanishing: VerificationReport<T>,
}

impl<T: Real> StructureReport<T> {
    pub fn pass(&self) -> bool {
        self.sparsity.pass && self.vanishing.pass
    }
}

/// Number of random network states probed for sparsity.
pub const SPARSITY_PROBES: usize = 50;
/// Number of random manifold points probed for `φ(𝟙 ⊗ z) = 0`.
pub const MANIFOLD_PROBES: usize = 100;

/// Finite-difference sparsity of `∂φ_i/∂x_j` over non-edges and `‖φ(𝟙 ⊗ z)‖` on the
/// manifold, with probes drawn uniformly from `agent_box` per agent.
pub fn structural_checks<T: Real>(
    ctrl: &SyncController<T>,
    agent_box: &[(T, T)],
    seed: u64,
) -> Result<StructureReport<T>, SynthesisError> {
    let n = ctrl.state_dim();
    let agents = ctrl.agents();
    if agent_box.len() != n {
        return Err(SynthesisError::Dimension(format!("probe box has {} axes, agents have {n}", agent_box.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize| -> DVector<T> {
        DVector::from_iterator(
            count,
            (0..count).map(|k| {
                let (lo, hi) = agent_box[k % n];
                lo + (hi - lo) * lit::<T>(rng.random::<f64>())
            }),
        )
    };
    let network: Vec<DVector<T>> = (0..SPARSITY_PROBES).map(|_| draw(agents * n)).collect();
    let manifold: Vec<DVector<T>> = (0..MANIFOLD_PROBES).map(|_| draw(n)).collect();

    let h = lit::<T>(1e-6);
    let sparsity = scan_points(&network, |x| {
        let mut worst = T::zero();
        for j in 0..agents {
            let readers: Vec<usize> = (0..agents).filter(|&i| i != j && !ctrl.graph().adjacent(i, j)).collect();
            if readers.is_empty() {
                continue;
            }
            for k in 0..n {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus[j * n + k] += h;
                minus[j * n + k] -= h;
                for &i in &readers {
                    let d = (ctrl.agent_input(i, &plus) - ctrl.agent_input(i, &minus)) / (h + h);
                    worst = d.iter().fold(worst, |acc, &v| max(acc, abs(v)));
                }
            }
        }
        Ok(worst)
    })?;
    let vanishing = scan_points(&manifold, |z| {
        let stacked = DVector::from_iterator(agents * n, (0..agents).flat_map(|_| z.iter().copied()));
        Ok(ctrl.evaluate(&stacked).norm())
    })?;
    Ok(StructureReport {
        sparsity: VerificationReport::from_scan(Property::Sparsity, sparsity, lit(1e-7)),
        vanishing: VerificationReport::from_scan(Property::VanishingOnManifold, vanishing, lit(1e-12)),
    })
}

/// `λ_min(S)` and the self-certification residual `λ_max(S A + Aᵀ S + ν S)`.
pub fn lyapunov_residual<T: Real>(a: &DMatrix<T>, margin: &LyapunovMargin<T>) -> (T, T) {
    let s = &margin.s;
    (lambda_min(s), lambda_max(&(s * a + a.transpose() * s + s * margin.nu)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::finite_difference_jacobian;
    use approx::assert_abs_diff_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn scalar_sine() -> (ControlAffineSystem<f64>, MetricCertificate<f64>) {
        let sys = ControlAffineSystem::new(1, 1, |z| z.map(f64::sin), |_| DMatrix::identity(1, 1))
            .with_jacobian(|z| DMatrix::from_element(1, 1, z[0].cos()));
        let cert =
            MetricCertificate::constant_metric(DMatrix::identity(1, 1), 1, |z| z[0], |_| dv(&[1.0]), |_| dv(&[1.0]))
                .with_rho(4.0)
                .with_q_margin(2.0);
        (sys, cert)
    }

    #[test]
    fn lyapunov_margin_of_scalar_and_identity() {
        let m = solve_lyapunov_margin(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        assert_abs_diff_eq!(m.s[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.nu, 2.0, epsilon = 1e-14);

        let m = solve_lyapunov_margin(&(-DMatrix::<f64>::identity(3, 3))).unwrap();
        assert_abs_diff_eq!(m.s, DMatrix::identity(3, 3) * 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(m.nu, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_margin_of_path_matches_hand_solution() {
        // A = [[−3, 1], [0, −1]], S = [[a, b], [b, c]]; S A + Aᵀ S = −I reads
        //   −6a = −1,  a − 4b = 0,  2b − 2c = −1
        // so a = 1/6, b = 1/24, c = 13/24.
        let a = DMatrix::from_row_slice(2, 2, &[-3.0, 1.0, 0.0, -1.0]);
        let m = solve_lyapunov_margin(&a).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0 / 6.0, 1.0 / 24.0, 1.0 / 24.0, 13.0 / 24.0]);
        assert_abs_diff_eq!(m.s, expected, epsilon = 1e-14);
        let residual = &m.s * &a + a.transpose() * &m.s + DMatrix::identity(2, 2);
        assert!(residual.norm() <= 1e-12);
        // λ_max of [[4, 1], [1, 13]] / 24 is (17 + √85) / 48.
        assert_abs_diff_eq!(m.nu, 48.0 / (17.0 + 85f64.sqrt()), epsilon = 1e-12);
        let (smallest, self_check) = lyapunov_residual(&a, &m);
        assert!(smallest > 0.0 && self_check <= 1e-10);
    }

    #[test]
    fn lyapunov_margin_rejects_unstable_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.5]);
        assert_eq!(solve_lyapunov_margin(&a), Err(SynthesisError::NotHurwitz { re: 0.5, im: 0.0 }));
    }

    #[test]
    fn local_min_gain_ratios() {
        let (_, cert) = scalar_sine();
        assert_eq!(local_min_gain(&cert, 2.0).unwrap(), 2.0);
        let cert = cert.with_rho(1.0);
        assert_abs_diff_eq!(local_min_gain(&cert, 0.1).unwrap(), 10.0, epsilon = 1e-12);
    }

    fn local_on(graph: &CommGraph) -> SyncController<f64> {
        let (sys, cert) = scalar_sine();
        let samples = SampleSet::uniform_grid(&[(-3.0, 3.0)], 31);
        let q = cert.default_q().unwrap();
        synthesize_local(&sys, &cert, graph, &samples, &q, &SynthesisOptions::default(), &CheckSettings::default())
            .unwrap()
            .controller
    }

    #[test]
    fn local_controller_two_agents_expansion() {
        let cert = MetricCertificate::<f64>::new(
            1,
            1,
            |_| DMatrix::identity(1, 1),
            |z| z[0] * z[0],
            |z| dv(&[2.0 * z[0]]),
            |z| dv(&[1.0 + z[0] * z[0]]),
        );
        let gains = GainCertificate {
            s: DMatrix::identity(1, 1),
            nu: 1.0,
            ell_min: 0.5,
            safety_factor: 1.0,
            c1: None,
            mu: None,
        };
        let ctrl = make_local_controller(&cert, &CommGraph::path(2), 3.0, &gains, false).unwrap();
        let (x1, x2) = (0.5, -1.5);
        let u = ctrl.evaluate(&dv(&[x1, x2]));
        let alpha = |x: f64| 1.0 + x * x;
        assert_abs_diff_eq!(u[0], -3.0 * alpha(x1) * (x1 * x1 - x2 * x2), epsilon = 1e-14);
        assert_abs_diff_eq!(u[1], -3.0 * alpha(x2) * (x2 * x2 - x1 * x1), epsilon = 1e-14);
    }

    #[test]
    fn local_controller_vanishes_on_manifold() {
        let ctrl = local_on(&CommGraph::path(3));
        assert_eq!(ctrl.evaluate(&dv(&[0.7, 0.7, 0.7])), DVector::zeros(3));
    }

    #[test]
    fn local_controller_gain_floor() {
        let (_, cert) = scalar_sine();
        let gains = GainCertificate {
            s: DMatrix::identity(1, 1),
            nu: 2.0,
            ell_min: 2.0,
            safety_factor: 1.0,
            c1: None,
            mu: None,
        };
        let err = make_local_controller(&cert, &CommGraph::path(2), 1.0, &gains, false).unwrap_err();
        assert_eq!(err, SynthesisError::GainBelowMinimum { gain: 1.0, minimum: 2.0 });
        assert!(make_local_controller(&cert, &CommGraph::path(2), 1.0, &gains, true).is_ok());
        let disconnected = CommGraph::new(3, &[(1, 2)]).unwrap();
        assert_eq!(
            make_local_controller(&cert, &disconnected, 3.0, &gains, false).unwrap_err(),
            SynthesisError::Disconnected
        );
    }

    #[test]
    fn local_synthesis_refuses_failed_prerequisite() {
        let (sys, cert) = scalar_sine();
        let cert = cert.with_rho(1.0);
        let samples = SampleSet::uniform_grid(&[(-3.0, 3.0)], 31);
        let q = DMatrix::from_element(1, 1, 2.0);
        let err = synthesize_local(
            &sys,
            &cert,
            &CommGraph::path(3),
            &samples,
            &q,
            &SynthesisOptions::default(),
            &CheckSettings::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SynthesisError::PrerequisiteFailed { property: Property::CmfStrengthened, .. }));
    }

    #[test]
    fn local_manifold_jacobian_matches_finite_differences() {
        let cert = MetricCertificate::<f64>::new(
            2,
            1,
            |_| DMatrix::identity(2, 2),
            |z| z[0].sin() + z[1] * z[1],
            |z| dv(&[z[0].cos(), 2.0 * z[1]]),
            |z| dv(&[2.0 + z[0].cos()]),
        );
        let gains = GainCertificate {
            s: DMatrix::identity(2, 2),
            nu: 1.0,
            ell_min: 1.0,
            safety_factor: 1.0,
            c1: None,
            mu: None,
        };
        let ctrl = make_local_controller(&cert, &CommGraph::path(3), 1.7, &gains, false).unwrap();
        let z = dv(&[0.4, -0.9]);
        let stacked = dv(&[0.4, -0.9, 0.4, -0.9, 0.4, -0.9]);
        let fd = finite_difference_jacobian(|x| ctrl.evaluate(x), &stacked, 1e-6);
        assert_abs_diff_eq!(fd, ctrl.manifold_jacobian(&z).unwrap(), epsilon = 1e-6);
    }

    #[test]
    fn scalar_sine_global_gain_threshold() {
        // Block inequality 2 cos z + 2 − ℓ μ ≤ 0 on a box containing 0 gives ℓ̲ = 4 / μ.
        let (sys, _) = scalar_sine();
        let ring = CommGraph::ring(3);
        let coupling = find_c1::<f64>(&ring).unwrap();
        assert_abs_diff_eq!(coupling.mu, 6.0, epsilon = 1e-12);
        let samples = SampleSet::uniform_grid(&[(-10.0, 10.0)], 201);
        let one = DMatrix::identity(1, 1);
        let q = DMatrix::from_element(1, 1, 2.0);
        let ell = min_global_gain(&sys, &one, &one, coupling.mu, &q, &samples).unwrap();
        assert_abs_diff_eq!(ell, 4.0 / 6.0, epsilon = 1e-12);

        let settings = CheckSettings::default();
        assert!(make_global_controller(
            &sys,
            &one,
            &one,
            &ring,
            1.25 * ell,
            &coupling,
            &q,
            GainCheck::Sampled(&samples),
            &settings
        )
        .is_ok());
        let err = make_global_controller(
            &sys,
            &one,
            &one,
            &ring,
            0.5 * ell,
            &coupling,
            &q,
            GainCheck::Sampled(&samples),
            &settings,
        )
        .unwrap_err();
        assert!(matches!(err, SynthesisError::BlockCheckFailed { .. }));
    }

    #[test]
    fn global_controller_refuses_zero_margin() {
        let (sys, _) = scalar_sine();
        let one = DMatrix::identity(1, 1);
        let g = CommGraph::new(4, &[(1, 2), (3, 4)]).unwrap();
        let coupling = coupling_matrix::<f64>(&g, 1.0).unwrap();
        let err = make_global_controller(
            &sys,
            &one,
            &one,
            &g,
            1.0,
            &coupling,
            &one,
            GainCheck::AssumeGlobalBound,
            &CheckSettings::default(),
        )
        .unwrap_err();
        assert_eq!(err, SynthesisError::NoCouplingMargin);
    }

    #[test]
    fn harmonic_oscillator_global_gain() {
        // P solves Aᵀ P + P A − P G Gᵀ P = −I in closed form, so the block matrix is
        // (1 − ℓμ) P G Gᵀ P − I + Q with |P G|² = 2; Q = I/2 gives ℓ̲ μ = 3/4.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let b = 2f64.sqrt() - 1.0;
        let c = (2.0 * 2f64.sqrt() - 1.0).sqrt();
        let p = DMatrix::from_row_slice(2, 2, &[2f64.sqrt() * c, b, b, c]);
        let riccati = a.transpose() * &p + &p * &a - &p * &g * g.transpose() * &p + DMatrix::identity(2, 2);
        assert!(riccati.norm() < 1e-12);

        let sys = ControlAffineSystem::linear(a, g.clone());
        let graph = CommGraph::path(3);
        let q = DMatrix::identity(2, 2) * 0.5;
        let samples = SampleSet::uniform_grid(&[(-1.0, 1.0), (-1.0, 1.0)], 3);
        let synthesis = synthesize_global(
            &sys,
            &p,
            &g,
            &graph,
            &q,
            GainCheck::Sampled(&samples),
            &SynthesisOptions::default(),
            &CheckSettings::default(),
        )
        .unwrap();
        let mu = synthesis.gains.mu.unwrap();
        assert_abs_diff_eq!(mu, 4.0 - 5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(synthesis.gains.ell_min * mu, 0.75, epsilon = 1e-10);
        assert_abs_diff_eq!(synthesis.controller.gain(), 1.25 * synthesis.gains.ell_min, epsilon = 1e-15);
        assert!(synthesis.prerequisites.iter().all(|r| r.pass));
    }

    #[test]
    fn gain_monotonicity() {
        let (sys, _) = scalar_sine();
        let one = DMatrix::identity(1, 1);
        let q = DMatrix::from_element(1, 1, 2.0);
        let samples = SampleSet::uniform_grid(&[(-5.0, 5.0)], 51);
        let settings = CheckSettings::default();
        for gain in [1.0, 2.0] {
            let at = global_block_check(&sys, &one, &one, 6.0, &q, gain, &samples, &settings).unwrap();
            let doubled = global_block_check(&sys, &one, &one, 6.0, &q, 2.0 * gain, &samples, &settings).unwrap();
            assert!(at.pass && doubled.pass);
            assert!(doubled.worst_margin <= at.worst_margin);
        }
    }

    #[test]
    fn structure_of_local_controller_on_path() {
        let ctrl = local_on(&CommGraph::path(3));
        let report = structural_checks(&ctrl, &[(-3.0, 3.0)], 7).unwrap();
        assert!(report.pass());
        assert_eq!(report.sparsity.worst_margin, 0.0);
        assert_eq!(report.vanishing.samples_checked, MANIFOLD_PROBES);
    }

    #[test]
    fn structure_of_complete_graph_has_no_sparsity_constraints() {
        let ctrl = local_on(&CommGraph::complete(3));
        let report = structural_checks(&ctrl, &[(-3.0, 3.0)], 7).unwrap();
        assert!(report.pass());
        assert_eq!(report.sparsity.worst_margin, 0.0);
    }

    #[test]
    fn structure_of_global_controller() {
        let (sys, _) = scalar_sine();
        let one = DMatrix::identity(1, 1);
        let graph = CommGraph::ring(5);
        let synthesis = synthesize_global(
            &sys,
            &one,
            &one,
            &graph,
            &DMatrix::from_element(1, 1, 2.0),
            GainCheck::AssumeGlobalBound,
            &SynthesisOptions { gain: Some(2.0), ..Default::default() },
            &CheckSettings::default(),
        )
        .unwrap();
        let report = structural_checks(&synthesis.controller, &[(-10.0, 10.0)], 3).unwrap();
        assert!(report.pass());
        assert!(report.vanishing.worst_margin <= 1e-12);
    }
}
