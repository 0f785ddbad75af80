//! Distributed synchronization of identical nonlinear control-affine agents over
//! undirected graphs.
//!
//! * [`graph`]: Laplacian, reduced Laplacian and the coupling-matrix search.
//! * [`certificate`]: sampled verification of metric certificates (bounds,
//!   integrability, kernel and strengthened inequalities, Killing fields).
//! * [`synthesis`]: local and constant-metric synchronizers with gain selection.
//! * [`backstepping`]: certificate construction for strict-feedback systems.
//! * [`simulate`]: closed-loop integration, manifold distance and rate fits.
//! * [`expr`]: expression-defined systems with symbolic derivatives.
//! * [`registry`]: named example systems.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix `f64`, with `…F32` variants for single precision.

pub mod backstepping;
pub mod certificate;
pub mod expr;
pub mod graph;
pub mod linalg;
pub mod ode;
pub mod registry;
pub mod scalar;
pub mod simulate;
pub mod synthesis;
pub mod system;

pub use graph::CommGraph;
pub use scalar::Real;

pub type System = system::ControlAffineSystem<f64>;
pub type SystemF32 = system::ControlAffineSystem<f32>;
pub type Certificate = certificate::MetricCertificate<f64>;
pub type CertificateF32 = certificate::MetricCertificate<f32>;
pub type Samples = certificate::SampleSet<f64>;
pub type SamplesF32 = certificate::SampleSet<f32>;
pub type Report = certificate::VerificationReport<f64>;
pub type Settings = certificate::CheckSettings<f64>;
pub type Coupling = graph::CouplingMatrix<f64>;
pub type Controller = synthesis::SyncController<f64>;
pub type ControllerF32 = synthesis::SyncController<f32>;
pub type Gains = synthesis::GainCertificate<f64>;
pub type StrictFeedback = backstepping::StrictFeedbackSystem<f64>;
pub type Augmented = backstepping::AugmentedCertificate<f64>;
pub type Experiment = simulate::ExperimentConfig<f64>;
pub type SimTrace = simulate::Trace<f64>;
pub type Fit = simulate::RateFit<f64>;
