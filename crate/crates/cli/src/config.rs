//! Experiment configuration: JSON parsing, default materialization and
//! construction of the example the commands operate on.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::{json, Value};
use syncnet::certificate::{SampleSet, DEFAULT_GRID, DEFAULT_RANDOM};
use syncnet::expr::{ExprCertificate, ExprStrictFeedback, ExprSystem};
use syncnet::graph::GraphError;
use syncnet::registry::{self, Example};
use syncnet::simulate::{InitialCondition, DEFAULT_DT};
use syncnet::synthesis::DEFAULT_SAFETY_FACTOR;
use syncnet::system::ControlAffineSystem;
use syncnet::CommGraph;

use crate::outcome::Failure;

pub const DEFAULT_HORIZON: f64 = 20.0;
pub const DEFAULT_CONTRACTION: f64 = 1e-3;
pub const DEFAULT_DELTAS: [f64; 2] = [1e-2, 1e-1];
pub const DEFAULT_DELTA: f64 = 1e-2;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Registry name, or an object with a `kind` field.
    pub system: Option<Value>,
    pub graph: Option<GraphSpec>,
    /// Overrides the certificate's `ρ`.
    pub rho: Option<f64>,
    /// Overrides the example's `Q`.
    pub q: Option<Vec<Vec<f64>>>,
    /// Overrides the example's verification box.
    #[serde(rename = "box")]
    pub bounds: Option<Vec<[f64; 2]>>,
    pub checks: Option<Vec<String>>,
    pub grid: Option<usize>,
    pub random_samples: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub synthesis: SynthesisSpec,
    #[serde(default)]
    pub backstep: BackstepSpec,
    pub simulation: Option<SimulationSpec>,
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: usize,
    /// 1-based `[i, j]` pairs.
    pub edges: Option<Vec<[usize; 2]>>,
    /// `path`, `ring`, `star` or `complete`, instead of explicit edges.
    pub family: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSpec {
    /// `auto`, `local` or `global`.
    pub law: Option<String>,
    pub safety_factor: Option<f64>,
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackstepSpec {
    pub eta: Option<f64>,
    pub m_b: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub decimation: Option<usize>,
    pub initial: InitialSpec,
    /// Largest `|x(T)|_D / |x(0)|_D` counted as synchronized in sweeps.
    pub contraction: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum InitialSpec {
    /// Stacked `x(0)` of every agent.
    Explicit(Vec<f64>),
    /// Common point plus seeded offsets of norm `delta`.
    Perturbed(PerturbedSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbedSpec {
    pub z0: Vec<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub deltas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateSpec {
    metric: Vec<Vec<String>>,
    potential: String,
    scaling: Vec<String>,
    p_bounds: Option<[f64; 2]>,
    rho: Option<f64>,
    q_margin: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum SystemSpec {
    Metric {
        state: Vec<String>,
        drift: Vec<String>,
        input: Vec<Vec<String>>,
        certificate: CertificateSpec,
        q: Option<Vec<Vec<f64>>>,
        #[serde(rename = "box")]
        bounds: Vec<[f64; 2]>,
    },
    ConstantMetric {
        state: Vec<String>,
        drift: Vec<String>,
        input: Vec<Vec<String>>,
        p: Vec<Vec<f64>>,
        q: Option<Vec<Vec<f64>>>,
        #[serde(rename = "box")]
        bounds: Vec<[f64; 2]>,
    },
    /// Full state `(z_a, z_b)`; the certificate and box cover `z_a` only.
    StrictFeedback {
        state: Vec<String>,
        f_a: Vec<String>,
        g_a: Vec<String>,
        f_b: String,
        g_b: String,
        g_b_bounds: [f64; 2],
        q_a: String,
        certificate: CertificateSpec,
        q: Option<Vec<Vec<f64>>>,
        #[serde(rename = "box")]
        bounds: Vec<[f64; 2]>,
    },
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub grid: Option<usize>,
}

pub fn parse(text: &str) -> Result<Config, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::usage("config-parse", e.to_string()))
}

/// Sampling settings shared by every command.
#[derive(Debug, Clone, Copy)]
pub struct Sampling {
    pub grid: usize,
    pub random: usize,
    pub seed: u64,
}

impl Sampling {
    pub fn samples(&self, bounds: &[(f64, f64)]) -> SampleSet<f64> {
        SampleSet::uniform_grid(bounds, self.grid).with_random(self.random, self.seed)
    }
}

/// Everything a command needs, with defaults filled in.
pub struct Resolved {
    pub example: Option<Example<f64>>,
    pub system_label: Option<String>,
    pub graph: Option<CommGraph>,
    pub sampling: Sampling,
    pub checks: Option<Vec<String>>,
    pub law: Law,
    pub safety_factor: f64,
    pub gain: Option<f64>,
    pub eta: Option<f64>,
    pub m_b: f64,
    pub simulation: Option<Simulation>,
    pub deltas: Vec<f64>,
    /// Echo of the materialized configuration for the run manifest.
    pub echo: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Law {
    Auto,
    Local,
    Global,
}

impl Law {
    fn name(self) -> &'static str {
        match self {
            Law::Auto => "auto",
            Law::Local => "local",
            Law::Global => "global",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub horizon: f64,
    pub dt: f64,
    pub decimation: usize,
    pub initial: InitialCondition<f64>,
    pub contraction: f64,
}

fn invalid(detail: impl Into<String>) -> Failure {
    Failure::usage("config-invalid", detail.into())
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, Failure> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(invalid(format!("{field}: rows must be non-empty and of equal length")));
    }
    Ok(DMatrix::from_row_iterator(n, m, rows.iter().flatten().copied()))
}

fn square(rows: &[Vec<f64>], n: usize, field: &str) -> Result<DMatrix<f64>, Failure> {
    let m = matrix(rows, field)?;
    if m.nrows() != n || m.ncols() != n {
        return Err(invalid(format!("{field}: expected {n}×{n}, got {}×{}", m.nrows(), m.ncols())));
    }
    Ok(m)
}

fn box_bounds(bounds: &[[f64; 2]], n: usize, field: &str) -> Result<Vec<(f64, f64)>, Failure> {
    if bounds.len() != n {
        return Err(invalid(format!("{field}: expected {n} intervals, got {}", bounds.len())));
    }
    bounds
        .iter()
        .map(|&[lo, hi]| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok((lo, hi))
            } else {
                Err(invalid(format!("{field}: interval [{lo}, {hi}] is not a finite lo <= hi pair")))
            }
        })
        .collect()
}

fn expr_failure(field: &str) -> impl Fn(syncnet::expr::ExprError) -> Failure + '_ {
    move |e| Failure::usage("expression", format!("{field}: {e}"))
}

fn certificate_from(spec: &CertificateSpec, state: &[String], field: &str) -> Result<syncnet::Certificate, Failure> {
    let parsed =
        ExprCertificate::parse(state, &spec.metric, &spec.potential, &spec.scaling).map_err(expr_failure(field))?;
    let mut cert = parsed.build::<f64>();
    if let Some([lo, hi]) = spec.p_bounds {
        cert = cert.with_bounds(lo, hi);
    }
    if let Some(rho) = spec.rho {
        cert = cert.with_rho(rho);
    }
    if let Some(q) = spec.q_margin {
        cert = cert.with_q_margin(q);
    }
    Ok(cert)
}

fn default_q(cert: &syncnet::Certificate, n: usize) -> DMatrix<f64> {
    cert.default_q().unwrap_or_else(|| DMatrix::identity(n, n))
}

fn example_from_spec(value: &Value) -> Result<Example<f64>, Failure> {
    let spec: SystemSpec =
        serde_json::from_value(value.clone()).map_err(|e| Failure::usage("config-parse", format!("system: {e}")))?;
    match spec {
        SystemSpec::Metric { state, drift, input, certificate, q, bounds } => {
            let sys = ExprSystem::parse(&state, &drift, &input).map_err(expr_failure("system"))?.build::<f64>();
            let cert = certificate_from(&certificate, &state, "system.certificate")?;
            if cert.input_dim() != sys.input_dim() {
                return Err(invalid("system.certificate.scaling: one entry per input required"));
            }
            let n = state.len();
            let q = match q {
                Some(rows) => square(&rows, n, "system.q")?,
                None => default_q(&cert, n),
            };
            Ok(Example::Metric { sys, cert, q, bounds: box_bounds(&bounds, n, "system.box")? })
        }
        SystemSpec::ConstantMetric { state, drift, input, p, q, bounds } => {
            let parsed = ExprSystem::parse(&state, &drift, &input).map_err(expr_failure("system"))?;
            let g = parsed
                .constant_input::<f64>()
                .ok_or_else(|| invalid("system.input: a constant-metric system needs a constant input matrix"))?;
            let n = state.len();
            let p = square(&p, n, "system.p")?;
            let q = match q {
                Some(rows) => square(&rows, n, "system.q")?,
                None => DMatrix::identity(n, n),
            };
            Ok(Example::ConstantMetric { sys: parsed.build(), p, g, q, bounds: box_bounds(&bounds, n, "system.box")? })
        }
        SystemSpec::StrictFeedback { state, f_a, g_a, f_b, g_b, g_b_bounds, q_a, certificate, q, bounds } => {
            let parsed =
                ExprStrictFeedback::parse(&state, &f_a, &g_a, &f_b, &g_b, (g_b_bounds[0], g_b_bounds[1]), &q_a)
                    .map_err(expr_failure("system"))?;
            let na = parsed.na();
            let a_state = &state[..na];
            let cert_expr =
                ExprCertificate::parse(a_state, &certificate.metric, &certificate.potential, &certificate.scaling)
                    .map_err(expr_failure("system.certificate"))?;
            let rho = certificate
                .rho
                .ok_or_else(|| invalid("system.certificate.rho: required for strict-feedback systems"))?;
            let q = match q {
                Some(rows) => square(&rows, na, "system.q")?,
                None => DMatrix::identity(na, na),
            };
            let mut a = ExprStrictFeedback::a_certificate(&cert_expr, q, box_bounds(&bounds, na, "system.box")?, rho);
            if let Some([lo, hi]) = certificate.p_bounds {
                a.cert = a.cert.with_bounds(lo, hi);
            }
            if let Some(margin) = certificate.q_margin {
                a.cert = a.cert.with_q_margin(margin);
            }
            Ok(Example::StrictFeedback { sfs: parsed.build(), a })
        }
    }
}

fn graph_from(spec: &GraphSpec) -> Result<CommGraph, Failure> {
    let graph_failure = |e: GraphError| Failure::usage("graph-invalid", format!("graph: {e}"));
    match (&spec.edges, &spec.family) {
        (Some(edges), None) => {
            let pairs: Vec<(usize, usize)> = edges.iter().map(|&[i, j]| (i, j)).collect();
            CommGraph::new(spec.nodes, &pairs).map_err(graph_failure)
        }
        (None, Some(family)) => {
            let n = spec.nodes;
            let minimum = if family == "ring" { 3 } else { 2 };
            if n < minimum {
                return Err(invalid(format!("graph: a {family} needs at least {minimum} nodes")));
            }
            match family.as_str() {
                "path" => Ok(CommGraph::path(n)),
                "ring" => Ok(CommGraph::ring(n)),
                "star" => Ok(CommGraph::star(n)),
                "complete" => Ok(CommGraph::complete(n)),
                other => Err(invalid(format!("graph.family: unknown family `{other}`"))),
            }
        }
        _ => Err(invalid("graph: give exactly one of `edges` or `family`")),
    }
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn bounds_json(b: &[(f64, f64)]) -> Value {
    json!(b.iter().map(|&(lo, hi)| [lo, hi]).collect::<Vec<_>>())
}

/// Example-level data shown in the manifest.
fn example_echo(example: &Example<f64>) -> Value {
    match example {
        Example::Metric { cert, q, bounds, .. } => json!({
            "kind": example.kind(),
            "rho": cert.rho,
            "q_margin": cert.q_margin,
            "p_bounds": [cert.p_lower, cert.p_upper],
            "q": matrix_json(q),
            "box": bounds_json(bounds),
        }),
        Example::ConstantMetric { p, g, q, bounds, .. } => json!({
            "kind": example.kind(),
            "p": matrix_json(p),
            "g": matrix_json(g),
            "q": matrix_json(q),
            "box": bounds_json(bounds),
        }),
        Example::StrictFeedback { sfs, a } => json!({
            "kind": example.kind(),
            "rho": a.cert.rho,
            "q_margin": a.cert.q_margin,
            "p_bounds": [a.cert.p_lower, a.cert.p_upper],
            "g_b_bounds": [sfs.g_b_bounds.0, sfs.g_b_bounds.1],
            "q": matrix_json(&a.q),
            "box": bounds_json(&a.bounds),
        }),
    }
}

/// Applies the top-level `rho`, `q` and `box` overrides.
fn apply_overrides(example: Example<f64>, config: &Config) -> Result<Example<f64>, Failure> {
    let q_for = |n: usize, current: DMatrix<f64>| -> Result<DMatrix<f64>, Failure> {
        config.q.as_ref().map_or(Ok(current), |rows| square(rows, n, "q"))
    };
    let box_for = |n: usize, current: Vec<(f64, f64)>| -> Result<Vec<(f64, f64)>, Failure> {
        config.bounds.as_ref().map_or(Ok(current), |b| box_bounds(b, n, "box"))
    };
    Ok(match example {
        Example::Metric { sys, mut cert, q, bounds } => {
            let n = sys.state_dim();
            if let Some(rho) = config.rho {
                cert = cert.with_rho(rho);
            }
            Example::Metric { sys, cert, q: q_for(n, q)?, bounds: box_for(n, bounds)? }
        }
        Example::ConstantMetric { sys, p, g, q, bounds } => {
            if config.rho.is_some() {
                return Err(invalid("rho: constant-metric systems have no certificate rho"));
            }
            let n = sys.state_dim();
            Example::ConstantMetric { sys, p, g, q: q_for(n, q)?, bounds: box_for(n, bounds)? }
        }
        Example::StrictFeedback { sfs, mut a } => {
            if let Some(rho) = config.rho {
                a.cert = a.cert.with_rho(rho);
            }
            a.q = q_for(sfs.na, a.q)?;
            a.bounds = box_for(sfs.na, a.bounds)?;
            Example::StrictFeedback { sfs, a }
        }
    })
}

pub fn resolve(config: &Config, overrides: Overrides) -> Result<Resolved, Failure> {
    let (example, system_label) = match &config.system {
        None => (None, None),
        Some(Value::String(name)) => {
            let example = registry::lookup::<f64>(name).ok_or_else(|| {
                Failure::usage(
                    "unknown-system",
                    format!("system: `{name}` is not one of {}", registry::NAMES.join(", ")),
                )
            })?;
            (Some(example), Some(name.clone()))
        }
        Some(value @ Value::Object(_)) => (Some(example_from_spec(value)?), Some("expression".to_string())),
        Some(_) => return Err(invalid("system: expected a registry name or an object")),
    };
    let example = example.map(|e| apply_overrides(e, config)).transpose()?;
    let graph = config.graph.as_ref().map(graph_from).transpose()?;

    let sampling = Sampling {
        grid: overrides.grid.or(config.grid).unwrap_or(DEFAULT_GRID),
        random: config.random_samples.unwrap_or(DEFAULT_RANDOM),
        seed: overrides.seed.or(config.seed).unwrap_or(0),
    };
    if sampling.grid == 0 && sampling.random == 0 {
        return Err(invalid("grid/random_samples: at least one sample is required"));
    }

    let law = match config.synthesis.law.as_deref() {
        None | Some("auto") => Law::Auto,
        Some("local") => Law::Local,
        Some("global") => Law::Global,
        Some(other) => return Err(invalid(format!("synthesis.law: unknown law `{other}`"))),
    };
    let safety_factor = config.synthesis.safety_factor.unwrap_or(DEFAULT_SAFETY_FACTOR);
    if !safety_factor.is_finite() || safety_factor < 1.0 {
        return Err(invalid("synthesis.safety_factor: must be at least 1"));
    }
    let m_b = config.backstep.m_b.unwrap_or(registry::DEFAULT_M_B);

    let simulation = config
        .simulation
        .as_ref()
        .map(|s| -> Result<Simulation, Failure> {
            let initial = match &s.initial {
                InitialSpec::Explicit(x) => InitialCondition::Explicit(DVector::from_column_slice(x)),
                InitialSpec::Perturbed(p) => InitialCondition::Perturbed {
                    z0: DVector::from_column_slice(&p.z0),
                    delta: p.delta.unwrap_or(DEFAULT_DELTA),
                    seed: sampling.seed,
                },
            };
            Ok(Simulation {
                horizon: s.horizon.unwrap_or(DEFAULT_HORIZON),
                dt: s.dt.unwrap_or(DEFAULT_DT),
                decimation: s.decimation.unwrap_or(1),
                initial,
                contraction: s.contraction.unwrap_or(DEFAULT_CONTRACTION),
            })
        })
        .transpose()?;
    let deltas = config.sweep.as_ref().and_then(|s| s.deltas.clone()).unwrap_or_else(|| DEFAULT_DELTAS.to_vec());
    if deltas.is_empty() || deltas.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(invalid("sweep.deltas: need at least one positive delta"));
    }

    let echo = json!({
        "system": config.system,
        "example": example.as_ref().map(example_echo),
        "graph": graph.as_ref().map(|g| json!({
            "nodes": g.node_count(),
            "edges": g.edges().iter().map(|&(i, j)| [i + 1, j + 1]).collect::<Vec<_>>(),
        })),
        "checks": config.checks,
        "grid": sampling.grid,
        "random_samples": sampling.random,
        "seed": sampling.seed,
        "synthesis": {
            "law": law.name(),
            "safety_factor": safety_factor,
            "gain": config.synthesis.gain,
        },
        "backstep": { "eta": config.backstep.eta, "m_b": m_b },
        "simulation": simulation.as_ref().map(|s| json!({
            "horizon": s.horizon,
            "dt": s.dt,
            "decimation": s.decimation,
            "initial": match &s.initial {
                InitialCondition::Explicit(x) => json!({ "explicit": x.as_slice() }),
                InitialCondition::Perturbed { z0, delta, seed } => json!({ "z0": z0.as_slice(), "delta": delta, "seed": seed }),
            },
            "contraction": s.contraction,
            "fit_window": [0.2 * s.horizon, 0.8 * s.horizon],
        })),
        "sweep": { "deltas": deltas },
    });

    Ok(Resolved {
        example,
        system_label,
        graph,
        sampling,
        checks: config.checks.clone(),
        law,
        safety_factor,
        gain: config.synthesis.gain,
        eta: config.backstep.eta,
        m_b,
        simulation,
        deltas,
        echo,
    })
}

/// `Some(M)` when `f` returns the same matrix at every point.
pub fn constant_over<F>(points: &[DVector<f64>], f: F) -> Option<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let first = f(points.first()?);
    points.iter().all(|z| f(z) == first).then_some(first)
}

/// Constant `(P, G)` for the global law on a metric example, when both are constant.
pub fn constant_pair(
    sys: &ControlAffineSystem<f64>,
    cert: &syncnet::Certificate,
    samples: &SampleSet<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let p = constant_over(samples.points(), |z| cert.metric(z))?;
    let g = constant_over(samples.points(), |z| sys.input_matrix(z))?;
    Some((p, g))
}
