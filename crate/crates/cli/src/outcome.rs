//! Exit statuses, machine-parseable failure reasons and the run manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use syncnet::backstepping::BacksteppingError;
use syncnet::certificate::CertificateError;
use syncnet::graph::GraphError;
use syncnet::simulate::SimulationError;
use syncnet::synthesis::SynthesisError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    Usage,
    VerdictFail,
    NumericalFailure,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Usage => 1,
            Status::VerdictFail => 2,
            Status::NumericalFailure => 3,
        }
    }
}

/// An early exit with a reason code such as `config-parse` or `prerequisite-failed`.
#[derive(Debug, Clone)]
pub struct Failure {
    pub status: Status,
    pub reason: &'static str,
    pub detail: String,
    /// Partial results gathered before the failure.
    pub summary: Value,
}

impl Failure {
    pub fn new(status: Status, reason: &'static str, detail: impl Into<String>) -> Self {
        Self { status, reason, detail: detail.into(), summary: Value::Null }
    }

    pub fn usage(reason: &'static str, detail: impl Into<String>) -> Self {
        Self::new(Status::Usage, reason, detail)
    }

    pub fn verdict(reason: &'static str, detail: impl Into<String>) -> Self {
        Self::new(Status::VerdictFail, reason, detail)
    }

    pub fn numerical(reason: &'static str, detail: impl Into<String>) -> Self {
        Self::new(Status::NumericalFailure, reason, detail)
    }

    pub fn with_summary(mut self, summary: Value) -> Self {
        self.summary = summary;
        self
    }

    /// One line: `syncnet: <reason>: <detail>`.
    pub fn line(&self) -> String {
        format!("syncnet: {}: {}", self.reason, self.detail.replace(['\n', '\r'], " "))
    }
}

impl From<CertificateError> for Failure {
    fn from(e: CertificateError) -> Self {
        match e {
            CertificateError::MissingRho => Failure::usage("missing-rho", e.to_string()),
            CertificateError::Dimension(_) | CertificateError::EmptySamples => {
                Failure::usage("config-invalid", e.to_string())
            }
            CertificateError::NonFinite { .. } | CertificateError::VanishingQ { .. } => {
                Failure::numerical("numerical", e.to_string())
            }
        }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Disconnected => Failure::verdict("graph-disconnected", e.to_string()),
            GraphError::CouplingSearchExhausted => Failure::numerical("coupling-search-exhausted", e.to_string()),
            _ => Failure::usage("graph-invalid", e.to_string()),
        }
    }
}

impl From<SynthesisError> for Failure {
    fn from(e: SynthesisError) -> Self {
        let detail = e.to_string();
        match e {
            SynthesisError::NotHurwitz { .. } | SynthesisError::SingularLyapunov => {
                Failure::numerical("lyapunov", detail)
            }
            SynthesisError::GainBelowMinimum { .. } => Failure::verdict("gain-below-minimum", detail),
            SynthesisError::Disconnected => Failure::verdict("graph-disconnected", detail),
            SynthesisError::NoCouplingMargin => Failure::verdict("no-coupling-margin", detail),
            SynthesisError::PrerequisiteFailed { .. } => Failure::verdict("prerequisite-failed", detail),
            SynthesisError::BlockCheckFailed { .. } => Failure::verdict("gain-block-failed", detail),
            SynthesisError::GainSearchExhausted => Failure::numerical("gain-search-exhausted", detail),
            SynthesisError::MissingRho => Failure::usage("missing-rho", detail),
            SynthesisError::Dimension(_) => Failure::usage("config-invalid", detail),
            SynthesisError::Graph(g) => g.into(),
            SynthesisError::Certificate(c) => c.into(),
        }
    }
}

impl From<BacksteppingError> for Failure {
    fn from(e: BacksteppingError) -> Self {
        let detail = e.to_string();
        match e {
            BacksteppingError::SignConvention { .. } => Failure::verdict("sign-convention", detail),
            BacksteppingError::Certificate(c) => c.into(),
            _ => Failure::usage("config-invalid", detail),
        }
    }
}

impl From<SimulationError> for Failure {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::StarvedFit(_) => Failure::numerical("fit-starved", e.to_string()),
            _ => Failure::usage("config-invalid", e.to_string()),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct OutcomeRecord<'a> {
    pub status: Status,
    pub exit_code: u8,
    pub reason: Option<&'a str>,
    pub detail: Option<&'a str>,
    pub summary: &'a Value,
}

/// Written as `<out>/<command>.manifest.json` after every run.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub input_sha256: &'a str,
    pub config: &'a Value,
    pub outcome: OutcomeRecord<'a>,
    pub timestamp: u64,
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn write_manifest(out: &Path, manifest: &RunManifest<'_>) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest is serializable");
    fs::write(out.join(format!("{}.manifest.json", manifest.command)), text + "\n")
}

pub const INDEX_FILE: &str = "results.csv";
const INDEX_HEADER: &str = "timestamp,command,input_sha256,exit_code,reason,lambda,k,r_squared,verdict";

/// Appends one summary line per run to `<out>/results.csv`.
pub fn append_index(out: &Path, manifest: &RunManifest<'_>) -> std::io::Result<()> {
    fs::create_dir_all(out)?;
    let path = out.join(INDEX_FILE);
    let fresh = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "{INDEX_HEADER}")?;
    }
    let summary = manifest.outcome.summary;
    let field = |key: &str| {
        summary.pointer(&format!("/fit/{key}")).and_then(Value::as_f64).map_or(String::new(), |v| format!("{v:.16e}"))
    };
    let verdict = summary.get("verdict").and_then(Value::as_bool).map_or(String::new(), |v| v.to_string());
    writeln!(
        file,
        "{},{},{},{},{},{},{},{},{}",
        manifest.timestamp,
        manifest.command,
        manifest.input_sha256,
        manifest.outcome.exit_code,
        manifest.outcome.reason.unwrap_or(""),
        field("lambda"),
        field("k"),
        field("r_squared"),
        verdict
    )
}
