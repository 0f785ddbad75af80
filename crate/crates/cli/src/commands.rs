//! The six commands. Each prints a human-readable report on stdout and returns
//! a JSON summary for the manifest; verdict failures carry their summary too.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use syncnet::backstepping::{
    augment_certificate, choose_eta, verify_a_subsystem, verify_augmented, ASubCertificate, AugmentedCertificate,
    AugmentedReport, StrictFeedbackSystem,
};
use syncnet::certificate::{
    check_bounds, check_cmf_kernel, check_cmf_strengthened, check_integrability, check_killing, CheckSettings,
    Property, SampleSet, VerificationReport,
};
use syncnet::graph::{find_c1, laplacian_spectrum, reduced_laplacian_spectrum};
use syncnet::linalg::lambda_min;
use syncnet::registry::Example;
use syncnet::simulate::{
    fit_rate, integrate, lyapunov_series, sandwich_violation, sweep_delta, write_csv, ExperimentConfig,
    InitialCondition, Trace,
};
use syncnet::synthesis::{
    global_block_check, min_global_gain, synthesize_global, synthesize_local, GainCheck, Synthesis, SynthesisOptions,
};
use syncnet::{CommGraph, System};

use crate::config::{constant_pair, Law, Resolved, Simulation};
use crate::outcome::Failure;

/// Largest per-step increase of `V` still counted as non-increasing.
pub const V_INCREMENT_TOLERANCE: f64 = 1e-9;

pub struct Context<'a> {
    pub resolved: &'a Resolved,
    pub out: &'a Path,
    /// `--override-gain` given: bypass prerequisite and minimum-gain refusals.
    pub override_checks: bool,
    /// `--override-gain <value>`.
    pub override_gain: Option<f64>,
}

pub type CommandResult = Result<Value, Failure>;

fn settings() -> CheckSettings<f64> {
    CheckSettings::default()
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn report_json(r: &VerificationReport<f64>) -> Value {
    json!({
        "property": r.property.name(),
        "pass": r.pass,
        "worst_margin": r.worst_margin,
        "tolerance": r.tolerance,
        "samples": r.samples_checked,
        "worst_point": r.worst_point.as_slice(),
    })
}

/// Rounds values within `1e-12` of zero for display.
fn clean(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{:.12}", clean(*v))).collect::<Vec<_>>().join(", ")
}

fn need_graph<'a>(ctx: &'a Context<'_>) -> Result<&'a CommGraph, Failure> {
    ctx.resolved.graph.as_ref().ok_or_else(|| Failure::usage("missing-graph", "config has no `graph` section"))
}

fn need_example<'a>(ctx: &'a Context<'_>) -> Result<&'a Example<f64>, Failure> {
    ctx.resolved.example.as_ref().ok_or_else(|| Failure::usage("missing-system", "config has no `system` entry"))
}

fn need_simulation<'a>(ctx: &'a Context<'_>) -> Result<&'a Simulation, Failure> {
    ctx.resolved
        .simulation
        .as_ref()
        .ok_or_else(|| Failure::usage("missing-simulation", "config has no `simulation` section"))
}

pub fn graph_info(ctx: &Context<'_>) -> CommandResult {
    let g = need_graph(ctx)?;
    let spectrum = laplacian_spectrum::<f64>(g);
    let connected = g.is_connected();
    println!("nodes {} edges {}", g.node_count(), g.edge_count());
    println!("laplacian spectrum: {}", list(&spectrum));
    let reduced: Option<Vec<f64>> = if g.node_count() >= 2 {
        let ev = reduced_laplacian_spectrum::<f64>(g)?;
        let mut re: Vec<f64> = ev.iter().map(|c| c.re).collect();
        re.sort_by(f64::total_cmp);
        println!("reduced laplacian spectrum: {}", list(&re));
        Some(re)
    } else {
        None
    };
    println!("connected: {connected}");
    let mut summary = json!({
        "nodes": g.node_count(),
        "edges": g.edge_count(),
        "laplacian_spectrum": spectrum.iter().map(|v| clean(*v)).collect::<Vec<_>>(),
        "reduced_spectrum": reduced.map(|r| r.iter().map(|v| clean(*v)).collect::<Vec<_>>()),
        "connected": connected,
    });
    if !connected {
        return Err(Failure::verdict("graph-disconnected", "graph is disconnected").with_summary(summary));
    }
    if g.node_count() >= 2 {
        let coupling = find_c1::<f64>(g)?;
        println!("c1 {} mu {:.12}", coupling.c1, coupling.mu);
        summary["c1"] = json!(coupling.c1);
        summary["mu"] = json!(coupling.mu);
    }
    Ok(summary)
}

fn constant_bounds_report(p: &DMatrix<f64>) -> VerificationReport<f64> {
    let smallest = lambda_min(p);
    VerificationReport {
        property: Property::Bounds,
        worst_margin: -smallest,
        worst_point: DVector::zeros(p.nrows()),
        pass: smallest > 0.0,
        samples_checked: 1,
        tolerance: 0.0,
    }
}

/// Block inequality of the constant-metric law at the gain synthesis would pick.
fn gain_block_report(
    ctx: &Context<'_>,
    sys: &System,
    p: &DMatrix<f64>,
    g: &DMatrix<f64>,
    q: &DMatrix<f64>,
    samples: &SampleSet<f64>,
) -> Result<VerificationReport<f64>, Failure> {
    let graph = need_graph(ctx)?;
    let coupling = find_c1::<f64>(graph)?;
    let ell_min = min_global_gain(sys, p, g, coupling.mu, q, samples)?;
    let gain = ctx.override_gain.or(ctx.resolved.gain).unwrap_or(if ell_min > 0.0 {
        ell_min * ctx.resolved.safety_factor
    } else {
        1.0
    });
    Ok(global_block_check(sys, p, g, coupling.mu, q, gain, samples, &settings())?)
}

pub fn check(ctx: &Context<'_>) -> CommandResult {
    let example = need_example(ctx)?;
    let s = settings();
    let (available, bounds): (&[&str], &[(f64, f64)]) = match example {
        Example::Metric { bounds, .. } => {
            (&["bounds", "integrability", "cmf-kernel", "cmf-strengthened", "global-gain-block"], bounds)
        }
        Example::ConstantMetric { bounds, .. } => (&["bounds", "global-gain-block"], bounds),
        Example::StrictFeedback { a, .. } => {
            (&["bounds", "integrability", "cmf-kernel", "cmf-strengthened", "killing"], &a.bounds)
        }
    };
    let requested: Vec<String> = match &ctx.resolved.checks {
        Some(names) => names.clone(),
        None => available
            .iter()
            // The block check needs a graph; on metric examples it also needs a
            // constant metric, so it is opt-in there.
            .filter(|n| {
                **n != "global-gain-block"
                    || (ctx.resolved.graph.is_some() && matches!(example, Example::ConstantMetric { .. }))
            })
            .map(|n| n.to_string())
            .collect(),
    };
    if let Some(bad) = requested.iter().find(|n| !available.contains(&n.as_str())) {
        return Err(Failure::usage(
            "unknown-check",
            format!(
                "checks: `{bad}` is not available for a {} system (available: {})",
                example.kind(),
                available.join(", ")
            ),
        ));
    }
    let samples = ctx.resolved.sampling.samples(bounds);
    let mut reports = Vec::new();
    for name in &requested {
        let report = match (example, name.as_str()) {
            (Example::Metric { cert, .. }, "bounds") => check_bounds(cert, &samples, &s)?.report,
            (Example::Metric { sys, cert, .. }, "integrability") => check_integrability(sys, cert, &samples, &s)?,
            (Example::Metric { sys, cert, q, .. }, "cmf-kernel") => check_cmf_kernel(sys, cert, &samples, q, &s)?,
            (Example::Metric { sys, cert, q, .. }, "cmf-strengthened") => {
                check_cmf_strengthened(sys, cert, &samples, q, &s)?
            }
            (Example::Metric { sys, cert, q, .. }, "global-gain-block") => {
                let (p, g) = constant_pair(sys, cert, &samples).ok_or_else(|| {
                    Failure::usage("not-constant-metric", "global-gain-block needs a constant metric and input matrix")
                })?;
                gain_block_report(ctx, sys, &p, &g, q, &samples)?
            }
            (Example::ConstantMetric { p, .. }, "bounds") => constant_bounds_report(p),
            (Example::ConstantMetric { sys, p, g, q, .. }, "global-gain-block") => {
                gain_block_report(ctx, sys, p, g, q, &samples)?
            }
            (Example::StrictFeedback { a, .. }, "bounds") => check_bounds(&a.cert, &samples, &s)?.report,
            (Example::StrictFeedback { sfs, a }, "integrability") => {
                check_integrability(&sfs.a_subsystem(), &a.cert, &samples, &s)?
            }
            (Example::StrictFeedback { sfs, a }, "cmf-kernel") => {
                check_cmf_kernel(&sfs.a_subsystem(), &a.cert, &samples, &a.q, &s)?
            }
            (Example::StrictFeedback { sfs, a }, "cmf-strengthened") => {
                check_cmf_strengthened(&sfs.a_subsystem(), &a.cert, &samples, &a.q, &s)?
            }
            (Example::StrictFeedback { sfs, a }, "killing") => {
                check_killing(&sfs.a_killing_field(), &a.cert, &samples, &s)?
            }
            _ => unreachable!("filtered against the available list"),
        };
        println!("{report}");
        reports.push(report);
    }
    let pass = reports.iter().all(|r| r.pass);
    let summary = json!({
        "kind": example.kind(),
        "samples": samples.len(),
        "reports": reports.iter().map(report_json).collect::<Vec<_>>(),
        "verdict": pass,
    });
    if pass {
        Ok(summary)
    } else {
        let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.property.name()).collect();
        Err(Failure::verdict("check-failed", format!("failed: {}", failed.join(", "))).with_summary(summary))
    }
}

/// A verified augmented certificate with its sample set.
struct Backstepped {
    aug: AugmentedCertificate<f64>,
    report: AugmentedReport<f64>,
    samples: SampleSet<f64>,
    summary: Value,
    a_pass: bool,
}

fn run_backstep(
    ctx: &Context<'_>,
    sfs: &StrictFeedbackSystem<f64>,
    a: &ASubCertificate<f64>,
) -> Result<Backstepped, Failure> {
    let s = settings();
    let sampling = ctx.resolved.sampling;
    let a_samples = sampling.samples(&a.bounds);
    let a_reports = verify_a_subsystem(a, sfs, &a_samples, &s)?;
    let eta = match ctx.resolved.eta {
        Some(eta) => eta,
        None => choose_eta(a, sfs, &a_samples)?,
    };
    let aug = augment_certificate(a, sfs, eta, ctx.resolved.m_b)?;
    let composite = sfs.composite();
    let samples = sampling.samples(&aug.bounds);
    let report = verify_augmented(&aug, &composite, a.rho()?, &samples, &s)?;
    let p0 = aug.cert.metric(&DVector::zeros(aug.cert.dim()));
    let summary = json!({
        "a_subsystem": a_reports.reports().iter().map(|r| report_json(r)).collect::<Vec<_>>(),
        "eta": eta,
        "m_b": ctx.resolved.m_b,
        "box": aug.bounds.iter().map(|&(lo, hi)| [lo, hi]).collect::<Vec<_>>(),
        "p_b_at_origin": matrix_json(&p0),
        "reports": report.reports().iter().map(|r| report_json(r)).collect::<Vec<_>>(),
        "p_lower_estimate": report.bounds.p_lower_estimate,
        "p_upper_estimate": report.bounds.p_upper_estimate,
        "rho_b": report.rho_b,
        "epsilon": report.epsilon,
        "q_b": matrix_json(&report.q_b),
        "diagnostic": report.diagnostic(),
    });
    Ok(Backstepped { aug, report, samples, summary, a_pass: a_reports.pass() })
}

pub fn backstep(ctx: &Context<'_>) -> CommandResult {
    let Example::StrictFeedback { sfs, a } = need_example(ctx)? else {
        return Err(Failure::usage("not-strict-feedback", "backstep needs a strict-feedback system"));
    };
    let run = run_backstep(ctx, sfs, a)?;
    println!("eta {}  M_b {}", run.aug.eta, ctx.resolved.m_b);
    for r in run.report.reports() {
        println!("{r}");
    }
    match run.report.rho_b {
        Some(rho) => println!("rho_b {rho}  epsilon {:.12}", run.report.epsilon),
        None => println!("rho_b none: {}", run.report.diagnostic().unwrap_or("")),
    }
    if let Some(label) = &ctx.resolved.system_label {
        if label != "expression" {
            println!("registered as {label}-backstepped");
        }
    }
    let pass = run.a_pass && run.report.pass();
    let mut summary = run.summary;
    summary["verdict"] = json!(pass);
    if pass {
        Ok(summary)
    } else if !run.a_pass {
        Err(Failure::verdict("a-subsystem-failed", "the a-subsystem certificate does not verify").with_summary(summary))
    } else {
        let why = run.report.diagnostic().unwrap_or("augmented certificate does not verify");
        Err(Failure::verdict("backstep-failed", why).with_summary(summary))
    }
}

fn synthesis_json(syn: &Synthesis<f64>, graph: &CommGraph) -> Value {
    let c = &syn.controller;
    json!({
        "law": c.kind().to_string(),
        "gain": c.gain(),
        "ell_min": syn.gains.ell_min,
        "safety_factor": syn.gains.safety_factor,
        "nu": syn.gains.nu,
        "mu": syn.gains.mu,
        "c1": syn.gains.c1,
        "s": matrix_json(&syn.gains.s),
        "weights": c.weights().as_slice(),
        "agents": c.agents(),
        "edges": graph.edges().iter().map(|&(i, j)| [i + 1, j + 1]).collect::<Vec<_>>(),
        "prerequisites": syn.prerequisites.iter().map(report_json).collect::<Vec<_>>(),
    })
}

/// Synthesizes the controller named by the config; returns it with the closed-loop agent model.
fn synthesize_for(ctx: &Context<'_>) -> Result<(Synthesis<f64>, System, Value), Failure> {
    let example = need_example(ctx)?;
    let graph = need_graph(ctx)?;
    let s = settings();
    let options = SynthesisOptions {
        safety_factor: ctx.resolved.safety_factor,
        gain: ctx.override_gain.or(ctx.resolved.gain),
        override_checks: ctx.override_checks,
    };
    let law = ctx.resolved.law;
    let (synthesis, sys, backstep) = match example {
        Example::ConstantMetric { sys, p, g, q, bounds } => {
            if law == Law::Local {
                return Err(Failure::usage(
                    "law-unavailable",
                    "a constant-metric system has no certificate for the local law",
                ));
            }
            let samples = ctx.resolved.sampling.samples(bounds);
            (synthesize_global(sys, p, g, graph, q, GainCheck::Sampled(&samples), &options, &s)?, sys.clone(), None)
        }
        Example::Metric { sys, cert, q, bounds } => {
            let samples = ctx.resolved.sampling.samples(bounds);
            if law == Law::Global {
                let (p, g) = constant_pair(sys, cert, &samples).ok_or_else(|| {
                    Failure::usage("not-constant-metric", "the global law needs a constant metric and input matrix")
                })?;
                (
                    synthesize_global(sys, &p, &g, graph, q, GainCheck::Sampled(&samples), &options, &s)?,
                    sys.clone(),
                    None,
                )
            } else {
                (synthesize_local(sys, cert, graph, &samples, q, &options, &s)?, sys.clone(), None)
            }
        }
        Example::StrictFeedback { sfs, a } => {
            if law == Law::Global {
                return Err(Failure::usage("law-unavailable", "strict-feedback systems use the local law"));
            }
            let run = run_backstep(ctx, sfs, a)?;
            let Some(cert) = run.report.certified(&run.aug.cert) else {
                let why = run.report.diagnostic().unwrap_or("augmented certificate does not verify");
                return Err(Failure::verdict("backstep-failed", why).with_summary(json!({ "backstep": run.summary })));
            };
            let q = cert.default_q().expect("certified certificates carry a margin");
            let composite = sfs.composite();
            let synthesis = synthesize_local(&composite, &cert, graph, &run.samples, &q, &options, &s)?;
            (synthesis, composite, Some(run.summary))
        }
    };
    let mut summary = json!({ "controller": synthesis_json(&synthesis, graph) });
    if let Some(b) = backstep {
        summary["backstep"] = b;
    }
    Ok((synthesis, sys, summary))
}

fn print_synthesis(syn: &Synthesis<f64>) {
    for r in &syn.prerequisites {
        println!("{r}");
    }
    let c = &syn.controller;
    println!(
        "{} law: gain {} (minimum {}, safety factor {}), nu {:.12}",
        c.kind(),
        c.gain(),
        syn.gains.ell_min,
        syn.gains.safety_factor,
        syn.gains.nu
    );
    if let (Some(c1), Some(mu)) = (syn.gains.c1, syn.gains.mu) {
        println!("c1 {c1} mu {mu:.12}");
    }
}

pub fn synthesize(ctx: &Context<'_>) -> CommandResult {
    let (syn, _, summary) = synthesize_for(ctx)?;
    print_synthesis(&syn);
    Ok(summary)
}

fn experiment(sim: &Simulation, syn: &Synthesis<f64>) -> ExperimentConfig<f64> {
    let mut cfg =
        ExperimentConfig::new(sim.initial.clone(), sim.horizon).with_dt(sim.dt).with_decimation(sim.decimation);
    if let Some(p) = syn.controller.constant_metric() {
        cfg = cfg.with_metric(p.clone());
    }
    cfg
}

fn write_trace(path: &Path, trace: &Trace<f64>) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::usage("output-io", format!("{}: {e}", path.display()));
    let file = File::create(path).map_err(io)?;
    write_csv(trace, BufWriter::new(file)).map_err(io)
}

pub fn simulate(ctx: &Context<'_>) -> CommandResult {
    let sim = need_simulation(ctx)?;
    let (syn, sys, mut summary) = synthesize_for(ctx)?;
    print_synthesis(&syn);
    let cfg = experiment(sim, &syn);
    let trace = integrate(&sys, &syn.controller, &cfg)?;
    fs::create_dir_all(ctx.out).map_err(|e| Failure::usage("output-io", e.to_string()))?;
    write_trace(&ctx.out.join("trace.csv"), &trace)?;

    let ratio = trace.final_distance() / trace.initial_distance();
    let sandwich = sandwich_violation(&trace);
    let v_increment = cfg.metric.as_ref().map(|p| lyapunov_series(&trace, p).max_increment);
    let fit = fit_rate(&trace, cfg.default_window());
    summary["samples"] = json!(trace.len());
    summary["escaped"] = json!(trace.escaped());
    summary["distance_ratio"] = json!(ratio);
    summary["sandwich_violation"] = json!(sandwich);
    summary["max_v_increment"] = json!(v_increment);
    let fit = match fit {
        Ok(fit) => fit,
        Err(e) => return Err(Failure::from(e).with_summary(summary)),
    };
    summary["fit"] = json!({
        "lambda": fit.lambda,
        "k": fit.k,
        "r_squared": fit.r_squared,
        "window": [fit.window.0, fit.window.1],
        "samples": fit.samples,
        "truncated": fit.truncated,
    });
    let verdicts = json!({
        "rate_positive": fit.lambda > 0.0,
        "sandwich": sandwich <= 0.0,
        "v_monotone": v_increment.map(|v| v <= V_INCREMENT_TOLERANCE),
        "completed": !trace.escaped(),
    });
    let verdict = fit.lambda > 0.0
        && sandwich <= 0.0
        && v_increment.is_none_or(|v| v <= V_INCREMENT_TOLERANCE)
        && !trace.escaped();
    summary["verdicts"] = verdicts;
    summary["verdict"] = json!(verdict);
    println!(
        "samples {}  |x(T)|_D/|x(0)|_D {ratio:.6e}  lambda {:.12}  k {:.6e}  r2 {:.6}",
        trace.len(),
        fit.lambda,
        fit.k,
        fit.r_squared
    );
    println!(
        "sandwich slack {sandwich:.3e}  max V increment {}  verdict {}",
        v_increment.map_or("n/a".to_string(), |v| format!("{v:.3e}")),
        if verdict { "PASS" } else { "FAIL" }
    );
    if verdict {
        Ok(summary)
    } else {
        Err(Failure::verdict("not-synchronized", "synchronization verdict failed").with_summary(summary))
    }
}

pub fn sweep(ctx: &Context<'_>) -> CommandResult {
    let sim = need_simulation(ctx)?;
    let InitialCondition::Perturbed { z0, seed, .. } = &sim.initial else {
        return Err(Failure::usage(
            "sweep-needs-perturbation",
            "simulation.initial must be {\"z0\": [...]} for a sweep",
        ));
    };
    let (syn, sys, mut summary) = synthesize_for(ctx)?;
    print_synthesis(&syn);
    let cfg = experiment(sim, &syn);
    let result = sweep_delta(&sys, &syn.controller, &cfg, z0, &ctx.resolved.deltas, *seed, sim.contraction)?;
    fs::create_dir_all(ctx.out).map_err(|e| Failure::usage("output-io", e.to_string()))?;
    let mut table = String::from("delta,synchronized,distance_ratio\n");
    for (k, ((delta, ok, ratio), trace)) in result.results.iter().zip(&result.traces).enumerate() {
        println!("delta {delta:e}  synchronized {ok}  |x(T)|_D/|x(0)|_D {ratio:.6e}");
        table.push_str(&format!("{delta:.16e},{ok},{ratio:.16e}\n"));
        write_trace(&ctx.out.join(format!("sweep-trace-{}.csv", k + 1)), trace)?;
    }
    fs::write(ctx.out.join("sweep.csv"), table).map_err(|e| Failure::usage("output-io", e.to_string()))?;
    summary["sweep"] = json!(result
        .results
        .iter()
        .map(|(d, ok, r)| json!({ "delta": d, "synchronized": ok, "distance_ratio": r }))
        .collect::<Vec<_>>());
    summary["largest_synchronizing_delta"] = json!(result.largest_synchronizing);
    summary["verdict"] = json!(result.largest_synchronizing.is_some());
    match result.largest_synchronizing {
        Some(d) => {
            println!("largest synchronizing delta {d:e}");
            Ok(summary)
        }
        None => {
            Err(Failure::verdict("no-synchronizing-delta", "no swept perturbation synchronized").with_summary(summary))
        }
    }
}
