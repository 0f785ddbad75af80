//! Closed-loop network simulation `ẋ_i = f(x_i) + g(x_i) φ_i(x)` and the
//! measurements taken on it: distance to the synchronization manifold, transverse
//! error `e_i = x_i − x_1`, quadratic Lyapunov values, and exponential rate fits.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ode::rk4_step;
use crate::scalar::{is_finite, lit, max, to_f64, Real};
use crate::synthesis::SyncController;
use crate::system::ControlAffineSystem;

/// Samples at or below this distance are excluded from rate fits.
pub const ROUND_OFF_FLOOR: f64 = 1e-13;
/// Minimum number of samples for a rate fit.
pub const MIN_FIT_SAMPLES: usize = 10;
/// Default integration step.
pub const DEFAULT_DT: f64 = 1e-3;
/// Additive slack on the upper sandwich bound.
pub const SANDWICH_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("initial state has {got} entries, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("rate fit needs at least 2 samples above the round-off floor, found {0}")]
    StarvedFit(usize),
}

/// `x(0)`: explicit, or a common point plus per-agent offsets of norm `δ`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition<T: Real> {
    Explicit(DVector<T>),
    Perturbed { z0: DVector<T>, delta: T, seed: u64 },
}

impl<T: Real> InitialCondition<T> {
    /// Stacked `x(0)` for `agents` agents.
    pub fn resolve(&self, agents: usize, n: usize) -> Result<DVector<T>, SimulationError> {
        match self {
            InitialCondition::Explicit(x) => {
                if x.len() != agents * n {
                    return Err(SimulationError::Dimension { got: x.len(), expected: agents * n });
                }
                Ok(x.clone())
            }
            InitialCondition::Perturbed { z0, delta, seed } => {
                if z0.len() != n {
                    return Err(SimulationError::Dimension { got: z0.len(), expected: n });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut x = DVector::zeros(agents * n);
                for i in 0..agents {
                    let dir = loop {
                        let d = DVector::<f64>::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                        if d.norm() > 1e-3 {
                            break d.normalize();
                        }
                    };
                    let offset = dir.map(|v| lit::<T>(v) * *delta);
                    x.rows_mut(i * n, n).copy_from(&(z0 + offset));
                }
                Ok(x)
            }
        }
    }
}

/// One experiment. `metric` enables the series `V = eᵀ (I ⊗ P) e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig<T: Real> {
    pub initial: InitialCondition<T>,
    pub horizon: T,
    pub dt: T,
    /// Record every `decimation`-th step (the final step is always recorded).
    pub decimation: usize,
    pub metric: Option<DMatrix<T>>,
}

impl<T: Real> ExperimentConfig<T> {
    pub fn new(initial: InitialCondition<T>, horizon: T) -> Self {
        Self { initial, horizon, dt: lit(DEFAULT_DT), decimation: 1, metric: None }
    }

    pub fn with_dt(mut self, dt: T) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_metric(mut self, p: DMatrix<T>) -> Self {
        self.metric = Some(p);
        self
    }

    pub fn with_decimation(mut self, every: usize) -> Self {
        self.decimation = every;
        self
    }

    /// Default rate-fit window `[0.2 T, 0.8 T]`.
    pub fn default_window(&self) -> (T, T) {
        (self.horizon * lit::<T>(0.2), self.horizon * lit::<T>(0.8))
    }

    fn steps(&self) -> Result<usize, SimulationError> {
        if !is_finite(self.dt) || self.dt <= T::zero() {
            return Err(SimulationError::Config(format!("dt must be positive, got {}", to_f64(self.dt))));
        }
        if !is_finite(self.horizon) || self.horizon < T::zero() {
            return Err(SimulationError::Config(format!("horizon must be non-negative, got {}", to_f64(self.horizon))));
        }
        if self.decimation == 0 {
            return Err(SimulationError::Config("decimation must be at least 1".into()));
        }
        Ok((to_f64(self.horizon) / to_f64(self.dt)).round() as usize)
    }
}

/// How an integration ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Completed,
    /// A non-finite state appeared; the trace ends at the last finite time.
    Escaped {
        last_finite_time: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace<T: Real> {
    pub agents: usize,
    pub state_dim: usize,
    pub times: Vec<T>,
    pub states: Vec<DVector<T>>,
    pub sync_distance: Vec<T>,
    pub transverse_norm: Vec<T>,
    pub lyapunov: Option<Vec<T>>,
    pub control_effort: Vec<T>,
    pub outcome: Outcome,
}

impl<T: Real> Trace<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_distance(&self) -> T {
        *self.sync_distance.last().expect("trace has the initial sample")
    }

    pub fn initial_distance(&self) -> T {
        self.sync_distance[0]
    }

    pub fn escaped(&self) -> bool {
        matches!(self.outcome, Outcome::Escaped { .. })
    }
}

fn agent<T: Real>(x: &DVector<T>, i: usize, n: usize) -> DVector<T> {
    x.rows(i * n, n).into_owned()
}

/// `|x|_D = sqrt(Σ_i |x_i − x̄|²)` with `x̄` the agent mean.
pub fn sync_distance<T: Real>(x: &DVector<T>, agents: usize, n: usize) -> T {
    let mut mean = DVector::<T>::zeros(n);
    for i in 0..agents {
        mean += agent(x, i, n);
    }
    mean /= lit::<T>(agents as f64);
    (0..agents).fold(T::zero(), |acc, i| acc + (agent(x, i, n) - &mean).norm_squared()).sqrt()
}

/// `e = (x_2 − x_1, …, x_N − x_1)`.
pub fn transverse_error<T: Real>(x: &DVector<T>, agents: usize, n: usize) -> DVector<T> {
    let x1 = agent(x, 0, n);
    let mut e = DVector::zeros((agents - 1) * n);
    for i in 1..agents {
        e.rows_mut((i - 1) * n, n).copy_from(&(agent(x, i, n) - &x1));
    }
    e
}

/// `V(e) = eᵀ (I ⊗ P) e`.
pub fn lyapunov_value<T: Real>(e: &DVector<T>, p: &DMatrix<T>) -> T {
    let n = p.nrows();
    (0..e.len() / n).fold(T::zero(), |acc, i| {
        let ei = e.rows(i * n, n);
        acc + (ei.transpose() * p * ei)[0]
    })
}

/// `ẋ` of the closed loop.
pub fn closed_loop_rhs<T: Real>(sys: &ControlAffineSystem<T>, ctrl: &SyncController<T>, x: &DVector<T>) -> DVector<T> {
    let (n, p) = (sys.state_dim(), sys.input_dim());
    let u = ctrl.evaluate(x);
    let mut dx = DVector::zeros(x.len());
    for i in 0..ctrl.agents() {
        let xi = agent(x, i, n);
        let ui = u.rows(i * p, p).into_owned();
        dx.rows_mut(i * n, n).copy_from(&sys.velocity(&xi, &ui));
    }
    dx
}

fn all_finite<T: Real>(x: &DVector<T>) -> bool {
    x.iter().all(|&v| is_finite(v))
}

/// Fixed-step RK4 integration of the closed loop.
pub fn integrate<T: Real>(
    sys: &ControlAffineSystem<T>,
    ctrl: &SyncController<T>,
    cfg: &ExperimentConfig<T>,
) -> Result<Trace<T>, SimulationError> {
    let (agents, n) = (ctrl.agents(), sys.state_dim());
    if ctrl.state_dim() != n || ctrl.input_dim() != sys.input_dim() {
        return Err(SimulationError::Config(format!(
            "controller is {}×{} per agent, system is {}×{}",
            ctrl.state_dim(),
            ctrl.input_dim(),
            n,
            sys.input_dim()
        )));
    }
    if agents < 2 {
        return Err(SimulationError::Config("need at least two agents".into()));
    }
    if let Some(p) = &cfg.metric {
        if p.shape() != (n, n) {
            return Err(SimulationError::Config(format!("metric is {:?}, expected {n}×{n}", p.shape())));
        }
    }
    let steps = cfg.steps()?;
    let mut x = cfg.initial.resolve(agents, n)?;
    if !all_finite(&x) {
        return Err(SimulationError::Config("initial state is not finite".into()));
    }

    let capacity = steps / cfg.decimation + 2;
    let mut trace = Trace {
        agents,
        state_dim: n,
        times: Vec::with_capacity(capacity),
        states: Vec::with_capacity(capacity),
        sync_distance: Vec::with_capacity(capacity),
        transverse_norm: Vec::with_capacity(capacity),
        lyapunov: cfg.metric.as_ref().map(|_| Vec::with_capacity(capacity)),
        control_effort: Vec::with_capacity(capacity),
        outcome: Outcome::Completed,
    };
    let record = |trace: &mut Trace<T>, t: T, x: &DVector<T>| {
        let e = transverse_error(x, agents, n);
        trace.times.push(t);
        trace.sync_distance.push(sync_distance(x, agents, n));
        trace.transverse_norm.push(e.norm());
        if let (Some(values), Some(p)) = (trace.lyapunov.as_mut(), cfg.metric.as_ref()) {
            values.push(lyapunov_value(&e, p));
        }
        trace.control_effort.push(ctrl.evaluate(x).norm());
        trace.states.push(x.clone());
    };
    record(&mut trace, T::zero(), &x);

    let rhs = |y: &DVector<T>| closed_loop_rhs(sys, ctrl, y);
    for k in 1..=steps {
        let next = rk4_step(rhs, &x, cfg.dt);
        let t = cfg.dt * lit::<T>(k as f64);
        if !all_finite(&next) {
            trace.outcome = Outcome::Escaped { last_finite_time: to_f64(cfg.dt * lit::<T>((k - 1) as f64)) };
            if trace.times.last().is_some_and(|&last| last < t - cfg.dt) {
                record(&mut trace, t - cfg.dt, &x);
            }
            break;
        }
        x = next;
        if k % cfg.decimation == 0 || k == steps {
            record(&mut trace, t, &x);
        }
    }
    Ok(trace)
}

/// Independent experiments in parallel; results keep the input order.
pub fn integrate_many<T: Real>(
    sys: &ControlAffineSystem<T>,
    ctrl: &SyncController<T>,
    configs: &[ExperimentConfig<T>],
) -> Vec<Result<Trace<T>, SimulationError>> {
    configs.par_iter().map(|cfg| integrate(sys, ctrl, cfg)).collect()
}

/// `V(t_k)` and the largest positive increment between consecutive samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSeries<T: Real> {
    pub values: Vec<T>,
    pub max_increment: T,
}

pub fn lyapunov_series<T: Real>(trace: &Trace<T>, p: &DMatrix<T>) -> LyapunovSeries<T> {
    let values: Vec<T> =
        trace.states.iter().map(|x| lyapunov_value(&transverse_error(x, trace.agents, trace.state_dim), p)).collect();
    let max_increment = values.windows(2).fold(T::zero(), |acc, w| max(acc, w[1] - w[0]));
    LyapunovSeries { values, max_increment }
}

/// Least-squares fit of `log y = log(k y₀) − λ t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit<T: Real> {
    pub lambda: T,
    /// `exp(intercept) / y₀`.
    pub k: T,
    pub intercept: T,
    pub r_squared: T,
    pub window: (T, T),
    pub samples: usize,
    /// The window ran out of samples above the floor and the fit fell back.
    pub truncated: bool,
}

/// Fits an exponential envelope to `values` over `window`, skipping samples at or
/// below the round-off floor. When fewer than [`MIN_FIT_SAMPLES`] remain, the fit
/// uses every sample above the floor from the start of the series instead.
pub fn fit_series<T: Real>(times: &[T], values: &[T], window: (T, T)) -> Result<RateFit<T>, SimulationError> {
    let floor = lit::<T>(ROUND_OFF_FLOOR);
    let prefix = || -> Vec<(f64, f64)> {
        times
            .iter()
            .zip(values)
            .take_while(|(_, &v)| v > floor && is_finite(v))
            .map(|(&t, &v)| (to_f64(t), to_f64(v).ln()))
            .collect()
    };
    let windowed: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(&t, &v)| t >= window.0 && t <= window.1 && v > floor && is_finite(v))
        .map(|(&t, &v)| (to_f64(t), to_f64(v).ln()))
        .collect();
    let (points, truncated) = if windowed.len() >= MIN_FIT_SAMPLES { (windowed, false) } else { (prefix(), true) };
    if points.len() < 2 {
        return Err(SimulationError::StarvedFit(points.len()));
    }
    let m = points.len() as f64;
    let t_mean = points.iter().map(|p| p.0).sum::<f64>() / m;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - t_mean).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - t_mean) * (p.1 - y_mean)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - y_mean).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = y_mean - slope * t_mean;
    let ss_res: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    // A perfectly flat series is explained exactly by its (zero-slope) line.
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let y0 = to_f64(values[0]);
    Ok(RateFit {
        lambda: lit(-slope),
        k: lit(intercept.exp() / y0),
        intercept: lit(intercept),
        r_squared: lit(r_squared),
        window,
        samples: points.len(),
        truncated,
    })
}

/// Rate fit of `|x|_D`; `k` is relative to `|x(0)|_D`.
pub fn fit_rate<T: Real>(trace: &Trace<T>, window: (T, T)) -> Result<RateFit<T>, SimulationError> {
    fit_series(&trace.times, &trace.sync_distance, window)
}

/// Largest violation of `|x|_D ≤ |e| ≤ √(2(N−1)) |x|_D + 1e−12` over the trace
/// (non-positive when the invariant holds everywhere).
pub fn sandwich_violation<T: Real>(trace: &Trace<T>) -> T {
    let factor = lit::<T>((2.0 * (trace.agents as f64 - 1.0)).sqrt());
    let slack = lit::<T>(SANDWICH_SLACK);
    trace.sync_distance.iter().zip(&trace.transverse_norm).fold(lit::<T>(f64::NEG_INFINITY), |acc, (&d, &e)| {
        // The lower bound is exact in exact arithmetic; allow one part in 1e12 of round-off.
        let lower = d - e - slack * max(T::one(), d);
        let upper = e - factor * d - slack;
        max(acc, max(lower, upper))
    })
}

/// Writes `t, x_1_1 … x_N_n, dist_D, norm_e, V, u_norm` with 17 significant digits.
pub fn write_csv<T: Real, W: Write>(trace: &Trace<T>, mut out: W) -> io::Result<()> {
    let mut header = vec!["t".to_string()];
    for i in 1..=trace.agents {
        for k in 1..=trace.state_dim {
            header.push(format!("x_{i}_{k}"));
        }
    }
    header.extend(["dist_D", "norm_e", "V", "u_norm"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    let fmt = |v: T| format!("{:.16e}", to_f64(v));
    for s in 0..trace.len() {
        let mut row = vec![fmt(trace.times[s])];
        row.extend(trace.states[s].iter().map(|&v| fmt(v)));
        row.push(fmt(trace.sync_distance[s]));
        row.push(fmt(trace.transverse_norm[s]));
        row.push(trace.lyapunov.as_ref().map_or_else(|| "NaN".to_string(), |v| fmt(v[s])));
        row.push(fmt(trace.control_effort[s]));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Outcome of a perturbation-size sweep for a local experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSweep<T: Real> {
    pub results: Vec<(T, bool, T)>,
    /// Largest `δ` whose run contracted below `contraction · |x(0)|_D`.
    pub largest_synchronizing: Option<T>,
    /// The trace behind each entry of `results`, in the same order.
    pub traces: Vec<Trace<T>>,
}

/// Runs `base` with `InitialCondition::Perturbed { z0, δ, seed }` for every `δ` in
/// parallel; a run synchronizes when it completes with
/// `|x(T)|_D ≤ contraction · |x(0)|_D`.
pub fn sweep_delta<T: Real>(
    sys: &ControlAffineSystem<T>,
    ctrl: &SyncController<T>,
    base: &ExperimentConfig<T>,
    z0: &DVector<T>,
    deltas: &[T],
    seed: u64,
    contraction: T,
) -> Result<DeltaSweep<T>, SimulationError> {
    let configs: Vec<ExperimentConfig<T>> = deltas
        .iter()
        .map(|&delta| ExperimentConfig {
            initial: InitialCondition::Perturbed { z0: z0.clone(), delta, seed },
            ..base.clone()
        })
        .collect();
    let traces = integrate_many(sys, ctrl, &configs);
    let mut results = Vec::with_capacity(deltas.len());
    let mut kept = Vec::with_capacity(deltas.len());
    for (delta, trace) in deltas.iter().zip(traces) {
        let trace = trace?;
        let ratio = trace.final_distance() / trace.initial_distance();
        let ok = !trace.escaped() && ratio <= contraction;
        results.push((*delta, ok, ratio));
        kept.push(trace);
    }
    let largest_synchronizing =
        results.iter().filter(|r| r.1).map(|r| r.0).fold(None, |acc: Option<T>, d| Some(acc.map_or(d, |a| max(a, d))));
    Ok(DeltaSweep { results, largest_synchronizing, traces: kept })
}
