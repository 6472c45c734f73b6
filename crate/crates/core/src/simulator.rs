//! Closed-loop simulation of plant, sensors, channel and remote estimator.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{decode, sample_received_powers, Action, ArrivalOptions, ArrivalTable, ChannelParams};
use crate::estimator::{g_operator, state_update, Covariance, EstimatorState, SystemModel};
use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::policy::{
    discretize_seeded, finite_horizon_dp, greedy_index, lookup_index, simple_rc_table, simple_tx_table,
    value_iteration, FiniteHorizonPlan, PolicyTable, SolverConfig,
};
use crate::scenario::Rows;

/// Traces above this value mark a run as divergent.
pub const DIVERGENCE_CAP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
    /// Fraction of each run discarded before averaging.
    pub burn_in: f64,
    /// Keep the per-step record of the first run.
    pub record_trace: bool,
    /// Initial predicted covariance; identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_cov: Option<Rows>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { horizon: 100_000, runs: 10, seed: 7, burn_in: 0.1, record_trace: false, initial_cov: None }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { field: field.into(), reason: reason.into() });
        if self.horizon == 0 {
            return bad("sim.horizon", "must be at least 1");
        }
        if self.runs == 0 {
            return bad("sim.runs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad("sim.burn_in", "must lie in [0, 1)");
        }
        Ok(())
    }

    fn burn_in_steps(&self) -> usize {
        ((self.horizon as f64 * self.burn_in).floor() as usize).min(self.horizon - 1)
    }

    pub fn initial_covariance(&self, n: usize) -> Result<Covariance> {
        match &self.initial_cov {
            None => Ok(Covariance::identity(n)),
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config { field: "sim.initial_cov".into(), reason: format!("must be {n}x{n}") });
                }
                Covariance::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Rule {
    Greedy { mu: f64 },
    Table { policy: Box<PolicyTable>, indices: Vec<usize> },
    FiniteHorizon { plan: FiniteHorizonPlan },
    Fixed { index: usize },
}

/// A decision rule together with the action set and channel it acts on.
#[derive(Debug, Clone)]
pub struct Policy {
    pub label: String,
    rule: Rule,
    table: ArrivalTable,
}

impl Policy {
    /// One-step optimal action over the actions of `table`.
    pub fn greedy(table: ArrivalTable, mu: f64) -> Self {
        Policy { label: format!("greedy_{}", table.channel.receiver), rule: Rule::Greedy { mu }, table }
    }

    pub fn simple_tx(channel: &ChannelParams, mu: f64, opts: ArrivalOptions) -> Self {
        Policy { label: "simple_tx".into(), ..Self::greedy(simple_tx_table(channel, opts), mu) }
    }

    pub fn simple_rc(channel: &ChannelParams, mu: f64, opts: ArrivalOptions) -> Self {
        Policy { label: "simple_rc".into(), ..Self::greedy(simple_rc_table(channel, opts), mu) }
    }

    /// Stationary table policy; `table` must be built on the table's channel.
    pub fn from_table(policy: PolicyTable, table: ArrivalTable) -> Result<Self> {
        if policy.channel != table.channel {
            return Err(Error::Config { field: "policy".into(), reason: "table was solved for another channel".into() });
        }
        let indices = policy
            .actions
            .iter()
            .map(|a| {
                table.index_of(a).ok_or_else(|| Error::Config {
                    field: "policy".into(),
                    reason: "table action missing from the action set".into(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Policy {
            label: format!("table_{}", table.channel.receiver),
            rule: Rule::Table { policy: Box::new(policy), indices },
            table,
        })
    }

    /// Receding-horizon use of a finite-horizon plan: the first stage is applied at every step.
    pub fn finite_horizon(plan: FiniteHorizonPlan, table: ArrivalTable) -> Self {
        Policy { label: format!("finite_{}", plan.horizon()), rule: Rule::FiniteHorizon { plan }, table }
    }

    pub fn fixed(action: &Action, table: ArrivalTable) -> Result<Self> {
        let index = table.index_of(action).ok_or_else(|| Error::Config {
            field: "policy".into(),
            reason: "fixed action not in the action set".into(),
        })?;
        Ok(Policy { label: "fixed".into(), rule: Rule::Fixed { index }, table })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn channel(&self) -> &ChannelParams {
        &self.table.channel
    }

    pub fn table(&self) -> &ArrivalTable {
        &self.table
    }

    /// Index into `self.table().actions` chosen at predicted covariance `p`.
    pub fn decide(&self, p: &Covariance, model: &SystemModel) -> Result<usize> {
        match &self.rule {
            Rule::Greedy { mu } => greedy_index(p, model, &self.table, *mu),
            Rule::Table { policy, indices } => Ok(indices[lookup_index(policy, p)]),
            Rule::FiniteHorizon { plan } => {
                Ok(plan.stages[0][crate::policy::nearest_centroid(&plan.centroids, p)])
            }
            Rule::Fixed { index } => Ok(*index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub trace: f64,
    pub total_power: f64,
    pub gamma_bits: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    pub label: String,
    /// Mean of `Tr P(k+1|k)` after burn-in, averaged over runs.
    pub mean_trace: f64,
    pub mean_trace_se: f64,
    /// Total transmit power divided by the largest single-sensor maximum power.
    pub mean_power: f64,
    pub mean_power_se: f64,
    pub arrival_rates: Vec<f64>,
    /// Frequency of each arrival outcome, indexed by outcome bits.
    pub outcome_freq: Vec<f64>,
    /// Trace of the sample mean of `(x - xhat)(x - xhat)'`.
    pub empirical_error_trace: f64,
    pub runs: usize,
    pub steps_per_run: usize,
    pub divergent_runs: usize,
    pub trace: Option<Vec<TraceRow>>,
}

impl SimMetrics {
    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "policy={}", self.label);
        let _ = writeln!(s, "mean_trace={}", self.mean_trace);
        let _ = writeln!(s, "mean_trace_se={}", self.mean_trace_se);
        let _ = writeln!(s, "mean_power={}", self.mean_power);
        let _ = writeln!(s, "mean_power_se={}", self.mean_power_se);
        for (i, r) in self.arrival_rates.iter().enumerate() {
            let _ = writeln!(s, "arrival_rate_{i}={r}");
        }
        let _ = writeln!(s, "empirical_error_trace={}", self.empirical_error_trace);
        let _ = writeln!(s, "runs={}", self.runs);
        let _ = writeln!(s, "steps_per_run={}", self.steps_per_run);
        let _ = writeln!(s, "divergent_runs={}", self.divergent_runs);
        s
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,trace_P,total_power,gamma_bits\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.trace, r.total_power, r.gamma_bits);
    }
    s
}

struct RunStats {
    trace_sum: f64,
    power_sum: f64,
    counted: usize,
    arrivals: Vec<usize>,
    outcomes: Vec<usize>,
    err_cov: DMatrix<f64>,
    err_count: usize,
    divergent: bool,
    rows: Option<Vec<TraceRow>>,
}

fn gaussian(rng: &mut ChaCha8Rng, sqrt_cov: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(sqrt_cov.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    sqrt_cov * z
}

fn run_once(model: &SystemModel, policy: &Policy, cfg: &SimConfig, run: usize) -> Result<RunStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(run as u64);
    let n = model.n();
    let n_s = model.n_sensors();
    let channel = policy.channel();
    let reference = channel.reference_power();
    let q_sqrt = psd_sqrt(model.q());
    let r_sqrt: Vec<DMatrix<f64>> = model.sensors().iter().map(|s| psd_sqrt(&s.r)).collect();
    let p0 = cfg.initial_covariance(n)?;
    let mut x = gaussian(&mut rng, &psd_sqrt(p0.matrix()));
    let mut state = EstimatorState::new(DVector::zeros(n), p0)?;
    let burn = cfg.burn_in_steps();
    let record = cfg.record_trace && run == 0;
    let mut stats = RunStats {
        trace_sum: 0.0,
        power_sum: 0.0,
        counted: 0,
        arrivals: vec![0; n_s],
        outcomes: vec![0; 1 << n_s],
        err_cov: DMatrix::zeros(n, n),
        err_count: 0,
        divergent: false,
        rows: record.then(Vec::new),
    };
    for k in 0..cfg.horizon {
        let a = policy.decide(&state.cov, model)?;
        let action = &policy.table.actions[a];
        let measurements: Vec<DVector<f64>> = model
            .sensors()
            .iter()
            .zip(&r_sqrt)
            .map(|(s, rs)| &s.c * &x + gaussian(&mut rng, rs))
            .collect();
        let gamma = decode(&sample_received_powers(action, channel, &mut rng), channel);
        let received: Vec<Option<DVector<f64>>> = measurements
            .into_iter()
            .enumerate()
            .map(|(i, y)| gamma.received(i).then_some(y))
            .collect();
        state = state_update(&state, &gamma, &received, model)?;
        x = model.a() * &x + gaussian(&mut rng, &q_sqrt);
        let tr = state.cov.trace();
        let power = action.total_power() / reference;
        if !(tr.is_finite() && tr <= DIVERGENCE_CAP) {
            stats.divergent = true;
            let remaining = cfg.horizon - k.max(burn);
            stats.trace_sum += DIVERGENCE_CAP * remaining as f64;
            stats.counted += remaining;
            break;
        }
        if k >= burn {
            stats.trace_sum += tr;
            stats.power_sum += power;
            stats.counted += 1;
            for i in 0..n_s {
                stats.arrivals[i] += gamma.received(i) as usize;
            }
            stats.outcomes[gamma.bits() as usize] += 1;
            let e = &x - &state.xhat;
            stats.err_cov += &e * e.transpose();
            stats.err_count += 1;
        }
        if let Some(rows) = stats.rows.as_mut() {
            rows.push(TraceRow { step: k, trace: tr, total_power: action.total_power(), gamma_bits: gamma.to_bit_string() });
        }
    }
    Ok(stats)
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Simulates `cfg.runs` independent replications, each on its own RNG stream.
pub fn run(model: &SystemModel, policy: &Policy, cfg: &SimConfig) -> Result<SimMetrics> {
    cfg.validate()?;
    if policy.channel().n_sensors() != model.n_sensors() {
        return Err(Error::Dimension("policy channel and model disagree on the sensor count".into()));
    }
    let stats: Vec<RunStats> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| run_once(model, policy, cfg, r))
        .collect::<Result<_>>()?;
    let traces: Vec<f64> = stats.iter().map(|s| s.trace_sum / s.counted.max(1) as f64).collect();
    let powers: Vec<f64> = stats.iter().map(|s| s.power_sum / s.err_count.max(1) as f64).collect();
    let (mean_trace, mean_trace_se) = mean_se(&traces);
    let (mean_power, mean_power_se) = mean_se(&powers);
    let steps: usize = stats.iter().map(|s| s.err_count).sum();
    let denom = steps.max(1) as f64;
    let n_s = model.n_sensors();
    let arrival_rates = (0..n_s).map(|i| stats.iter().map(|s| s.arrivals[i]).sum::<usize>() as f64 / denom).collect();
    let outcome_freq = (0..1usize << n_s)
        .map(|b| stats.iter().map(|s| s.outcomes[b]).sum::<usize>() as f64 / denom)
        .collect();
    let err_cov = stats.iter().fold(DMatrix::zeros(model.n(), model.n()), |acc, s| acc + &s.err_cov);
    let mut stats = stats;
    Ok(SimMetrics {
        label: policy.label.clone(),
        mean_trace,
        mean_trace_se,
        mean_power,
        mean_power_se,
        arrival_rates,
        outcome_freq,
        empirical_error_trace: err_cov.trace() / denom,
        runs: cfg.runs,
        steps_per_run: cfg.horizon - cfg.burn_in_steps(),
        divergent_runs: stats.iter().filter(|s| s.divergent).count(),
        trace: stats[0].rows.take(),
    })
}

/// Monte Carlo estimate (mean, standard error) of
/// `sum_k beta^k (Tr g(P_k, gamma_k) + mu * sum(u_k))` from `p0`.
#[allow(clippy::too_many_arguments)]
pub fn discounted_cost(
    model: &SystemModel,
    policy: &Policy,
    p0: &Covariance,
    beta: f64,
    mu: f64,
    horizon: usize,
    runs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if runs == 0 || horizon == 0 {
        return Err(Error::Config { field: "runs".into(), reason: "runs and horizon must be positive".into() });
    }
    let channel = policy.channel();
    let costs: Vec<f64> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut p = p0.clone();
            let mut total = 0.0;
            let mut weight = 1.0;
            for _ in 0..horizon {
                let action = &policy.table.actions[policy.decide(&p, model)?];
                let gamma = decode(&sample_received_powers(action, channel, &mut rng), channel);
                p = g_operator(&p, &gamma, model)?;
                total += weight * (p.trace() + mu * action.total_power());
                weight *= beta;
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(mean_se(&costs))
}

/// Which policy family a sweep curve uses.
#[derive(Debug, Clone)]
pub enum CurveKind {
    Greedy,
    SimpleTx,
    SimpleRc,
    Infinite(SolverConfig),
    FiniteHorizon { horizon: usize, solver: SolverConfig },
}

#[derive(Debug, Clone)]
pub struct CurveSpec {
    pub label: String,
    pub channel: ChannelParams,
    pub kind: CurveKind,
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub mu: f64,
    pub result: std::result::Result<SimMetrics, String>,
}

#[derive(Debug, Clone)]
pub struct Curve {
    pub label: String,
    /// Successful points sorted by mean power, failed points last.
    pub points: Vec<CurvePoint>,
}

/// Builds the policy of `spec` at price `mu`. Discretizations are computed by
/// the caller so a sweep clusters each channel once.
fn curve_policy(
    spec: &CurveSpec,
    mu: f64,
    model: &SystemModel,
    full: &ArrivalTable,
    centroids: Option<&[Covariance]>,
    opts: ArrivalOptions,
) -> Result<Policy> {
    let policy = match &spec.kind {
        CurveKind::Greedy => Policy::greedy(full.clone(), mu),
        CurveKind::SimpleTx => Policy::simple_tx(&spec.channel, mu, opts),
        CurveKind::SimpleRc => Policy::simple_rc(&spec.channel, mu, opts),
        CurveKind::Infinite(solver) => {
            let cfg = SolverConfig { mu, ..solver.clone() };
            let table = value_iteration(centroids.expect("discretized"), model, full, &cfg)?;
            Policy::from_table(table, full.clone())?
        }
        CurveKind::FiniteHorizon { horizon, solver } => {
            let cfg = SolverConfig { mu, ..solver.clone() };
            let plan = finite_horizon_dp(centroids.expect("discretized"), *horizon, model, full, &cfg)?;
            Policy::finite_horizon(plan, full.clone())
        }
    };
    Ok(policy.with_label(spec.label.clone()))
}

/// Solves and simulates every curve at every price; per-point failures are
/// recorded and the sweep continues.
pub fn sweep_mu(
    model: &SystemModel,
    curves: &[CurveSpec],
    mus: &[f64],
    sim: &SimConfig,
    opts: ArrivalOptions,
) -> Result<Vec<Curve>> {
    if mus.is_empty() {
        return Err(Error::Config { field: "mu".into(), reason: "empty price grid".into() });
    }
    sim.validate()?;
    curves
        .iter()
        .map(|spec| {
            let full = ArrivalTable::full(spec.channel.clone(), opts);
            let centroids = match &spec.kind {
                CurveKind::Infinite(s) | CurveKind::FiniteHorizon { solver: s, .. } => {
                    Some(discretize_seeded(model, &full, s)?.centroids)
                }
                _ => None,
            };
            let mut points: Vec<CurvePoint> = mus
                .iter()
                .map(|&mu| {
                    let result = curve_policy(spec, mu, model, &full, centroids.as_deref(), opts)
                        .and_then(|p| run(model, &p, sim))
                        .map_err(|e| e.to_string());
                    CurvePoint { mu, result }
                })
                .collect();
            points.sort_by(|a, b| match (&a.result, &b.result) {
                (Ok(x), Ok(y)) => x.mean_power.total_cmp(&y.mean_power),
                (Ok(_), Err(_)) => std::cmp::Ordering::Less,
                (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
                _ => a.mu.total_cmp(&b.mu),
            });
            Ok(Curve { label: spec.label.clone(), points })
        })
        .collect()
}

pub fn curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from("policy,mu,mean_power,mean_power_se,mean_trace,mean_trace_se,error\n");
    for c in curves {
        for p in &c.points {
            match &p.result {
                Ok(m) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},",
                        c.label, p.mu, m.mean_power, m.mean_power_se, m.mean_trace, m.mean_trace_se
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{},{},,,,,\"{}\"", c.label, p.mu, e.replace('"', "'"));
                }
            }
        }
    }
    s
}
