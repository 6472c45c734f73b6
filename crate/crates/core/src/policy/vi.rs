//! Dynamic programming over a finite set of covariance centroids.

use log::warn;
use rayon::prelude::*;

use crate::channel::ArrivalTable;
use crate::estimator::{successors, Covariance, SystemModel};
use crate::error::{Error, Result};
use crate::linalg::frobenius_sq;

use super::greedy::OneStepCost;
use super::table::{PolicyTable, SolveInfo};
use super::{argmin_tied, SolverConfig};

/// Finite MDP induced by projecting every one-step successor onto its nearest centroid.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    /// `costs[s][a]`: one-step cost of action `a` at centroid `s`.
    pub costs: Vec<Vec<f64>>,
    /// `next[s][outcome]`: centroid nearest to `g(P_s, outcome)`.
    pub next: Vec<Vec<usize>>,
    /// `probs[a][outcome]`.
    pub probs: Vec<Vec<f64>>,
}

pub fn nearest_centroid(centroids: &[Covariance], p: &Covariance) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = frobenius_sq(c.matrix(), p.matrix());
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

impl TransitionModel {
    pub fn build(centroids: &[Covariance], model: &SystemModel, table: &ArrivalTable, mu: f64) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Unsupported("empty state set".into()));
        }
        let one_step = OneStepCost::new(model, table, mu);
        let rows: Vec<(Vec<f64>, Vec<usize>)> = centroids
            .par_iter()
            .map(|p| {
                let succ = successors(p, model)?;
                let traces: Vec<f64> = succ.iter().map(Covariance::trace).collect();
                let next = succ.iter().map(|z| nearest_centroid(centroids, z)).collect();
                Ok((one_step.costs_from_traces(&traces), next))
            })
            .collect::<Result<_>>()?;
        let (costs, next) = rows.into_iter().unzip();
        let probs = table.dists.iter().map(|d| d.probs().to_vec()).collect();
        Ok(TransitionModel { costs, next, probs })
    }

    pub fn n_states(&self) -> usize {
        self.costs.len()
    }

    /// `E[f(next) | s, a]`.
    pub fn expect(&self, s: usize, a: usize, f: &[f64]) -> f64 {
        self.probs[a]
            .iter()
            .zip(&self.next[s])
            .filter(|(&w, _)| w != 0.0)
            .map(|(w, &z)| w * f[z])
            .sum()
    }

    /// `C(P_s, a) + beta * E[V(next)]` for every action.
    pub fn q_values(&self, s: usize, v: &[f64], beta: f64) -> Vec<f64> {
        self.costs[s]
            .iter()
            .enumerate()
            .map(|(a, c)| c + beta * self.expect(s, a, v))
            .collect()
    }

    /// Bellman backup: new values and minimizing action per state.
    pub fn backup(&self, v: &[f64], beta: f64) -> (Vec<f64>, Vec<usize>) {
        (0..self.n_states())
            .into_par_iter()
            .map(|s| {
                let q = self.q_values(s, v, beta);
                let a = argmin_tied(&q);
                (q[a], a)
            })
            .unzip()
    }
}

/// Discounted value iteration from `V = 0` until the sup-norm change drops to
/// the configured tolerance. Non-convergence is logged and recorded in
/// [`SolveInfo`] rather than discarding the table.
///
/// Increments `D = V_{k+1} - V_k` are tracked explicitly: with `a` and `a'` the
/// minimizers of two consecutive sweeps, `D_{k+1}(s)` lies between
/// `beta E_a[D_k]` and `beta E_a'[D_k]`, and the directly computed difference is
/// clamped to that interval. Near convergence the increments are many orders
/// of magnitude below `V`, and the clamp keeps them at relative precision.
pub fn value_iteration(
    centroids: &[Covariance],
    model: &SystemModel,
    table: &ArrivalTable,
    cfg: &SolverConfig,
) -> Result<PolicyTable> {
    cfg.validate()?;
    let tm = TransitionModel::build(centroids, model, table, cfg.mu)?;
    let tol = cfg.tolerance();
    let beta = cfg.beta;
    let mut v = vec![0.0; tm.n_states()];
    let mut d: Vec<f64> = Vec::new();
    let mut act: Vec<usize> = Vec::new();
    let mut deltas = Vec::new();
    let mut converged = false;
    while deltas.len() < cfg.vi_max_iters {
        let (tv, next_act) = tm.backup(&v, beta);
        let next_d: Vec<f64> = if act.is_empty() {
            tv.clone()
        } else {
            (0..tm.n_states())
                .into_par_iter()
                .map(|s| {
                    let lo = beta * tm.expect(s, next_act[s], &d);
                    let hi = beta * tm.expect(s, act[s], &d);
                    (tv[s] - v[s]).clamp(lo.min(hi), lo.max(hi))
                })
                .collect()
        };
        let delta = next_d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        deltas.push(delta);
        for (vs, ds) in v.iter_mut().zip(&next_d) {
            *vs += ds;
        }
        d = next_d;
        act = next_act;
        if delta <= tol {
            converged = true;
            break;
        }
    }
    let final_delta = deltas.last().copied().unwrap_or(f64::INFINITY);
    if !converged {
        warn!("value iteration stopped at the cap of {} sweeps, delta {final_delta:e}", cfg.vi_max_iters);
    }
    let (_, best) = tm.backup(&v, beta);
    Ok(PolicyTable {
        centroids: centroids.to_vec(),
        actions: best.iter().map(|&a| table.actions[a].clone()).collect(),
        values: v,
        config: cfg.clone(),
        channel: table.channel.clone(),
        info: SolveInfo { iterations: deltas.len(), final_delta, converged, deltas },
    })
}

/// `|T V - V|` at every centroid of a solved table.
pub fn bellman_residuals(policy: &PolicyTable, model: &SystemModel, table: &ArrivalTable) -> Result<Vec<f64>> {
    let tm = TransitionModel::build(&policy.centroids, model, table, policy.config.mu)?;
    let (tv, _) = tm.backup(&policy.values, policy.config.beta);
    Ok(tv.iter().zip(&policy.values).map(|(a, b)| (a - b).abs()).collect())
}

/// Backward recursion over `K` stages on the discretized states.
#[derive(Debug, Clone)]
pub struct FiniteHorizonPlan {
    pub centroids: Vec<Covariance>,
    /// `stages[k][s]`: index into the arrival table's actions, stage 0 first.
    pub stages: Vec<Vec<usize>>,
    /// Cost-to-go at each stage, `values[k][s]`.
    pub values: Vec<Vec<f64>>,
}

impl FiniteHorizonPlan {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }
}

pub fn finite_horizon_dp(
    centroids: &[Covariance],
    horizon: usize,
    model: &SystemModel,
    table: &ArrivalTable,
    cfg: &SolverConfig,
) -> Result<FiniteHorizonPlan> {
    cfg.validate_finite()?;
    if horizon == 0 {
        return Err(Error::Config { field: "horizon".into(), reason: "must be at least 1".into() });
    }
    let tm = TransitionModel::build(centroids, model, table, cfg.mu)?;
    let mut v = vec![0.0; tm.n_states()];
    let mut stages = Vec::with_capacity(horizon);
    let mut values = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let (next, act) = tm.backup(&v, cfg.beta);
        stages.push(act);
        values.push(next.clone());
        v = next;
    }
    stages.reverse();
    values.reverse();
    Ok(FiniteHorizonPlan { centroids: centroids.to_vec(), stages, values })
}
