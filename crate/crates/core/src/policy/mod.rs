//! Power-allocation policies: one-step greedy, the decoupled-system threshold
//! structure, finite-horizon DP, and discounted value iteration over a
//! discretized covariance space.

mod decoupled;
mod discretize;
mod greedy;
mod table;
mod vi;

pub use decoupled::{corollary_regions, decoupled_surrogate, thresholds, Region, RegionThresholds};
pub use discretize::{discretize_seeded, discretize_states, kmeans_frobenius, Discretization};
pub use greedy::{
    baseline_simple_rc, baseline_simple_tx, greedy_action, greedy_index, simple_rc_table, simple_tx_table,
    OneStepCost,
};
pub use table::{lookup, lookup_index, PolicyTable, SolveInfo};
pub use vi::{bellman_residuals, finite_horizon_dp, nearest_centroid, value_iteration, FiniteHorizonPlan, TransitionModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the dynamic-programming solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub beta: f64,
    pub mu: f64,
    /// Number of centroids `D` of the discretized state space.
    pub centroids: usize,
    /// Sup-norm stopping tolerance; `None` selects `1e-6 (1 - beta) / (2 beta)`.
    pub vi_tol: Option<f64>,
    pub vi_max_iters: usize,
    pub paths: usize,
    pub path_length: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            beta: 0.9,
            mu: 0.1,
            centroids: 200,
            vi_tol: None,
            vi_max_iters: 100_000,
            paths: 50,
            path_length: 400,
            kmeans_iters: 50,
            seed: 42,
        }
    }
}

impl SolverConfig {
    pub fn tolerance(&self) -> f64 {
        self.vi_tol
            .unwrap_or_else(|| 1e-6 * (1.0 - self.beta) / (2.0 * self.beta))
    }

    /// Checks the infinite-horizon requirements (`beta` in `(0, 1)`).
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config { field: "solver.beta".into(), reason: "must lie in (0, 1)".into() });
        }
        self.validate_common()
    }

    /// Finite-horizon problems also accept `beta = 1`.
    pub fn validate_finite(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config { field: "solver.beta".into(), reason: "must lie in (0, 1]".into() });
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config { field: "solver.mu".into(), reason: "must be a finite nonnegative number".into() });
        }
        if self.centroids == 0 {
            return Err(Error::Config { field: "solver.centroids".into(), reason: "must be positive".into() });
        }
        if self.paths == 0 || self.path_length == 0 {
            return Err(Error::Config { field: "solver.paths".into(), reason: "sample paths must be nonempty".into() });
        }
        if let Some(t) = self.vi_tol {
            if !(t > 0.0) {
                return Err(Error::Config { field: "solver.vi_tol".into(), reason: "must be positive".into() });
            }
        }
        Ok(())
    }
}

/// Index of the smallest value; values within a relative `1e-12` of the
/// running best count as ties and keep the earlier index.
pub(crate) fn argmin_tied(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let b = values[best];
        if v < b - 1e-12 * b.abs().max(1.0) {
            best = i;
        }
    }
    best
}
