//! One-step structure for decoupled plants.
//!
//! With block-diagonal `A`, `Q`, `P` and one sensor per block, the expected
//! one-step cost splits as `Tr(A P A' + Q) - sum_i psi_i(P_i) p_i(u) + mu sum(u)`,
//! so comparing actions only needs the scalars `psi_i(P_i)`.

use std::fmt;

use crate::channel::{arrival_distribution, marginal_success, Action, ArrivalDistribution, ArrivalOptions, ChannelParams};
use crate::estimator::{psi_all, Covariance, SystemModel};
use crate::error::{Error, Result};

/// `sum_i psi_i(P_i) p_i(u) - mu * sum(u)`; larger is better.
pub fn decoupled_surrogate(
    p: &Covariance,
    u: &Action,
    dist: &ArrivalDistribution,
    model: &SystemModel,
    mu: f64,
) -> Result<f64> {
    if !model.is_decoupled() {
        return Err(Error::Unsupported("surrogate needs a decoupled model".into()));
    }
    let psi = psi_all(p, model)?;
    Ok(psi
        .iter()
        .enumerate()
        .map(|(i, v)| v * marginal_success(dist, i))
        .sum::<f64>()
        - mu * u.total_power())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    S00,
    S01,
    S10,
    S11,
}

impl Region {
    pub fn levels(self) -> [usize; 2] {
        match self {
            Region::S00 => [0, 0],
            Region::S01 => [0, 1],
            Region::S10 => [1, 0],
            Region::S11 => [1, 1],
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b] = self.levels();
        write!(f, "S{a}{b}")
    }
}

/// Arrival statistics of the two-sensor, two-level problem and the corner of
/// the `S11` region in the `(psi_1, psi_2)` plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionThresholds {
    /// `p_10(1, 0)`: sensor 1 alone at full power.
    pub q1: f64,
    /// `p_01(0, 1)`.
    pub q2: f64,
    /// `p_1(1, 1)`, `p_2(1, 1)`: marginals when both transmit.
    pub p1: f64,
    pub p2: f64,
    pub p_e: f64,
    /// Power price of each single transmission, `mu * P_i,max`.
    pub mu1: f64,
    pub mu2: f64,
    pub m1: f64,
    pub m2: f64,
    pmax: [f64; 2],
}

impl RegionThresholds {
    fn cost(&self, region: Region, psi1: f64, psi2: f64) -> f64 {
        match region {
            Region::S00 => 0.0,
            Region::S10 => -self.q1 * psi1 + self.mu1,
            Region::S01 => -self.q2 * psi2 + self.mu2,
            Region::S11 => -self.p1 * psi1 - self.p2 * psi2 + self.mu1 + self.mu2,
        }
    }

    /// Region containing `(psi_1, psi_2)`; boundary points follow the greedy
    /// tie rule (less power first, then lexicographic levels).
    pub fn classify(&self, psi1: f64, psi2: f64) -> Region {
        if self.q1 * psi1 <= self.mu1 && self.q2 * psi2 <= self.mu2 {
            return Region::S00;
        }
        if (self.q1 - self.p1) * psi1 + self.mu2 < self.p2 * psi2
            && (self.q2 - self.p2) * psi2 + self.mu1 < self.p1 * psi1
        {
            return Region::S11;
        }
        let c10 = self.cost(Region::S10, psi1, psi2);
        let c01 = self.cost(Region::S01, psi1, psi2);
        if c10 < c01 || (c10 == c01 && self.pmax[0] < self.pmax[1]) {
            Region::S10
        } else {
            Region::S01
        }
    }
}

fn check_two_level(channel: &ChannelParams) -> Result<()> {
    if channel.n_sensors() != 2 || channel.power_sets.iter().any(|s| s.len() != 2) {
        return Err(Error::Unsupported("region analysis needs two sensors with two power levels each".into()));
    }
    Ok(())
}

/// Arrival statistics and `S11` corner `(M_1, M_2)` for a two-level, two-sensor channel.
pub fn thresholds(channel: &ChannelParams, mu: f64, opts: ArrivalOptions) -> Result<RegionThresholds> {
    check_two_level(channel)?;
    let pmax = [channel.max_power(0), channel.max_power(1)];
    let dist = |levels: &[usize]| {
        let a = Action::from_levels(levels, channel).expect("two-level action");
        arrival_distribution(&a, channel, opts)
    };
    let q1 = marginal_success(&dist(&[1, 0]), 0);
    let q2 = marginal_success(&dist(&[0, 1]), 1);
    let both = dist(&[1, 1]);
    let p1 = marginal_success(&both, 0);
    let p2 = marginal_success(&both, 1);
    let p_e = p1 * q1 + p2 * q2 - q1 * q2;
    if !(p_e > 0.0) {
        return Err(Error::Degenerate(format!("p_e = {p_e} is not positive")));
    }
    let mu1 = mu * pmax[0];
    let mu2 = mu * pmax[1];
    // intersection of the two S11 boundary lines
    let m1 = (mu1 * p2 + mu2 * (q2 - p2)) / p_e;
    let m2 = (mu2 * p1 + mu1 * (q1 - p1)) / p_e;
    Ok(RegionThresholds { q1, q2, p1, p2, p_e, mu1, mu2, m1, m2, pmax })
}

/// Optimal one-step action of a decoupled two-sensor, two-level problem read
/// off the threshold regions instead of enumerating actions.
pub fn corollary_regions(
    p: &Covariance,
    model: &SystemModel,
    channel: &ChannelParams,
    mu: f64,
    opts: ArrivalOptions,
) -> Result<Action> {
    check_two_level(channel)?;
    if !model.is_decoupled() || model.n_sensors() != 2 {
        return Err(Error::Unsupported("region analysis needs a decoupled two-sensor model".into()));
    }
    let th = thresholds(channel, mu, opts)?;
    let psi = psi_all(p, model)?;
    let region = th.classify(psi[0], psi[1]);
    Action::from_levels(&region.levels(), channel)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::channel::{action_space, ArrivalTable, Receiver};
    use crate::estimator::expected_cost;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn block(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let l = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        &l * l.transpose() + DMatrix::identity(2, 2) * 0.01
    }

    proptest! {
        #[test]
        fn surrogate_order_reverses_cost_order(
            seed in any::<u64>(), gain in 0.2f64..5.0, alpha in 0.05f64..0.95, sigma2 in 0.0f64..1.0,
            sic in any::<bool>(), mu in 0.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = crate::scenario::drone_model(0.1, 0.01);
            let receiver = if sic { Receiver::Sic } else { Receiver::Simple };
            let channel = ChannelParams::uniform(2, gain, 1.0, 3, sigma2, alpha, receiver).unwrap();
            let table = ArrivalTable::full(channel.clone(), ArrivalOptions::default());
            let p = Covariance::new(crate::linalg::block_diag(&[block(&mut rng), block(&mut rng)])).unwrap();
            let scored: Vec<(f64, f64)> = action_space(&channel)
                .iter()
                .map(|u| {
                    let dist = &table.dists[table.index_of(u).unwrap()];
                    (expected_cost(&p, u, dist, mu, &model).unwrap(), decoupled_surrogate(&p, u, dist, &model, mu).unwrap())
                })
                .collect();
            let scale = scored.iter().map(|(c, _)| c.abs()).fold(1.0, f64::max);
            for (ca, sa) in &scored {
                for (cb, sb) in &scored {
                    if (ca - cb).abs() > 1e-9 * scale {
                        prop_assert_eq!(ca < cb, sa > sb);
                    }
                }
            }
        }
    }
}
