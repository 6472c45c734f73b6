use crate::channel::{
    action_space, ArrivalOptions, ArrivalTable, Action, ChannelParams, Receiver,
};
use crate::estimator::{cost_from_traces, successor_traces, Covariance, SystemModel};
use crate::error::Result;

use super::argmin_tied;

/// One-step cost `E[Tr g(P, u)] + mu * sum(u)` evaluated over every action of a table.
#[derive(Debug, Clone, Copy)]
pub struct OneStepCost<'a> {
    pub model: &'a SystemModel,
    pub table: &'a ArrivalTable,
    pub mu: f64,
}

impl<'a> OneStepCost<'a> {
    pub fn new(model: &'a SystemModel, table: &'a ArrivalTable, mu: f64) -> Self {
        OneStepCost { model, table, mu }
    }

    pub fn costs_from_traces(&self, traces: &[f64]) -> Vec<f64> {
        self.table
            .actions
            .iter()
            .zip(&self.table.dists)
            .map(|(a, d)| cost_from_traces(traces, d, self.mu * a.total_power()))
            .collect()
    }

    pub fn costs(&self, p: &Covariance) -> Result<Vec<f64>> {
        Ok(self.costs_from_traces(&successor_traces(p, self.model)?))
    }

    pub fn best(&self, p: &Covariance) -> Result<usize> {
        Ok(argmin_tied(&self.costs(p)?))
    }
}

/// Index into `table.actions` of the greedy (one-step optimal) action.
pub fn greedy_index(p: &Covariance, model: &SystemModel, table: &ArrivalTable, mu: f64) -> Result<usize> {
    OneStepCost::new(model, table, mu).best(p)
}

/// One-step optimal action; ties go to the smaller total power, then lexicographic levels.
pub fn greedy_action(p: &Covariance, model: &SystemModel, table: &ArrivalTable, mu: f64) -> Result<Action> {
    Ok(table.actions[greedy_index(p, model, table, mu)?].clone())
}

/// Orthogonal-access baseline: two levels, at most one sensor on, simple receiver.
pub fn simple_tx_table(channel: &ChannelParams, opts: ArrivalOptions) -> ArrivalTable {
    let ch = channel.with_receiver(Receiver::Simple).two_level();
    let n = ch.n_sensors();
    let mut actions = vec![Action::zero(&ch)];
    for i in 0..n {
        let mut levels = vec![0; n];
        levels[i] = 1;
        actions.push(Action::from_levels(&levels, &ch).expect("two-level set"));
    }
    ArrivalTable::new(ch, actions, opts)
}

/// Multi-packet baseline without cancellation: full grid, simple receiver.
pub fn simple_rc_table(channel: &ChannelParams, opts: ArrivalOptions) -> ArrivalTable {
    let ch = channel.with_receiver(Receiver::Simple);
    let actions = action_space(&ch);
    ArrivalTable::new(ch, actions, opts)
}

pub fn baseline_simple_tx(
    p: &Covariance,
    model: &SystemModel,
    channel: &ChannelParams,
    mu: f64,
    opts: ArrivalOptions,
) -> Result<Action> {
    greedy_action(p, model, &simple_tx_table(channel, opts), mu)
}

pub fn baseline_simple_rc(
    p: &Covariance,
    model: &SystemModel,
    channel: &ChannelParams,
    mu: f64,
    opts: ArrivalOptions,
) -> Result<Action> {
    greedy_action(p, model, &simple_rc_table(channel, opts), mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use crate::scenario::drone_model;
    use nalgebra::DMatrix;

    fn channel(levels: usize) -> ChannelParams {
        ChannelParams::uniform(2, 1.0, 1.0, levels, 0.1, 0.75, Receiver::Sic).unwrap()
    }

    #[test]
    fn huge_price_turns_everything_off() {
        let model = drone_model(0.1, 0.01);
        let table = ArrivalTable::full(channel(4), ArrivalOptions::default());
        let p = Covariance::new(DMatrix::identity(4, 4) * 50.0).unwrap();
        let a = greedy_action(&p, &model, &table, 1e6).unwrap();
        assert_eq!(a.total_power(), 0.0);
    }

    #[test]
    fn zero_price_large_covariance_uses_both_at_max() {
        let model = drone_model(0.1, 0.01);
        let table = ArrivalTable::full(channel(2), ArrivalOptions::default());
        let p = Covariance::new(DMatrix::identity(4, 4) * 1e3).unwrap();
        // brute force over the four actions
        let costs: Vec<f64> = table
            .actions
            .iter()
            .zip(&table.dists)
            .map(|(a, d)| crate::estimator::expected_cost(&p, a, d, 0.0, &model).unwrap())
            .collect();
        let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let a = greedy_action(&p, &model, &table, 0.0).unwrap();
        assert_eq!(a.powers(), &[1.0, 1.0]);
        assert_eq!(costs[table.index_of(&a).unwrap()], best);
    }

    #[test]
    fn simple_tx_has_one_plus_n_actions() {
        let t = simple_tx_table(&channel(4), ArrivalOptions::default());
        assert_eq!(t.len(), 3);
        assert_eq!(t.channel.receiver, Receiver::Simple);
        assert!(t.actions.iter().all(|a| a.powers().iter().filter(|&&p| p > 0.0).count() <= 1));
        let rc = simple_rc_table(&channel(4), ArrivalOptions::default());
        assert_eq!(rc.len(), 16);
    }

    #[test]
    fn baselines_off_under_huge_price() {
        let model = drone_model(0.1, 0.01);
        let p = Covariance::new(DMatrix::identity(4, 4) * 5.0).unwrap();
        let ch = channel(4);
        let opts = ArrivalOptions::default();
        assert_eq!(baseline_simple_tx(&p, &model, &ch, 1e6, opts).unwrap().total_power(), 0.0);
        assert_eq!(baseline_simple_rc(&p, &model, &ch, 1e6, opts).unwrap().total_power(), 0.0);
    }
}
