//! Rayleigh-fading multi-access channel with SINR-threshold reception.
//!
//! Each sensor `i` transmits with a power drawn from its finite set, the
//! received power is `s_i * r_i * P_i` with `r_i ~ Exp(1)`, and a packet is
//! decoded when its SINR exceeds `alpha`. Two receivers are modeled: the
//! simple one decodes every packet against the full interference, the SIC
//! one decodes in descending received-power order and cancels each decoded
//! packet before trying the next.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Monte Carlo sample count for arrival distributions without a closed form.
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;

const MC_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Receiver {
    Simple,
    Sic,
}

impl fmt::Display for Receiver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Receiver::Simple => write!(f, "simple"),
            Receiver::Sic => write!(f, "sic"),
        }
    }
}

impl std::str::FromStr for Receiver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(Receiver::Simple),
            "sic" => Ok(Receiver::Sic),
            other => Err(Error::InvalidChannel(format!("unknown receiver `{other}`"))),
        }
    }
}

/// Link parameters shared by all sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Slow-fading power gain per sensor.
    pub gains: Vec<f64>,
    /// Ascending transmit powers per sensor, first entry 0.
    pub power_sets: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub alpha: f64,
    pub receiver: Receiver,
}

impl ChannelParams {
    pub fn new(
        gains: Vec<f64>,
        power_sets: Vec<Vec<f64>>,
        sigma2: f64,
        alpha: f64,
        receiver: Receiver,
    ) -> Result<Self> {
        let params = ChannelParams { gains, power_sets, sigma2, alpha, receiver };
        params.validate()?;
        Ok(params)
    }

    /// `n` sensors sharing the gain `s` and `levels` equally spaced powers in `[0, p_max]`.
    pub fn uniform(
        n: usize,
        s: f64,
        p_max: f64,
        levels: usize,
        sigma2: f64,
        alpha: f64,
        receiver: Receiver,
    ) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidChannel("at least two power levels are required".into()));
        }
        let set: Vec<f64> = (0..levels)
            .map(|k| p_max * k as f64 / (levels - 1) as f64)
            .collect();
        Self::new(vec![s; n], vec![set; n], sigma2, alpha, receiver)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gains.len();
        if n == 0 {
            return Err(Error::InvalidChannel("no sensors".into()));
        }
        if n > 16 {
            return Err(Error::InvalidChannel(format!("{n} sensors exceed the supported maximum of 16")));
        }
        if self.power_sets.len() != n {
            return Err(Error::InvalidChannel(format!(
                "{} power sets for {n} sensors",
                self.power_sets.len()
            )));
        }
        for (i, &s) in self.gains.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidChannel(format!("gain of sensor {i} must be positive")));
            }
        }
        for (i, set) in self.power_sets.iter().enumerate() {
            if set.len() < 2 || set[0] != 0.0 {
                return Err(Error::InvalidChannel(format!(
                    "power set of sensor {i} must start at 0 and hold a positive level"
                )));
            }
            if set.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
                return Err(Error::InvalidChannel(format!(
                    "power set of sensor {i} must be strictly ascending"
                )));
            }
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidChannel("sigma2 must be nonnegative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidChannel("alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn n_sensors(&self) -> usize {
        self.gains.len()
    }

    pub fn max_power(&self, i: usize) -> f64 {
        *self.power_sets[i].last().expect("validated power set")
    }

    /// Largest maximum power over sensors; used to normalize power consumption.
    pub fn reference_power(&self) -> f64 {
        (0..self.n_sensors()).map(|i| self.max_power(i)).fold(0.0, f64::max)
    }

    pub fn with_receiver(&self, receiver: Receiver) -> Self {
        ChannelParams { receiver, ..self.clone() }
    }

    /// Same channel restricted to the two levels `{0, P_max}` per sensor.
    pub fn two_level(&self) -> Self {
        let power_sets = (0..self.n_sensors()).map(|i| vec![0.0, self.max_power(i)]).collect();
        ChannelParams { power_sets, ..self.clone() }
    }

    /// `lambda_i = 1 / (s_i P_i)`, `None` for zero power.
    pub fn rate(&self, i: usize, power: f64) -> Option<f64> {
        (power > 0.0).then(|| 1.0 / (self.gains[i] * power))
    }

    fn cache_key(&self, action: &Action) -> Vec<u64> {
        let mut key = vec![self.sigma2.to_bits(), self.alpha.to_bits(), self.receiver as u64];
        key.extend(self.gains.iter().map(|g| g.to_bits()));
        key.extend(action.powers.iter().map(|p| p.to_bits()));
        key
    }
}

/// One transmit power per sensor, each taken from that sensor's power set.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    levels: Vec<usize>,
    powers: Vec<f64>,
}

impl Action {
    pub fn new(powers: &[f64], params: &ChannelParams) -> Result<Self> {
        if powers.len() != params.n_sensors() {
            return Err(Error::Dimension(format!(
                "action has {} powers for {} sensors",
                powers.len(),
                params.n_sensors()
            )));
        }
        let levels = powers
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                params.power_sets[i]
                    .iter()
                    .position(|&q| q == p)
                    .ok_or(Error::InvalidAction { sensor: i, power: p })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Action { levels, powers: powers.to_vec() })
    }

    pub fn from_levels(levels: &[usize], params: &ChannelParams) -> Result<Self> {
        if levels.len() != params.n_sensors() {
            return Err(Error::Dimension(format!(
                "action has {} levels for {} sensors",
                levels.len(),
                params.n_sensors()
            )));
        }
        let powers = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                params.power_sets[i]
                    .get(l)
                    .copied()
                    .ok_or(Error::InvalidAction { sensor: i, power: f64::NAN })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Action { levels: levels.to_vec(), powers })
    }

    pub fn zero(params: &ChannelParams) -> Self {
        let n = params.n_sensors();
        Action { levels: vec![0; n], powers: vec![0.0; n] }
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn total_power(&self) -> f64 {
        self.powers.iter().sum()
    }

    pub fn n_sensors(&self) -> usize {
        self.powers.len()
    }
}

/// Every action of the grid `P_1 x ... x P_N`, ordered by total power and
/// then lexicographically by level indices. Scanning this list with a
/// strict `<` realizes the tie-breaking rule used by all solvers.
pub fn action_space(params: &ChannelParams) -> Vec<Action> {
    let sizes: Vec<usize> = params.power_sets.iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().product();
    let mut actions = Vec::with_capacity(total);
    let mut levels = vec![0usize; sizes.len()];
    for _ in 0..total {
        actions.push(Action::from_levels(&levels, params).expect("levels within range"));
        for d in (0..sizes.len()).rev() {
            levels[d] += 1;
            if levels[d] < sizes[d] {
                break;
            }
            levels[d] = 0;
        }
    }
    sort_actions(&mut actions);
    actions
}

pub fn sort_actions(actions: &mut [Action]) {
    actions.sort_by(|a, b| {
        a.total_power()
            .partial_cmp(&b.total_power())
            .unwrap()
            .then_with(|| a.levels.cmp(&b.levels))
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedPowers(pub Vec<f64>);

/// Success indicator per sensor, bit `i` for sensor `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArrivalOutcome {
    bits: u32,
    n: usize,
}

impl ArrivalOutcome {
    pub fn new(bits: u32, n: usize) -> Self {
        debug_assert!(n <= 16 && (n == 32 || bits >> n == 0));
        ArrivalOutcome { bits, n }
    }

    pub fn from_slice(gamma: &[bool]) -> Self {
        let bits = gamma
            .iter()
            .enumerate()
            .fold(0u32, |acc, (i, &g)| if g { acc | (1 << i) } else { acc });
        ArrivalOutcome { bits, n: gamma.len() }
    }

    pub fn none(n: usize) -> Self {
        ArrivalOutcome { bits: 0, n }
    }

    pub fn all(n: usize) -> Self {
        ArrivalOutcome { bits: (1u32 << n) - 1, n }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn received(&self, i: usize) -> bool {
        self.bits >> i & 1 == 1
    }

    pub fn count(&self) -> u32 {
        self.bits.count_ones()
    }

    /// `"10"` means sensor 0 received, sensor 1 lost.
    pub fn to_bit_string(&self) -> String {
        (0..self.n).map(|i| if self.received(i) { '1' } else { '0' }).collect()
    }
}

/// Probability of each of the `2^N` outcomes, indexed by outcome bits.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalDistribution {
    n: usize,
    probs: Vec<f64>,
}

impl ArrivalDistribution {
    pub fn from_probs(n: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != 1 << n {
            return Err(Error::Dimension(format!("{} probabilities for {n} sensors", probs.len())));
        }
        if probs.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
            return Err(Error::InvalidChannel("probability outside [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidChannel(format!("probabilities sum to {total}")));
        }
        Ok(ArrivalDistribution { n, probs })
    }

    pub fn point_mass(outcome: ArrivalOutcome) -> Self {
        let mut probs = vec![0.0; 1 << outcome.n];
        probs[outcome.bits as usize] = 1.0;
        ArrivalDistribution { n: outcome.n, probs }
    }

    pub fn n_sensors(&self) -> usize {
        self.n
    }

    pub fn prob(&self, outcome: ArrivalOutcome) -> f64 {
        self.probs[outcome.bits as usize]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (ArrivalOutcome, f64)> + '_ {
        let n = self.n;
        self.probs
            .iter()
            .enumerate()
            .map(move |(b, &p)| (ArrivalOutcome::new(b as u32, n), p))
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// `P(gamma_i = 1)` under the distribution.
pub fn marginal_success(dist: &ArrivalDistribution, i: usize) -> f64 {
    dist.iter().filter(|(o, _)| o.received(i)).map(|(_, p)| p).sum()
}

/// Draws `P^rx_i = s_i r_i P_i` with i.i.d. `r_i ~ Exp(1)`.
pub fn sample_received_powers<R: Rng + ?Sized>(
    action: &Action,
    params: &ChannelParams,
    rng: &mut R,
) -> ReceivedPowers {
    ReceivedPowers(
        action
            .powers
            .iter()
            .zip(&params.gains)
            .map(|(&p, &s)| {
                let r: f64 = rng.sample(Exp1);
                if p == 0.0 {
                    0.0
                } else {
                    s * r * p
                }
            })
            .collect(),
    )
}

/// Applies the receiver's decoding rule to one realization of received powers.
pub fn decode(prx: &ReceivedPowers, params: &ChannelParams) -> ArrivalOutcome {
    let p = &prx.0;
    let n = p.len();
    let alpha = params.alpha;
    let sigma2 = params.sigma2;
    let mut bits = 0u32;
    match params.receiver {
        Receiver::Simple => {
            let total: f64 = p.iter().sum();
            for i in 0..n {
                if p[i] > 0.0 && p[i] > alpha * (total - p[i] + sigma2) {
                    bits |= 1 << i;
                }
            }
        }
        Receiver::Sic => {
            let mut order: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
            // stable: equal powers keep ascending index order
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
            for (k, &i) in order.iter().enumerate() {
                let interference: f64 = order[k + 1..].iter().map(|&j| p[j]).sum();
                if p[i] > alpha * (interference + sigma2) {
                    bits |= 1 << i;
                } else {
                    break;
                }
            }
        }
    }
    ArrivalOutcome::new(bits, n)
}

/// Exact two-sensor arrival distribution for either receiver.
///
/// Requires `alpha` in `(0, 1)` whenever both sensors transmit.
pub fn arrival_distribution_closed_form2(
    action: &Action,
    params: &ChannelParams,
) -> Result<ArrivalDistribution> {
    if params.n_sensors() != 2 || action.n_sensors() != 2 {
        return Err(Error::ClosedFormUnavailable(format!(
            "closed form needs two sensors, got {}",
            params.n_sensors()
        )));
    }
    let a = params.alpha;
    let s2 = params.sigma2;
    let l1 = params.rate(0, action.powers[0]);
    let l2 = params.rate(1, action.powers[1]);
    // probs indexed by bits: 0 = (0,0), 1 = (1,0), 2 = (0,1), 3 = (1,1)
    let probs = match (l1, l2) {
        (None, None) => vec![1.0, 0.0, 0.0, 0.0],
        (Some(l1), None) => {
            let q = (-a * l1 * s2).exp();
            vec![1.0 - q, q, 0.0, 0.0]
        }
        (None, Some(l2)) => {
            let q = (-a * l2 * s2).exp();
            vec![1.0 - q, 0.0, q, 0.0]
        }
        (Some(l1), Some(l2)) => {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::ClosedFormUnavailable(format!(
                    "alpha = {a} outside (0, 1) with both sensors transmitting"
                )));
            }
            let t1 = l1 / (l1 + a * l2);
            let t2 = l2 / (l2 + a * l1);
            let both = (-(l1 + l2) * a / (1.0 - a) * s2).exp();
            let p11 = (t1 + t2 - 1.0) * both;
            // P(gamma_1 = 1) and P(gamma_2 = 1) without cancellation
            let m1 = t2 * (-a * l1 * s2).exp();
            let m2 = t1 * (-a * l2 * s2).exp();
            let p00 = 1.0 - m1 - m2 + p11;
            match params.receiver {
                Receiver::Simple => vec![p00, m1 - p11, m2 - p11, p11],
                Receiver::Sic => {
                    // strongest decoded, weaker one then only fights the noise
                    let c1 = (-a * s2 * (l2 + a * l1)).exp();
                    let c2 = (-a * s2 * (l1 + a * l2)).exp();
                    let p10 = m1 * (1.0 - c1);
                    let p01 = m2 * (1.0 - c2);
                    let p11 = m1 * c1 + m2 * c2 - p11;
                    vec![p00, p10, p01, p11]
                }
            }
        }
    };
    Ok(ArrivalDistribution { n: 2, probs: probs.into_iter().map(|p| p.clamp(0.0, 1.0)).collect() })
}

/// Monte Carlo estimate of the arrival distribution.
///
/// A 64-bit key is drawn from `rng`; samples are generated in fixed-size
/// chunks, chunk `c` on ChaCha stream `c` of that key, so the result does not
/// depend on the number of worker threads.
pub fn arrival_distribution_mc<R: Rng + ?Sized>(
    action: &Action,
    params: &ChannelParams,
    n_samples: usize,
    rng: &mut R,
) -> ArrivalDistribution {
    let key: u64 = rng.random();
    arrival_distribution_mc_keyed(action, params, n_samples, key)
}

pub(crate) fn arrival_distribution_mc_keyed(
    action: &Action,
    params: &ChannelParams,
    n_samples: usize,
    key: u64,
) -> ArrivalDistribution {
    let n = params.n_sensors();
    let n_samples = n_samples.max(1);
    if action.total_power() == 0.0 {
        return ArrivalDistribution::point_mass(ArrivalOutcome::none(n));
    }
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let counts = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            rng.set_stream(c as u64);
            let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut counts = vec![0u64; 1 << n];
            for _ in 0..len {
                let prx = sample_received_powers(action, params, &mut rng);
                counts[decode(&prx, params).bits as usize] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; 1 << n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let probs = counts.iter().map(|&c| c as f64 / n_samples as f64).collect();
    ArrivalDistribution { n, probs }
}

/// Whether the exact two-sensor expressions apply to `(action, params)`.
pub fn closed_form_available(action: &Action, params: &ChannelParams) -> bool {
    params.n_sensors() == 2
        && (action.powers.iter().any(|&p| p == 0.0) || (params.alpha > 0.0 && params.alpha < 1.0))
}

/// Settings for arrival distributions that need Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalOptions {
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for ArrivalOptions {
    fn default() -> Self {
        ArrivalOptions { mc_samples: DEFAULT_MC_SAMPLES, seed: 0x5eed }
    }
}

/// Closed form when available, seeded Monte Carlo otherwise.
pub fn arrival_distribution(
    action: &Action,
    params: &ChannelParams,
    opts: ArrivalOptions,
) -> ArrivalDistribution {
    if closed_form_available(action, params) {
        arrival_distribution_closed_form2(action, params).expect("closed form guarded")
    } else if action.total_power() == 0.0 {
        ArrivalDistribution::point_mass(ArrivalOutcome::none(params.n_sensors()))
    } else {
        let key = opts.seed ^ fxhash(&params.cache_key(action));
        arrival_distribution_mc_keyed(action, params, opts.mc_samples, key)
    }
}

fn fxhash(words: &[u64]) -> u64 {
    words.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &w| {
        (h.rotate_left(5) ^ w).wrapping_mul(0x517c_c1b7_2722_0a95)
    })
}

/// Memoizes arrival distributions per `(action, channel)` pair.
#[derive(Debug, Default)]
pub struct ArrivalCache {
    opts: ArrivalOptions,
    map: Mutex<HashMap<Vec<u64>, ArrivalDistribution>>,
}

impl ArrivalCache {
    pub fn new(opts: ArrivalOptions) -> Self {
        ArrivalCache { opts, map: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, action: &Action, params: &ChannelParams) -> ArrivalDistribution {
        let key = params.cache_key(action);
        if let Some(d) = self.map.lock().unwrap().get(&key) {
            return d.clone();
        }
        let d = arrival_distribution(action, params, self.opts);
        self.map.lock().unwrap().insert(key, d.clone());
        d
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Arrival distributions of a fixed list of actions over one channel.
#[derive(Debug, Clone)]
pub struct ArrivalTable {
    pub channel: ChannelParams,
    pub actions: Vec<Action>,
    pub dists: Vec<ArrivalDistribution>,
}

impl ArrivalTable {
    /// Actions are reordered into tie-breaking order (total power, then levels).
    pub fn new(channel: ChannelParams, mut actions: Vec<Action>, opts: ArrivalOptions) -> Self {
        sort_actions(&mut actions);
        let dists = actions
            .par_iter()
            .map(|a| arrival_distribution(a, &channel, opts))
            .collect();
        ArrivalTable { channel, actions, dists }
    }

    /// Table over the full action grid of `channel`.
    pub fn full(channel: ChannelParams, opts: ArrivalOptions) -> Self {
        let actions = action_space(&channel);
        Self::new(channel, actions, opts)
    }

    pub fn with_cache(channel: ChannelParams, mut actions: Vec<Action>, cache: &ArrivalCache) -> Self {
        sort_actions(&mut actions);
        let dists = actions.iter().map(|a| cache.get(a, &channel)).collect();
        ArrivalTable { channel, actions, dists }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.channel.n_sensors()
    }

    pub fn index_of(&self, action: &Action) -> Option<usize> {
        self.actions.iter().position(|a| a.levels == action.levels)
    }
}
