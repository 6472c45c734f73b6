//! Sufficient mean-square stability conditions for the remote estimator and
//! a modified Riccati iteration used as a numerical boundedness check.

use nalgebra::{Complex, DMatrix};

use crate::channel::{arrival_distribution, Action, ArrivalOptions, ChannelParams};
use crate::estimator::SystemModel;
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, spd_inverse, symmetrize};

/// Largest subset size enumerated by [`best_subset`].
pub const MAX_SUBSET_SENSORS: usize = 8;

const DIVERGENCE_GUARD: f64 = 1e12;

/// `1 - 1 / prod |lambda_u|^2` over eigenvalues with modulus above one.
pub fn lambda_capital(a: &DMatrix<f64>) -> f64 {
    let prod: f64 = a
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .filter(|&m| m > 1.0)
        .map(|m| m * m)
        .product();
    1.0 - 1.0 / prod
}

fn check_subset(subset: &[usize], n_sensors: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Config { field: "subset".into(), reason: "must be nonempty".into() });
    }
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != subset.len() || sorted.iter().any(|&i| i >= n_sensors) {
        return Err(Error::Config { field: "subset".into(), reason: "indices must be distinct sensors".into() });
    }
    Ok(())
}

/// Probability that every sensor of `subset` is decoded when exactly those
/// sensors transmit at maximum power.
pub fn perfect_mp_probability(subset: &[usize], channel: &ChannelParams, opts: ArrivalOptions) -> Result<f64> {
    check_subset(subset, channel.n_sensors())?;
    let powers: Vec<f64> = (0..channel.n_sensors())
        .map(|i| if subset.contains(&i) { channel.max_power(i) } else { 0.0 })
        .collect();
    let action = Action::new(&powers, channel)?;
    let dist = arrival_distribution(&action, channel, opts);
    Ok(dist.iter().filter(|(o, _)| subset.iter().all(|&i| o.received(i))).map(|(_, p)| p).sum())
}

/// Smallest single-transmitter success probability `exp(-alpha sigma2 / (s_i P_i,max))` over `subset`.
pub fn worst_channel_probability(subset: &[usize], channel: &ChannelParams) -> Result<f64> {
    check_subset(subset, channel.n_sensors())?;
    Ok(subset
        .iter()
        .map(|&i| (-channel.alpha * channel.sigma2 / (channel.gains[i] * channel.max_power(i))).exp())
        .fold(1.0, f64::min))
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|v| Complex::new(v, 0.0))
}

fn complex_rank(m: &DMatrix<Complex<f64>>, tol: f64) -> usize {
    m.clone().svd(false, false).singular_values.iter().filter(|&&s| s > tol).count()
}

fn rank_tol(a: &DMatrix<f64>) -> f64 {
    1e-8 * a.norm().max(f64::MIN_POSITIVE)
}

/// PBH test: `[lambda I - A; C]` has full column rank for every eigenvalue with `|lambda| >= 1`.
pub fn is_detectable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let tol = rank_tol(a);
    let ac = to_complex(a);
    let cc = to_complex(c);
    a.complex_eigenvalues().iter().filter(|l| l.norm() >= 1.0 - 1e-12).all(|&l| {
        let mut m = DMatrix::zeros(n + c.nrows(), n);
        m.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) * l - &ac));
        m.view_mut((n, 0), (c.nrows(), n)).copy_from(&cc);
        complex_rank(&m, tol) == n
    })
}

/// PBH test: `[lambda I - A, B]` has full row rank for every eigenvalue.
pub fn is_reachable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let tol = rank_tol(a);
    let ac = to_complex(a);
    let bc = to_complex(b);
    a.complex_eigenvalues().iter().all(|&l| {
        let mut m = DMatrix::zeros(n, n + b.ncols());
        m.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) * l - &ac));
        m.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        complex_rank(&m, tol) == n
    })
}

/// `g(X) = A X A' + Q - p A X C' (C X C' + R)^{-1} C X A'`.
pub fn modified_riccati(
    x: &DMatrix<f64>,
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: f64,
) -> Result<DMatrix<f64>> {
    let s = c * x * c.transpose() + r;
    let s_inv = spd_inverse(&s, "innovation covariance")?;
    let axc = a * x * c.transpose();
    Ok(symmetrize(&(a * x * a.transpose() + q - (&axc * s_inv * axc.transpose()) * p)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiCheck {
    pub bounded: bool,
    pub diverged: bool,
    /// `Tr X_k` for every iterate.
    pub traces: Vec<f64>,
}

/// Iterates the modified Riccati map from `x1`. Bounded means the relative
/// trace change stayed below `tol` over a trailing window of 20 iterates;
/// diverged means the trace exceeded `1e12`.
#[allow(clippy::too_many_arguments)]
pub fn riccati_iteration(
    x1: &DMatrix<f64>,
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: f64,
    horizon: usize,
    tol: f64,
) -> Result<RiccatiCheck> {
    const WINDOW: usize = 20;
    let mut x = x1.clone();
    let mut traces = vec![x.trace()];
    let mut calm = 0;
    for _ in 1..horizon.max(1) {
        x = modified_riccati(&x, a, q, c, r, p)?;
        let tr = x.trace();
        let prev = *traces.last().unwrap();
        traces.push(tr);
        if !(tr.is_finite() && tr <= DIVERGENCE_GUARD) {
            return Ok(RiccatiCheck { bounded: false, diverged: true, traces });
        }
        if (tr - prev).abs() <= tol * prev.abs().max(1e-300) {
            calm += 1;
            if calm >= WINDOW {
                return Ok(RiccatiCheck { bounded: true, diverged: false, traces });
            }
        } else {
            calm = 0;
        }
    }
    Ok(RiccatiCheck { bounded: false, diverged: false, traces })
}

/// Modified Riccati iteration for `subset` at `p = p_mp`, from `P(1|0) = A A' + Q`.
pub fn riccati_boundedness(
    subset: &[usize],
    model: &SystemModel,
    channel: &ChannelParams,
    horizon: usize,
    tol: f64,
    opts: ArrivalOptions,
) -> Result<RiccatiCheck> {
    let p = perfect_mp_probability(subset, channel, opts)?;
    let (c, r) = model.stacked(subset);
    let x1 = model.a() * model.a().transpose() + model.q();
    riccati_iteration(&x1, model.a(), model.q(), &c, &r, p, horizon, tol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub subset: Vec<usize>,
    pub detectable: bool,
    pub reachable: bool,
    pub p_mp: f64,
    pub p_wc: f64,
    pub lambda_a: f64,
    /// `Lambda(A^|J|)`.
    pub lambda_a_pow: f64,
    pub cond1: bool,
    pub cond2: bool,
    pub riccati: RiccatiCheck,
}

impl StabilityReport {
    pub fn to_text(&self) -> String {
        let subset: Vec<String> = self.subset.iter().map(|i| i.to_string()).collect();
        let rows = [
            ("subset", format!("{{{}}}", subset.join(","))),
            ("detectable", self.detectable.to_string()),
            ("reachable", self.reachable.to_string()),
            ("p_mp", format!("{:.6}", self.p_mp)),
            ("p_wc", format!("{:.6}", self.p_wc)),
            ("lambda_A", format!("{:.6}", self.lambda_a)),
            ("lambda_A_pow", format!("{:.6}", self.lambda_a_pow)),
            ("cond1", self.cond1.to_string()),
            ("cond2", self.cond2.to_string()),
            ("riccati_bounded", self.riccati.bounded.to_string()),
            ("riccati_final_trace", format!("{:.6e}", self.riccati.traces.last().copied().unwrap_or(f64::NAN))),
        ];
        rows.iter().map(|(k, v)| format!("{k:<20} {v}\n")).collect()
    }
}

/// Horizon and tolerance of the boundedness check attached to every report.
pub const REPORT_RICCATI_HORIZON: usize = 20_000;
pub const REPORT_RICCATI_TOL: f64 = 1e-10;

pub fn check_lemma(
    subset: &[usize],
    model: &SystemModel,
    channel: &ChannelParams,
    opts: ArrivalOptions,
) -> Result<StabilityReport> {
    check_subset(subset, model.n_sensors())?;
    if channel.n_sensors() != model.n_sensors() {
        return Err(Error::Dimension("channel and model disagree on the sensor count".into()));
    }
    let a = model.a();
    let (c, _) = model.stacked(subset);
    let detectable = is_detectable(a, &c);
    let reachable = is_reachable(a, &psd_sqrt(model.q()));
    let p_mp = perfect_mp_probability(subset, channel, opts)?;
    let p_wc = worst_channel_probability(subset, channel)?;
    let lambda_a = lambda_capital(a);
    let lambda_a_pow = lambda_capital(&a.pow(subset.len() as u32));
    let structural = detectable && reachable;
    let riccati = riccati_boundedness(subset, model, channel, REPORT_RICCATI_HORIZON, REPORT_RICCATI_TOL, opts)?;
    Ok(StabilityReport {
        subset: subset.to_vec(),
        detectable,
        reachable,
        p_mp,
        p_wc,
        lambda_a,
        lambda_a_pow,
        cond1: structural && p_mp > lambda_a,
        cond2: structural && p_wc > lambda_a_pow,
        riccati,
    })
}

/// Report of the nonempty subset with the largest `p_mp` (ties to the earlier
/// subset in binary-counting order).
pub fn best_subset(model: &SystemModel, channel: &ChannelParams, opts: ArrivalOptions) -> Result<StabilityReport> {
    let n = model.n_sensors();
    if n > MAX_SUBSET_SENSORS {
        return Err(Error::Unsupported(format!("subset search is limited to {MAX_SUBSET_SENSORS} sensors")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 1u32..1 << n {
        let subset: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        let p = perfect_mp_probability(&subset, channel, opts)?;
        if best.as_ref().is_none_or(|(b, _)| p > *b) {
            best = Some((p, subset));
        }
    }
    check_lemma(&best.expect("at least one subset").1, model, channel, opts)
}

/// Which sufficient condition a threshold search evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    PerfectMultiPacket,
    WorstChannel,
}

/// Largest `lambda` for which `condition` holds on the scalar plant
/// `x+ = lambda x + w` observed by every sensor of `channel`, with all
/// sensors in the subset. Found by bisection on `[1, upper]`.
pub fn scalar_threshold(channel: &ChannelParams, condition: Condition, upper: f64, opts: ArrivalOptions) -> Result<f64> {
    let n = channel.n_sensors();
    let subset: Vec<usize> = (0..n).collect();
    let holds = |lambda: f64| -> Result<bool> {
        let sensors = (0..n)
            .map(|_| crate::estimator::Sensor { c: DMatrix::from_element(1, 1, 1.0), r: DMatrix::from_element(1, 1, 1.0) })
            .collect();
        let model = SystemModel::new(DMatrix::from_element(1, 1, lambda), DMatrix::from_element(1, 1, 1.0), sensors)?;
        let a = model.a();
        let (c, _) = model.stacked(&subset);
        let structural = is_detectable(a, &c) && is_reachable(a, &psd_sqrt(model.q()));
        Ok(structural
            && match condition {
                Condition::PerfectMultiPacket => perfect_mp_probability(&subset, channel, opts)? > lambda_capital(a),
                Condition::WorstChannel => {
                    worst_channel_probability(&subset, channel)? > lambda_capital(&a.pow(n as u32))
                }
            })
    };
    if !holds(1.0)? {
        return Ok(1.0);
    }
    if holds(upper)? {
        return Ok(upper);
    }
    let (mut lo, mut hi) = (1.0, upper);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if holds(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn square(entries: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, entries)
    }

    proptest! {
        #[test]
        fn lambda_capital_is_similarity_invariant(
            a in prop::collection::vec(-2.0f64..2.0, 9), t in prop::collection::vec(-1.0f64..1.0, 9),
        ) {
            let a = square(&a);
            let t = square(&t) + DMatrix::identity(3, 3) * 2.5;
            let t_inv = t.clone().try_inverse().unwrap();
            let similar = &t * &a * t_inv;
            prop_assert!((lambda_capital(&similar) - lambda_capital(&a)).abs() < 1e-7);
        }

        #[test]
        fn riccati_limit_shrinks_with_arrival_probability(p in 0.6f64..0.99, dp in 0.0f64..0.4) {
            let high_p = (p + dp).min(1.0);
            let model = crate::scenario::drone_model(0.1, 0.01);
            let (c, r) = model.stacked(&[0, 1]);
            let x1 = model.a() * model.a().transpose() + model.q();
            let limit = |p| riccati_iteration(&x1, model.a(), model.q(), &c, &r, p, 20_000, 1e-12).unwrap();
            let (low, high) = (limit(p), limit(high_p));
            prop_assert!(low.bounded && high.bounded);
            let (tl, th) = (*low.traces.last().unwrap(), *high.traces.last().unwrap());
            prop_assert!(th <= tl * (1.0 + 1e-9));
        }
    }
}
