//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p mpr-estimation --test acceptance -- --nocapture --test-threads 1`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mpr_estimation::channel::{
    arrival_distribution_closed_form2, arrival_distribution_mc, marginal_success, Action, ArrivalOptions,
    ArrivalOutcome, ArrivalTable, ChannelParams, Receiver,
};
use mpr_estimation::estimator::{psi, state_update, Covariance, EstimatorState};
use mpr_estimation::linalg::block_diag;
use mpr_estimation::policy::{
    bellman_residuals, corollary_regions, discretize_seeded, greedy_index, thresholds, value_iteration,
    OneStepCost, Region, SolverConfig,
};
use mpr_estimation::scenario::{drone_model, pendulum_model, DRONE_PERIOD, PENDULUM_LENGTH, PENDULUM_PERIOD};
use mpr_estimation::simulator::{discounted_cost, run, sweep_mu, Curve, CurveKind, CurveSpec, Policy, SimConfig};
use mpr_estimation::stability::{scalar_threshold, Condition};
use mpr_estimation::SystemModel;

const R: f64 = 0.01;

fn report(id: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {id}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn drone() -> SystemModel {
    drone_model(DRONE_PERIOD, R)
}

fn pendulums() -> SystemModel {
    pendulum_model(PENDULUM_PERIOD, PENDULUM_LENGTH, R)
}

fn channel(levels: usize, receiver: Receiver) -> ChannelParams {
    ChannelParams::uniform(2, 1.0, 1.0, levels, 0.1, 0.75, receiver).unwrap()
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let scale = 10f64.powf(rng.random_range(-1.5..0.5));
    let l = DMatrix::from_fn(n, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    &l * l.transpose() + DMatrix::identity(n, n) * 1e-3
}

fn random_block_cov(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    (random_spd(rng, 2), random_spd(rng, 2))
}

fn cov(b1: &DMatrix<f64>, b2: &DMatrix<f64>) -> Covariance {
    Covariance::new(block_diag(&[b1.clone(), b2.clone()])).unwrap()
}

#[test]
fn c1_monte_carlo_matches_closed_form() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 1_000_000;
    let mut worst: f64 = 0.0;
    let mut misses = 0;
    for _ in 0..20 {
        let lambdas = [rng.random_range(0.2..5.0), rng.random_range(0.2..5.0)];
        let alpha = rng.random_range(0.05..0.95);
        let sigma2 = rng.random_range(0.0..1.0);
        let powers = [1.0 / lambdas[0], 1.0 / lambdas[1]];
        for receiver in [Receiver::Simple, Receiver::Sic] {
            let ch = ChannelParams::new(
                vec![1.0, 1.0],
                powers.iter().map(|&p| vec![0.0, p]).collect(),
                sigma2,
                alpha,
                receiver,
            )
            .unwrap();
            let a = Action::new(&powers, &ch).unwrap();
            let exact = arrival_distribution_closed_form2(&a, &ch).unwrap();
            let mc = arrival_distribution_mc(&a, &ch, n, &mut rng);
            for (p, f) in exact.probs().iter().zip(mc.probs()) {
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let z = if se > 0.0 { (f - p).abs() / se } else if (f - p).abs() < 1e-12 { 0.0 } else { f64::INFINITY };
                worst = worst.max(z);
                misses += (z > 3.0) as usize;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = misses == 0 && secs < 30.0;
    assert!(report(
        "1",
        pass,
        &format!("160 comparisons, {misses} beyond 3 SE, worst {worst:.2} SE, {secs:.1} s")
    ));
}

#[test]
fn c2_sic_identities_on_grid() {
    let base = ChannelParams::new(vec![1.0, 1.0], vec![vec![0.0, 0.25, 0.5, 0.75, 1.0]; 2], 0.1, 0.75, Receiver::Simple)
        .unwrap();
    let sic = base.with_receiver(Receiver::Sic);
    let mut max_gap: f64 = 0.0;
    let mut dominance = true;
    for l1 in 0..5 {
        for l2 in 0..5 {
            let a = Action::from_levels(&[l1, l2], &base).unwrap();
            let s = arrival_distribution_closed_form2(&a, &base).unwrap();
            let c = arrival_distribution_closed_form2(&a, &sic).unwrap();
            max_gap = max_gap.max((s.prob(ArrivalOutcome::none(2)) - c.prob(ArrivalOutcome::none(2))).abs());
            for i in 0..2 {
                dominance &= marginal_success(&c, i) >= marginal_success(&s, i);
            }
        }
    }
    let pass = max_gap <= 1e-12 && dominance;
    assert!(report("2", pass, &format!("max |p00 - p00_sic| = {max_gap:.1e}, dominance {dominance}")));
}

#[test]
fn c3_corollary_regions_match_greedy() {
    let model = drone();
    let opts = ArrivalOptions::default();
    let ch = channel(2, Receiver::Sic);
    let mu = 0.1;
    let table = ArrivalTable::full(ch.clone(), opts);
    let one = OneStepCost::new(&model, &table, mu);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut agree, mut boundary, mut total) = (0, 0, 0);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..1000 {
        let (b1, b2) = random_block_cov(&mut rng);
        let p = cov(&b1, &b2);
        let mut costs = one.costs(&p).unwrap();
        let best = greedy_index(&p, &model, &table, mu).unwrap();
        let region = corollary_regions(&p, &model, &ch, mu, opts).unwrap();
        seen.insert(region.levels().to_vec());
        costs.sort_by(f64::total_cmp);
        if (costs[1] - costs[0]).abs() <= 1e-9 * costs[0].abs() {
            boundary += 1;
            continue;
        }
        total += 1;
        agree += (region == table.actions[best]) as usize;
    }
    let simple = thresholds(&ch.with_receiver(Receiver::Simple), mu, opts).unwrap();
    let with_sic = thresholds(&ch, mu, opts).unwrap();
    let (mut subset, mut strict) = (true, false);
    for i in 0..=200 {
        for j in 0..=200 {
            let (x, y) = (i as f64 * 0.01, j as f64 * 0.01);
            let a = simple.classify(x, y) == Region::S11;
            let b = with_sic.classify(x, y) == Region::S11;
            subset &= !a || b;
            strict |= b && !a;
        }
    }
    let pass = agree == total && subset && strict;
    assert!(report(
        "3",
        pass,
        &format!(
            "{agree}/{total} agree off boundaries ({boundary} boundary), actions seen {seen:?}, S11 inclusion {subset}, strict {strict}"
        )
    ));
}

#[test]
fn c4_monotonicity_and_existence() {
    let model = drone();
    let opts = ArrivalOptions::default();
    let table = ArrivalTable::full(channel(4, Receiver::Sic), opts);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut violations = 0;
    let mus = [0.01, 0.1, 1.0];
    for k in 0..500 {
        let mu = mus[k % 3];
        let (b1, b2) = random_block_cov(&mut rng);
        let i = k % 2;
        let extra = random_spd(&mut rng, 2);
        let (c1, c2) = if i == 0 { (&b1 + &extra, b2.clone()) } else { (b1.clone(), &b2 + &extra) };
        let lo = greedy_index(&cov(&b1, &b2), &model, &table, mu).unwrap();
        let hi = greedy_index(&cov(&c1, &c2), &model, &table, mu).unwrap();
        if table.actions[hi].levels()[i] < table.actions[lo].levels()[i] {
            violations += 1;
        }
    }
    let two = ArrivalTable::full(channel(2, Receiver::Sic), opts);
    let mut found = Vec::new();
    for &mu in &mus {
        let hit = (0..=80).map(|e| 10f64.powf(-2.0 + 0.1 * e as f64)).find(|&c| {
            let p = Covariance::new(DMatrix::identity(4, 4) * c).unwrap();
            two.actions[greedy_index(&p, &model, &two, mu).unwrap()].levels() == [1, 1]
        });
        found.push(hit);
    }
    let psi_drops = (0..1000)
        .filter(|_| {
            let lo = random_spd(&mut rng, 2);
            let hi = &lo + random_spd(&mut rng, 2);
            psi(&hi, 0, &model).unwrap() < psi(&lo, 0, &model).unwrap()
        })
        .count();
    let pass = violations == 0 && found.iter().all(Option::is_some);
    assert!(report(
        "4",
        pass,
        &format!(
            "500 pairs, {violations} violations; full-power scale per mu {{0.01, 0.1, 1}}: {found:?}; psi decreased on {psi_drops}/1000 ordered block pairs"
        )
    ));
}

fn threshold_triple(alpha: f64, opts: ArrivalOptions) -> [f64; 3] {
    let ch = ChannelParams::uniform(2, 1.0, 1.0, 2, 0.1, alpha, Receiver::Simple).unwrap();
    [
        scalar_threshold(&ch, Condition::PerfectMultiPacket, 100.0, opts).unwrap(),
        scalar_threshold(&ch, Condition::WorstChannel, 100.0, opts).unwrap(),
        scalar_threshold(&ch.with_receiver(Receiver::Sic), Condition::PerfectMultiPacket, 100.0, opts).unwrap(),
    ]
}

#[test]
fn c5a_stability_threshold_ordering() {
    let start = Instant::now();
    let t = threshold_triple(0.75, ArrivalOptions::default());
    let pass = t[0] < t[1] && t[1] < t[2] && start.elapsed().as_secs() < 60;
    assert!(report(
        "5a",
        pass,
        &format!("alpha 0.75: cond1 no SIC {:.3} < cond2 {:.3} < cond1 SIC {:.3}", t[0], t[1], t[2])
    ));
}

#[test]
fn c5b_stability_triple_for_some_alpha() {
    let start = Instant::now();
    let target = [1.05, 1.6, 2.6];
    let opts = ArrivalOptions::default();
    let mut best = (f64::INFINITY, 0.0, [0.0; 3]);
    for k in 1..1000 {
        let alpha = k as f64 / 1000.0;
        let t = threshold_triple(alpha, opts);
        let err = t.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err < best.0 {
            best = (err, alpha, t);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (err, alpha, t) = best;
    let pass = err <= 0.1 && secs < 60.0;
    assert!(report(
        "5b",
        pass,
        &format!(
            "best alpha {alpha:.3}: ({:.3}, {:.3}, {:.3}), max deviation {err:.3} from (1.05, 1.6, 2.6), {secs:.1} s",
            t[0], t[1], t[2]
        )
    ));
}

#[test]
fn c6_value_iteration_on_drones() {
    let model = drone();
    let opts = ArrivalOptions::default();
    let table = ArrivalTable::full(channel(4, Receiver::Sic), opts);
    let cfg = SolverConfig { centroids: 200, beta: 0.9, mu: 0.1, ..SolverConfig::default() };
    let disc = discretize_seeded(&model, &table, &cfg).unwrap();
    let solved = value_iteration(&disc.centroids, &model, &table, &cfg).unwrap();
    let worst_ratio = solved
        .info
        .deltas
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    let residual = bellman_residuals(&solved, &model, &table).unwrap().into_iter().fold(0.0, f64::max);
    let policy = Policy::from_table(solved.clone(), table.clone()).unwrap();
    let greedy = Policy::greedy(table.clone(), cfg.mu);
    let p0 = Covariance::identity(4);
    let (runs, horizon) = (4000, 200);
    let (ct, st) = discounted_cost(&model, &policy, &p0, cfg.beta, cfg.mu, horizon, runs, 606).unwrap();
    let (cg, sg) = discounted_cost(&model, &greedy, &p0, cfg.beta, cfg.mu, horizon, runs, 606).unwrap();
    let slack = 2.0 * (st * st + sg * sg).sqrt();
    let pass = solved.info.converged
        && solved.centroids.len() == 200
        && worst_ratio <= 0.9 + 1e-9
        && residual <= cfg.tolerance()
        && ct <= cg + slack;
    assert!(report(
        "6",
        pass,
        &format!(
            "{} sweeps, worst delta ratio {worst_ratio:.12}, max residual {residual:.2e} (tol {:.2e}), discounted cost table {ct:.4} +- {st:.4} vs greedy {cg:.4} +- {sg:.4}",
            solved.info.iterations,
            cfg.tolerance()
        )
    ));
}

/// Price at which `build(mu)` consumes `target` mean power; power is non-increasing in the price.
fn price_for_power(
    model: &SystemModel,
    build: &dyn Fn(f64) -> Policy,
    target: f64,
    sim: &SimConfig,
) -> (f64, f64) {
    let power = |mu: f64| run(model, &build(mu), sim).unwrap().mean_power;
    let (mut lo, mut hi) = (0.0, 1.0);
    while power(hi) > target && hi < 1e4 {
        lo = hi;
        hi *= 2.0;
    }
    let mut best = (hi, power(hi));
    for _ in 0..14 {
        let mid = 0.5 * (lo + hi);
        let p = power(mid);
        if (p - target).abs() < (best.1 - target).abs() {
            best = (mid, p);
        }
        if p > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best
}

#[test]
fn c7_pendulum_comparison() {
    let start = Instant::now();
    let model = pendulums();
    let opts = ArrivalOptions::default();
    let sic = ArrivalTable::full(channel(4, Receiver::Sic), opts);
    let base = channel(4, Receiver::Sic);
    let coarse = SimConfig { horizon: 10_000, runs: 2, ..SimConfig::default() };
    let full = SimConfig { horizon: 100_000, runs: 10, ..SimConfig::default() };
    let sic_policy = |mu: f64| Policy::greedy(sic.clone(), mu);
    let rc_policy = |mu: f64| Policy::simple_rc(&base, mu, opts);
    let (mu_sic, _) = price_for_power(&model, &sic_policy, 1.0, &coarse);
    let rc_max = run(&model, &rc_policy(0.0), &full).unwrap();
    let (mu_rc, _) = if rc_max.mean_power <= 1.0 { (0.0, rc_max.mean_power) } else { price_for_power(&model, &rc_policy, 1.0, &coarse) };
    let m_sic = run(&model, &sic_policy(mu_sic), &full).unwrap();
    let m_rc = run(&model, &rc_policy(mu_rc), &full).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ratio = m_sic.mean_trace / m_rc.mean_trace;
    let at_one = (m_sic.mean_power - 1.0).abs() <= 0.05;
    let halved = at_one && ratio <= 0.6;
    let capped = rc_max.mean_power <= 1.02;
    report(
        "7a",
        halved && secs < 600.0,
        &format!(
            "SIC M=4 at mu {mu_sic:.4}: power {:.3}, trace {:.4}; simple rc at mu {mu_rc:.4}: power {:.3}, trace {:.4}; ratio {ratio:.3}",
            m_sic.mean_power, m_sic.mean_trace, m_rc.mean_power, m_rc.mean_trace
        ),
    );
    report(
        "7b",
        capped,
        &format!("simple rc mean power at mu = 0: {:.4} (trace {:.4}), {secs:.0} s total", rc_max.mean_power, rc_max.mean_trace),
    );
    assert!(halved && capped && secs < 600.0);
}

fn interpolate(curve: &Curve, x: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| p.result.as_ref().ok().map(|m| (m.mean_power, m.mean_trace)))
        .collect();
    pts.windows(2).find(|w| w[0].0 <= x && x <= w[1].0).map(|w| {
        if w[1].0 == w[0].0 {
            w[0].1.min(w[1].1)
        } else {
            w[0].1 + (w[1].1 - w[0].1) * (x - w[0].0) / (w[1].0 - w[0].0)
        }
    })
}

#[test]
fn c8_drone_infinite_horizon_trend() {
    let model = drone();
    let opts = ArrivalOptions::default();
    let solver = SolverConfig { centroids: 200, beta: 0.9, ..SolverConfig::default() };
    let specs = vec![
        CurveSpec { label: "sic_m4".into(), channel: channel(4, Receiver::Sic), kind: CurveKind::Infinite(solver.clone()) },
        CurveSpec { label: "sic_m2".into(), channel: channel(2, Receiver::Sic), kind: CurveKind::Infinite(solver.clone()) },
        CurveSpec { label: "nosic_m4".into(), channel: channel(4, Receiver::Simple), kind: CurveKind::Infinite(solver) },
    ];
    let mus = [0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0, 1.5, 2.0, 3.0, 5.0];
    let sim = SimConfig { horizon: 50_000, runs: 4, ..SimConfig::default() };
    let curves = sweep_mu(&model, &specs, &mus, &sim, opts).unwrap();
    for c in &curves {
        let pts: Vec<String> = c
            .points
            .iter()
            .filter_map(|p| p.result.as_ref().ok().map(|m| format!("({:.3}, {:.4})", m.mean_power, m.mean_trace)))
            .collect();
        println!("  {}: {}", c.label, pts.join(" "));
    }
    let grid: Vec<f64> = (1..50).map(|k| k as f64 * 0.01).collect();
    let mut compared = 0;
    let mut worse = Vec::new();
    for &x in &grid {
        if let (Some(m4), Some(m2)) = (interpolate(&curves[0], x), interpolate(&curves[1], x)) {
            compared += 1;
            if m4 > m2 {
                worse.push((x, m4, m2));
            }
        }
    }
    let gain = (1..200)
        .map(|k| k as f64 * 0.01)
        .filter_map(|x| Some((interpolate(&curves[2], x)? - interpolate(&curves[0], x)?) / interpolate(&curves[2], x)?))
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = compared > 0 && worse.is_empty() && gain >= 0.05;
    assert!(report(
        "8",
        pass,
        &format!(
            "{compared} common power points below 0.5, M4 worse than M2 at {worse:?}; max SIC gain over no SIC {:.1}%",
            100.0 * gain
        )
    ));
}

/// Standard Kalman step with output matrix `Gamma C`; the innovation covariance
/// is singular on lost rows, so a pseudo-inverse is used.
fn textbook_step(
    model: &SystemModel,
    p: &DMatrix<f64>,
    xhat: &DVector<f64>,
    y: &DVector<f64>,
    received: &[bool],
) -> (DVector<f64>, DMatrix<f64>) {
    let all: Vec<usize> = (0..model.n_sensors()).collect();
    let (c, r) = model.stacked(&all);
    let mut gamma = DMatrix::<f64>::zeros(c.nrows(), c.nrows());
    let mut row = 0;
    for (i, s) in model.sensors().iter().enumerate() {
        for _ in 0..s.c.nrows() {
            gamma[(row, row)] = if received[i] { 1.0 } else { 0.0 };
            row += 1;
        }
    }
    let h = &gamma * &c;
    let s = &gamma * (&c * p * c.transpose() + r) * gamma.transpose();
    let s_pinv = s.pseudo_inverse(1e-12).unwrap();
    let k = p * h.transpose() * s_pinv;
    let x_next = model.a() * (xhat + &k * (&gamma * y - &h * xhat));
    let p_next = model.a() * (p - &k * &h * p) * model.a().transpose() + model.q();
    (x_next, p_next)
}

#[test]
fn c9_estimator_matches_textbook_filter() {
    let model = drone();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = random_spd(&mut rng, 4) + DMatrix::identity(4, 4) * 0.05;
        let xhat = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let received = [rng.random_bool(0.5), rng.random_bool(0.5)];
        let gamma = ArrivalOutcome::from_slice(&received);
        let meas: Vec<Option<DVector<f64>>> =
            (0..2).map(|i| received[i].then(|| DVector::from_element(1, y[i]))).collect();
        let state = EstimatorState::new(xhat.clone(), Covariance::new(p.clone()).unwrap()).unwrap();
        let next = state_update(&state, &gamma, &meas, &model).unwrap();
        let (x_ref, p_ref) = textbook_step(&model, &p, &xhat, &y, &received);
        worst = worst.max((next.xhat - x_ref).abs().max()).max((next.cov.matrix() - p_ref).abs().max());
    }
    assert!(report("9", worst <= 1e-10, &format!("100 random cases, max abs deviation {worst:.2e}")));
}
