//! Scenario documents (TOML) and the two built-in presets.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{ArrivalOptions, ChannelParams, Receiver};
use crate::estimator::{Covariance, Sensor, SystemModel};
use crate::error::{Error, Result};
use crate::policy::SolverConfig;
use crate::simulator::SimConfig;

/// Drone sampling period in seconds.
pub const DRONE_PERIOD: f64 = 0.1;
/// Pendulum sampling period in seconds.
pub const PENDULUM_PERIOD: f64 = 0.01;
pub const PENDULUM_LENGTH: f64 = 0.2;
pub const GRAVITY: f64 = 9.81;
/// Measurement noise variance shared by both presets.
pub const PRESET_MEASUREMENT_NOISE: f64 = 0.01;

pub type Rows = Vec<Vec<f64>>;

fn to_matrix(rows: &Rows, field: &str) -> Result<DMatrix<f64>> {
    let bad = |reason: &str| Error::Config { field: field.to_string(), reason: reason.to_string() };
    let r = rows.len();
    if r == 0 {
        return Err(bad("matrix has no rows"));
    }
    let c = rows[0].len();
    if c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(bad("rows must be nonempty and of equal length"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad("entries must be finite"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

/// One independent subsystem observed by its own sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsystemSpec {
    pub a: Rows,
    pub q: Rows,
    pub c: Rows,
    pub r: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub c: Rows,
    pub r: Rows,
}

/// Either a list of decoupled subsystems or a coupled `(A, Q, sensors)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SystemSpec {
    Decoupled { subsystems: Vec<SubsystemSpec> },
    Coupled { a: Rows, q: Rows, sensors: Vec<SensorSpec> },
}

impl SystemSpec {
    pub fn build(&self) -> Result<SystemModel> {
        match self {
            SystemSpec::Decoupled { subsystems } => {
                if subsystems.is_empty() {
                    return Err(Error::Config { field: "system.subsystems".into(), reason: "empty".into() });
                }
                let parts = subsystems
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let f = |name: &str| format!("system.subsystems[{i}].{name}");
                        Ok((
                            to_matrix(&s.a, &f("a"))?,
                            to_matrix(&s.q, &f("q"))?,
                            to_matrix(&s.c, &f("c"))?,
                            to_matrix(&s.r, &f("r"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                SystemModel::decoupled(parts)
            }
            SystemSpec::Coupled { a, q, sensors } => {
                let sensors = sensors
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Ok(Sensor {
                            c: to_matrix(&s.c, &format!("system.sensors[{i}].c"))?,
                            r: to_matrix(&s.r, &format!("system.sensors[{i}].r"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                SystemModel::new(to_matrix(a, "system.a")?, to_matrix(q, "system.q")?, sensors)
            }
        }
    }
}

/// Channel section. Power sets are either listed or generated as `levels`
/// equally spaced values in `[0, p_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub gains: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_sets: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    pub sigma2: f64,
    pub alpha: f64,
    pub receiver: Receiver,
    /// Monte Carlo samples for arrival distributions without a closed form.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_mc_seed")]
    pub mc_seed: u64,
}

fn default_mc_samples() -> usize {
    ArrivalOptions::default().mc_samples
}

fn default_mc_seed() -> u64 {
    ArrivalOptions::default().seed
}

impl ChannelSpec {
    pub fn arrival_options(&self) -> ArrivalOptions {
        ArrivalOptions { mc_samples: self.mc_samples, seed: self.mc_seed }
    }

    pub fn build(&self) -> Result<ChannelParams> {
        if self.mc_samples == 0 {
            return Err(Error::Config { field: "channel.mc_samples".into(), reason: "must be at least 1".into() });
        }
        let n = self.gains.len();
        let sets = match (&self.power_sets, self.p_max, self.levels) {
            (Some(sets), None, None) => sets.clone(),
            (None, Some(p_max), Some(levels)) => {
                if levels < 2 {
                    return Err(Error::Config { field: "channel.levels".into(), reason: "must be at least 2".into() });
                }
                let set: Vec<f64> = (0..levels).map(|k| p_max * k as f64 / (levels - 1) as f64).collect();
                vec![set; n]
            }
            _ => {
                return Err(Error::Config {
                    field: "channel.power_sets".into(),
                    reason: "give either power_sets or both p_max and levels".into(),
                })
            }
        };
        ChannelParams::new(self.gains.clone(), sets, self.sigma2, self.alpha, self.receiver).map_err(|e| {
            Error::Config { field: "channel".into(), reason: e.to_string() }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub system: SystemSpec,
    pub channel: ChannelSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config {
            field: e.span().map_or_else(|| "document".to_string(), |sp| format!("bytes {}..{}", sp.start, sp.end)),
            reason: e.message().to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always representable as TOML")
    }

    /// Builds every component once so that the first invalid field is reported.
    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        let channel = self.channel()?;
        if model.n_sensors() != channel.n_sensors() {
            return Err(Error::Config {
                field: "channel.gains".into(),
                reason: format!("{} sensors in the channel, {} in the system", channel.n_sensors(), model.n_sensors()),
            });
        }
        self.solver.validate_finite().map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::Config { field: "solver".into(), reason: other.to_string() },
        })?;
        self.sim.validate()?;
        if let Some(p0) = &self.sim.initial_cov {
            let m = to_matrix(p0, "sim.initial_cov")?;
            if m.shape() != (model.n(), model.n()) {
                return Err(Error::Config { field: "sim.initial_cov".into(), reason: "wrong dimension".into() });
            }
            Covariance::new(m).map_err(|e| Error::Config { field: "sim.initial_cov".into(), reason: e.to_string() })?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<SystemModel> {
        self.system.build()
    }

    pub fn channel(&self) -> Result<ChannelParams> {
        self.channel.build()
    }

    pub fn initial_covariance(&self) -> Result<Covariance> {
        match &self.sim.initial_cov {
            Some(rows) => Covariance::new(to_matrix(rows, "sim.initial_cov")?),
            None => Ok(Covariance::identity(self.model()?.n())),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let s = match name {
            "two_drones" => two_drones(),
            "two_pendulums" => two_pendulums(),
            other => {
                return Err(Error::Config { field: "preset".into(), reason: format!("unknown preset `{other}`") })
            }
        };
        check_preset(&s)?;
        Ok(s)
    }
}

pub const PRESETS: [&str; 2] = ["two_drones", "two_pendulums"];

pub fn drone_dynamics(period: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, period, 0.0, 1.0])
}

/// Linearized inverted pendulum `[[0, 1], [g/l, 0]]` in continuous time.
pub fn pendulum_continuous(length: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, GRAVITY / length, 0.0])
}

/// Exact zero-order discretization `exp(A_c T)`.
pub fn pendulum_dynamics(period: f64, length: f64) -> DMatrix<f64> {
    (pendulum_continuous(length) * period).exp()
}

fn position_sensor() -> DMatrix<f64> {
    DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
}

fn pair_model(a: DMatrix<f64>, r: f64) -> SystemModel {
    let sub = (a, DMatrix::identity(2, 2) * 0.1, position_sensor(), DMatrix::from_element(1, 1, r));
    SystemModel::decoupled(vec![sub.clone(), sub]).expect("preset model is valid")
}

/// Two decoupled double integrators with position sensors.
pub fn drone_model(period: f64, r: f64) -> SystemModel {
    pair_model(drone_dynamics(period), r)
}

/// Two decoupled inverted pendulums with angle sensors.
pub fn pendulum_model(period: f64, length: f64, r: f64) -> SystemModel {
    pair_model(pendulum_dynamics(period, length), r)
}

fn preset_system(a: DMatrix<f64>) -> SystemSpec {
    let sub = SubsystemSpec {
        a: to_rows(&a),
        q: to_rows(&(DMatrix::identity(2, 2) * 0.1)),
        c: to_rows(&position_sensor()),
        r: vec![vec![PRESET_MEASUREMENT_NOISE]],
    };
    SystemSpec::Decoupled { subsystems: vec![sub.clone(), sub] }
}

fn preset_channel() -> ChannelSpec {
    ChannelSpec {
        gains: vec![1.0, 1.0],
        power_sets: None,
        p_max: Some(1.0),
        levels: Some(4),
        sigma2: 0.1,
        alpha: 0.75,
        receiver: Receiver::Sic,
        mc_samples: default_mc_samples(),
        mc_seed: default_mc_seed(),
    }
}

pub fn two_drones() -> Scenario {
    Scenario {
        name: "two_drones".into(),
        system: preset_system(drone_dynamics(DRONE_PERIOD)),
        channel: preset_channel(),
        solver: SolverConfig { beta: 0.9, ..SolverConfig::default() },
        sim: SimConfig::default(),
    }
}

pub fn two_pendulums() -> Scenario {
    Scenario {
        name: "two_pendulums".into(),
        system: preset_system(pendulum_dynamics(PENDULUM_PERIOD, PENDULUM_LENGTH)),
        channel: preset_channel(),
        solver: SolverConfig { beta: 0.9, ..SolverConfig::default() },
        sim: SimConfig::default(),
    }
}

/// Asserts the fixed experimental constants of a named preset.
pub fn check_preset(s: &Scenario) -> Result<()> {
    let fail = |field: &str, reason: &str| Err(Error::Config { field: field.into(), reason: reason.into() });
    let expected_a = match s.name.as_str() {
        "two_drones" => drone_dynamics(DRONE_PERIOD),
        "two_pendulums" => pendulum_dynamics(PENDULUM_PERIOD, PENDULUM_LENGTH),
        _ => return fail("name", "not a preset"),
    };
    let SystemSpec::Decoupled { subsystems } = &s.system else {
        return fail("system", "presets are decoupled");
    };
    if subsystems.len() != 2 {
        return fail("system.subsystems", "presets have two subsystems");
    }
    for (i, sub) in subsystems.iter().enumerate() {
        let field = |f: &str| format!("system.subsystems[{i}].{f}");
        if to_matrix(&sub.a, &field("a"))? != expected_a {
            return fail(&field("a"), "dynamics differ from the preset");
        }
        if to_matrix(&sub.q, &field("q"))? != DMatrix::identity(2, 2) * 0.1 {
            return fail(&field("q"), "Q must be 0.1 I");
        }
        if to_matrix(&sub.c, &field("c"))? != position_sensor() {
            return fail(&field("c"), "C must be [1 0]");
        }
    }
    let ch = s.channel()?;
    let levels_ok = ch.power_sets.iter().all(|set| set.len() == 4 && set[3] == 1.0);
    if ch.gains != [1.0, 1.0] || ch.sigma2 != 0.1 || ch.alpha != 0.75 || !levels_ok {
        return fail("channel", "presets use s = 1, P_max = 1, sigma2 = 0.1, 4 levels, alpha = 0.75");
    }
    if s.solver.beta != 0.9 {
        return fail("solver.beta", "presets use beta = 0.9");
    }
    Ok(())
}
