//! Solved policy tables and their text file format.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::channel::{Action, ChannelParams, Receiver};
use crate::estimator::Covariance;
use crate::error::{Error, Result};

use super::vi::nearest_centroid;
use super::SolverConfig;

const MAGIC: &str = "mpr-policy-table 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveInfo {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
    /// Sup-norm change of every sweep (not serialized).
    pub deltas: Vec<f64>,
}

/// Stationary policy over a discretized covariance space.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub centroids: Vec<Covariance>,
    pub actions: Vec<Action>,
    pub values: Vec<f64>,
    pub config: SolverConfig,
    pub channel: ChannelParams,
    pub info: SolveInfo,
}

impl PolicyTable {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Covariance::dim)
    }

    /// Line-oriented text form. Floats use the shortest representation that
    /// parses back to the same bits, so parse and serialize round-trip exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let n = self.dim();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "n {n}");
        let _ = writeln!(s, "sensors {}", self.channel.n_sensors());
        let _ = writeln!(s, "centroids {}", self.len());
        let _ = writeln!(s, "beta {}", self.config.beta);
        let _ = writeln!(s, "mu {}", self.config.mu);
        let _ = writeln!(s, "receiver {}", self.channel.receiver);
        let _ = writeln!(s, "seed {}", self.config.seed);
        let _ = writeln!(s, "vi_tol {}", self.config.tolerance());
        let _ = writeln!(s, "sigma2 {}", self.channel.sigma2);
        let _ = writeln!(s, "alpha {}", self.channel.alpha);
        let _ = writeln!(s, "gains {}", join(&self.channel.gains));
        for set in &self.channel.power_sets {
            let _ = writeln!(s, "power_set {}", join(set));
        }
        let _ = writeln!(s, "iterations {}", self.info.iterations);
        let _ = writeln!(s, "final_delta {}", self.info.final_delta);
        let _ = writeln!(s, "converged {}", self.info.converged);
        let _ = writeln!(s, "data");
        for ((c, a), v) in self.centroids.iter().zip(&self.actions).zip(&self.values) {
            let levels: Vec<String> = a.levels().iter().map(|l| l.to_string()).collect();
            let m = c.matrix();
            let entries: Vec<f64> = (0..n).flat_map(|r| (0..n).map(move |k| (r, k))).map(|(r, k)| m[(r, k)]).collect();
            let _ = writeln!(s, "{} ; {} ; {}", levels.join(" "), v, join(&entries));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let err = |line: usize, reason: &str| Error::TableParse { line, reason: reason.to_string() };
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            Some((i, _)) => return Err(err(i, "missing header magic")),
            None => return Err(err(0, "empty file")),
        }
        let mut header = std::collections::HashMap::new();
        let mut power_sets = Vec::new();
        let mut last = 1;
        for (i, l) in lines.by_ref() {
            last = i;
            if l == "data" {
                break;
            }
            let (k, v) = l.split_once(' ').ok_or_else(|| err(i, "expected `key value`"))?;
            if k == "power_set" {
                power_sets.push(parse_floats(v).map_err(|r| err(i, &r))?);
            } else {
                header.insert(k.to_string(), (i, v.to_string()));
            }
        }
        let get = |k: &str| header.get(k).ok_or_else(|| err(last, &format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> {
            let (i, v) = get(k)?;
            v.parse().map_err(|_| err(*i, &format!("bad number for `{k}`")))
        };
        let int = |k: &str| -> Result<usize> {
            let (i, v) = get(k)?;
            v.parse().map_err(|_| err(*i, &format!("bad integer for `{k}`")))
        };
        let n = int("n")?;
        let n_s = int("sensors")?;
        let d = int("centroids")?;
        let receiver: Receiver = get("receiver")?.1.parse().map_err(|_| err(get("receiver").unwrap().0, "bad receiver"))?;
        let gains = parse_floats(&get("gains")?.1).map_err(|r| err(get("gains").unwrap().0, &r))?;
        let channel = ChannelParams::new(gains, power_sets, num("sigma2")?, num("alpha")?, receiver)
            .map_err(|e| err(last, &e.to_string()))?;
        if channel.n_sensors() != n_s {
            return Err(err(last, "sensor count does not match power sets"));
        }
        let seed: u64 = get("seed")?.1.parse().map_err(|_| err(get("seed").unwrap().0, "bad seed"))?;
        let converged = match get("converged")?.1.as_str() {
            "true" => true,
            "false" => false,
            _ => return Err(err(get("converged").unwrap().0, "bad boolean")),
        };
        let config = SolverConfig {
            beta: num("beta")?,
            mu: num("mu")?,
            centroids: d,
            vi_tol: Some(num("vi_tol")?),
            seed,
            ..SolverConfig::default()
        };
        let info = SolveInfo {
            iterations: int("iterations")?,
            final_delta: num("final_delta")?,
            converged,
            deltas: Vec::new(),
        };
        let mut centroids = Vec::with_capacity(d);
        let mut actions = Vec::with_capacity(d);
        let mut values = Vec::with_capacity(d);
        for (i, l) in lines {
            let parts: Vec<&str> = l.split(';').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(err(i, "expected `levels ; value ; matrix`"));
            }
            let levels: Vec<usize> = parts[0]
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(i, "bad level index")))
                .collect::<Result<_>>()?;
            actions.push(Action::from_levels(&levels, &channel).map_err(|e| err(i, &e.to_string()))?);
            values.push(parts[1].parse().map_err(|_| err(i, "bad value"))?);
            let entries = parse_floats(parts[2]).map_err(|r| err(i, &r))?;
            if entries.len() != n * n {
                return Err(err(i, &format!("expected {} matrix entries", n * n)));
            }
            let m = DMatrix::from_row_slice(n, n, &entries);
            centroids.push(Covariance::new(m).map_err(|e| err(i, &e.to_string()))?);
        }
        if centroids.len() != d {
            return Err(err(last, &format!("header announces {d} centroids, found {}", centroids.len())));
        }
        Ok(PolicyTable { centroids, actions, values, config, channel, info })
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number `{t}`")))
        .collect()
}

/// Index of the centroid nearest to `p` in Frobenius distance (ties to the lower index).
pub fn lookup_index(table: &PolicyTable, p: &Covariance) -> usize {
    nearest_centroid(&table.centroids, p)
}

/// Action stored at the centroid nearest to `p`.
pub fn lookup<'t>(table: &'t PolicyTable, p: &Covariance) -> &'t Action {
    &table.actions[lookup_index(table, p)]
}
