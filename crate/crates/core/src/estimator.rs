//! Kalman filtering with intermittent observations from several sensors.
//!
//! The covariance side is kept in information form: a received packet from
//! sensor `i` adds `C_i' R_i^{-1} C_i` to the inverse covariance.

use nalgebra::{DMatrix, DVector};

use crate::channel::{ArrivalDistribution, ArrivalOutcome, Action};
use crate::error::{Error, Result};
use crate::linalg::{block_diag, min_eigenvalue, spd_inverse, symmetrize};

/// Output matrix and noise covariance of one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Linear plant `x+ = A x + w`, `y_i = C_i x + v_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    sensors: Vec<Sensor>,
    /// Block sizes when the plant is a set of independent subsystems, one per sensor.
    blocks: Option<Vec<usize>>,
    info: Vec<DMatrix<f64>>,
}

impl SystemModel {
    pub fn new(a: DMatrix<f64>, q: DMatrix<f64>, sensors: Vec<Sensor>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(Error::InvalidModel("A must be square and nonempty".into()));
        }
        if q.shape() != (n, n) {
            return Err(Error::InvalidModel(format!("Q must be {n}x{n}")));
        }
        if (&q - q.transpose()).norm() > 1e-10 * (1.0 + q.norm()) {
            return Err(Error::InvalidModel("Q must be symmetric".into()));
        }
        if min_eigenvalue(&q) < -1e-10 {
            return Err(Error::InvalidModel("Q must be positive semidefinite".into()));
        }
        if sensors.is_empty() {
            return Err(Error::InvalidModel("at least one sensor is required".into()));
        }
        let mut info = Vec::with_capacity(sensors.len());
        for (i, s) in sensors.iter().enumerate() {
            let m = s.c.nrows();
            if s.c.ncols() != n || m == 0 {
                return Err(Error::InvalidModel(format!("C_{i} must have {n} columns")));
            }
            if s.r.shape() != (m, m) {
                return Err(Error::InvalidModel(format!("R_{i} must be {m}x{m}")));
            }
            if (&s.r - s.r.transpose()).norm() > 1e-10 * (1.0 + s.r.norm()) || min_eigenvalue(&s.r) <= 0.0 {
                return Err(Error::InvalidModel(format!("R_{i} must be symmetric positive definite")));
            }
            let r_inv = spd_inverse(&s.r, "R")?;
            info.push(symmetrize(&(s.c.transpose() * r_inv * &s.c)));
        }
        Ok(SystemModel { a, q, sensors, blocks: None, info })
    }

    /// Decoupled plant: subsystem `i` is `(A_i, Q_i)` and is observed only by sensor `i`.
    pub fn decoupled(subsystems: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        let sizes: Vec<usize> = subsystems.iter().map(|s| s.0.nrows()).collect();
        let a = block_diag(&subsystems.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
        let q = block_diag(&subsystems.iter().map(|s| s.1.clone()).collect::<Vec<_>>());
        let n: usize = sizes.iter().sum();
        let mut offset = 0;
        let mut sensors = Vec::with_capacity(subsystems.len());
        for (i, (ai, _, ci0, ri)) in subsystems.iter().enumerate() {
            if ci0.ncols() != ai.nrows() {
                return Err(Error::InvalidModel(format!("C_{i}0 must have {} columns", ai.nrows())));
            }
            let mut c = DMatrix::zeros(ci0.nrows(), n);
            c.view_mut((0, offset), ci0.shape()).copy_from(ci0);
            sensors.push(Sensor { c, r: ri.clone() });
            offset += sizes[i];
        }
        let mut model = Self::new(a, q, sensors)?;
        model.set_blocks(sizes)?;
        Ok(model)
    }

    /// Declares (and checks) the decoupled block structure.
    pub fn set_blocks(&mut self, sizes: Vec<usize>) -> Result<()> {
        if sizes.len() != self.sensors.len() || sizes.iter().sum::<usize>() != self.n() || sizes.contains(&0) {
            return Err(Error::InvalidModel("block sizes must give one nonempty block per sensor".into()));
        }
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let block_of = |k: usize| offsets.iter().rposition(|&o| o <= k).unwrap();
        for r in 0..self.n() {
            for c in 0..self.n() {
                if block_of(r) != block_of(c) && (self.a[(r, c)] != 0.0 || self.q[(r, c)] != 0.0) {
                    return Err(Error::InvalidModel("A and Q must be block diagonal".into()));
                }
            }
        }
        for (i, s) in self.sensors.iter().enumerate() {
            for c in 0..self.n() {
                if block_of(c) != i && s.c.column(c).iter().any(|&v| v != 0.0) {
                    return Err(Error::InvalidModel(format!("C_{i} must only observe block {i}")));
                }
            }
        }
        self.blocks = Some(sizes);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn blocks(&self) -> Option<&[usize]> {
        self.blocks.as_deref()
    }

    pub fn is_decoupled(&self) -> bool {
        self.blocks.is_some()
    }

    /// `C_i' R_i^{-1} C_i`.
    pub fn information(&self, i: usize) -> &DMatrix<f64> {
        &self.info[i]
    }

    /// `(offset, size)` of block `i` of a decoupled model.
    pub fn block_range(&self, i: usize) -> Result<(usize, usize)> {
        let sizes = self
            .blocks
            .as_ref()
            .ok_or_else(|| Error::Unsupported("model is not decoupled".into()))?;
        if i >= sizes.len() {
            return Err(Error::Dimension(format!("no block {i}")));
        }
        Ok((sizes[..i].iter().sum(), sizes[i]))
    }

    /// Stacked `C_J` and block-diagonal `R_J` of the sensors in `subset`.
    pub fn stacked(&self, subset: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let rows: usize = subset.iter().map(|&i| self.sensors[i].c.nrows()).sum();
        let mut c = DMatrix::zeros(rows, self.n());
        let mut r0 = 0;
        for &i in subset {
            let ci = &self.sensors[i].c;
            c.view_mut((r0, 0), ci.shape()).copy_from(ci);
            r0 += ci.nrows();
        }
        let r = block_diag(&subset.iter().map(|&i| self.sensors[i].r.clone()).collect::<Vec<_>>());
        (c, r)
    }
}

/// Symmetric positive-definite error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance(DMatrix<f64>);

impl Covariance {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if p.nrows() != p.ncols() {
            return Err(Error::Dimension("covariance must be square".into()));
        }
        let scale = p.norm().max(1e-300);
        if (&p - p.transpose()).norm() > 1e-10 * scale {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric"));
        }
        let p = symmetrize(&p);
        if !(min_eigenvalue(&p) > 0.0) {
            return Err(Error::NotPositiveDefinite("covariance"));
        }
        Ok(Covariance(p))
    }

    /// Wraps a matrix produced internally, symmetrizing it.
    pub(crate) fn from_raw(p: DMatrix<f64>) -> Self {
        Covariance(symmetrize(&p))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn identity(n: usize) -> Self {
        Covariance(DMatrix::identity(n, n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Diagonal block `(offset, size)`.
    pub fn block(&self, offset: usize, size: usize) -> DMatrix<f64> {
        self.0.view((offset, offset), (size, size)).into_owned()
    }
}

/// Estimate `x(k|k-1)` together with its error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub xhat: DVector<f64>,
    pub cov: Covariance,
}

impl EstimatorState {
    pub fn new(xhat: DVector<f64>, cov: Covariance) -> Result<Self> {
        if xhat.len() != cov.dim() {
            return Err(Error::Dimension("estimate and covariance sizes differ".into()));
        }
        Ok(EstimatorState { xhat, cov })
    }
}

fn check_dims(p: &Covariance, gamma: Option<&ArrivalOutcome>, model: &SystemModel) -> Result<()> {
    if p.dim() != model.n() {
        return Err(Error::Dimension(format!("covariance is {0}x{0}, model has n = {1}", p.dim(), model.n())));
    }
    if let Some(g) = gamma {
        if g.len() != model.n_sensors() {
            return Err(Error::Dimension(format!("outcome has {} entries for {} sensors", g.len(), model.n_sensors())));
        }
    }
    Ok(())
}

/// `P(k|k) = (P^{-1} + sum_i gamma_i C_i' R_i^{-1} C_i)^{-1}`.
pub fn measurement_update(p: &Covariance, gamma: &ArrivalOutcome, model: &SystemModel) -> Result<Covariance> {
    check_dims(p, Some(gamma), model)?;
    if gamma.count() == 0 {
        return Ok(p.clone());
    }
    let mut info = spd_inverse(p.matrix(), "prior covariance")?;
    for i in (0..model.n_sensors()).filter(|&i| gamma.received(i)) {
        info += model.information(i);
    }
    Ok(Covariance(spd_inverse(&info, "posterior information")?))
}

/// `P(k+1|k) = A P(k|k) A' + Q`.
pub fn time_update(p: &Covariance, model: &SystemModel) -> Covariance {
    Covariance::from_raw(model.a() * p.matrix() * model.a().transpose() + model.q())
}

/// One-step map `g(P, gamma)`: measurement update followed by prediction.
pub fn g_operator(p: &Covariance, gamma: &ArrivalOutcome, model: &SystemModel) -> Result<Covariance> {
    Ok(time_update(&measurement_update(p, gamma, model)?, model))
}

/// `g(P, gamma)` for all `2^N` outcomes, indexed by outcome bits.
///
/// The prior is inverted once and shared across outcomes.
pub fn successors(p: &Covariance, model: &SystemModel) -> Result<Vec<Covariance>> {
    check_dims(p, None, model)?;
    let n_s = model.n_sensors();
    let prior_info = spd_inverse(p.matrix(), "prior covariance")?;
    (0..1u32 << n_s)
        .map(|bits| {
            if bits == 0 {
                return Ok(time_update(p, model));
            }
            let mut info = prior_info.clone();
            for i in (0..n_s).filter(|&i| bits >> i & 1 == 1) {
                info += model.information(i);
            }
            Ok(time_update(&Covariance(spd_inverse(&info, "posterior information")?), model))
        })
        .collect()
}

/// `Tr g(P, gamma)` for all outcomes.
pub fn successor_traces(p: &Covariance, model: &SystemModel) -> Result<Vec<f64>> {
    Ok(successors(p, model)?.iter().map(Covariance::trace).collect())
}

/// `E[Tr g(P, u)] + mu * sum_i u_i` under the arrival distribution of `u`.
pub fn expected_cost(
    p: &Covariance,
    u: &Action,
    dist: &ArrivalDistribution,
    mu: f64,
    model: &SystemModel,
) -> Result<f64> {
    if dist.n_sensors() != model.n_sensors() || u.n_sensors() != model.n_sensors() {
        return Err(Error::Dimension("action or distribution does not match the model".into()));
    }
    let traces = successor_traces(p, model)?;
    Ok(cost_from_traces(&traces, dist, mu * u.total_power()))
}

pub(crate) fn cost_from_traces(traces: &[f64], dist: &ArrivalDistribution, power_cost: f64) -> f64 {
    traces
        .iter()
        .zip(dist.probs())
        .filter(|(_, &w)| w != 0.0)
        .map(|(t, w)| t * w)
        .sum::<f64>()
        + power_cost
}

/// Advances estimate and covariance by one step given the received measurements.
///
/// `measurements[i]` must be `Some` exactly when `gamma` marks sensor `i` as received.
pub fn state_update(
    state: &EstimatorState,
    gamma: &ArrivalOutcome,
    measurements: &[Option<DVector<f64>>],
    model: &SystemModel,
) -> Result<EstimatorState> {
    check_dims(&state.cov, Some(gamma), model)?;
    if measurements.len() != model.n_sensors() {
        return Err(Error::Dimension("one measurement slot per sensor is required".into()));
    }
    let received: Vec<usize> = (0..model.n_sensors()).filter(|&i| gamma.received(i)).collect();
    for (i, m) in measurements.iter().enumerate() {
        if m.is_some() != gamma.received(i) {
            return Err(Error::Dimension(format!("measurement {i} does not match the arrival outcome")));
        }
        if let Some(y) = m {
            if y.len() != model.sensors()[i].c.nrows() {
                return Err(Error::Dimension(format!("measurement {i} has wrong length")));
            }
        }
    }
    let p = state.cov.matrix();
    let mut xhat = state.xhat.clone();
    if !received.is_empty() {
        let (c, r) = model.stacked(&received);
        let y = DVector::from_iterator(
            c.nrows(),
            received.iter().flat_map(|&i| measurements[i].as_ref().unwrap().iter().cloned()),
        );
        let s = &c * p * c.transpose() + r;
        let s_inv = spd_inverse(&s, "innovation covariance")?;
        let gain = p * c.transpose() * s_inv;
        xhat += gain * (y - &c * &state.xhat);
    }
    let xhat = model.a() * xhat;
    let cov = g_operator(&state.cov, gamma, model)?;
    Ok(EstimatorState { xhat, cov })
}

/// Trace reduction delivered by a packet from sensor `i` of a decoupled model:
/// `Tr[A_i P_i C_i0' (C_i0 P_i C_i0' + R_i)^{-1} C_i0 P_i A_i']`.
pub fn psi(p_block: &DMatrix<f64>, i: usize, model: &SystemModel) -> Result<f64> {
    let (offset, size) = model.block_range(i)?;
    if p_block.shape() != (size, size) {
        return Err(Error::Dimension(format!("block {i} is {size}x{size}")));
    }
    let a = model.a().view((offset, offset), (size, size));
    let c = model.sensors()[i].c.columns(offset, size);
    let r = &model.sensors()[i].r;
    let s = &c * p_block * c.transpose() + r;
    let s_inv = spd_inverse(&s, "innovation covariance")?;
    let apc = a * p_block * c.transpose();
    Ok((&apc * s_inv * apc.transpose()).trace().max(0.0))
}

/// `psi_i` evaluated on every block of a full covariance.
pub fn psi_all(p: &Covariance, model: &SystemModel) -> Result<Vec<f64>> {
    (0..model.n_sensors())
        .map(|i| {
            let (o, s) = model.block_range(i)?;
            psi(&p.block(o, s), i, model)
        })
        .collect()
}
