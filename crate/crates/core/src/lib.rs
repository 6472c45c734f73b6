//! Remote state estimation over a shared fading channel with multi-packet
//! reception, and power allocation for the transmitting sensors.

pub mod channel;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod policy;
pub mod scenario;
pub mod simulator;
pub mod stability;

pub use channel::{
    Action, ArrivalDistribution, ArrivalOptions, ArrivalOutcome, ArrivalTable, ChannelParams, Receiver,
};
pub use error::{Error, Result};
pub use estimator::{Covariance, EstimatorState, Sensor, SystemModel};
pub use policy::{PolicyTable, SolverConfig};
pub use scenario::Scenario;
pub use simulator::{Policy, SimConfig, SimMetrics};
