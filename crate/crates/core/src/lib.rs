//! Learning and formally verifying stabilizing ranking supermartingales for stochastic
//! control systems.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix it to
//! `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificate;
pub mod error;
pub mod grid;
pub mod interval;
pub mod learner;
pub mod lipschitz;
pub mod nn;
pub mod noise;
pub mod policy;
pub mod ppo;
pub mod scalar;
pub mod system;
pub mod verifier;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Interval = interval::Interval<f64>;
pub type IntervalBox = interval::IntervalBox<f64>;
pub type Mlp = nn::Mlp<f64>;
pub type Grid = grid::Grid<f64>;
pub type SystemModel = system::SystemModel<f64>;
pub type NoisePartition = noise::NoisePartition<f64>;
pub type LipschitzReport = lipschitz::LipschitzReport<f64>;
pub type VerifyOutcome = verifier::VerifyOutcome<f64>;
pub type Certificate = certificate::Certificate<f64>;
pub type CertifiedPolicy = certificate::CertifiedPolicy<f64>;
pub type CounterexampleBuffer = learner::CounterexampleBuffer<f64>;
pub type SynthesisOutcome = learner::SynthesisOutcome<f64>;

pub use certificate::{recheck, recheck_with_policy, simulate, SimulationReport};
pub use learner::{synthesize, verify_fixed_policy, SynthesisConfig, TrainConfig};
pub use noise::{BoundMode, NoiseSpec};
pub use ppo::PpoConfig;
pub use verifier::{verify, VerifyConfig, VerifyStatus};
