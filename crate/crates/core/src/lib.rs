//! Training and analysis of bias-free homogeneous networks under
//! constant-step (sub)gradient descent: margin dynamics, the reparametrized
//! spherical view of the iterates, and margin-criticality measurements.

pub mod cli;
pub mod criticality;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod loss;
pub mod net;
pub mod optim;
pub mod vector;

pub use error::{Error, Result};
pub use loss::LossKind;
pub use net::{Activation, KinkSelection, NetSpec, Sample, WeightVector};
pub use optim::{ExperimentConfig, StepRecord, StepSchedule, Trajectory};
