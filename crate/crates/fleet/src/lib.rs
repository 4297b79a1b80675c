//! Fleet control plane: places models on serving jobs by RAM, journals
//! every change, pushes aspired versions to servers and routes inference
//! with hedging and canary teeing.

mod error;

pub mod canary;
pub mod channel;
pub mod cli;
pub mod config;
pub mod controller;
pub mod harness;
pub mod journal;
pub mod ram;
pub mod router;
pub mod sim;
pub mod sync;

pub use canary::{CanaryTee, ComparisonRecord};
pub use channel::{HttpChannel, ServerChannel};
pub use config::{FleetConfig, HedgePolicy, JobSpec};
pub use controller::{Command, Controller, ControllerState};
pub use error::FleetError;
pub use router::{InferRequest, Router};
pub use sync::Synchronizer;
