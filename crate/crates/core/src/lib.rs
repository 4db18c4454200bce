//! Numerical toolkit for countable-state mean-field particle systems.
//!
//! Distributions live on a truncated state space `{0..z_max}` with explicit
//! tail bookkeeping. On top of that sit the rate models, the McKean-Vlasov
//! flow, the action functional in both control and dual form, constructive
//! quasipotential bounds and an exact particle simulator.

pub mod cost;
pub mod error;
pub mod extended;
pub mod io;
pub mod mckean_vlasov;
pub mod measures;
pub mod models;
pub mod path;
pub mod quasipotential;
pub mod simulator;

pub use error::{Error, Result};
pub use extended::ExtReal;
pub use measures::StateDistribution;
pub use models::RateModel;
