//! Simulation laboratory: data-generating processes, Monte-Carlo studies and
//! the verification battery.

pub mod battery;
pub mod dgp;
pub mod rng;
pub mod studies;

pub use battery::{run_battery, BatteryOutput, BatteryReport, Check, Relation};
pub use dgp::{generate, CovariateFamily, DgpConfig, Truth};
pub use studies::{PRule, RateConfig, RateStudy};
