//! Synthetic ground truth: a signalized road network, IDM car following at
//! 1 Hz, loop-detector aggregates and OD calibration.

pub mod calibrate;
pub mod detector;
pub mod idm;
pub mod network;
pub mod od;
mod signal;
pub mod sim;
pub mod synth;

pub use calibrate::{calibrate_od, CalibrationConfig, CalibrationResult};
pub use detector::{detector_aggregate, DetectorRecord};
pub use idm::{idm_acceleration, IdmParams};
pub use network::{Control, Link, Network, NetworkSpec, Priority, RoadClass};
pub use od::{ObservedCount, OdMatrix};
pub use sim::{simulate, SimConfig, SimOutput, SimStats};
pub use synth::{synthetic_city, CityParams};
