//! Twin fidelity: metrics, 1-D search, the calibration routine and staged calibration.

pub mod calibrate;
pub mod metrics;
pub mod routine;
pub mod search;

pub use calibrate::{CalibrationResult, FidelityReport, Residuals, Tolerances, calibrate, fidelity_report};
pub use routine::CalibrationRoutine;
