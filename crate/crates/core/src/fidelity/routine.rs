//! The standard calibration routine: a ping burst for latency, a joint
//! staircase at the minimum step, then straight and arc driving legs.

use serde::{Deserialize, Serialize};

use crate::bus::{ArmCommand, Payload};
use crate::error::{Error, Result};
use crate::model::{DriveInput, NUM_JOINTS};
use crate::sim::{CommandScript, Expectation, TimedCommand};
use crate::units::{self, NANOS_PER_SEC};

pub const STANDARD_ROUTINE: &str = include_str!("../../data/routines/standard_calibration.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PingBurst {
    pub count: u32,
    #[serde(deserialize_with = "units::duration_ns", serialize_with = "units::ser_duration_ns")]
    pub interval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Staircase {
    pub joint: usize,
    /// First level, in units of the joint step.
    #[serde(default)]
    pub start_level: i64,
    pub levels: u32,
    #[serde(deserialize_with = "units::duration_ns", serialize_with = "units::ser_duration_ns")]
    pub hold: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveLeg {
    pub left: f64,
    pub right: f64,
    #[serde(deserialize_with = "units::duration_ns", serialize_with = "units::ser_duration_ns")]
    pub duration: u64,
    #[serde(deserialize_with = "units::duration_ns", serialize_with = "units::ser_duration_ns")]
    pub rest: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRoutine {
    pub ping: PingBurst,
    pub staircase: Staircase,
    #[serde(rename = "drive")]
    pub drives: Vec<DriveLeg>,
}

impl CalibrationRoutine {
    pub fn standard() -> Self {
        Self::from_document(STANDARD_ROUTINE).expect("shipped routine is valid")
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if r.staircase.joint >= NUM_JOINTS {
            return Err(Error::invalid("staircase.joint", format!("must be < {NUM_JOINTS}")));
        }
        if r.staircase.levels < 2 {
            return Err(Error::invalid("staircase.levels", "need at least 2 levels"));
        }
        if r.ping.interval == 0 {
            return Err(Error::invalid("ping.interval", "must be > 0"));
        }
        for (i, d) in r.drives.iter().enumerate() {
            if !(d.left.is_finite() && d.right.is_finite()) {
                return Err(Error::invalid(format!("drive[{i}]"), "speeds must be finite"));
            }
        }
        Ok(r)
    }

    /// Expands into a timed command script using `joint_step` (radians) as
    /// the staircase increment.
    pub fn expand(&self, joint_step: f64) -> CommandScript {
        let mut cmds = Vec::new();
        let mut t = 0;
        let stop = || Payload::Drive(DriveInput::default());
        for _ in 0..self.ping.count {
            cmds.push(TimedCommand { at_ns: t, payload: stop() });
            t += self.ping.interval;
        }
        let s = &self.staircase;
        for i in 0..s.levels as i64 {
            let mut joints = [0.0; NUM_JOINTS];
            joints[s.joint] = (s.start_level + i) as f64 * joint_step;
            cmds.push(TimedCommand {
                at_ns: t,
                payload: Payload::Arm(ArmCommand { joints, gripper: 1.0 }),
            });
            t += s.hold;
        }
        for d in &self.drives {
            cmds.push(TimedCommand {
                at_ns: t,
                payload: Payload::Drive(DriveInput::Velocity {
                    left: d.left,
                    right: d.right,
                }),
            });
            t += d.duration;
            cmds.push(TimedCommand { at_ns: t, payload: stop() });
            t += d.rest;
        }
        CommandScript {
            duration_ns: t + NANOS_PER_SEC,
            commands: cmds,
            expect: Expectation::default(),
        }
    }
}
