//! Shared domain types and world snapshotting.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 6;

/// Maps any finite angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI { r - TAU } else { r }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn distance_to(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointVector {
    pub angles: [f64; NUM_JOINTS],
    /// Aperture fraction, 0 = closed, 1 = fully open.
    pub gripper: f64,
}

impl JointVector {
    pub fn new(angles: [f64; NUM_JOINTS], gripper: f64) -> Self {
        Self {
            angles,
            gripper: gripper.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GimbalState {
    pub pan: f64,
    pub tilt: f64,
}

/// Servo travel per gimbal axis, 180° total.
pub const GIMBAL_LIMIT: f64 = FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub gravity: f64,
    pub mu_static: f64,
    pub mu_dynamic: f64,
    pub wheel_torque_max: f64,
    pub joint_step: f64,
    pub rover_mass: f64,
    pub wheel_radius: f64,
    pub wheel_base: f64,
}

/// Smallest executable arm joint step, 0.0888°.
pub const DEFAULT_JOINT_STEP_DEG: f64 = 0.0888;
pub const EARTH_GRAVITY: f64 = -9.81;

impl Default for PhysicsParams {
    /// Geometry, mass and friction defaults are placeholders for a small
    /// two-wheeled rover on carpet; gravity and joint step are the measured values.
    fn default() -> Self {
        Self {
            gravity: EARTH_GRAVITY,
            mu_static: 0.6,
            mu_dynamic: 0.45,
            wheel_torque_max: 0.5,
            joint_step: DEFAULT_JOINT_STEP_DEG.to_radians(),
            rover_mass: 27.0,
            wheel_radius: 0.0762,
            wheel_base: 0.39,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("physics.gravity", self.gravity),
            ("physics.mu_static", self.mu_static),
            ("physics.mu_dynamic", self.mu_dynamic),
            ("physics.wheel_torque_max", self.wheel_torque_max),
            ("physics.joint_step", self.joint_step),
            ("physics.rover_mass", self.rover_mass),
            ("physics.wheel_radius", self.wheel_radius),
            ("physics.wheel_base", self.wheel_base),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
        }
        if self.gravity >= 0.0 {
            return Err(Error::invalid("physics.gravity", "must be negative (downward)"));
        }
        if self.mu_dynamic < 0.0 {
            return Err(Error::invalid("physics.mu_dynamic", "must be >= 0"));
        }
        if self.mu_static < self.mu_dynamic {
            return Err(Error::invalid(
                "physics.mu_static, physics.mu_dynamic",
                format!(
                    "mu_static ({}) must be >= mu_dynamic ({})",
                    self.mu_static, self.mu_dynamic
                ),
            ));
        }
        if self.joint_step <= 0.0 {
            return Err(Error::invalid("physics.joint_step", "must be > 0"));
        }
        for (name, v) in [
            ("physics.wheel_torque_max", self.wheel_torque_max),
            ("physics.rover_mass", self.rover_mass),
            ("physics.wheel_radius", self.wheel_radius),
            ("physics.wheel_base", self.wheel_base),
        ] {
            if v <= 0.0 {
                return Err(Error::invalid(name, "must be > 0"));
            }
        }
        Ok(())
    }

    /// Normal force carried by one wheel (N).
    pub fn wheel_normal_force(&self) -> f64 {
        0.5 * self.rover_mass * self.gravity.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelSpeeds {
    pub left: f64,
    pub right: f64,
}

/// Drive request held by the wheel controllers until the next command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DriveInput {
    /// Wheel surface velocities, m/s.
    Velocity { left: f64, right: f64 },
    /// Wheel motor torques, N·m.
    Torque { left: f64, right: f64 },
    /// External force (N) along the heading with both wheels braked, as in a
    /// force-gauge drag test.
    Drag { force: f64 },
}

impl Default for DriveInput {
    fn default() -> Self {
        DriveInput::Velocity {
            left: 0.0,
            right: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlState {
    pub drive: DriveInput,
    pub arm_target: JointVector,
    pub gimbal_target: GimbalState,
}

/// Pose of a grasped antenna relative to the gripper, in the gripper's planar frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspOffset {
    pub dx: f64,
    pub dy: f64,
    pub d_heading: f64,
    pub d_orientation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaNode {
    pub id: String,
    pub pose: Pose2D,
    pub orientation: f64,
    pub target_orientation: f64,
    pub tolerance: f64,
    /// Height of the grasp point above the floor (m).
    pub grasp_height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasped_by: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_offset: Option<GraspOffset>,
}

impl AntennaNode {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid(format!("{field}.tolerance"), "must be > 0"));
        }
        for (name, v) in [
            ("x", self.pose.x),
            ("y", self.pose.y),
            ("orientation", self.orientation),
            ("target", self.target_orientation),
            ("grasp_height", self.grasp_height),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{field}.{name}"), "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    pub rover: Pose2D,
    /// Wheel angular velocities, rad/s.
    pub wheels: WheelSpeeds,
    /// Ground speed of each wheel contact point, m/s. Differs from
    /// `wheels * radius` only while slipping.
    pub ground_speed: WheelSpeeds,
    pub arm: JointVector,
    pub gimbal: GimbalState,
    pub antennas: Vec<AntennaNode>,
    pub controls: ControlState,
    pub sim_time_ns: u64,
    pub reset_count: u32,
}

impl TwinState {
    pub fn new(rover: Pose2D, arm: JointVector, antennas: Vec<AntennaNode>) -> Self {
        Self {
            rover,
            wheels: WheelSpeeds::default(),
            ground_speed: WheelSpeeds::default(),
            arm,
            gimbal: GimbalState::default(),
            antennas,
            controls: ControlState {
                drive: DriveInput::default(),
                arm_target: arm,
                gimbal_target: GimbalState::default(),
            },
            sim_time_ns: 0,
            reset_count: 0,
        }
    }

    /// Rover forward speed (m/s) at the body center.
    pub fn forward_speed(&self) -> f64 {
        0.5 * (self.ground_speed.left + self.ground_speed.right)
    }
}

/// Immutable, serializable copy of a [`TwinState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    world: TwinState,
}

pub fn snapshot(state: &TwinState) -> WorldSnapshot {
    WorldSnapshot {
        world: state.clone(),
    }
}

impl WorldSnapshot {
    pub fn state(&self) -> &TwinState {
        &self.world
    }

    pub fn restore(&self) -> TwinState {
        self.world.clone()
    }

    /// Serializes to the configuration document format (`[world]` table).
    pub fn to_document(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_document(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Reverts to `initial`, keeping the session clock running and counting the reset.
pub fn reset_world(state: &TwinState, initial: Option<&WorldSnapshot>) -> Result<TwinState> {
    let initial = initial.ok_or(Error::ScenarioNotLoaded)?;
    let mut next = initial.restore();
    next.sim_time_ns = state.sim_time_ns;
    next.reset_count = state.reset_count + 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_state() -> TwinState {
        let antenna = AntennaNode {
            id: "a1".into(),
            pose: Pose2D::new(1.0, 0.5, 0.3),
            orientation: 0.7,
            target_orientation: 0.0,
            tolerance: 5f64.to_radians(),
            grasp_height: 0.2,
            grasped_by: None,
            grasp_offset: None,
        };
        TwinState::new(
            Pose2D::new(0.1, -0.2, 1.0),
            JointVector::new([0.1, -0.2, 0.3, 0.0, 0.5, -0.6], 1.0),
            vec![antenna],
        )
    }

    #[test]
    fn normalize_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI / 2.0 - TAU) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(a in -1e6f64..1e6) {
            let n = normalize_angle(a);
            prop_assert!(n > -PI && n <= PI);
            prop_assert_eq!(normalize_angle(n).to_bits(), n.to_bits());
        }
    }

    #[test]
    fn snapshot_restore_identity() {
        let s = sample_state();
        assert_eq!(snapshot(&s).restore(), s);
    }

    #[test]
    fn snapshot_document_round_trip() {
        let mut s = sample_state();
        s.sim_time_ns = 12_340_000_000;
        s.antennas[0].grasped_by = Some("rover".into());
        s.antennas[0].grasp_offset = Some(GraspOffset {
            dx: 0.01,
            dy: -0.0,
            d_heading: 0.1,
            d_orientation: 1e-17,
        });
        s.controls.drive = DriveInput::Torque {
            left: 0.25,
            right: -0.3,
        };
        let doc = snapshot(&s).to_document().unwrap();
        let back = WorldSnapshot::from_document(&doc).unwrap().restore();
        assert_eq!(back, s);
        assert_eq!(
            back.antennas[0].grasp_offset.unwrap().dy.to_bits(),
            (-0.0f64).to_bits()
        );
    }

    #[test]
    fn reset_restores_and_counts() {
        let initial = sample_state();
        let snap = snapshot(&initial);
        let mut moved = initial.clone();
        moved.rover = Pose2D::new(2.0, 0.0, 0.0);
        moved.sim_time_ns = 5_000_000_000;
        let r1 = reset_world(&moved, Some(&snap)).unwrap();
        assert_eq!(r1.rover, initial.rover);
        assert_eq!(r1.reset_count, 1);
        assert_eq!(r1.sim_time_ns, 5_000_000_000);
        let r2 = reset_world(&r1, Some(&snap)).unwrap();
        assert_eq!(r2.reset_count, 2);
        let mut expect = initial.clone();
        expect.reset_count = 2;
        expect.sim_time_ns = 5_000_000_000;
        assert_eq!(r2, expect);
    }

    #[test]
    fn reset_untouched_state() {
        let s = sample_state();
        let r = reset_world(&s, Some(&snapshot(&s))).unwrap();
        assert_eq!(r.reset_count, 1);
        assert_eq!(TwinState { reset_count: 0, ..r }, s);
    }

    #[test]
    fn reset_without_initial_is_an_error() {
        assert!(matches!(
            reset_world(&sample_state(), None),
            Err(Error::ScenarioNotLoaded)
        ));
    }

    #[test]
    fn physics_validation_names_fields() {
        let p = PhysicsParams {
            mu_static: 0.3,
            mu_dynamic: 0.5,
            ..Default::default()
        };
        let msg = p.validate().unwrap_err().to_string();
        assert!(msg.contains("mu_static") && msg.contains("mu_dynamic"), "{msg}");
        let p = PhysicsParams {
            gravity: 9.81,
            ..Default::default()
        };
        assert!(p.validate().unwrap_err().to_string().contains("gravity"));
        assert!(PhysicsParams::default().validate().is_ok());
    }
}
