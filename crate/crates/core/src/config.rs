//! Configuration documents (TOML). See `docs/config.md` for the schema.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bus::{DirectionLatency, LatencyModel};
use crate::error::{Error, Result};
use crate::kinematics::{KinematicChain, Link};
use crate::model::{AntennaNode, DEFAULT_JOINT_STEP_DEG, EARTH_GRAVITY, JointVector, NUM_JOINTS, PhysicsParams, Pose2D, normalize_angle};
use crate::physics::Actuators;
use crate::scenario::{DEFAULT_TOLERANCE_DEG, ScenarioSpec};
use crate::units;

pub const DEFAULT_CONFIG: &str = include_str!("../data/default.toml");

/// Fully validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinConfig {
    pub rover_id: String,
    pub seed: u64,
    pub physics: PhysicsParams,
    pub chain: KinematicChain,
    pub actuators: Actuators,
    pub command_latency: LatencyModel,
    pub telemetry_latency: LatencyModel,
    pub scenario: ScenarioSpec,
}

impl TwinConfig {
    pub fn builtin() -> Self {
        load_config(DEFAULT_CONFIG).expect("built-in config is valid")
    }

    /// Hex SHA-256 over the canonical JSON form, so formatting and unit
    /// spelling do not change the hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn latency(&self) -> (DirectionLatency, DirectionLatency) {
        (
            DirectionLatency {
                transport: self.command_latency,
                injected: None,
            },
            DirectionLatency {
                transport: self.telemetry_latency,
                injected: None,
            },
        )
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    rover_id: Option<String>,
    seed: Option<u64>,
    #[serde(default)]
    physics: RawPhysics,
    #[serde(default)]
    actuators: RawActuators,
    arm: Option<RawArm>,
    #[serde(default)]
    bus: RawBus,
    scenario: Option<RawScenario>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhysics {
    gravity: Option<f64>,
    mu_static: Option<f64>,
    mu_dynamic: Option<f64>,
    wheel_torque_max: Option<f64>,
    #[serde(default, deserialize_with = "units::opt_angle")]
    joint_step: Option<f64>,
    rover_mass: Option<f64>,
    #[serde(default, deserialize_with = "opt_length")]
    wheel_radius: Option<f64>,
    #[serde(default, deserialize_with = "opt_length")]
    wheel_base: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawActuators {
    #[serde(default, deserialize_with = "units::opt_angle")]
    joint_speed: Option<f64>,
    gripper_speed: Option<f64>,
    #[serde(default, deserialize_with = "units::opt_angle")]
    gimbal_speed: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    #[serde(deserialize_with = "lengths3")]
    offset: [f64; 3],
    axis: [f64; 3],
    #[serde(deserialize_with = "units::angle")]
    min: f64,
    #[serde(deserialize_with = "units::angle")]
    max: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArm {
    #[serde(default, deserialize_with = "opt_lengths3")]
    mount: Option<[f64; 3]>,
    #[serde(default, deserialize_with = "opt_lengths3")]
    gripper_offset: Option<[f64; 3]>,
    links: Vec<RawLink>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBus {
    command: Option<LatencyModel>,
    telemetry: Option<LatencyModel>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    #[serde(deserialize_with = "units::length")]
    x: f64,
    #[serde(deserialize_with = "units::length")]
    y: f64,
    #[serde(default, deserialize_with = "units::angle")]
    heading: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoints {
    #[serde(deserialize_with = "units::angles")]
    joints: Vec<f64>,
    #[serde(default = "one")]
    gripper: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAntenna {
    id: String,
    #[serde(deserialize_with = "units::length")]
    x: f64,
    #[serde(deserialize_with = "units::length")]
    y: f64,
    #[serde(deserialize_with = "units::angle")]
    orientation: f64,
    #[serde(deserialize_with = "units::angle")]
    target: f64,
    #[serde(default, deserialize_with = "units::opt_angle")]
    tolerance: Option<f64>,
    #[serde(default, deserialize_with = "opt_length")]
    grasp_height: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    id: String,
    start: Option<RawPose>,
    arm: Option<RawJoints>,
    #[serde(default)]
    antennas: Vec<RawAntenna>,
    #[serde(default, deserialize_with = "units::opt_duration_ns")]
    time_limit: Option<u64>,
    #[serde(default = "one_u32")]
    attempts_allowed: u32,
    #[serde(default)]
    strict_360: bool,
}

fn one_u32() -> u32 {
    1
}

fn opt_length<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    struct W(#[serde(deserialize_with = "units::length")] f64);
    Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
}

fn lengths3<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<[f64; 3], D::Error> {
    #[derive(Deserialize)]
    struct W(#[serde(deserialize_with = "units::length")] f64);
    let [a, b, c] = <[W; 3]>::deserialize(d)?;
    Ok([a.0, b.0, c.0])
}

fn opt_lengths3<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<[f64; 3]>, D::Error> {
    #[derive(Deserialize)]
    struct W(#[serde(deserialize_with = "lengths3")] [f64; 3]);
    Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
}

/// Default single-antenna scenario used when a document has no `[scenario]`.
fn default_scenario() -> ScenarioSpec {
    ScenarioSpec {
        id: "default".into(),
        rover_start: Pose2D::default(),
        initial_arm: JointVector::new([0.0; NUM_JOINTS], 1.0),
        antennas: vec![AntennaNode {
            id: "antenna-1".into(),
            pose: Pose2D::new(1.5, 0.0, 0.0),
            orientation: 30f64.to_radians(),
            target_orientation: 0.0,
            tolerance: DEFAULT_TOLERANCE_DEG.to_radians(),
            grasp_height: 0.1,
            grasped_by: None,
            grasp_offset: None,
        }],
        time_limit_ns: None,
        attempts_allowed: 1,
        strict_360: false,
    }
}

fn build_scenario(raw: RawScenario) -> Result<ScenarioSpec> {
    let initial_arm = match raw.arm {
        Some(j) => {
            let angles: [f64; NUM_JOINTS] = j.joints.try_into().map_err(|v: Vec<f64>| {
                Error::invalid("scenario.arm.joints", format!("expected {NUM_JOINTS} angles, got {}", v.len()))
            })?;
            if !(0.0..=1.0).contains(&j.gripper) {
                return Err(Error::invalid("scenario.arm.gripper", "must be in [0, 1]"));
            }
            JointVector::new(angles, j.gripper)
        }
        None => JointVector::new([0.0; NUM_JOINTS], 1.0),
    };
    let antennas = raw
        .antennas
        .into_iter()
        .map(|a| {
            let orientation = normalize_angle(a.orientation);
            AntennaNode {
                id: a.id,
                pose: Pose2D::new(a.x, a.y, orientation),
                orientation,
                target_orientation: normalize_angle(a.target),
                tolerance: a.tolerance.unwrap_or(DEFAULT_TOLERANCE_DEG.to_radians()),
                grasp_height: a.grasp_height.unwrap_or(0.1),
                grasped_by: None,
                grasp_offset: None,
            }
        })
        .collect();
    let start = raw.start.map_or(Pose2D::default(), |p| Pose2D::new(p.x, p.y, p.heading));
    let spec = ScenarioSpec {
        id: raw.id,
        rover_start: start,
        initial_arm,
        antennas,
        time_limit_ns: raw.time_limit,
        attempts_allowed: raw.attempts_allowed,
        strict_360: raw.strict_360,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses and validates a configuration document. Omitted sections fall
/// back to the built-in defaults; `joint_step` defaults to 0.0888°.
pub fn load_config(text: &str) -> Result<TwinConfig> {
    let raw: RawDoc = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let d = PhysicsParams::default();
    let rp = raw.physics;
    let physics = PhysicsParams {
        gravity: rp.gravity.unwrap_or(EARTH_GRAVITY),
        mu_static: rp.mu_static.unwrap_or(d.mu_static),
        mu_dynamic: rp.mu_dynamic.unwrap_or(d.mu_dynamic),
        wheel_torque_max: rp.wheel_torque_max.unwrap_or(d.wheel_torque_max),
        joint_step: rp.joint_step.unwrap_or(DEFAULT_JOINT_STEP_DEG.to_radians()),
        rover_mass: rp.rover_mass.unwrap_or(d.rover_mass),
        wheel_radius: rp.wheel_radius.unwrap_or(d.wheel_radius),
        wheel_base: rp.wheel_base.unwrap_or(d.wheel_base),
    };
    physics.validate()?;

    let da = Actuators::default();
    let actuators = Actuators {
        joint_speed: raw.actuators.joint_speed.unwrap_or(da.joint_speed),
        gripper_speed: raw.actuators.gripper_speed.unwrap_or(da.gripper_speed),
        gimbal_speed: raw.actuators.gimbal_speed.unwrap_or(da.gimbal_speed),
    };
    for (name, v) in [
        ("actuators.joint_speed", actuators.joint_speed),
        ("actuators.gripper_speed", actuators.gripper_speed),
        ("actuators.gimbal_speed", actuators.gimbal_speed),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(name, "must be finite and > 0"));
        }
    }

    let chain = match raw.arm {
        Some(arm) => {
            let dc = KinematicChain::default();
            KinematicChain {
                links: arm
                    .links
                    .into_iter()
                    .map(|l| Link {
                        offset: l.offset,
                        axis: l.axis,
                        joint_min: l.min,
                        joint_max: l.max,
                    })
                    .collect(),
                gripper_offset: arm.gripper_offset.unwrap_or(dc.gripper_offset),
                mount: arm.mount.unwrap_or(dc.mount),
            }
        }
        None => KinematicChain::default(),
    };
    chain.validate()?;

    let scenario = match raw.scenario {
        Some(s) => build_scenario(s)?,
        None => default_scenario(),
    };
    let mut initial = scenario.initial_arm;
    initial.angles = chain.sanitize_target(&initial, physics.joint_step).angles;
    if let Err(e) = chain.check_limits(&scenario.initial_arm) {
        return Err(Error::invalid("scenario.arm.joints", e.to_string()));
    }

    Ok(TwinConfig {
        rover_id: raw.rover_id.unwrap_or_else(|| "rover".into()),
        seed: raw.seed.unwrap_or(0),
        physics,
        chain,
        actuators,
        command_latency: raw.bus.command.unwrap_or_default(),
        telemetry_latency: raw.bus.telemetry.unwrap_or_default(),
        scenario: ScenarioSpec {
            initial_arm: initial,
            ..scenario
        },
    })
}

/// Reads only the `[scenario]` table of a document.
pub fn load_scenario(text: &str) -> Result<ScenarioSpec> {
    #[derive(Deserialize)]
    struct Only {
        scenario: Option<RawScenario>,
    }
    let doc: Only = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    build_scenario(doc.scenario.ok_or_else(|| Error::invalid("scenario", "missing [scenario] table"))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_config_loads() {
        let c = TwinConfig::builtin();
        assert_eq!(c.physics.gravity, -9.81);
        assert_eq!(c.physics.joint_step, 0.0888f64.to_radians());
        assert_eq!(c.chain.links.len(), 6);
    }

    #[test]
    fn measured_constants_accepted() {
        let c = load_config("[physics]\ngravity = -9.81\njoint_step = \"0.0888deg\"\n").unwrap();
        assert_eq!(c.physics.gravity, -9.81);
        assert_eq!(c.physics.joint_step, 0.0888f64.to_radians());
    }

    #[test]
    fn omitted_joint_step_defaults() {
        let c = load_config("[physics]\nmu_static = 0.7\n").unwrap();
        assert_eq!(c.physics.joint_step, 0.0888f64.to_radians());
        assert_eq!(c.physics.mu_static, 0.7);
    }

    #[test]
    fn friction_order_violation_names_fields() {
        let err = load_config("[physics]\nmu_static = 0.3\nmu_dynamic = 0.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mu_static") && msg.contains("mu_dynamic"), "{msg}");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(load_config("[physics\n"), Err(Error::Parse(_))));
        assert!(matches!(load_config("[physics]\nfrobnicate = 1\n"), Err(Error::Parse(_))));
        let e = load_config("[physics]\nwheel_base = \"3deg\"\n").unwrap_err().to_string();
        assert!(e.contains("wheel_base"), "{e}");
    }

    #[test]
    fn scenario_requires_antenna() {
        let e = load_config("[scenario]\nid = \"x\"\n").unwrap_err().to_string();
        assert!(e.contains("scenario.antennas"), "{e}");
    }

    #[test]
    fn hash_ignores_spelling() {
        let a = load_config("[physics]\nwheel_base = 0.39\n").unwrap();
        let b = load_config("[physics]\nwheel_base = \"0.39m\"\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = load_config("[physics]\nwheel_base = 0.4\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn latency_units() {
        let c = load_config("[bus.command]\nbase_delay = \"120ms\"\njitter_half_width = 5\nseed = 3\n").unwrap();
        assert_eq!(c.command_latency.base_delay_ns, 120_000_000);
        assert_eq!(c.command_latency.jitter_half_width_ns, 5_000_000);
    }
}
