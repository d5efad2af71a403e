//! Differential-drive integration, arm forward kinematics, joint
//! quantization and gimbal clamping. Everything here is a pure function.

use nalgebra::{Isometry3, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GIMBAL_LIMIT, GimbalState, JointVector, NUM_JOINTS, Pose2D, normalize_angle};

/// Below this yaw rate (rad/s) the straight-line limit is used.
pub const STRAIGHT_LINE_OMEGA: f64 = 1e-9;

/// Advances `pose` by one step of exact circular-arc motion.
///
/// `v_left`/`v_right` are wheel ground speeds (m/s). The chord form
/// `v·dt·sinc(Δθ/2)` along the mid-step heading is algebraically identical
/// to the `v/ω` arc formula and stays well conditioned as ω → 0.
pub fn step_diff_drive(
    pose: Pose2D,
    v_left: f64,
    v_right: f64,
    wheel_base: f64,
    dt: f64,
) -> Result<Pose2D> {
    if ![pose.x, pose.y, pose.heading, v_left, v_right, wheel_base, dt]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite("step_diff_drive input"));
    }
    if dt <= 0.0 {
        return Err(Error::invalid("dt", "must be > 0"));
    }
    if wheel_base <= 0.0 {
        return Err(Error::invalid("wheel_base", "must be > 0"));
    }
    let v = 0.5 * (v_left + v_right);
    let omega = (v_right - v_left) / wheel_base;
    let (chord, mid) = if omega.abs() < STRAIGHT_LINE_OMEGA {
        (v * dt, pose.heading)
    } else {
        let half = 0.5 * omega * dt;
        (v * dt * half.sin() / half, pose.heading + half)
    };
    Ok(Pose2D {
        x: pose.x + chord * mid.cos(),
        y: pose.y + chord * mid.sin(),
        heading: normalize_angle(pose.heading + omega * dt),
    })
}

/// Rounds `target` to the nearest multiple of `step`, ties away from zero.
pub fn quantize_joint(target: f64, step: f64) -> f64 {
    debug_assert!(step > 0.0);
    (target / step).round() * step
}

/// Moves `current` toward `target` by at most `max_delta`.
pub fn slew(current: f64, target: f64, max_delta: f64) -> f64 {
    let d = target - current;
    if d.abs() <= max_delta {
        target
    } else {
        current + max_delta.copysign(d)
    }
}

pub fn clamp_gimbal(request: GimbalState) -> GimbalState {
    GimbalState {
        pan: request.pan.clamp(-GIMBAL_LIMIT, GIMBAL_LIMIT),
        tilt: request.tilt.clamp(-GIMBAL_LIMIT, GIMBAL_LIMIT),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// Translation applied after the joint rotation, meters.
    pub offset: [f64; 3],
    pub axis: [f64; 3],
    pub joint_min: f64,
    pub joint_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub links: Vec<Link>,
    /// Gripper frame relative to the last link.
    pub gripper_offset: [f64; 3],
    /// Arm base position in the rover frame.
    pub mount: [f64; 3],
}

impl Default for KinematicChain {
    /// Plausible 6-DoF desktop arm; not measured from any real hardware.
    fn default() -> Self {
        let deg = f64::to_radians;
        let link = |offset: [f64; 3], axis: [f64; 3], lim: f64| Link {
            offset,
            axis,
            joint_min: -deg(lim),
            joint_max: deg(lim),
        };
        Self {
            links: vec![
                link([0.0, 0.0, 0.10], [0.0, 0.0, 1.0], 150.0),
                link([0.0, 0.0, 0.22], [0.0, 1.0, 0.0], 105.0),
                link([0.0, 0.0, 0.20], [0.0, 1.0, 0.0], 135.0),
                link([0.0, 0.0, 0.05], [0.0, 0.0, 1.0], 150.0),
                link([0.0, 0.0, 0.06], [0.0, 1.0, 0.0], 105.0),
                link([0.0, 0.0, 0.04], [0.0, 0.0, 1.0], 150.0),
            ],
            gripper_offset: [0.0, 0.0, 0.06],
            mount: [0.12, 0.0, 0.28],
        }
    }
}

impl KinematicChain {
    pub fn validate(&self) -> Result<()> {
        if self.links.len() != NUM_JOINTS {
            return Err(Error::invalid(
                "arm.links",
                format!("expected exactly {NUM_JOINTS} revolute links, got {}", self.links.len()),
            ));
        }
        for (i, l) in self.links.iter().enumerate() {
            let field = format!("arm.links[{i}]");
            let all = l.offset.iter().chain(&l.axis).chain([&l.joint_min, &l.joint_max]);
            if !all.into_iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(field, "values must be finite"));
            }
            let norm = Vector3::from(l.axis).norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    format!("{field}.axis"),
                    format!("must be unit length (norm {norm})"),
                ));
            }
            if l.joint_min >= l.joint_max {
                return Err(Error::invalid(
                    format!("{field}.min"),
                    "joint_min must be < joint_max",
                ));
            }
        }
        Ok(())
    }

    pub fn check_limits(&self, joints: &JointVector) -> Result<()> {
        for (i, (l, &q)) in self.links.iter().zip(&joints.angles).enumerate() {
            if !(q >= l.joint_min && q <= l.joint_max) {
                return Err(Error::JointOutOfLimits {
                    joint: i,
                    angle: q,
                    min: l.joint_min,
                    max: l.joint_max,
                });
            }
        }
        Ok(())
    }

    /// Clamps each commanded joint into its limits, then quantizes to `step`,
    /// pulling back inside the limit if rounding pushed it out.
    pub fn sanitize_target(&self, target: &JointVector, step: f64) -> JointVector {
        let mut out = *target;
        for (q, l) in out.angles.iter_mut().zip(&self.links) {
            let c = if q.is_finite() { q.clamp(l.joint_min, l.joint_max) } else { 0.0 };
            let mut k = quantize_joint(c, step);
            if k > l.joint_max {
                k -= step;
            } else if k < l.joint_min {
                k += step;
            }
            *q = k;
        }
        out.gripper = if target.gripper.is_finite() {
            target.gripper.clamp(0.0, 1.0)
        } else {
            0.0
        };
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndEffectorPose {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
}

impl EndEffectorPose {
    /// Heading of the gripper's x axis projected onto the floor plane, in
    /// the arm base frame. Falls back to the y axis when x is near vertical.
    pub fn planar_yaw(&self) -> f64 {
        let r = &self.orientation;
        if r[(0, 0)].hypot(r[(1, 0)]) > 1e-6 {
            r[(1, 0)].atan2(r[(0, 0)])
        } else {
            r[(1, 1)].atan2(r[(0, 1)]) - std::f64::consts::FRAC_PI_2
        }
    }
}

/// Composes per-link transforms: rotate about the joint axis, then translate by the offset.
pub fn forward_kinematics(chain: &KinematicChain, joints: &JointVector) -> Result<EndEffectorPose> {
    chain.check_limits(joints)?;
    let mut t = Isometry3::identity();
    for (link, &q) in chain.links.iter().zip(&joints.angles) {
        let axis = Unit::new_normalize(Vector3::from(link.axis));
        let rot = Isometry3::from_parts(Translation3::identity(), UnitQuaternion::from_axis_angle(&axis, q));
        let trans = Isometry3::translation(link.offset[0], link.offset[1], link.offset[2]);
        t = t * rot * trans;
    }
    t *= Isometry3::translation(chain.gripper_offset[0], chain.gripper_offset[1], chain.gripper_offset[2]);
    Ok(EndEffectorPose {
        position: t.translation.vector,
        orientation: *t.rotation.to_rotation_matrix().matrix(),
    })
}

/// Gripper position (x, y, z) and planar yaw in the world frame.
pub fn gripper_world(chain: &KinematicChain, rover: &Pose2D, ee: &EndEffectorPose) -> ([f64; 3], f64) {
    let (s, c) = rover.heading.sin_cos();
    let bx = chain.mount[0] + ee.position.x;
    let by = chain.mount[1] + ee.position.y;
    let z = chain.mount[2] + ee.position.z;
    (
        [rover.x + c * bx - s * by, rover.y + s * bx + c * by, z],
        normalize_angle(rover.heading + ee.planar_yaw()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn straight_line() {
        let p = step_diff_drive(Pose2D::default(), 0.5, 0.5, 0.39, 2.0).unwrap();
        assert_eq!(p.x, 1.0);
        assert_eq!(p.y, 0.0);
        assert_eq!(p.heading, 0.0);
    }

    #[test]
    fn spin_in_place() {
        let p = step_diff_drive(Pose2D::default(), -0.2, 0.2, 0.4, 0.5).unwrap();
        assert!(p.x.abs() < 1e-15 && p.y.abs() < 1e-15);
        assert!((p.heading - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quarter_arc_matches_closed_form() {
        // Independent closed form: center of curvature at (0, R); after a
        // quarter turn the pose is (R, R, π/2).
        let (vl, vr, b) = (0.3, 0.5, 0.39);
        let v = 0.5 * (vl + vr);
        let w = (vr - vl) / b;
        let dt = FRAC_PI_2 / w;
        let r = v / w;
        let p = step_diff_drive(Pose2D::default(), vl, vr, b, dt).unwrap();
        assert!((p.x - r).abs() < 1e-12, "{} vs {}", p.x, r);
        assert!((p.y - r).abs() < 1e-12);
        assert!((p.heading - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(step_diff_drive(Pose2D::default(), f64::NAN, 0.0, 0.4, 0.1).is_err());
        assert!(step_diff_drive(Pose2D::default(), 0.0, 0.0, 0.4, 0.0).is_err());
        assert!(step_diff_drive(Pose2D::default(), 0.0, 0.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn quantize_examples() {
        let step = 0.0888f64.to_radians();
        assert_eq!(quantize_joint(0.0, step), 0.0);
        assert_eq!(quantize_joint(step, step), step);
        // 0.13 / 0.0888 ≈ 1.464 → 1
        assert_eq!(quantize_joint(0.13f64.to_radians(), step), step);
        // ties go away from zero
        assert_eq!(quantize_joint(2.5, 1.0), 3.0);
        assert_eq!(quantize_joint(-2.5, 1.0), -3.0);
    }

    #[test]
    fn gimbal_clamps() {
        let g = clamp_gimbal(GimbalState { pan: 0.0, tilt: 0.0 });
        assert_eq!(g, GimbalState { pan: 0.0, tilt: 0.0 });
        let g = clamp_gimbal(GimbalState {
            pan: 100f64.to_radians(),
            tilt: -95f64.to_radians(),
        });
        assert_eq!(g.pan, FRAC_PI_2);
        assert_eq!(g.tilt, -FRAC_PI_2);
    }

    #[test]
    fn zero_joints_sum_offsets() {
        let chain = KinematicChain::default();
        let ee = forward_kinematics(&chain, &JointVector::default()).unwrap();
        let z: f64 = chain.links.iter().map(|l| l.offset[2]).sum::<f64>() + chain.gripper_offset[2];
        assert!((ee.position - Vector3::new(0.0, 0.0, z)).norm() < 1e-15);
        assert!((ee.orientation - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn first_joint_quarter_turn_rotates_downstream_offsets() {
        let link = |offset, axis| Link {
            offset,
            axis,
            joint_min: -PI,
            joint_max: PI,
        };
        let chain = KinematicChain {
            links: vec![
                link([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
                link([0.5, 0.0, 0.0], [0.0, 0.0, 1.0]),
                link([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
                link([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
                link([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
                link([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            ],
            gripper_offset: [0.0, 0.0, 0.0],
            mount: [0.0; 3],
        };
        let mut j = JointVector::default();
        j.angles[0] = FRAC_PI_2;
        let ee = forward_kinematics(&chain, &j).unwrap();
        // (1.5, 0, 0) rotated 90° about z
        assert!((ee.position - Vector3::new(0.0, 1.5, 0.0)).norm() < 1e-12);
        assert!((ee.planar_yaw() - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn out_of_limit_joint_is_rejected() {
        let chain = KinematicChain::default();
        let mut j = JointVector::default();
        j.angles[1] = 2.0;
        assert!(matches!(
            forward_kinematics(&chain, &j),
            Err(Error::JointOutOfLimits { joint: 1, .. })
        ));
    }

    #[test]
    fn chain_validation() {
        let mut chain = KinematicChain::default();
        assert!(chain.validate().is_ok());
        chain.links[2].axis = [0.0, 1.1, 0.0];
        assert!(chain.validate().unwrap_err().to_string().contains("links[2].axis"));
        let mut chain = KinematicChain::default();
        chain.links.pop();
        assert!(chain.validate().is_err());
    }

    #[test]
    fn sanitize_clamps_then_quantizes_inside_limits() {
        let chain = KinematicChain::default();
        let step = 0.0888f64.to_radians();
        let mut t = JointVector::default();
        t.angles[0] = 10.0;
        t.angles[1] = 0.13f64.to_radians();
        t.gripper = 2.0;
        let s = chain.sanitize_target(&t, step);
        assert!(s.angles[0] <= chain.links[0].joint_max);
        assert!((s.angles[0] / step - (s.angles[0] / step).round()).abs() < 1e-9);
        assert_eq!(s.angles[1], step);
        assert_eq!(s.gripper, 1.0);
    }
}
