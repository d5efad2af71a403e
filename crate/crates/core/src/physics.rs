//! Fixed-timestep world stepping.
//!
//! Each wheel carries half the rover mass. A wheel either grips (contact
//! point moves with the wheel surface) or slips, in which case the contact
//! transmits exactly `μ_d·N` until the relative speed closes. Velocity
//! commands go through a non-backdrivable gearmotor: speeding up is limited
//! by motor torque and static traction, slowing down holds the wheel at the
//! commanded speed and lets the floor absorb the difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{self, KinematicChain, clamp_gimbal, forward_kinematics, gripper_world, slew};
use crate::model::{DriveInput, GraspOffset, PhysicsParams, TwinState, normalize_angle};
use crate::units::NANOS_PER_SEC;

pub const DT_NS: u64 = 10_000_000;
pub const DT: f64 = DT_NS as f64 / NANOS_PER_SEC as f64;

/// Wheel/floor relative speed (m/s) below which stiction re-engages.
pub const STICTION_SPEED: f64 = 1e-4;
/// Gripper aperture at or below which the gripper counts as closed.
pub const GRIPPER_CLOSED: f64 = 0.2;
/// Grasp capture radius around an antenna grasp point (m).
pub const GRASP_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceModel {
    pub mu_static: f64,
    pub mu_dynamic: f64,
}

impl SurfaceModel {
    pub fn new(mu_static: f64, mu_dynamic: f64) -> Result<Self> {
        if !(mu_dynamic >= 0.0 && mu_static >= mu_dynamic) {
            return Err(Error::invalid(
                "surface",
                format!("need mu_static ({mu_static}) >= mu_dynamic ({mu_dynamic}) >= 0"),
            ));
        }
        Ok(Self { mu_static, mu_dynamic })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput {
    pub drive: DriveInput,
    pub dt_ns: u64,
}

impl StepInput {
    pub fn new(drive: DriveInput) -> Self {
        Self { drive, dt_ns: DT_NS }
    }

    pub fn dt(&self) -> f64 {
        self.dt_ns as f64 / NANOS_PER_SEC as f64
    }
}

/// Actuator slew rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Actuators {
    /// rad/s per joint
    pub joint_speed: f64,
    /// aperture fraction per second
    pub gripper_speed: f64,
    /// rad/s per gimbal axis
    pub gimbal_speed: f64,
}

impl Default for Actuators {
    fn default() -> Self {
        Self {
            joint_speed: 1.5,
            gripper_speed: 2.0,
            gimbal_speed: 3.0,
        }
    }
}

/// Everything `step_world` needs besides the state itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RoverModel {
    pub rover_id: String,
    pub physics: PhysicsParams,
    pub chain: KinematicChain,
    pub actuators: Actuators,
}

/// Per-step contact diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    /// Floor traction force on each wheel (N), left then right.
    pub traction: [f64; 2],
    pub slipping: [bool; 2],
}

pub fn traction_check(applied_force: f64, mass: f64, gravity: f64, mu_static: f64) -> bool {
    applied_force.abs() > mu_static * mass * gravity.abs()
}

/// Infers μ_d from a run that accelerates from rest to `v_final` in
/// `duration` under a known commanded acceleration.
pub fn derive_dynamic_friction(v_final: f64, duration: f64, commanded_accel: f64, gravity: f64) -> Result<f64> {
    if ![v_final, duration, commanded_accel, gravity].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("derive_dynamic_friction input"));
    }
    if duration <= 0.0 {
        return Err(Error::invalid("duration", "must be > 0"));
    }
    if gravity == 0.0 {
        return Err(Error::invalid("gravity", "must be non-zero"));
    }
    let mu = (commanded_accel - v_final / duration) / gravity.abs();
    if mu < 0.0 {
        return Err(Error::InconsistentMeasurement(format!(
            "achieved acceleration {} exceeds commanded {commanded_accel}",
            v_final / duration
        )));
    }
    Ok(mu)
}

struct Wheel {
    ground: f64,
    surface: f64,
}

struct Limits {
    half_mass: f64,
    f_static: f64,
    f_dynamic: f64,
    f_motor: f64,
    dt: f64,
}

impl Limits {
    fn new(p: &PhysicsParams, dt: f64) -> Self {
        let n = p.wheel_normal_force();
        Self {
            half_mass: 0.5 * p.rover_mass,
            f_static: p.mu_static * n,
            f_dynamic: p.mu_dynamic * n,
            f_motor: p.wheel_torque_max / p.wheel_radius,
            dt,
        }
    }

    /// Slides `ground` toward `target` under sliding friction. Returns the
    /// new ground speed, the force applied, and whether it is still slipping.
    fn slide_toward(&self, ground: f64, target: f64) -> (f64, f64, bool) {
        let dv = self.f_dynamic / self.half_mass * self.dt;
        let gap = target - ground;
        if gap.abs() <= dv.max(STICTION_SPEED) {
            (target, gap * self.half_mass / self.dt, false)
        } else {
            (ground + dv.copysign(gap), self.f_dynamic.copysign(gap), true)
        }
    }

    fn velocity(&self, w: &Wheel, cmd: f64) -> (Wheel, f64, bool) {
        let slipping = (w.surface - w.ground).abs() >= STICTION_SPEED;
        let f_req = self.half_mass * (cmd - w.ground) / self.dt;
        let speeding_up = cmd != 0.0 && (cmd - w.ground) * cmd > 0.0;
        if !slipping {
            let grip_limit = if speeding_up { self.f_motor.min(self.f_static) } else { self.f_static };
            if f_req.abs() <= grip_limit {
                return (Wheel { ground: cmd, surface: cmd }, f_req, false);
            }
            if speeding_up && self.f_motor <= self.f_static {
                let f = self.f_motor.copysign(f_req);
                let g = w.ground + f / self.half_mass * self.dt;
                return (Wheel { ground: g, surface: g }, f, false);
            }
        }
        let (g, f, still) = self.slide_toward(w.ground, cmd);
        let surface = if still { cmd } else { g };
        (Wheel { ground: g, surface }, f, still)
    }

    fn torque(&self, w: &Wheel, torque: f64, radius: f64) -> (Wheel, f64, bool) {
        let f_motor = (torque / radius).clamp(-self.f_motor, self.f_motor);
        let rel = w.surface - w.ground;
        if rel.abs() < STICTION_SPEED && f_motor.abs() <= self.f_static {
            let g = w.ground + f_motor / self.half_mass * self.dt;
            return (Wheel { ground: g, surface: g }, f_motor, false);
        }
        let dir = if rel.abs() >= STICTION_SPEED { rel.signum() } else { f_motor.signum() };
        let f = self.f_dynamic * dir;
        let g = w.ground + f / self.half_mass * self.dt;
        // wheel-side inertia taken equal to the carried mass
        let s = w.surface + (f_motor - f) / self.half_mass * self.dt;
        if (s - g) * dir <= STICTION_SPEED {
            (Wheel { ground: g, surface: g }, f, false)
        } else {
            (Wheel { ground: g, surface: s }, f, true)
        }
    }

    fn drag(&self, w: &Wheel, f_ext: f64) -> (Wheel, f64, bool) {
        let at_rest = w.ground == 0.0;
        if at_rest && f_ext.abs() <= self.f_static {
            return (Wheel { ground: 0.0, surface: 0.0 }, -f_ext, false);
        }
        let dir = if at_rest { f_ext.signum() } else { w.ground.signum() };
        let friction = -self.f_dynamic * dir;
        let g = w.ground + (f_ext + friction) / self.half_mass * self.dt;
        if !at_rest && g * dir <= 0.0 {
            let f = -w.ground * self.half_mass / self.dt - f_ext;
            return (Wheel { ground: 0.0, surface: 0.0 }, f, false);
        }
        (Wheel { ground: g, surface: 0.0 }, friction, true)
    }
}

pub fn step_world(state: &TwinState, input: &StepInput, model: &RoverModel) -> TwinState {
    step_world_detailed(state, input, model).0
}

pub fn step_world_detailed(state: &TwinState, input: &StepInput, model: &RoverModel) -> (TwinState, StepReport) {
    let p = &model.physics;
    let dt = input.dt();
    let lim = Limits::new(p, dt);
    let r = p.wheel_radius;
    let mut next = state.clone();
    let mut report = StepReport::default();

    let sides = [
        Wheel { ground: state.ground_speed.left, surface: state.wheels.left * r },
        Wheel { ground: state.ground_speed.right, surface: state.wheels.right * r },
    ];
    let mut out = Vec::with_capacity(2);
    for (i, w) in sides.iter().enumerate() {
        let (nw, f, slip) = match input.drive {
            DriveInput::Velocity { left, right } => lim.velocity(w, if i == 0 { left } else { right }),
            DriveInput::Torque { left, right } => lim.torque(w, if i == 0 { left } else { right }, r),
            DriveInput::Drag { force } => lim.drag(w, 0.5 * force),
        };
        report.traction[i] = f;
        report.slipping[i] = slip;
        out.push(nw);
    }
    next.ground_speed.left = out[0].ground;
    next.ground_speed.right = out[1].ground;
    next.wheels.left = out[0].surface / r;
    next.wheels.right = out[1].surface / r;

    let vl = 0.5 * (state.ground_speed.left + out[0].ground);
    let vr = 0.5 * (state.ground_speed.right + out[1].ground);
    if vl != 0.0 || vr != 0.0 {
        // inputs are finite by construction
        next.rover = kinematics::step_diff_drive(state.rover, vl, vr, p.wheel_base, dt).unwrap_or(state.rover);
    }

    step_arm(&mut next, model, dt);
    next.sim_time_ns = state.sim_time_ns + input.dt_ns;
    (next, report)
}

fn step_arm(next: &mut TwinState, model: &RoverModel, dt: f64) {
    let act = &model.actuators;
    let prev_gripper = next.arm.gripper;
    let target = next.controls.arm_target;
    for (q, t) in next.arm.angles.iter_mut().zip(target.angles) {
        *q = slew(*q, t, act.joint_speed * dt);
    }
    next.arm.gripper = slew(next.arm.gripper, target.gripper, act.gripper_speed * dt);

    let g = clamp_gimbal(next.controls.gimbal_target);
    next.gimbal.pan = slew(next.gimbal.pan, g.pan, act.gimbal_speed * dt);
    next.gimbal.tilt = slew(next.gimbal.tilt, g.tilt, act.gimbal_speed * dt);

    if next.antennas.is_empty() {
        return;
    }
    let Ok(ee) = forward_kinematics(&model.chain, &next.arm) else {
        return;
    };
    let (tip, yaw) = gripper_world(&model.chain, &next.rover, &ee);
    let closed = next.arm.gripper <= GRIPPER_CLOSED;
    let just_closed = closed && prev_gripper > GRIPPER_CLOSED;
    let (s, c) = yaw.sin_cos();

    let mut holding = false;
    for a in next.antennas.iter_mut() {
        if a.grasped_by.as_deref() != Some(model.rover_id.as_str()) {
            continue;
        }
        match (closed, a.grasp_offset) {
            (true, Some(off)) => {
                holding = true;
                a.pose.x = tip[0] + c * off.dx - s * off.dy;
                a.pose.y = tip[1] + s * off.dx + c * off.dy;
                a.pose.heading = normalize_angle(yaw + off.d_heading);
                a.orientation = normalize_angle(yaw + off.d_orientation);
            }
            _ => {
                a.grasped_by = None;
                a.grasp_offset = None;
            }
        }
    }
    if !just_closed || holding {
        return;
    }
    let nearest = next
        .antennas
        .iter_mut()
        .filter(|a| a.grasped_by.is_none())
        .map(|a| {
            let d = ((a.pose.x - tip[0]).powi(2) + (a.pose.y - tip[1]).powi(2) + (a.grasp_height - tip[2]).powi(2)).sqrt();
            (d, a)
        })
        .filter(|(d, _)| *d <= GRASP_RADIUS)
        .min_by(|x, y| x.0.total_cmp(&y.0));
    if let Some((_, a)) = nearest {
        let (dx, dy) = (a.pose.x - tip[0], a.pose.y - tip[1]);
        a.grasp_offset = Some(GraspOffset {
            dx: c * dx + s * dy,
            dy: -s * dx + c * dy,
            d_heading: normalize_angle(a.pose.heading - yaw),
            d_orientation: normalize_angle(a.orientation - yaw),
        });
        a.grasped_by = Some(model.rover_id.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JointVector, Pose2D};

    fn model(physics: PhysicsParams) -> RoverModel {
        RoverModel {
            rover_id: "rover".into(),
            physics,
            chain: KinematicChain::default(),
            actuators: Actuators::default(),
        }
    }

    fn rest() -> TwinState {
        TwinState::new(Pose2D::default(), JointVector::default(), vec![])
    }

    #[test]
    fn traction_threshold() {
        assert!(!traction_check(0.0, 10.0, -9.81, 0.5));
        // threshold 0.5 · 10 · 9.81 = 49.05 N
        assert!(!traction_check(49.0, 10.0, -9.81, 0.5));
        assert!(traction_check(49.1, 10.0, -9.81, 0.5));
        assert!(traction_check(-49.1, 10.0, -9.81, 0.5));
    }

    #[test]
    fn dynamic_friction_from_run() {
        assert_eq!(derive_dynamic_friction(2.0, 2.0, 1.0, -9.81).unwrap(), 0.0);
        let mu = derive_dynamic_friction(0.8, 1.0, 1.0, -9.81).unwrap();
        assert!((mu - 0.2 / 9.81).abs() < 1e-15);
        assert!((mu - 0.0204).abs() < 5e-5);
        assert!(matches!(
            derive_dynamic_friction(1.5, 1.0, 1.0, -9.81),
            Err(Error::InconsistentMeasurement(_))
        ));
        assert!(derive_dynamic_friction(1.0, 0.0, 1.0, -9.81).is_err());
    }

    #[test]
    fn idle_step_only_advances_clock() {
        let m = model(PhysicsParams::default());
        let s = rest();
        let n = step_world(&s, &StepInput::new(DriveInput::default()), &m);
        assert_eq!(n.sim_time_ns, DT_NS);
        assert_eq!(TwinState { sim_time_ns: 0, ..n }, s);
    }

    #[test]
    fn torque_slip_accelerates_at_sliding_limit() {
        let p = PhysicsParams {
            wheel_torque_max: 100.0,
            ..Default::default()
        };
        let m = model(p);
        let mut s = rest();
        let input = StepInput::new(DriveInput::Torque { left: 50.0, right: 50.0 });
        let expect = p.mu_dynamic * p.gravity.abs();
        let mut v_prev = 0.0;
        for _ in 0..20 {
            let (n, rep) = step_world_detailed(&s, &input, &m);
            assert!(rep.slipping[0] && rep.slipping[1]);
            let a = (n.forward_speed() - v_prev) / DT;
            assert!((a - expect).abs() < 1e-9, "{a} vs {expect}");
            v_prev = n.forward_speed();
            s = n;
        }
    }

    #[test]
    fn braking_slide_stop_time() {
        let p = PhysicsParams {
            mu_static: 0.5,
            mu_dynamic: 0.4,
            ..Default::default()
        };
        let m = model(p);
        let mut s = rest();
        s.ground_speed.left = 0.5;
        s.ground_speed.right = 0.5;
        s.wheels.left = 0.5 / p.wheel_radius;
        s.wheels.right = 0.5 / p.wheel_radius;
        let input = StepInput::new(DriveInput::default());
        let mut t = 0.0;
        while s.forward_speed() != 0.0 {
            s = step_world(&s, &input, &m);
            t += DT;
            assert!(t < 1.0);
        }
        let closed_form = 0.5 / (0.4 * 9.81);
        assert!((t - closed_form).abs() <= DT, "{t} vs {closed_form}");
    }

    #[test]
    fn drag_hold_and_slide() {
        let p = PhysicsParams {
            rover_mass: 10.0,
            mu_static: 0.5,
            mu_dynamic: 0.4,
            ..Default::default()
        };
        let m = model(p);
        let mut s = rest();
        let hold = StepInput::new(DriveInput::Drag { force: 49.0 });
        for _ in 0..100 {
            s = step_world(&s, &hold, &m);
        }
        assert_eq!(s.rover, Pose2D::default());
        let push = StepInput::new(DriveInput::Drag { force: 49.1 });
        s = step_world(&s, &push, &m);
        assert!(s.forward_speed() > 0.0);
    }

    #[test]
    fn velocity_ramp_is_motor_limited() {
        let p = PhysicsParams::default();
        let m = model(p);
        let mut s = rest();
        let input = StepInput::new(DriveInput::Velocity { left: 0.5, right: 0.5 });
        let (n, rep) = step_world_detailed(&s, &input, &m);
        let a = n.forward_speed() / DT;
        let expect = p.wheel_torque_max / p.wheel_radius / (0.5 * p.rover_mass);
        assert!((a - expect).abs() < 1e-9);
        assert!(!rep.slipping[0]);
        for _ in 0..500 {
            s = step_world(&s, &input, &m);
        }
        assert_eq!(s.forward_speed(), 0.5);
    }

    #[test]
    fn surface_model_invariant() {
        assert!(SurfaceModel::new(0.5, 0.4).is_ok());
        assert!(SurfaceModel::new(0.3, 0.5).is_err());
        assert!(SurfaceModel::new(0.3, -0.1).is_err());
    }
}
