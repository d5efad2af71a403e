//! Antenna-realignment task: alignment checks and session metrics.
//!
//! Alignment error is measured modulo a half-turn because a dipole looks the
//! same after rotating it by 180°. `strict_360` switches to full-turn error.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AntennaNode, JointVector, Pose2D, normalize_angle};
use crate::units::ns_to_secs;

pub const DEFAULT_TOLERANCE_DEG: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub rover_start: Pose2D,
    pub initial_arm: JointVector,
    pub antennas: Vec<AntennaNode>,
    pub time_limit_ns: Option<u64>,
    /// X in "success rate over X attempts".
    pub attempts_allowed: u32,
    #[serde(default)]
    pub strict_360: bool,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.antennas.is_empty() {
            return Err(Error::invalid("scenario.antennas", "at least one antenna is required"));
        }
        for (i, a) in self.antennas.iter().enumerate() {
            a.validate(&format!("scenario.antennas[{i}]"))?;
        }
        if self.attempts_allowed < 1 {
            return Err(Error::invalid("scenario.attempts_allowed", "must be >= 1"));
        }
        Ok(())
    }
}

/// Angular distance in [0, π/2] (dipole) or [0, π] (strict).
pub fn orientation_error(orientation: f64, target: f64, strict_360: bool) -> f64 {
    let d = normalize_angle(orientation - target).abs();
    if strict_360 { d } else { d.min(PI - d) }
}

pub fn check_alignment(antenna: &AntennaNode, strict_360: bool) -> bool {
    antenna.grasped_by.is_none()
        && orientation_error(antenna.orientation, antenna.target_orientation, strict_360) <= antenna.tolerance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioEvent {
    Start { scenario_id: String, attempts_allowed: u32 },
    Reset { reset_count: u32 },
    Grasp { antenna: String },
    Release { antenna: String },
    Aligned { antenna: String },
    Misaligned { antenna: String },
    /// Every antenna aligned; ends the current attempt.
    Completed,
    TimeLimit,
    /// Antenna pose, emitted at start, after a reset and whenever it moves.
    AntennaPose {
        antenna: String,
        x: f64,
        y: f64,
        orientation: f64,
        target: f64,
        grasped: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time_ns: u64,
    pub event: ScenarioEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    /// Seconds from start to the first completed attempt.
    pub time_to_completion: Option<f64>,
    pub reset_count: u32,
    /// Completed attempts among the first `attempts`.
    pub successes: u32,
    /// Scored attempts (X).
    pub attempts: u32,
    pub attempts_started: u32,
    pub success_rate: f64,
}

/// An attempt runs from start or a reset until the next reset or completion.
pub fn evaluate_session(events: &[EventRecord]) -> Result<SessionMetrics> {
    let mut sorted: Vec<&EventRecord> = events.iter().collect();
    sorted.sort_by_key(|e| e.time_ns);
    let start_idx = sorted
        .iter()
        .position(|e| matches!(e.event, ScenarioEvent::Start { .. }))
        .ok_or(Error::MissingStart)?;
    let (start_ns, allowed) = match &sorted[start_idx].event {
        ScenarioEvent::Start { attempts_allowed, .. } => (sorted[start_idx].time_ns, (*attempts_allowed).max(1)),
        _ => unreachable!(),
    };

    let mut attempt = 1u32;
    let mut open = true;
    let mut resets = 0u32;
    let mut successes = 0u32;
    let mut completion: Option<u64> = None;
    for e in &sorted[start_idx + 1..] {
        match e.event {
            ScenarioEvent::Reset { .. } => {
                resets += 1;
                attempt += 1;
                open = true;
            }
            ScenarioEvent::Completed if open => {
                open = false;
                if attempt <= allowed {
                    successes += 1;
                }
                completion.get_or_insert(e.time_ns - start_ns);
            }
            _ => {}
        }
    }
    Ok(SessionMetrics {
        time_to_completion: completion.map(ns_to_secs),
        reset_count: resets,
        successes,
        attempts: allowed,
        attempts_started: attempt,
        success_rate: successes as f64 / allowed as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::NANOS_PER_SEC;
    use proptest::prelude::*;

    fn antenna(orientation_deg: f64, tol_deg: f64) -> AntennaNode {
        AntennaNode {
            id: "a".into(),
            pose: Pose2D::default(),
            orientation: normalize_angle(orientation_deg.to_radians()),
            target_orientation: 0.0,
            tolerance: tol_deg.to_radians(),
            grasp_height: 0.1,
            grasped_by: None,
            grasp_offset: None,
        }
    }

    fn ev(t_s: u64, event: ScenarioEvent) -> EventRecord {
        EventRecord {
            time_ns: t_s * NANOS_PER_SEC,
            event,
        }
    }

    fn start(x: u32) -> ScenarioEvent {
        ScenarioEvent::Start {
            scenario_id: "s".into(),
            attempts_allowed: x,
        }
    }

    #[test]
    fn alignment_examples() {
        assert!(check_alignment(&antenna(0.0, 5.0), false));
        assert!(check_alignment(&antenna(180.0, 5.0), false));
        assert!(!check_alignment(&antenna(180.0, 5.0), true));
        assert!(!check_alignment(&antenna(10.0, 5.0), false));
        let mut held = antenna(0.0, 5.0);
        held.grasped_by = Some("rover".into());
        assert!(!check_alignment(&held, false));
    }

    proptest! {
        #[test]
        fn error_symmetric_and_half_turn_invariant(a in -10.0f64..10.0, b in -10.0f64..10.0, k in -4i32..4) {
            let e = orientation_error(a, b, false);
            prop_assert!((e - orientation_error(b, a, false)).abs() < 1e-12);
            prop_assert!((e - orientation_error(a + k as f64 * PI, b, false)).abs() < 1e-9);
            prop_assert!((0.0..=PI / 2.0 + 1e-12).contains(&e));
        }
    }

    #[test]
    fn session_with_resets() {
        let log = vec![
            ev(0, start(1)),
            ev(100, ScenarioEvent::Reset { reset_count: 1 }),
            ev(200, ScenarioEvent::Reset { reset_count: 2 }),
            ev(304, ScenarioEvent::Completed),
        ];
        let m = evaluate_session(&log).unwrap();
        assert_eq!(m.time_to_completion, Some(304.0));
        assert_eq!(m.reset_count, 2);
        assert_eq!(m.attempts_started, 3);
    }

    #[test]
    fn incomplete_session() {
        let m = evaluate_session(&[ev(0, start(3)), ev(50, ScenarioEvent::TimeLimit)]).unwrap();
        assert_eq!(m.time_to_completion, None);
        assert_eq!(m.success_rate, 0.0);
    }

    #[test]
    fn success_rate_over_x() {
        let mut log = vec![ev(0, start(5))];
        let mut t = 0;
        for _ in 0..3 {
            t += 10;
            log.push(ev(t, ScenarioEvent::Completed));
            t += 1;
            log.push(ev(t, ScenarioEvent::Reset { reset_count: 0 }));
        }
        t += 10;
        log.push(ev(t, ScenarioEvent::Reset { reset_count: 0 }));
        let m = evaluate_session(&log).unwrap();
        assert_eq!((m.successes, m.attempts), (3, 5));
        assert!((m.success_rate - 0.6).abs() < 1e-15);
        assert_eq!(m.time_to_completion, Some(10.0));
    }

    #[test]
    fn evaluation_is_order_independent() {
        let log = vec![
            ev(304, ScenarioEvent::Completed),
            ev(0, start(1)),
            ev(100, ScenarioEvent::Reset { reset_count: 1 }),
        ];
        let m1 = evaluate_session(&log).unwrap();
        let mut rev = log.clone();
        rev.reverse();
        assert_eq!(m1, evaluate_session(&rev).unwrap());
        assert_eq!(m1.time_to_completion, Some(304.0));
    }

    #[test]
    fn missing_start() {
        assert!(matches!(
            evaluate_session(&[ev(1, ScenarioEvent::Completed)]),
            Err(Error::MissingStart)
        ));
    }
}
