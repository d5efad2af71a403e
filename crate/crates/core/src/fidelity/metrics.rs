//! Twin-accuracy metrics computed from run logs: message latency, absolute
//! joint error, joint movement resolution and driving distance.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::bus::{Direction, Envelope, Payload, Topic, measure_latency};
use crate::error::{Error, Result};
use crate::model::{DriveInput, NUM_JOINTS};
use crate::sim::RunLog;
use crate::units::NANOS_PER_MS;

/// Samples count toward joint error only this long after a command lands.
pub const SETTLE_NS: u64 = 500 * NANOS_PER_MS;
/// Quanta below this are reported as effectively continuous (1e-4°).
pub const CONTINUOUS_STEP: f64 = 1e-4 * PI / 180.0;
/// Largest step tried when looking for a quantum: 1e-3°.
const FINEST_SEARCHED: f64 = 1e-3 * PI / 180.0;
/// Comb coherence needed to accept a quantum.
const COHERENCE: f64 = 0.6;
/// Minimum settled samples for a plateau to count.
const MIN_PLATEAU_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyDelta {
    /// Signed, physical minus digital median, ms.
    pub command_ms: f64,
    pub telemetry_ms: f64,
}

impl LatencyDelta {
    /// Delay to inject into the twin per direction; negative deltas are not corrected.
    pub fn injectable(&self) -> LatencyDelta {
        LatencyDelta {
            command_ms: self.command_ms.max(0.0),
            telemetry_ms: self.telemetry_ms.max(0.0),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.command_ms.abs().max(self.telemetry_ms.abs())
    }
}

fn median_ms(log: &RunLog, dir: Direction) -> Result<f64> {
    measure_latency(log.direction(dir))
        .map(|s| s.median_ms)
        .map_err(|_| Error::EmptyLog(match dir {
            Direction::Command => "no delivered commands",
            Direction::Telemetry => "no delivered telemetry",
        }))
}

pub fn metric_latency(physical: &RunLog, digital: &RunLog) -> Result<LatencyDelta> {
    Ok(LatencyDelta {
        command_ms: median_ms(physical, Direction::Command)? - median_ms(digital, Direction::Command)?,
        telemetry_ms: median_ms(physical, Direction::Telemetry)? - median_ms(digital, Direction::Telemetry)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointSample {
    pub t_ns: u64,
    pub joints: [f64; NUM_JOINTS],
}

/// Commanded joints as a step function, one sample per delivered `arm_cmd`.
pub fn commanded_trajectory(log: &RunLog) -> Vec<JointSample> {
    let mut v: Vec<JointSample> = log
        .topic(Topic::ArmCmd)
        .filter_map(|e| match (&e.payload, e.delivered_at_ns) {
            (Payload::Arm(a), Some(t)) => Some(JointSample { t_ns: t, joints: a.joints }),
            _ => None,
        })
        .collect();
    v.sort_by_key(|s| s.t_ns);
    v
}

/// Reported joints stamped with their publish time.
pub fn measured_trajectory(log: &RunLog) -> Vec<JointSample> {
    let mut v: Vec<JointSample> = log
        .topic(Topic::JointStates)
        .filter_map(|e| match &e.payload {
            Payload::JointStates(j) => Some(JointSample {
                t_ns: e.sent_at_ns,
                joints: j.joints,
            }),
            _ => None,
        })
        .collect();
    v.sort_by_key(|s| s.t_ns);
    v
}

/// Settled measured samples paired with the command in force: `(segment, measured − commanded)`.
fn settled(commanded: &[JointSample], measured: &[JointSample], settle_ns: u64) -> Vec<(usize, [f64; NUM_JOINTS], [f64; NUM_JOINTS])> {
    let mut cmd = commanded.to_vec();
    cmd.sort_by_key(|s| s.t_ns);
    let mut meas = measured.to_vec();
    meas.sort_by_key(|s| s.t_ns);
    let mut out = Vec::new();
    let mut k = 0;
    for m in &meas {
        while k + 1 < cmd.len() && cmd[k + 1].t_ns <= m.t_ns {
            k += 1;
        }
        let Some(c) = cmd.get(k).filter(|c| c.t_ns <= m.t_ns) else {
            continue;
        };
        if m.t_ns < c.t_ns + settle_ns {
            continue;
        }
        let mut r = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            r[j] = m.joints[j] - c.joints[j];
        }
        out.push((k, r, m.joints));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointErrorStats {
    /// Mean |measured − commanded| per joint, radians.
    pub mean_abs: [f64; NUM_JOINTS],
    pub max_abs: [f64; NUM_JOINTS],
    /// Mean signed residual per joint, radians.
    pub mean: [f64; NUM_JOINTS],
    pub samples: usize,
}

/// Per-joint error over settled samples, where the commanded trajectory is
/// held constant between commands.
pub fn metric_joint_error(commanded: &[JointSample], measured: &[JointSample]) -> Result<JointErrorStats> {
    let s = settled(commanded, measured, SETTLE_NS);
    if s.is_empty() {
        return Err(Error::NoOverlap);
    }
    let n = s.len() as f64;
    let mut st = JointErrorStats {
        mean_abs: [0.0; NUM_JOINTS],
        max_abs: [0.0; NUM_JOINTS],
        mean: [0.0; NUM_JOINTS],
        samples: s.len(),
    };
    for (_, r, _) in &s {
        for j in 0..NUM_JOINTS {
            st.mean_abs[j] += r[j].abs() / n;
            st.mean[j] += r[j] / n;
            st.max_abs[j] = st.max_abs[j].max(r[j].abs());
        }
    }
    Ok(st)
}

/// Fits the bias + Gaussian noise model: bias is the mean residual, σ comes
/// from the folded-normal mean `E|r − b| = σ·√(2/π)`, pooled over joints.
pub fn fit_bias_noise(commanded: &[JointSample], measured: &[JointSample]) -> Result<([f64; NUM_JOINTS], f64)> {
    let s = settled(commanded, measured, SETTLE_NS);
    if s.is_empty() {
        return Err(Error::NoOverlap);
    }
    let n = s.len() as f64;
    let mut bias = [0.0; NUM_JOINTS];
    for (_, r, _) in &s {
        for j in 0..NUM_JOINTS {
            bias[j] += r[j] / n;
        }
    }
    let mut dev = 0.0;
    for (_, r, _) in &s {
        for j in 0..NUM_JOINTS {
            dev += (r[j] - bias[j]).abs();
        }
    }
    let sigma = dev / (n * NUM_JOINTS as f64) * (PI / 2.0).sqrt();
    Ok((bias, sigma))
}

/// Mean settled position of `joint` for each command segment.
pub fn settled_positions(commanded: &[JointSample], measured: &[JointSample], joint: usize) -> Vec<f64> {
    let mut sums: Vec<(usize, f64, usize)> = Vec::new();
    for (seg, _, m) in settled(commanded, measured, SETTLE_NS) {
        match sums.last_mut() {
            Some(last) if last.0 == seg => {
                last.1 += m[joint];
                last.2 += 1;
            }
            _ => sums.push((seg, m[joint], 1)),
        }
    }
    sums.into_iter()
        .filter(|s| s.2 >= MIN_PLATEAU_SAMPLES)
        .map(|s| s.1 / s.2 as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    /// Estimated quantum, radians.
    pub step: f64,
    /// No quantum of at least 1e-3° explains the positions.
    pub continuous: bool,
    pub positions: usize,
}

fn coherence(positions: &[f64], freq: f64) -> (f64, f64) {
    let (mut re, mut im) = (0.0, 0.0);
    for &p in positions {
        let (s, c) = (TAU * freq * p).sin_cos();
        re += c;
        im += s;
    }
    let n = positions.len() as f64;
    (re.hypot(im) / n, im.atan2(re))
}

/// Greatest common quantum of settled positions.
///
/// Scans the comb coherence `|mean exp(2πi·p/q)|` upward in frequency `1/q`
/// and takes the first peak above 0.6 once the trivial peak at zero has
/// been left, so the largest consistent quantum wins over its divisors. The
/// peak is then refined by least squares on the implied integer levels.
pub fn metric_joint_resolution(positions: &[f64]) -> Result<Resolution> {
    let mut p: Vec<f64> = positions.iter().copied().filter(|v| v.is_finite()).collect();
    p.sort_by(f64::total_cmp);
    let distinct = 1 + p.windows(2).filter(|w| w[1] > w[0]).count();
    if p.is_empty() || distinct < 2 {
        return Err(Error::InsufficientPositions(if p.is_empty() { 0 } else { distinct }));
    }
    let origin = p[0];
    let rel: Vec<f64> = p.iter().map(|v| v - origin).collect();
    let span = rel[rel.len() - 1];
    let df = 1.0 / (16.0 * span);
    let f_max = 1.0 / FINEST_SEARCHED;

    let mut f = df;
    let mut left_zero = false;
    let mut peak = None;
    while f <= f_max {
        let (c, _) = coherence(&rel, f);
        if !left_zero {
            left_zero = c < COHERENCE;
        } else if c >= COHERENCE {
            // climb to the local maximum
            let (mut best_f, mut best_c) = (f, c);
            loop {
                let (c2, _) = coherence(&rel, best_f + df);
                if c2 <= best_c {
                    break;
                }
                best_f += df;
                best_c = c2;
            }
            peak = Some(best_f);
            break;
        }
        f += df;
    }
    let Some(f0) = peak else {
        return Ok(Resolution {
            step: CONTINUOUS_STEP,
            continuous: true,
            positions: p.len(),
        });
    };
    let fit = crate::fidelity::search::golden_section(|f| -coherence(&rel, f).0, f0 - df, f0 + df, df * 1e-6, 100);
    let q0 = 1.0 / fit.x;
    let (_, phase) = coherence(&rel, fit.x);
    let offset = phase / TAU * q0;
    let k: Vec<f64> = rel.iter().map(|v| ((v - offset) / q0).round()).collect();
    let n = k.len() as f64;
    let (km, pm) = (k.iter().sum::<f64>() / n, rel.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (ki, pi) in k.iter().zip(&rel) {
        sxy += (ki - km) * (pi - pm);
        sxx += (ki - km).powi(2);
    }
    let step = if sxx > 0.0 { sxy / sxx } else { q0 };
    Ok(Resolution {
        step: step.abs(),
        continuous: false,
        positions: p.len(),
    })
}

/// Snaps `step` to the nearest multiple of `grid` when within `tol`. Used
/// when the staircase was commanded on a known grid.
pub fn snap_to_grid(step: f64, grid: f64, tol: f64) -> f64 {
    let n = (step / grid).round().max(1.0);
    if (step - n * grid).abs() <= tol { n * grid } else { step }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivePhase {
    pub command: DriveInput,
    pub start_ns: u64,
    /// Path length travelled during the phase, meters.
    pub distance: f64,
}

impl DrivePhase {
    pub fn is_stop(&self) -> bool {
        matches!(self.command, DriveInput::Velocity { left, right } if left == 0.0 && right == 0.0)
    }
}

/// Splits odometry path length by delivered drive commands sent at or after `from_ns`.
pub fn drive_phases(log: &RunLog, from_ns: u64) -> Result<Vec<DrivePhase>> {
    let mut cmds: Vec<&Envelope> = log
        .topic(Topic::DriveCmd)
        .filter(|e| e.sent_at_ns >= from_ns && e.delivered_at_ns.is_some())
        .collect();
    cmds.sort_by_key(|e| e.delivered_at_ns);
    let mut odo: Vec<(u64, f64, f64)> = log
        .topic(Topic::Odometry)
        .filter_map(|e| match &e.payload {
            Payload::Odometry(o) => Some((e.sent_at_ns, o.x, o.y)),
            _ => None,
        })
        .collect();
    if odo.is_empty() {
        return Err(Error::MissingOdometry);
    }
    odo.sort_by_key(|o| o.0);
    let end = odo[odo.len() - 1].0;
    let mut phases = Vec::new();
    for (i, c) in cmds.iter().enumerate() {
        let Payload::Drive(d) = c.payload else { continue };
        let start = c.delivered_at_ns.expect("filtered");
        if start > end {
            break;
        }
        let stop = cmds.get(i + 1).and_then(|n| n.delivered_at_ns).unwrap_or(end).min(end);
        let lo = odo.partition_point(|o| o.0 < start);
        let hi = odo.partition_point(|o| o.0 <= stop);
        let distance = odo[lo..hi].windows(2).map(|w| (w[1].1 - w[0].1).hypot(w[1].2 - w[0].2)).sum();
        phases.push(DrivePhase {
            command: d,
            start_ns: start,
            distance,
        });
    }
    Ok(phases)
}

/// Time of the first drive command that asks for motion.
pub fn first_motion_ns(log: &RunLog) -> Option<u64> {
    log.topic(Topic::DriveCmd)
        .filter(|e| match e.payload {
            Payload::Drive(DriveInput::Velocity { left, right }) => left != 0.0 || right != 0.0,
            Payload::Drive(_) => true,
            _ => false,
        })
        .map(|e| e.sent_at_ns)
        .min()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingError {
    pub physical_m: f64,
    pub digital_m: f64,
    pub error_m: f64,
    pub error_pct: f64,
}

pub fn metric_driving_error(physical: &RunLog, digital: &RunLog) -> Result<DrivingError> {
    let total = |log: &RunLog| -> Result<f64> { Ok(drive_phases(log, 0)?.iter().map(|p| p.distance).sum()) };
    let (dp, dd) = (total(physical)?, total(digital)?);
    let err = (dp - dd).abs();
    Ok(DrivingError {
        physical_m: dp,
        digital_m: dd,
        error_m: err,
        error_pct: if dp > 0.0 { 100.0 * err / dp } else if err == 0.0 { 0.0 } else { 100.0 },
    })
}
