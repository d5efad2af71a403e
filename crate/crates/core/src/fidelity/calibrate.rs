//! Staged calibration of twin corrections against a physical run log.
//!
//! Stages are fitted independently because each perturbation moves a single
//! metric: latency, then resolution, then joint bias/noise, then driving
//! (torque scale on the accelerating legs, μ_d on the braking legs). A stage
//! whose metric ends up worse than before is reverted.

use serde::{Deserialize, Serialize};

use crate::bus::LatencyModel;
use crate::config::TwinConfig;
use crate::emulator::PerturbationProfile;
use crate::error::Result;
use crate::fidelity::metrics::{
    self, DrivePhase, DrivingError, JointErrorStats, LatencyDelta, Resolution, commanded_trajectory, drive_phases, first_motion_ns,
    measured_trajectory,
};
use crate::fidelity::search::{CheckedFit, checked_minimize};
use crate::model::NUM_JOINTS;
use crate::sim::{RunLog, Session, TimedCommand, run_commands};
use crate::units::{NANOS_PER_MS, NANOS_PER_SEC};

pub const GRID_POINTS: usize = 200;
pub const TORQUE_SCALE_RANGE: (f64, f64) = (0.05, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub latency_ms: f64,
    /// radians
    pub joint_error: f64,
    /// radians
    pub resolution: f64,
    pub driving_pct: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            latency_ms: 10.0,
            joint_error: 0.05f64.to_radians(),
            resolution: 1e-4f64.to_radians(),
            driving_pct: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointErrorGap {
    pub physical: [f64; NUM_JOINTS],
    pub digital: [f64; NUM_JOINTS],
    /// Largest |physical − digital| mean absolute error over joints.
    pub max_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionGap {
    pub physical: Resolution,
    pub digital: Resolution,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub latency_delta: LatencyDelta,
    pub joint_abs_error: JointErrorGap,
    pub joint_resolution: ResolutionGap,
    pub driving: DrivingError,
}

/// Per-metric gaps, all ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub latency_ms: f64,
    pub joint_error: f64,
    pub resolution: f64,
    pub driving_pct: f64,
}

impl Residuals {
    pub fn within(&self, tol: &Tolerances) -> bool {
        self.latency_ms <= tol.latency_ms
            && self.joint_error <= tol.joint_error
            && self.resolution <= tol.resolution
            && self.driving_pct <= tol.driving_pct
    }
}

impl FidelityReport {
    pub fn residuals(&self) -> Residuals {
        Residuals {
            latency_ms: self.latency_delta.max_abs(),
            joint_error: self.joint_abs_error.max_gap,
            resolution: self.joint_resolution.gap,
            driving_pct: self.driving.error_pct,
        }
    }
}

/// The joint with the most distinct commanded values (the staircase joint).
pub fn staircase_joint(log: &RunLog) -> usize {
    let cmd = commanded_trajectory(log);
    (0..NUM_JOINTS)
        .max_by_key(|&j| {
            let mut v: Vec<f64> = cmd.iter().map(|c| c.joints[j]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            (v.len(), std::cmp::Reverse(j))
        })
        .unwrap_or(0)
}

fn resolution_of(log: &RunLog, joint: usize, grid: f64, tol: f64) -> Result<Resolution> {
    let pos = metrics::settled_positions(&commanded_trajectory(log), &measured_trajectory(log), joint);
    let mut r = metrics::metric_joint_resolution(&pos)?;
    if !r.continuous {
        r.step = metrics::snap_to_grid(r.step, grid, tol);
    }
    Ok(r)
}

fn joint_error_of(log: &RunLog) -> Result<JointErrorStats> {
    metrics::metric_joint_error(&commanded_trajectory(log), &measured_trajectory(log))
}

/// Computes all four metrics between a physical and a digital log of the same commands.
pub fn fidelity_report(physical: &RunLog, digital: &RunLog, grid: f64) -> Result<FidelityReport> {
    let tol = Tolerances::default();
    let joint = staircase_joint(physical);
    let (pe, de) = (joint_error_of(physical)?, joint_error_of(digital)?);
    let max_gap = (0..NUM_JOINTS).map(|j| (pe.mean_abs[j] - de.mean_abs[j]).abs()).fold(0.0, f64::max);
    let (pr, dr) = (resolution_of(physical, joint, grid, tol.resolution)?, resolution_of(digital, joint, grid, tol.resolution)?);
    Ok(FidelityReport {
        latency_delta: metrics::metric_latency(physical, digital)?,
        joint_abs_error: JointErrorGap {
            physical: pe.mean_abs,
            digital: de.mean_abs,
            max_gap,
        },
        joint_resolution: ResolutionGap {
            physical: pr,
            digital: dr,
            gap: (pr.step - dr.step).abs(),
        },
        driving: metrics::metric_driving_error(physical, digital)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Delay injected per direction, ms (negative deltas floored at 0).
    pub injected_latency: LatencyDelta,
    pub joint_bias_fit: [f64; NUM_JOINTS],
    pub joint_noise_fit: f64,
    pub quant_step_fit: f64,
    pub quant_continuous: bool,
    pub torque_scale_fit: f64,
    pub mu_dynamic_fit: f64,
    pub torque_search: CheckedFit,
    pub mu_search: CheckedFit,
    /// Both searches converged and agree with their grids.
    pub converged: bool,
    pub before: FidelityReport,
    pub after: FidelityReport,
    pub pre_fit: Residuals,
    pub residuals: Residuals,
    /// Stages undone because they made their metric worse.
    pub reverted: Vec<String>,
    pub tolerances: Tolerances,
    pub tolerances_met: bool,
}

fn latency_model(ms: f64) -> LatencyModel {
    LatencyModel {
        base_delay_ns: (ms * NANOS_PER_MS as f64).round() as u64,
        jitter_half_width_ns: 0,
        seed: 0,
    }
}

impl CalibrationResult {
    /// The fitted corrections as a profile to build the calibrated twin from.
    pub fn corrections(&self) -> PerturbationProfile {
        PerturbationProfile {
            extra_latency: latency_model(self.injected_latency.command_ms),
            telemetry_extra_latency: Some(latency_model(self.injected_latency.telemetry_ms)),
            joint_bias: self.joint_bias_fit,
            joint_noise_sigma: self.joint_noise_fit,
            quant_step_override: Some(self.quant_step_fit),
            mu_dynamic_override: Some(self.mu_dynamic_fit),
            torque_scale: self.torque_scale_fit,
        }
    }

    pub fn summary(&self) -> String {
        let r = &self.residuals;
        let t = &self.tolerances;
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        let mut s = String::new();
        s += &format!(
            "injected latency   cmd {:.1} ms, tlm {:.1} ms\n",
            self.injected_latency.command_ms, self.injected_latency.telemetry_ms
        );
        s += &format!(
            "joint bias (deg)   {}\n",
            self.joint_bias_fit.iter().map(|b| format!("{:+.4}", b.to_degrees())).collect::<Vec<_>>().join(" ")
        );
        s += &format!("joint noise σ      {:.4} deg\n", self.joint_noise_fit.to_degrees());
        s += &format!(
            "joint step         {:.6} deg{}\n",
            self.quant_step_fit.to_degrees(),
            if self.quant_continuous { " (effectively continuous)" } else { "" }
        );
        s += &format!(
            "torque scale       {:.4} (grid {:.4})\n",
            self.torque_scale_fit, self.torque_search.grid.x
        );
        s += &format!("mu dynamic         {:.4} (grid {:.4})\n", self.mu_dynamic_fit, self.mu_search.grid.x);
        s += "residual           before -> after   tolerance\n";
        s += &format!(
            "  latency ms       {:>8.3} -> {:<8.3} {:<8} {}\n",
            self.pre_fit.latency_ms, r.latency_ms, t.latency_ms, mark(r.latency_ms <= t.latency_ms)
        );
        s += &format!(
            "  joint err deg    {:>8.4} -> {:<8.4} {:<8} {}\n",
            self.pre_fit.joint_error.to_degrees(),
            r.joint_error.to_degrees(),
            t.joint_error.to_degrees(),
            mark(r.joint_error <= t.joint_error)
        );
        s += &format!(
            "  resolution deg   {:>8.5} -> {:<8.5} {:<8} {}\n",
            self.pre_fit.resolution.to_degrees(),
            r.resolution.to_degrees(),
            t.resolution.to_degrees(),
            mark(r.resolution <= t.resolution)
        );
        s += &format!(
            "  driving %        {:>8.3} -> {:<8.3} {:<8} {}\n",
            self.pre_fit.driving_pct, r.driving_pct, t.driving_pct, mark(r.driving_pct <= t.driving_pct)
        );
        if !self.reverted.is_empty() {
            s += &format!("reverted stages    {}\n", self.reverted.join(", "));
        }
        if !self.converged {
            s += "search did not converge; best-so-far values reported\n";
        }
        s
    }
}

fn run_twin(config: &TwinConfig, profile: &PerturbationProfile, commands: &[TimedCommand], until: u64, seed: u64) -> Result<RunLog> {
    let mut s = Session::new(config, profile, seed)?;
    let mut log = RunLog::default();
    run_commands(&mut s, commands, until, false, |e| log.envelopes.push(e.clone()))?;
    Ok(log)
}

/// Drive commands from the first motion request on, shifted to start at 0.
struct DriveCourse {
    commands: Vec<TimedCommand>,
    until: u64,
    physical: Vec<DrivePhase>,
}

fn drive_course(physical: &RunLog) -> Result<Option<DriveCourse>> {
    let Some(from) = first_motion_ns(physical) else {
        return Ok(None);
    };
    let cmds: Vec<TimedCommand> = physical
        .timed_commands()
        .into_iter()
        .filter(|c| c.at_ns >= from && matches!(c.payload, crate::bus::Payload::Drive(_)))
        .map(|c| TimedCommand {
            at_ns: c.at_ns - from,
            ..c
        })
        .collect();
    let last = cmds.last().map_or(0, |c| c.at_ns);
    Ok(Some(DriveCourse {
        until: last + 2 * NANOS_PER_SEC,
        commands: cmds,
        physical: drive_phases(physical, from)?,
    }))
}

fn phase_gap(physical: &[DrivePhase], digital: &[DrivePhase], stops: bool) -> f64 {
    let mut err = 0.0;
    let mut total = 0.0;
    for (i, (p, d)) in physical.iter().zip(digital).enumerate() {
        // a stop phase right after motion is braking; the first phase never is
        let braking = i > 0 && p.is_stop();
        if braking == stops {
            err += (p.distance - d.distance).abs();
            total += p.distance;
        }
    }
    if total > 0.0 { err / total } else { err }
}

/// Fits twin corrections so its run of the same commands matches `physical`.
pub fn calibrate(physical: &RunLog, config: &TwinConfig, seed: u64) -> Result<CalibrationResult> {
    let tol = Tolerances::default();
    let grid = config.physics.joint_step;
    let commands = physical.timed_commands();
    let until = physical.end_ns();

    let identity = PerturbationProfile::identity();
    let before = fidelity_report(physical, &run_twin(config, &identity, &commands, until, seed)?, grid)?;
    let pre_fit = before.residuals();

    let injected = before.latency_delta.injectable();
    let joint = staircase_joint(physical);
    let phys_res = resolution_of(physical, joint, grid, tol.resolution)?;
    let (bias, sigma) = metrics::fit_bias_noise(&commanded_trajectory(physical), &measured_trajectory(physical))?;

    let mut profile = PerturbationProfile {
        extra_latency: latency_model(injected.command_ms),
        telemetry_extra_latency: Some(latency_model(injected.telemetry_ms)),
        joint_bias: bias,
        joint_noise_sigma: sigma,
        quant_step_override: Some(phys_res.step),
        mu_dynamic_override: None,
        torque_scale: 1.0,
    };

    let mu_s = config.physics.mu_static;
    let mut torque_search = None;
    let mut mu_search = None;
    if let Some(course) = drive_course(physical)? {
        let twin_phases = |p: &PerturbationProfile| -> f64 {
            match run_twin(config, p, &course.commands, course.until, seed).and_then(|l| drive_phases(&l, 0)) {
                Ok(d) => phase_gap(&course.physical, &d, false),
                Err(_) => f64::INFINITY,
            }
        };
        let fit = checked_minimize(
            |s| {
                twin_phases(&PerturbationProfile {
                    torque_scale: s,
                    ..identity.clone()
                })
            },
            TORQUE_SCALE_RANGE.0,
            TORQUE_SCALE_RANGE.1,
            GRID_POINTS,
        );
        profile.torque_scale = fit.golden.x;
        torque_search = Some(fit);

        let braking = |p: &PerturbationProfile| -> f64 {
            match run_twin(config, p, &course.commands, course.until, seed).and_then(|l| drive_phases(&l, 0)) {
                Ok(d) => phase_gap(&course.physical, &d, true),
                Err(_) => f64::INFINITY,
            }
        };
        let ts = profile.torque_scale;
        let fit = checked_minimize(
            |mu| {
                braking(&PerturbationProfile {
                    torque_scale: ts,
                    mu_dynamic_override: Some(mu),
                    ..identity.clone()
                })
            },
            0.0,
            mu_s,
            GRID_POINTS,
        );
        profile.mu_dynamic_override = Some(fit.golden.x);
        mu_search = Some(fit);
    }

    let mut after = fidelity_report(physical, &run_twin(config, &profile, &commands, until, seed)?, grid)?;
    let mut reverted = Vec::new();
    let post = after.residuals();
    if post.latency_ms > pre_fit.latency_ms {
        profile.extra_latency = LatencyModel::default();
        profile.telemetry_extra_latency = None;
        reverted.push("latency".to_string());
    }
    if post.resolution > pre_fit.resolution {
        profile.quant_step_override = None;
        reverted.push("resolution".to_string());
    }
    if post.joint_error > pre_fit.joint_error {
        profile.joint_bias = [0.0; NUM_JOINTS];
        profile.joint_noise_sigma = 0.0;
        reverted.push("joint error".to_string());
    }
    if post.driving_pct > pre_fit.driving_pct {
        profile.torque_scale = 1.0;
        profile.mu_dynamic_override = None;
        reverted.push("driving".to_string());
    }
    if !reverted.is_empty() {
        after = fidelity_report(physical, &run_twin(config, &profile, &commands, until, seed)?, grid)?;
    }
    let residuals = after.residuals();

    let unchecked = |x: f64| CheckedFit {
        golden: crate::fidelity::search::SearchResult {
            x,
            value: 0.0,
            iterations: 0,
            converged: true,
        },
        grid: crate::fidelity::search::GridResult { x, value: 0.0, cell: 0.0 },
        agrees: true,
    };
    let torque_search = torque_search.unwrap_or_else(|| unchecked(1.0));
    let mu_search = mu_search.unwrap_or_else(|| unchecked(config.physics.mu_dynamic));
    let converged = [&torque_search, &mu_search].iter().all(|f| f.golden.converged && f.agrees);

    Ok(CalibrationResult {
        injected_latency: LatencyDelta {
            command_ms: profile.extra_latency.base_delay_ns as f64 / NANOS_PER_MS as f64,
            telemetry_ms: profile.telemetry_latency().base_delay_ns as f64 / NANOS_PER_MS as f64,
        },
        joint_bias_fit: profile.joint_bias,
        joint_noise_fit: profile.joint_noise_sigma,
        quant_step_fit: profile.quant_step_override.unwrap_or(config.physics.joint_step),
        quant_continuous: phys_res.continuous,
        torque_scale_fit: profile.torque_scale,
        mu_dynamic_fit: profile.mu_dynamic_override.unwrap_or(config.physics.mu_dynamic),
        torque_search,
        mu_search,
        converged,
        before,
        after,
        pre_fit,
        tolerances_met: residuals.within(&tol),
        residuals,
        reverted,
        tolerances: tol,
    })
}
