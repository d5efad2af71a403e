//! "Physical rover" stand-in: the twin core with hidden perturbations.
//!
//! The same profile shape doubles as the twin's correction set, so a fitted
//! calibration is applied by building a session with the fitted profile.

use serde::{Deserialize, Serialize};

use crate::bus::LatencyModel;
use crate::config::TwinConfig;
use crate::error::{Error, Result};
use crate::model::NUM_JOINTS;
use crate::sim::{RunLog, Session, TimedCommand, run_commands};
use crate::units;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationProfile {
    /// Extra delay on commands; also on telemetry unless overridden below.
    #[serde(default)]
    pub extra_latency: LatencyModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telemetry_extra_latency: Option<LatencyModel>,
    /// Added to reported joint positions, radians.
    #[serde(default, deserialize_with = "bias6")]
    pub joint_bias: [f64; NUM_JOINTS],
    /// σ of zero-mean Gaussian noise on reported joint positions, radians.
    #[serde(default, deserialize_with = "units::angle")]
    pub joint_noise_sigma: f64,
    #[serde(default, deserialize_with = "units::opt_angle", skip_serializing_if = "Option::is_none")]
    pub quant_step_override: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_dynamic_override: Option<f64>,
    /// Multiplier on wheel motor torque (wear).
    #[serde(default = "one")]
    pub torque_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn bias6<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<[f64; NUM_JOINTS], D::Error> {
    let v = units::angles(d)?;
    v.try_into()
        .map_err(|v: Vec<f64>| serde::de::Error::custom(format!("expected {NUM_JOINTS} joint biases, got {}", v.len())))
}

impl Default for PerturbationProfile {
    fn default() -> Self {
        Self::identity()
    }
}

impl PerturbationProfile {
    pub fn identity() -> Self {
        Self {
            extra_latency: LatencyModel::default(),
            telemetry_extra_latency: None,
            joint_bias: [0.0; NUM_JOINTS],
            joint_noise_sigma: 0.0,
            quant_step_override: None,
            mu_dynamic_override: None,
            torque_scale: 1.0,
        }
    }

    pub fn telemetry_latency(&self) -> LatencyModel {
        self.telemetry_extra_latency.unwrap_or(self.extra_latency)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.joint_bias.iter().all(|b| b.is_finite())
            && self.joint_noise_sigma.is_finite()
            && self.torque_scale.is_finite()
            && self.quant_step_override.is_none_or(f64::is_finite)
            && self.mu_dynamic_override.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite("perturbation profile"));
        }
        if !(self.torque_scale > 0.0 && self.torque_scale <= 1.0) {
            return Err(Error::invalid("profile.torque_scale", "must be in (0, 1]"));
        }
        if self.joint_noise_sigma < 0.0 {
            return Err(Error::invalid("profile.joint_noise_sigma", "must be >= 0"));
        }
        if self.quant_step_override.is_some_and(|q| q <= 0.0) {
            return Err(Error::invalid("profile.quant_step_override", "must be > 0"));
        }
        if self.mu_dynamic_override.is_some_and(|m| m < 0.0) {
            return Err(Error::invalid("profile.mu_dynamic_override", "must be >= 0"));
        }
        Ok(())
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_document(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("profile serializes")))
    }
}

/// Runs `commands` through a perturbed session until `until_ns` and returns
/// every delivered envelope.
pub fn run_emulated(
    config: &TwinConfig,
    commands: &[TimedCommand],
    until_ns: u64,
    profile: &PerturbationProfile,
    seed: u64,
) -> Result<RunLog> {
    let mut session = Session::new(config, profile, seed)?;
    let mut log = RunLog::default();
    run_commands(&mut session, commands, until_ns, false, |e| log.envelopes.push(e.clone()))?;
    Ok(log)
}
