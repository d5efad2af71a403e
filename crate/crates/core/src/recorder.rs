//! Session recording as JSON lines, and deterministic replay.
//!
//! Line 1 is a [`LogHeader`]; every following line is one delivered
//! envelope in wire form, in delivery order. A crash can leave a partial
//! final line, which the reader drops.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bus::{Direction, Envelope};
use crate::config::TwinConfig;
use crate::emulator::PerturbationProfile;
use crate::error::{Error, Result};
use crate::sim::{RunLog, Session, run_commands, telemetry_hash};
use crate::units::NANOS_PER_SEC;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Twin,
    Emulator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub scenario_id: String,
    /// Unix seconds.
    pub created_at: u64,
    pub role: Role,
    pub profile_hash: String,
    /// Perturbations the session ran with; identity for the twin.
    pub profile: PerturbationProfile,
}

impl LogHeader {
    pub fn new(config: &TwinConfig, profile: &PerturbationProfile, seed: u64) -> Self {
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            version: LOG_VERSION,
            config_hash: config.hash(),
            seed,
            scenario_id: config.scenario.id.clone(),
            created_at,
            role: if *profile == PerturbationProfile::identity() {
                Role::Twin
            } else {
                Role::Emulator
            },
            profile_hash: profile.hash(),
            profile: profile.clone(),
        }
    }
}

/// Streams envelopes to `W`, flushing at least once per simulated second.
pub struct Recorder<W: Write> {
    out: W,
    last_flush_ns: u64,
    records: u64,
}

impl<W: Write> Recorder<W> {
    pub fn new(mut out: W, header: &LogHeader) -> Result<Self> {
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(Self {
            out,
            last_flush_ns: 0,
            records: 0,
        })
    }

    pub fn record(&mut self, e: &Envelope) -> Result<()> {
        self.out.write_all(e.to_line().as_bytes())?;
        self.out.write_all(b"\n")?;
        self.records += 1;
        let t = e.delivered_at_ns.unwrap_or(e.sent_at_ns);
        if t >= self.last_flush_ns + NANOS_PER_SEC {
            self.out.flush()?;
            self.last_flush_ns = t;
        }
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn create(path: &Path, header: &LogHeader) -> Result<Recorder<std::io::BufWriter<std::fs::File>>> {
    Recorder::new(std::io::BufWriter::new(std::fs::File::create(path)?), header)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedLog {
    pub header: LogHeader,
    pub log: RunLog,
    /// The final line was incomplete and has been dropped.
    pub truncated: bool,
}

pub fn read_log(mut input: impl BufRead) -> Result<RecordedLog> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(Error::EmptyLog("no header"));
    }
    let header: LogHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::MalformedLog(format!("header: {e}")))?;
    if header.version != LOG_VERSION {
        return Err(Error::MalformedLog(format!("unsupported log version {}", header.version)));
    }
    let mut log = RunLog::default();
    let mut truncated = false;
    let mut n = 1;
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        n += 1;
        let complete = line.ends_with('\n');
        let text = line.trim_end();
        if text.is_empty() {
            continue;
        }
        match Envelope::from_line(text) {
            Ok(e) if complete => log.envelopes.push(e),
            // an unterminated last line is a torn write even if it parses
            Ok(_) => truncated = true,
            Err(_) if !complete => truncated = true,
            Err(e) => return Err(Error::MalformedLog(format!("line {n}: {e}"))),
        }
    }
    Ok(RecordedLog { header, log, truncated })
}

pub fn read_log_file(path: &Path) -> Result<RecordedLog> {
    read_log(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub recorded_hash: String,
    pub replay_hash: String,
    pub matches: bool,
    pub log: RunLog,
}

/// Re-runs the recorded commands against a fresh session built from
/// `config` and the header's seed and profile, and compares telemetry
/// hashes. For a truncated recording only the recorded prefix is compared.
pub fn replay(recorded: &RecordedLog, config: &TwinConfig) -> Result<ReplayOutcome> {
    let h = &recorded.header;
    let actual = config.hash();
    if actual != h.config_hash {
        return Err(Error::ConfigMismatch {
            recorded: h.config_hash.clone(),
            actual,
        });
    }
    let mut session = Session::new(config, &h.profile, h.seed)?;
    let mut log = RunLog::default();
    run_commands(&mut session, &recorded.log.timed_commands(), recorded.log.end_ns(), false, |e| {
        log.envelopes.push(e.clone())
    })?;
    let recorded_hash = recorded.log.telemetry_hash();
    let replay_hash = if recorded.truncated {
        let n = recorded.log.direction(Direction::Telemetry).count();
        telemetry_hash(log.direction(Direction::Telemetry).take(n))
    } else {
        log.telemetry_hash()
    };
    Ok(ReplayOutcome {
        matches: recorded_hash == replay_hash,
        recorded_hash,
        replay_hash,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::Payload;
    use crate::model::DriveInput;
    use crate::sim::TimedCommand;

    fn session_log(config: &TwinConfig, seed: u64) -> Vec<u8> {
        let profile = PerturbationProfile::identity();
        let mut rec = Recorder::new(Vec::new(), &LogHeader::new(config, &profile, seed)).unwrap();
        let mut s = Session::new(config, &profile, seed).unwrap();
        let cmds = [
            TimedCommand {
                at_ns: 0,
                payload: Payload::Drive(DriveInput::Velocity { left: 0.4, right: 0.2 }),
            },
            TimedCommand {
                at_ns: 1_500_000_000,
                payload: Payload::Reset,
            },
        ];
        run_commands(&mut s, &cmds, 3 * NANOS_PER_SEC, false, |e| rec.record(e).unwrap()).unwrap();
        rec.finish().unwrap()
    }

    #[test]
    fn round_trip_and_replay() {
        let cfg = TwinConfig::builtin();
        let bytes = session_log(&cfg, 5);
        let r = read_log(&bytes[..]).unwrap();
        assert!(!r.truncated);
        assert_eq!(r.header.role, Role::Twin);
        let out = replay(&r, &cfg).unwrap();
        assert!(out.matches, "{} vs {}", out.recorded_hash, out.replay_hash);
        assert_eq!(out.log.envelopes.len(), r.log.envelopes.len());
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let cfg = TwinConfig::builtin();
        let bytes = session_log(&cfg, 5);
        let full = read_log(&bytes[..]).unwrap();
        let cut = &bytes[..bytes.len() - 20];
        let r = read_log(cut).unwrap();
        assert!(r.truncated);
        assert_eq!(r.log.envelopes.len(), full.log.envelopes.len() - 1);
        assert!(replay(&r, &cfg).unwrap().matches);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let cfg = TwinConfig::builtin();
        let text = String::from_utf8(session_log(&cfg, 5)).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "{not json";
        let joined = lines.join("\n") + "\n";
        assert!(matches!(read_log(joined.as_bytes()), Err(Error::MalformedLog(_))));
    }

    #[test]
    fn replay_rejects_other_config() {
        let cfg = TwinConfig::builtin();
        let r = read_log(&session_log(&cfg, 5)[..]).unwrap();
        let mut other = cfg.clone();
        other.physics.rover_mass += 1.0;
        assert!(matches!(replay(&r, &other), Err(Error::ConfigMismatch { .. })));
    }

    #[test]
    fn empty_input() {
        assert!(matches!(read_log(&b""[..]), Err(Error::EmptyLog(_))));
    }
}
