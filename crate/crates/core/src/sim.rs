//! The simulation loop: bus delivery, command ingress, stepping, telemetry
//! and scenario event tracking, plus command scripts and run logs.
//!
//! One tick at time `t`:
//! 1. deliver commands due at `t` and apply them,
//! 2. deliver telemetry due at `t`,
//! 3. publish this tick's console commands stamped `t`,
//! 4. step the world to `t + dt`,
//! 5. publish telemetry and scenario events stamped `t + dt`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::bus::{Bus, Direction, DirectionLatency, Envelope, JointStatesMsg, LatencyModel, OdometryMsg, Payload, Publisher, Topic};
use crate::config::TwinConfig;
use crate::emulator::PerturbationProfile;
use crate::error::{Error, Result};
use crate::kinematics::clamp_gimbal;
use crate::model::{DriveInput, JointVector, TwinState, WorldSnapshot, reset_world, snapshot};
use crate::physics::{DT_NS, RoverModel, StepInput, step_world};
use crate::scenario::{EventRecord, ScenarioEvent, ScenarioSpec, SessionMetrics, check_alignment, evaluate_session};
use crate::units;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tracked {
    grasped: bool,
    aligned: bool,
    pose: (f64, f64, f64),
}

#[derive(Debug, Clone)]
pub struct Session {
    model: RoverModel,
    scenario: ScenarioSpec,
    state: TwinState,
    initial: WorldSnapshot,
    bus: Bus,
    joint_bias: Option<[f64; 6]>,
    noise: Option<Normal<f64>>,
    noise_rng: ChaCha8Rng,
    events: Vec<EventRecord>,
    tracked: Vec<Tracked>,
    attempt_open: bool,
    time_limit_hit: bool,
    hasher: Sha256,
}

fn nonzero(m: LatencyModel, seed: u64) -> Option<LatencyModel> {
    (!m.is_zero()).then_some(LatencyModel { seed: m.seed ^ seed, ..m })
}

impl Session {
    /// An unperturbed twin.
    pub fn twin(config: &TwinConfig, seed: u64) -> Result<Self> {
        Self::new(config, &PerturbationProfile::identity(), seed)
    }

    pub fn new(config: &TwinConfig, profile: &PerturbationProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let mut physics = config.physics;
        if let Some(q) = profile.quant_step_override {
            physics.joint_step = q;
        }
        if let Some(mu) = profile.mu_dynamic_override {
            physics.mu_dynamic = mu;
        }
        physics.wheel_torque_max *= profile.torque_scale;
        physics.validate()?;
        let model = RoverModel {
            rover_id: config.rover_id.clone(),
            physics,
            chain: config.chain.clone(),
            actuators: config.actuators,
        };
        let scenario = config.scenario.clone();
        let arm = model.chain.sanitize_target(&scenario.initial_arm, physics.joint_step);
        let state = TwinState::new(scenario.rover_start, arm, scenario.antennas.clone());

        let mix = |m: LatencyModel| LatencyModel { seed: m.seed ^ seed, ..m };
        let bus = Bus::new(
            DT_NS,
            DirectionLatency {
                transport: mix(config.command_latency),
                injected: nonzero(profile.extra_latency, seed),
            },
            DirectionLatency {
                transport: mix(config.telemetry_latency),
                injected: nonzero(profile.telemetry_latency(), seed),
            },
        );
        let noise = (profile.joint_noise_sigma > 0.0)
            .then(|| Normal::new(0.0, profile.joint_noise_sigma).expect("sigma validated"));
        let mut s = Self {
            model,
            initial: snapshot(&state),
            tracked: Vec::new(),
            scenario,
            state,
            bus,
            joint_bias: profile.joint_bias.iter().any(|&b| b != 0.0).then_some(profile.joint_bias),
            noise,
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65),
            events: Vec::new(),
            attempt_open: true,
            time_limit_hit: false,
            hasher: Sha256::new(),
        };
        s.tracked = s.observe();
        s.emit(
            0,
            ScenarioEvent::Start {
                scenario_id: s.scenario.id.clone(),
                attempts_allowed: s.scenario.attempts_allowed,
            },
        );
        s.emit_all_poses(0);
        Ok(s)
    }

    pub fn state(&self) -> &TwinState {
        &self.state
    }

    pub fn model(&self) -> &RoverModel {
        &self.model
    }

    pub fn scenario(&self) -> &ScenarioSpec {
        &self.scenario
    }

    pub fn now_ns(&self) -> u64 {
        self.state.sim_time_ns
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn metrics(&self) -> Result<SessionMetrics> {
        evaluate_session(&self.events)
    }

    /// True once the scenario time limit has elapsed.
    pub fn finished(&self) -> bool {
        self.time_limit_hit
    }

    /// Hex SHA-256 over every telemetry envelope delivered so far.
    pub fn telemetry_hash(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn world_snapshot(&self) -> WorldSnapshot {
        snapshot(&self.state)
    }

    /// Replaces the world state. Bus traffic in flight and the event log are kept.
    pub fn restore_world(&mut self, snap: &WorldSnapshot) {
        self.state = snap.restore();
        self.tracked = self.observe();
    }

    /// Console-side publish stamped with the current sim time.
    pub fn publish(&mut self, payload: Payload) -> Result<Envelope> {
        let topic = payload.topic();
        self.bus.publish(topic, payload, self.now_ns(), Publisher::Console)
    }

    pub fn tick(&mut self) -> Vec<Envelope> {
        self.tick_with(Vec::new()).expect("no commands to publish")
    }

    /// Runs one tick, publishing `commands` at step 3. Returns every
    /// envelope delivered during the tick, commands first.
    pub fn tick_with(&mut self, commands: impl IntoIterator<Item = Payload>) -> Result<Vec<Envelope>> {
        let t = self.now_ns();
        let mut delivered = self.bus.deliver_due_dir(t, Direction::Command);
        for e in &delivered {
            self.apply(&e.payload, t);
        }
        let tel = self.bus.deliver_due_dir(t, Direction::Telemetry);
        self.absorb(&tel);
        delivered.extend(tel);
        for p in commands {
            self.publish(p)?;
        }
        self.state = step_world(&self.state, &StepInput::new(self.state.controls.drive), &self.model);
        self.publish_telemetry();
        self.track_scenario();
        Ok(delivered)
    }

    /// Delivers everything still in flight at its due time. Commands drained
    /// here are logged but never applied.
    pub fn finish(&mut self) -> Vec<Envelope> {
        let mut out = self.bus.drain(Direction::Command);
        let tel = self.bus.drain(Direction::Telemetry);
        self.absorb(&tel);
        out.extend(tel);
        out
    }

    fn absorb(&mut self, tel: &[Envelope]) {
        for e in tel {
            self.hasher.update(e.to_line().as_bytes());
            self.hasher.update(b"\n");
        }
    }

    fn apply(&mut self, payload: &Payload, t: u64) {
        match payload {
            Payload::Drive(d) => {
                let finite = match *d {
                    DriveInput::Velocity { left, right } | DriveInput::Torque { left, right } => left.is_finite() && right.is_finite(),
                    DriveInput::Drag { force } => force.is_finite(),
                };
                if finite {
                    self.state.controls.drive = *d;
                } else {
                    log::warn!("ignoring non-finite drive command");
                }
            }
            Payload::Arm(a) => {
                let target = JointVector {
                    angles: a.joints,
                    gripper: a.gripper,
                };
                self.state.controls.arm_target = self.model.chain.sanitize_target(&target, self.model.physics.joint_step);
            }
            Payload::Gimbal(g) => {
                if g.pan.is_finite() && g.tilt.is_finite() {
                    self.state.controls.gimbal_target = clamp_gimbal(*g);
                }
            }
            Payload::Reset => {
                self.state = reset_world(&self.state, Some(&self.initial)).expect("initial snapshot present");
                self.tracked = self.observe();
                self.attempt_open = true;
                self.emit(t, ScenarioEvent::Reset {
                    reset_count: self.state.reset_count,
                });
                self.emit_all_poses(t);
            }
            _ => {}
        }
    }

    fn reported_joints(&mut self) -> [f64; 6] {
        let mut j = self.state.arm.angles;
        if let Some(b) = self.joint_bias {
            for (q, b) in j.iter_mut().zip(b) {
                *q += b;
            }
        }
        if let Some(n) = self.noise {
            for q in j.iter_mut() {
                *q += n.sample(&mut self.noise_rng);
            }
        }
        j
    }

    fn publish_telemetry(&mut self) {
        let t = self.now_ns();
        let joints = self.reported_joints();
        let s = &self.state;
        let msgs = [
            Payload::JointStates(JointStatesMsg {
                joints,
                gripper: s.arm.gripper,
            }),
            Payload::Odometry(OdometryMsg {
                x: s.rover.x,
                y: s.rover.y,
                heading: s.rover.heading,
                v_left: s.ground_speed.left,
                v_right: s.ground_speed.right,
            }),
            Payload::GimbalState(s.gimbal),
        ];
        for p in msgs {
            self.bus
                .publish(p.topic(), p, t, Publisher::Sim)
                .expect("telemetry topics are sim-published");
        }
    }

    fn observe(&self) -> Vec<Tracked> {
        self.state
            .antennas
            .iter()
            .map(|a| Tracked {
                grasped: a.grasped_by.is_some(),
                aligned: check_alignment(a, self.scenario.strict_360),
                pose: (a.pose.x, a.pose.y, a.orientation),
            })
            .collect()
    }

    fn emit(&mut self, t: u64, event: ScenarioEvent) {
        self.events.push(EventRecord {
            time_ns: t,
            event: event.clone(),
        });
        self.bus
            .publish(Topic::ScenarioEvents, Payload::Event(event), t, Publisher::Sim)
            .expect("scenario events are sim-published");
    }

    fn pose_event(&self, i: usize) -> ScenarioEvent {
        let a = &self.state.antennas[i];
        ScenarioEvent::AntennaPose {
            antenna: a.id.clone(),
            x: a.pose.x,
            y: a.pose.y,
            orientation: a.orientation,
            target: a.target_orientation,
            grasped: a.grasped_by.is_some(),
        }
    }

    fn emit_all_poses(&mut self, t: u64) {
        for i in 0..self.state.antennas.len() {
            let ev = self.pose_event(i);
            self.emit(t, ev);
        }
    }

    fn track_scenario(&mut self) {
        let t = self.now_ns();
        let now = self.observe();
        for (i, (old, new)) in self.tracked.clone().iter().zip(&now).enumerate() {
            let id = self.state.antennas[i].id.clone();
            if old.grasped != new.grasped {
                let ev = if new.grasped {
                    ScenarioEvent::Grasp { antenna: id.clone() }
                } else {
                    ScenarioEvent::Release { antenna: id.clone() }
                };
                self.emit(t, ev);
            }
            if old.aligned != new.aligned {
                let ev = if new.aligned {
                    ScenarioEvent::Aligned { antenna: id }
                } else {
                    ScenarioEvent::Misaligned { antenna: id }
                };
                self.emit(t, ev);
            }
            if old.pose != new.pose || old.grasped != new.grasped {
                let ev = self.pose_event(i);
                self.emit(t, ev);
            }
        }
        self.tracked = now;
        if self.attempt_open && !self.tracked.is_empty() && self.tracked.iter().all(|a| a.aligned) {
            self.attempt_open = false;
            self.emit(t, ScenarioEvent::Completed);
        }
        if !self.time_limit_hit && self.scenario.time_limit_ns.is_some_and(|lim| t >= lim) {
            self.time_limit_hit = true;
            self.emit(t, ScenarioEvent::TimeLimit);
        }
    }
}

/// A command to publish at (the first tick at or after) `at_ns`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedCommand {
    pub at_ns: u64,
    pub payload: Payload,
}

/// Outcome a script author asserts; checked by tests and `run-scenario`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Expectation {
    pub completion_ns: Option<u64>,
    pub resets: Option<u32>,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandScript {
    pub duration_ns: u64,
    pub commands: Vec<TimedCommand>,
    pub expect: Expectation,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    #[serde(deserialize_with = "units::duration_ns")]
    duration: u64,
    expect: Option<RawExpect>,
    #[serde(default, rename = "command")]
    commands: Vec<RawCommand>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExpect {
    #[serde(default, deserialize_with = "units::opt_duration_ns")]
    completion: Option<u64>,
    resets: Option<u32>,
    success_rate: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCommand {
    #[serde(deserialize_with = "units::duration_ns")]
    at: u64,
    topic: String,
    payload: Option<toml::Value>,
}

impl CommandScript {
    pub fn from_document(text: &str) -> Result<Self> {
        let raw: RawScript = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut commands = Vec::with_capacity(raw.commands.len());
        for (i, c) in raw.commands.into_iter().enumerate() {
            let field = format!("command[{i}]");
            let topic: Topic = c.topic.parse().map_err(|e: Error| Error::invalid(format!("{field}.topic"), e.to_string()))?;
            if topic.direction() != Direction::Command {
                return Err(Error::invalid(format!("{field}.topic"), "scripts may only publish command topics"));
            }
            let json = match c.payload {
                Some(v) => serde_json::to_value(v)?,
                None => serde_json::json!({}),
            };
            let payload = Payload::from_json(topic, json).map_err(|e| Error::invalid(format!("{field}.payload"), e.to_string()))?;
            commands.push(TimedCommand { at_ns: c.at, payload });
        }
        check_ordered(&commands)?;
        let expect = raw.expect.map_or(Expectation::default(), |e| Expectation {
            completion_ns: e.completion,
            resets: e.resets,
            success_rate: e.success_rate,
        });
        Ok(Self {
            duration_ns: raw.duration,
            commands,
            expect,
        })
    }

    pub fn to_document(&self) -> String {
        let mut out = format!("duration = \"{}ns\"\n", self.duration_ns);
        for c in &self.commands {
            let payload: toml::Value = serde_json::from_value(c.payload.to_json()).expect("payload maps to toml");
            let mut table = toml::Table::new();
            table.insert("at".into(), toml::Value::String(format!("{}ns", c.at_ns)));
            table.insert("topic".into(), toml::Value::String(c.payload.topic().name().into()));
            table.insert("payload".into(), payload);
            let mut doc = toml::Table::new();
            doc.insert("command".into(), toml::Value::Array(vec![toml::Value::Table(table)]));
            out.push('\n');
            out.push_str(&toml::to_string(&doc).expect("table serializes"));
        }
        out
    }
}

fn check_ordered(commands: &[TimedCommand]) -> Result<()> {
    if let Some(w) = commands.windows(2).find(|w| w[1].at_ns < w[0].at_ns) {
        return Err(Error::MalformedLog(format!(
            "command at {} ns follows one at {} ns",
            w[1].at_ns, w[0].at_ns
        )));
    }
    Ok(())
}

/// Drives `session` until `until_ns`, publishing each command on the first
/// tick at or after its time, then drains the bus. With `stop_on_finish`
/// the run ends early once the scenario time limit elapses.
pub fn run_commands(
    session: &mut Session,
    commands: &[TimedCommand],
    until_ns: u64,
    stop_on_finish: bool,
    mut sink: impl FnMut(&Envelope),
) -> Result<()> {
    check_ordered(commands)?;
    let mut next = 0;
    while session.now_ns() < until_ns {
        let t = session.now_ns();
        let start = next;
        while next < commands.len() && commands[next].at_ns <= t {
            next += 1;
        }
        let batch = commands[start..next].iter().map(|c| c.payload.clone());
        for e in session.tick_with(batch)? {
            sink(&e);
        }
        if stop_on_finish && session.finished() {
            break;
        }
    }
    for e in session.finish() {
        sink(&e);
    }
    Ok(())
}

/// Every envelope delivered during a run, in delivery order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub envelopes: Vec<Envelope>,
}

pub fn telemetry_hash<'a>(envelopes: impl IntoIterator<Item = &'a Envelope>) -> String {
    let mut h = Sha256::new();
    for e in envelopes {
        if e.topic.direction() == Direction::Telemetry {
            h.update(e.to_line().as_bytes());
            h.update(b"\n");
        }
    }
    hex::encode(h.finalize())
}

impl RunLog {
    pub fn direction(&self, dir: Direction) -> impl Iterator<Item = &Envelope> {
        self.envelopes.iter().filter(move |e| e.topic.direction() == dir)
    }

    pub fn topic(&self, topic: Topic) -> impl Iterator<Item = &Envelope> {
        self.envelopes.iter().filter(move |e| e.topic == topic)
    }

    pub fn telemetry_hash(&self) -> String {
        telemetry_hash(&self.envelopes)
    }

    pub fn events(&self) -> Vec<EventRecord> {
        self.topic(Topic::ScenarioEvents)
            .filter_map(|e| match &e.payload {
                Payload::Event(ev) => Some(EventRecord {
                    time_ns: e.sent_at_ns,
                    event: ev.clone(),
                }),
                _ => None,
            })
            .collect()
    }

    /// Time of the last telemetry publish, i.e. where the run stopped.
    pub fn end_ns(&self) -> u64 {
        self.direction(Direction::Telemetry).map(|e| e.sent_at_ns).max().unwrap_or(0)
    }

    /// Commands in canonical publish order.
    pub fn timed_commands(&self) -> Vec<TimedCommand> {
        let mut c: Vec<&Envelope> = self.direction(Direction::Command).collect();
        c.sort_by_key(|e| (e.sent_at_ns, e.topic, e.seq));
        c.into_iter()
            .map(|e| TimedCommand {
                at_ns: e.sent_at_ns,
                payload: e.payload.clone(),
            })
            .collect()
    }
}

/// Runs a script against a fresh session and collects the log.
pub fn run_script(session: &mut Session, script: &CommandScript, stop_on_finish: bool) -> Result<RunLog> {
    let mut log = RunLog::default();
    run_commands(session, &script.commands, script.duration_ns, stop_on_finish, |e| {
        log.envelopes.push(e.clone())
    })?;
    Ok(log)
}
