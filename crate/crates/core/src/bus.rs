//! Topic-based message transport with seeded delay injection.
//!
//! Delivery happens on tick boundaries. A message published at `t` becomes
//! due at the first tick that is both strictly after `t` and at least
//! `t + transport_delay`; an optional injected stage then holds it for a
//! further `injected_delay`, rounded up to the tick grid. Per-topic FIFO is
//! enforced: a message is never due before its predecessor on the same topic.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DriveInput, GimbalState, JointVector, NUM_JOINTS};
use crate::scenario::ScenarioEvent;
use crate::units::{NANOS_PER_MS, ns_to_ms};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    DriveCmd,
    ArmCmd,
    GimbalCmd,
    ResetCmd,
    JointStates,
    Odometry,
    GimbalState,
    ScenarioEvents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// console → sim
    Command,
    /// sim → console
    Telemetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Publisher {
    Console,
    Sim,
}

impl Topic {
    pub const ALL: [Topic; 8] = [
        Topic::DriveCmd,
        Topic::ArmCmd,
        Topic::GimbalCmd,
        Topic::ResetCmd,
        Topic::JointStates,
        Topic::Odometry,
        Topic::GimbalState,
        Topic::ScenarioEvents,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topic::DriveCmd => "drive_cmd",
            Topic::ArmCmd => "arm_cmd",
            Topic::GimbalCmd => "gimbal_cmd",
            Topic::ResetCmd => "reset_cmd",
            Topic::JointStates => "joint_states",
            Topic::Odometry => "odometry",
            Topic::GimbalState => "gimbal_state",
            Topic::ScenarioEvents => "scenario_events",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Topic::DriveCmd | Topic::ArmCmd | Topic::GimbalCmd | Topic::ResetCmd => Direction::Command,
            _ => Direction::Telemetry,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Topic::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTopic(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmCommand {
    pub joints: [f64; NUM_JOINTS],
    pub gripper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointStatesMsg {
    pub joints: [f64; NUM_JOINTS],
    pub gripper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryMsg {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v_left: f64,
    pub v_right: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Empty {}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Drive(DriveInput),
    Arm(ArmCommand),
    Gimbal(GimbalState),
    Reset,
    JointStates(JointStatesMsg),
    Odometry(OdometryMsg),
    GimbalState(GimbalState),
    Event(ScenarioEvent),
}

impl Payload {
    pub fn topic(&self) -> Topic {
        match self {
            Payload::Drive(_) => Topic::DriveCmd,
            Payload::Arm(_) => Topic::ArmCmd,
            Payload::Gimbal(_) => Topic::GimbalCmd,
            Payload::Reset => Topic::ResetCmd,
            Payload::JointStates(_) => Topic::JointStates,
            Payload::Odometry(_) => Topic::Odometry,
            Payload::GimbalState(_) => Topic::GimbalState,
            Payload::Event(_) => Topic::ScenarioEvents,
        }
    }

    pub fn arm(target: &JointVector) -> Self {
        Payload::Arm(ArmCommand {
            joints: target.angles,
            gripper: target.gripper,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let v = match self {
            Payload::Drive(d) => serde_json::to_value(d),
            Payload::Arm(a) => serde_json::to_value(a),
            Payload::Gimbal(g) | Payload::GimbalState(g) => serde_json::to_value(g),
            Payload::Reset => serde_json::to_value(Empty {}),
            Payload::JointStates(j) => serde_json::to_value(j),
            Payload::Odometry(o) => serde_json::to_value(o),
            Payload::Event(e) => serde_json::to_value(e),
        };
        v.expect("payload types serialize infallibly")
    }

    pub fn from_json(topic: Topic, v: serde_json::Value) -> Result<Self> {
        let bad = |_| Error::PayloadMismatch(topic.name().to_string());
        Ok(match topic {
            Topic::DriveCmd => Payload::Drive(serde_json::from_value(v).map_err(bad)?),
            Topic::ArmCmd => Payload::Arm(serde_json::from_value(v).map_err(bad)?),
            Topic::GimbalCmd => Payload::Gimbal(serde_json::from_value(v).map_err(bad)?),
            Topic::ResetCmd => {
                let _: Empty = serde_json::from_value(v).map_err(bad)?;
                Payload::Reset
            }
            Topic::JointStates => Payload::JointStates(serde_json::from_value(v).map_err(bad)?),
            Topic::Odometry => Payload::Odometry(serde_json::from_value(v).map_err(bad)?),
            Topic::GimbalState => Payload::GimbalState(serde_json::from_value(v).map_err(bad)?),
            Topic::ScenarioEvents => Payload::Event(serde_json::from_value(v).map_err(bad)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub topic: Topic,
    pub seq: u64,
    pub sent_at_ns: u64,
    pub delivered_at_ns: Option<u64>,
    pub payload: Payload,
}

/// One newline-delimited record on the wire.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireRecord {
    pub topic: String,
    #[serde(default)]
    pub seq: u64,
    #[serde(default)]
    pub sent_at_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_at_ns: Option<u64>,
    #[serde(default)]
    pub payload: serde_json::Value,
}

impl Envelope {
    pub fn latency_ns(&self) -> Option<u64> {
        self.delivered_at_ns.map(|d| d - self.sent_at_ns)
    }

    pub fn to_wire(&self) -> WireRecord {
        WireRecord {
            topic: self.topic.name().to_string(),
            seq: self.seq,
            sent_at_ns: self.sent_at_ns,
            delivered_at_ns: self.delivered_at_ns,
            payload: self.payload.to_json(),
        }
    }

    pub fn from_wire(rec: WireRecord) -> Result<Self> {
        let topic: Topic = rec.topic.parse()?;
        let payload = Payload::from_json(topic, rec.payload)?;
        Ok(Self {
            topic,
            seq: rec.seq,
            sent_at_ns: rec.sent_at_ns,
            delivered_at_ns: rec.delivered_at_ns,
            payload,
        })
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(&self.to_wire()).expect("wire record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Self::from_wire(serde_json::from_str(line)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LatencyModel {
    #[serde(
        rename = "base_delay",
        deserialize_with = "crate::units::duration_ns",
        serialize_with = "crate::units::ser_duration_ns"
    )]
    pub base_delay_ns: u64,
    #[serde(
        rename = "jitter_half_width",
        default,
        deserialize_with = "crate::units::duration_ns",
        serialize_with = "crate::units::ser_duration_ns"
    )]
    pub jitter_half_width_ns: u64,
    #[serde(default)]
    pub seed: u64,
}

impl LatencyModel {
    pub fn fixed_ms(ms: u64) -> Self {
        Self {
            base_delay_ns: ms * NANOS_PER_MS,
            jitter_half_width_ns: 0,
            seed: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.base_delay_ns == 0 && self.jitter_half_width_ns == 0
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.jitter_half_width_ns == 0 {
            return self.base_delay_ns;
        }
        let w = self.jitter_half_width_ns as i64;
        let j = rng.random_range(-w..=w);
        (self.base_delay_ns as i64 + j).max(0) as u64
    }
}

/// Delay stages for one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DirectionLatency {
    pub transport: LatencyModel,
    #[serde(default)]
    pub injected: Option<LatencyModel>,
}

#[derive(Debug, Clone)]
struct Stage {
    model: DirectionLatency,
    /// One generator per topic so cross-topic publish order never changes a delay.
    transport_rng: Vec<ChaCha8Rng>,
    injected_rng: Vec<ChaCha8Rng>,
}

impl Stage {
    fn new(model: DirectionLatency, salt: u64) -> Self {
        let inj_seed = model.injected.map_or(0, |m| m.seed);
        let per_topic = |seed: u64| -> Vec<ChaCha8Rng> {
            (0..Topic::ALL.len() as u64)
                .map(|i| ChaCha8Rng::seed_from_u64(seed ^ salt ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
                .collect()
        };
        Self {
            model,
            transport_rng: per_topic(model.transport.seed),
            injected_rng: per_topic(inj_seed.rotate_left(17)),
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    due_ns: u64,
    env: Envelope,
}

#[derive(Debug, Clone)]
pub struct Bus {
    tick_ns: u64,
    seqs: [u64; 8],
    last_due: [u64; 8],
    queues: [VecDeque<Pending>; 8],
    command: Stage,
    telemetry: Stage,
}

fn canonical(e: &Envelope) -> (u64, Topic, u64) {
    (e.sent_at_ns, e.topic, e.seq)
}

fn ceil_tick(t: u64, tick: u64) -> u64 {
    t.div_ceil(tick) * tick
}

impl Bus {
    pub fn new(tick_ns: u64, command: DirectionLatency, telemetry: DirectionLatency) -> Self {
        assert!(tick_ns > 0);
        Self {
            tick_ns,
            seqs: [0; 8],
            last_due: [0; 8],
            queues: Default::default(),
            command: Stage::new(command, 0x636d64),
            telemetry: Stage::new(telemetry, 0x746c6d),
        }
    }

    /// Both directions use `model` for transport, no injected stage.
    pub fn uniform(tick_ns: u64, model: LatencyModel) -> Self {
        let d = DirectionLatency {
            transport: model,
            injected: None,
        };
        Self::new(tick_ns, d, d)
    }

    pub fn latency(&self, dir: Direction) -> DirectionLatency {
        match dir {
            Direction::Command => self.command.model,
            Direction::Telemetry => self.telemetry.model,
        }
    }

    pub fn publish_named(&mut self, topic: &str, payload: Payload, now_ns: u64, publisher: Publisher) -> Result<Envelope> {
        let topic: Topic = topic.parse()?;
        self.publish(topic, payload, now_ns, publisher)
    }

    pub fn publish(&mut self, topic: Topic, payload: Payload, now_ns: u64, publisher: Publisher) -> Result<Envelope> {
        let allowed = match topic.direction() {
            Direction::Command => publisher == Publisher::Console,
            Direction::Telemetry => publisher == Publisher::Sim,
        };
        if !allowed {
            return Err(Error::DirectionViolation {
                topic: topic.name().to_string(),
                publisher: match publisher {
                    Publisher::Console => "console",
                    Publisher::Sim => "sim",
                },
            });
        }
        if payload.topic() != topic {
            return Err(Error::PayloadMismatch(topic.name().to_string()));
        }
        let i = topic.index();
        self.seqs[i] += 1;
        let env = Envelope {
            topic,
            seq: self.seqs[i],
            sent_at_ns: now_ns,
            delivered_at_ns: None,
            payload,
        };
        let tick = self.tick_ns;
        let stage = match topic.direction() {
            Direction::Command => &mut self.command,
            Direction::Telemetry => &mut self.telemetry,
        };
        let d1 = stage.model.transport.sample(&mut stage.transport_rng[i]);
        let next_tick = (now_ns / tick + 1) * tick;
        let mut due = ceil_tick(now_ns + d1, tick).max(next_tick);
        if let Some(inj) = stage.model.injected {
            let d2 = inj.sample(&mut stage.injected_rng[i]);
            due = ceil_tick(due + d2, tick);
        }
        due = due.max(self.last_due[i]);
        self.last_due[i] = due;
        self.queues[i].push_back(Pending {
            due_ns: due,
            env: env.clone(),
        });
        Ok(env)
    }

    /// Pops every envelope due at or before `now_ns`, stamped with `now_ns`,
    /// ordered by (sent_at, topic, seq). The order is canonical, so it does
    /// not depend on how publishes on different topics interleaved.
    pub fn deliver_due(&mut self, now_ns: u64) -> Vec<Envelope> {
        self.deliver_where(now_ns, |_| true)
    }

    pub fn deliver_due_dir(&mut self, now_ns: u64, dir: Direction) -> Vec<Envelope> {
        self.deliver_where(now_ns, |t| t.direction() == dir)
    }

    fn deliver_where(&mut self, now_ns: u64, pick: impl Fn(Topic) -> bool) -> Vec<Envelope> {
        let mut out = Vec::new();
        for t in Topic::ALL {
            if !pick(t) {
                continue;
            }
            let q = &mut self.queues[t.index()];
            while q.front().is_some_and(|p| p.due_ns <= now_ns) {
                let mut p = q.pop_front().expect("front checked");
                p.env.delivered_at_ns = Some(now_ns);
                out.push(p.env);
            }
        }
        out.sort_by_key(canonical);
        out
    }

    /// Delivers everything still in flight at its due time.
    pub fn drain(&mut self, dir: Direction) -> Vec<Envelope> {
        let mut out = Vec::new();
        for t in Topic::ALL.into_iter().filter(|t| t.direction() == dir) {
            for mut p in self.queues[t.index()].drain(..) {
                p.env.delivered_at_ns = Some(p.due_ns);
                out.push(p.env);
            }
        }
        out.sort_by_key(|e| (e.delivered_at_ns, canonical(e)));
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub count: usize,
}

/// Order statistics over `delivered_at − sent_at`. Undelivered envelopes are skipped.
pub fn measure_latency<'a>(log: impl IntoIterator<Item = &'a Envelope>) -> Result<LatencyStats> {
    let mut d: Vec<u64> = log.into_iter().filter_map(Envelope::latency_ns).collect();
    if d.is_empty() {
        return Err(Error::EmptyLog("no delivered envelopes"));
    }
    d.sort_unstable();
    let n = d.len();
    let median = if n % 2 == 1 {
        ns_to_ms(d[n / 2] as i64)
    } else {
        0.5 * (ns_to_ms(d[n / 2 - 1] as i64) + ns_to_ms(d[n / 2] as i64))
    };
    // nearest-rank
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    let mean = d.iter().map(|&x| x as f64).sum::<f64>() / n as f64 / NANOS_PER_MS as f64;
    Ok(LatencyStats {
        median_ms: median,
        p95_ms: ns_to_ms(d[rank - 1] as i64),
        mean_ms: mean,
        count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::DT_NS;

    fn drive() -> Payload {
        Payload::Drive(DriveInput::default())
    }

    #[test]
    fn seq_numbers() {
        let mut bus = Bus::uniform(DT_NS, LatencyModel::default());
        let a = bus.publish(Topic::DriveCmd, drive(), 0, Publisher::Console).unwrap();
        let b = bus.publish(Topic::DriveCmd, drive(), 0, Publisher::Console).unwrap();
        let c = bus.publish(Topic::ArmCmd, Payload::arm(&JointVector::default()), 0, Publisher::Console).unwrap();
        assert_eq!((a.seq, b.seq, c.seq), (1, 2, 1));
    }

    #[test]
    fn unknown_topic_and_direction() {
        let mut bus = Bus::uniform(DT_NS, LatencyModel::default());
        assert!(matches!(
            bus.publish_named("foo", drive(), 0, Publisher::Console),
            Err(Error::UnknownTopic(_))
        ));
        assert!(matches!(
            bus.publish(Topic::DriveCmd, drive(), 0, Publisher::Sim),
            Err(Error::DirectionViolation { .. })
        ));
        assert!(matches!(
            bus.publish(Topic::ArmCmd, drive(), 0, Publisher::Console),
            Err(Error::PayloadMismatch(_))
        ));
    }

    #[test]
    fn zero_delay_is_next_tick() {
        let mut bus = Bus::uniform(DT_NS, LatencyModel::default());
        bus.publish(Topic::DriveCmd, drive(), 0, Publisher::Console).unwrap();
        assert!(bus.deliver_due(0).is_empty());
        let out = bus.deliver_due(DT_NS);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].latency_ns(), Some(DT_NS));
    }

    #[test]
    fn fixed_delay_is_exact_on_tick_grid() {
        let mut bus = Bus::uniform(DT_NS, LatencyModel::fixed_ms(250));
        bus.publish(Topic::DriveCmd, drive(), 3 * DT_NS, Publisher::Console).unwrap();
        let mut got = vec![];
        let mut now = 3 * DT_NS;
        while got.is_empty() {
            now += DT_NS;
            got = bus.deliver_due(now);
        }
        assert_eq!(got[0].latency_ns(), Some(250 * NANOS_PER_MS));
    }

    #[test]
    fn fifo_when_later_message_samples_shorter_delay() {
        // Oracle: a queue where message i leaves at max(own due, previous leave).
        let mut bus = Bus::uniform(DT_NS, LatencyModel::default());
        bus.command.model.transport.base_delay_ns = 30 * NANOS_PER_MS;
        bus.publish(Topic::DriveCmd, drive(), 0, Publisher::Console).unwrap();
        bus.command.model.transport.base_delay_ns = 10 * NANOS_PER_MS;
        bus.publish(Topic::DriveCmd, drive(), 0, Publisher::Console).unwrap();
        assert!(bus.deliver_due(20 * NANOS_PER_MS).is_empty());
        let out = bus.deliver_due(30 * NANOS_PER_MS);
        assert_eq!(out.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn injected_stage_adds_on_top_of_transport() {
        let inj = DirectionLatency {
            transport: LatencyModel::default(),
            injected: Some(LatencyModel::fixed_ms(120)),
        };
        let mut bus = Bus::new(DT_NS, inj, DirectionLatency::default());
        bus.publish(Topic::DriveCmd, drive(), 0, Publisher::Console).unwrap();
        let out = bus.drain(Direction::Command);
        assert_eq!(out[0].latency_ns(), Some(130 * NANOS_PER_MS));
    }

    #[test]
    fn latency_stats() {
        let mk = |ms: u64| Envelope {
            topic: Topic::DriveCmd,
            seq: 0,
            sent_at_ns: 0,
            delivered_at_ns: Some(ms * NANOS_PER_MS),
            payload: drive(),
        };
        let s = measure_latency(&vec![mk(100); 20]).unwrap();
        assert_eq!((s.median_ms, s.p95_ms, s.mean_ms), (100.0, 100.0, 100.0));
        let log: Vec<_> = [10, 20, 30, 40, 50].into_iter().map(mk).collect();
        assert_eq!(measure_latency(&log).unwrap().median_ms, 30.0);
        let s = measure_latency(&[mk(7)]).unwrap();
        assert_eq!((s.median_ms, s.p95_ms, s.mean_ms), (7.0, 7.0, 7.0));
        assert!(measure_latency(&Vec::<Envelope>::new()).is_err());
    }

    #[test]
    fn wire_round_trip() {
        let e = Envelope {
            topic: Topic::Odometry,
            seq: 4,
            sent_at_ns: 10,
            delivered_at_ns: Some(20),
            payload: Payload::Odometry(OdometryMsg {
                x: 0.1,
                y: -2.5e-7,
                heading: 3.0,
                v_left: 0.0,
                v_right: 1.0,
            }),
        };
        assert_eq!(Envelope::from_line(&e.to_line()).unwrap(), e);
        let r = Envelope::from_line(r#"{"topic":"reset_cmd","payload":{}}"#).unwrap();
        assert_eq!(r.payload, Payload::Reset);
        assert!(Envelope::from_line(r#"{"topic":"arm_cmd","payload":{"left":1}}"#).is_err());
    }
}
