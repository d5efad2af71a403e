use std::collections::HashMap;

use proptest::prelude::*;

use twin_core::bus::{Bus, Direction, DirectionLatency, LatencyModel, Payload, Publisher, Topic};
use twin_core::model::DriveInput;
use twin_core::physics::DT_NS;
use twin_core::units::NANOS_PER_MS;

const COMMANDS: [Topic; 4] = [Topic::DriveCmd, Topic::ArmCmd, Topic::GimbalCmd, Topic::ResetCmd];

fn payload(topic: Topic, i: usize) -> Payload {
    let v = i as f64;
    match topic {
        Topic::DriveCmd => Payload::Drive(DriveInput::Velocity { left: v, right: v }),
        Topic::ArmCmd => Payload::Arm(twin_core::bus::ArmCommand {
            joints: [v; 6],
            gripper: 0.0,
        }),
        Topic::GimbalCmd => Payload::Gimbal(twin_core::model::GimbalState { pan: v, tilt: 0.0 }),
        _ => Payload::Reset,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every message arrives once, on a tick, not before its minimum delay,
    /// and in publish order within its topic.
    #[test]
    fn delivery_is_complete_and_ordered(
        base_ms in 0u64..200,
        jitter_ms in 0u64..60,
        injected_ms in 0u64..150,
        seed in any::<u64>(),
        plan in prop::collection::vec((0usize..4, 0u64..4), 1..400),
    ) {
        let jitter_ms = jitter_ms.min(base_ms);
        let d = DirectionLatency {
            transport: LatencyModel { base_delay_ns: base_ms * NANOS_PER_MS, jitter_half_width_ns: jitter_ms * NANOS_PER_MS, seed },
            injected: (injected_ms > 0).then(|| LatencyModel::fixed_ms(injected_ms)),
        };
        let mut bus = Bus::new(DT_NS, d, DirectionLatency::default());
        let mut sent = HashMap::new();
        let mut got = Vec::new();
        let mut t = 0;
        for (i, &(topic, gap)) in plan.iter().enumerate() {
            for _ in 0..gap {
                t += DT_NS;
                got.extend(bus.deliver_due(t));
            }
            let topic = COMMANDS[topic];
            let e = bus.publish(topic, payload(topic, i), t, Publisher::Console).unwrap();
            sent.insert((topic, e.seq), e);
        }
        while bus.in_flight() > 0 {
            t += DT_NS;
            got.extend(bus.deliver_due(t));
        }
        prop_assert!(bus.drain(Direction::Command).is_empty());
        prop_assert_eq!(got.len(), sent.len());

        let min_delay = (base_ms - jitter_ms + injected_ms) * NANOS_PER_MS;
        let mut last: HashMap<Topic, (u64, u64)> = HashMap::new();
        for e in &got {
            let orig = &sent[&(e.topic, e.seq)];
            prop_assert_eq!(&e.payload, &orig.payload);
            let at = e.delivered_at_ns.unwrap();
            prop_assert_eq!(at % DT_NS, 0);
            prop_assert!(at > e.sent_at_ns && at - e.sent_at_ns >= min_delay);
            if let Some((seq, prev_at)) = last.insert(e.topic, (e.seq, at)) {
                prop_assert_eq!(e.seq, seq + 1);
                prop_assert!(at >= prev_at);
            }
        }
    }

    /// Publishing on a topic from the wrong side is refused and leaves the bus untouched.
    #[test]
    fn direction_is_enforced(topic in 0usize..4) {
        let mut bus = Bus::uniform(DT_NS, LatencyModel::fixed_ms(20));
        let t = COMMANDS[topic];
        prop_assert!(bus.publish(t, payload(t, 0), 0, Publisher::Sim).is_err());
        prop_assert_eq!(bus.in_flight(), 0);
    }
}
