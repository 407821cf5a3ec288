//! Message transport between feeder sensors, the coordinator, local
//! controllers, and DERs. Channels fall into the three information-flow
//! categories and carry pluggable fault models: Bernoulli packet loss,
//! link failures with a fixed downtime, and constant delays.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::NotNan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::DirectionSignal;
use crate::error::{CoreError, Result};
use crate::feeder::{GridMeasurement, MeasurementKind, Phase};

/// The three information flows of the control hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelCategory {
    /// Sensors to coordinator (voltages and feeder-head powers).
    GridServiceMeasurement,
    /// Coordinator to local controllers.
    DirectionSignal,
    /// Local controller to/from its DER (setpoints and PQ measurements).
    DerLink,
}

/// Concrete channel kinds; the five rows the limit experiments report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    VoltageMeasurement,
    FeederHeadMeasurement,
    DirectionSignal,
    SetpointToDer,
    PqMeasurementToController,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 5] = [
        ChannelKind::FeederHeadMeasurement,
        ChannelKind::VoltageMeasurement,
        ChannelKind::DirectionSignal,
        ChannelKind::SetpointToDer,
        ChannelKind::PqMeasurementToController,
    ];

    pub fn category(self) -> ChannelCategory {
        match self {
            ChannelKind::VoltageMeasurement | ChannelKind::FeederHeadMeasurement => {
                ChannelCategory::GridServiceMeasurement
            }
            ChannelKind::DirectionSignal => ChannelCategory::DirectionSignal,
            ChannelKind::SetpointToDer | ChannelKind::PqMeasurementToController => {
                ChannelCategory::DerLink
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ChannelKind::VoltageMeasurement => "voltage_measurement",
            ChannelKind::FeederHeadMeasurement => "feeder_head_measurement",
            ChannelKind::DirectionSignal => "direction_signal",
            ChannelKind::SetpointToDer => "setpoint_to_der",
            ChannelKind::PqMeasurementToController => "pq_measurement_to_controller",
        }
    }
}

/// Fault model attached to one channel for an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FaultModel {
    None,
    /// Every send is dropped independently with probability `p_drop`.
    PacketLoss { p_drop: f64 },
    /// After each successful send the link fails with probability `p_fail`
    /// and cannot be used for `downtime_s` seconds; sends while down are
    /// dropped.
    LinkFailure { p_fail: f64, downtime_s: f64 },
    /// Every message arrives exactly `latency_s` seconds after creation.
    Delay { latency_s: f64 },
}

impl FaultModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FaultModel::None => Ok(()),
            FaultModel::PacketLoss { p_drop } => {
                if !(0.0..=1.0).contains(&p_drop) {
                    return Err(CoreError::invalid("p_drop must be in [0, 1]"));
                }
                Ok(())
            }
            FaultModel::LinkFailure { p_fail, downtime_s } => {
                if !(0.0..=1.0).contains(&p_fail) {
                    return Err(CoreError::invalid("p_fail must be in [0, 1]"));
                }
                if !(downtime_s >= 0.0) {
                    return Err(CoreError::invalid("downtime must be nonnegative"));
                }
                Ok(())
            }
            FaultModel::Delay { latency_s } => {
                if !(latency_s >= 0.0) {
                    return Err(CoreError::invalid("latency must be nonnegative"));
                }
                Ok(())
            }
        }
    }

    /// Whether the model draws from the channel RNG.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, FaultModel::PacketLoss { .. } | FaultModel::LinkFailure { .. })
    }
}

/// What a message carries; must match its channel's kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload {
    Grid(GridMeasurement),
    Direction(DirectionSignal),
    /// Setpoint command to a DER (kW / kVAr).
    Setpoint { der_id: u32, p_kw: f64, q_kvar: f64 },
    /// Injection measurement from a DER (kW / kVAr).
    PqMeasurement { der_id: u32, p_kw: f64, q_kvar: f64 },
}

impl Payload {
    fn matches(&self, kind: ChannelKind) -> bool {
        match (self, kind) {
            (Payload::Grid(m), ChannelKind::VoltageMeasurement) => {
                matches!(m.kind, MeasurementKind::VoltageMagnitude { .. })
            }
            (Payload::Grid(m), ChannelKind::FeederHeadMeasurement) => {
                matches!(m.kind, MeasurementKind::FeederHeadPower)
            }
            (Payload::Direction(_), ChannelKind::DirectionSignal) => true,
            (Payload::Setpoint { .. }, ChannelKind::SetpointToDer) => true,
            (Payload::PqMeasurement { .. }, ChannelKind::PqMeasurementToController) => true,
            _ => false,
        }
    }
}

/// Simulation entities a channel can connect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityId {
    Coordinator,
    Substation(Phase),
    Sensor(u32),
    Controller(u32),
    Der(u32),
}

/// One directed communication channel with its own fault model and an
/// independent counter-based RNG stream derived from (seed, channel id).
#[derive(Debug, Clone)]
pub struct Channel {
    pub id: u32,
    pub kind: ChannelKind,
    pub source: EntityId,
    pub dest: EntityId,
    pub fault: FaultModel,
    down_until_s: Option<f64>,
    rng: ChaCha8Rng,
}

/// Outcome of a send attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SendOutcome {
    Queued { deliver_at_s: f64 },
    Dropped,
}

impl Channel {
    pub fn new(id: u32, kind: ChannelKind, source: EntityId, dest: EntityId, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        Channel { id, kind, source, dest, fault: FaultModel::None, down_until_s: None, rng }
    }

    pub fn set_fault(&mut self, fault: FaultModel) -> Result<()> {
        fault.validate()?;
        self.fault = fault;
        self.down_until_s = None;
        Ok(())
    }

    /// Rebase this channel's RNG stream on a different master seed; the
    /// stream index stays tied to the channel id.
    pub fn reseed(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.id as u64);
        self.rng = rng;
    }

    pub fn is_down(&self, now_s: f64) -> bool {
        self.down_until_s.is_some_and(|until| now_s < until)
    }

    /// Attempt to send `payload` at `now_s`, applying this channel's fault
    /// model. Queued messages are stamped with their delivery time.
    pub fn send(&mut self, queue: &mut MessageQueue, payload: Payload, now_s: f64) -> Result<SendOutcome> {
        if !payload.matches(self.kind) {
            return Err(CoreError::invalid(format!(
                "payload does not match channel kind {:?}",
                self.kind
            )));
        }
        let outcome = match self.fault {
            FaultModel::None => SendOutcome::Queued { deliver_at_s: now_s },
            FaultModel::Delay { latency_s } => SendOutcome::Queued { deliver_at_s: now_s + latency_s },
            FaultModel::PacketLoss { p_drop } => {
                if self.rng.gen::<f64>() < p_drop {
                    SendOutcome::Dropped
                } else {
                    SendOutcome::Queued { deliver_at_s: now_s }
                }
            }
            FaultModel::LinkFailure { p_fail, downtime_s } => {
                if self.is_down(now_s) {
                    SendOutcome::Dropped
                } else {
                    // The failure coin is flipped after a successful send.
                    if self.rng.gen::<f64>() < p_fail {
                        self.down_until_s = Some(now_s + downtime_s);
                    }
                    SendOutcome::Queued { deliver_at_s: now_s }
                }
            }
        };
        if let SendOutcome::Queued { deliver_at_s } = outcome {
            queue.push(Message {
                channel_id: self.id,
                kind: self.kind,
                dest: self.dest,
                payload,
                created_at_s: now_s,
                deliver_at_s,
                delivered: false,
            });
        }
        Ok(outcome)
    }
}

/// A timestamped in-flight payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Message {
    pub channel_id: u32,
    pub kind: ChannelKind,
    pub dest: EntityId,
    pub payload: Payload,
    pub created_at_s: f64,
    pub deliver_at_s: f64,
    pub delivered: bool,
}

#[derive(Debug)]
struct QueuedMessage {
    deliver_at: NotNan<f64>,
    seq: u64,
    message: Message,
}

impl PartialEq for QueuedMessage {
    fn eq(&self, other: &Self) -> bool {
        self.deliver_at == other.deliver_at && self.seq == other.seq
    }
}
impl Eq for QueuedMessage {}
impl PartialOrd for QueuedMessage {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedMessage {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deliver_at, self.seq).cmp(&(other.deliver_at, other.seq))
    }
}

/// In-flight message store ordered by (deliver-at, send sequence).
#[derive(Debug, Default)]
pub struct MessageQueue {
    heap: BinaryHeap<Reverse<QueuedMessage>>,
    next_seq: u64,
}

impl MessageQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    fn push(&mut self, message: Message) {
        debug_assert!(message.deliver_at_s >= message.created_at_s);
        let deliver_at = NotNan::new(message.deliver_at_s).expect("deliver-at must not be NaN");
        self.heap.push(Reverse(QueuedMessage { deliver_at, seq: self.next_seq, message }));
        self.next_seq += 1;
    }

    /// Remove and return every message due at or before `now_s`, ordered by
    /// delivery time with FIFO ties.
    pub fn deliver_due(&mut self, now_s: f64) -> Vec<Message> {
        let mut due = Vec::new();
        while let Some(Reverse(head)) = self.heap.peek() {
            if head.deliver_at.into_inner() <= now_s {
                let Reverse(mut entry) = self.heap.pop().unwrap();
                entry.message.delivered = true;
                due.push(entry.message);
            } else {
                break;
            }
        }
        due
    }
}

/// Pick a deterministic uniformly random subset of `round(fraction * n)`
/// channels to carry a fault model; the rest stay clean.
pub fn select_faulty_channels(channel_ids: &[u32], fraction: f64, seed: u64) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CoreError::invalid("channel fraction must be in [0, 1]"));
    }
    let count = (fraction * channel_ids.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u32> = channel_ids.to_vec();
    // Partial Fisher-Yates: the first `count` entries are the sample.
    for i in 0..count.min(pool.len().saturating_sub(1)) {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut chosen: Vec<u32> = pool.into_iter().take(count).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meas_payload(t: f64) -> Payload {
        Payload::Grid(GridMeasurement {
            timestamp_s: t,
            kind: MeasurementKind::FeederHeadPower,
            phase: Phase::A,
            value: 1.0,
        })
    }

    fn feeder_head_channel(seed: u64) -> Channel {
        Channel::new(
            0,
            ChannelKind::FeederHeadMeasurement,
            EntityId::Substation(Phase::A),
            EntityId::Coordinator,
            seed,
        )
    }

    #[test]
    fn clean_channel_delivers_at_send_time() {
        let mut ch = feeder_head_channel(1);
        let mut q = MessageQueue::new();
        let out = ch.send(&mut q, meas_payload(5.0), 5.0).unwrap();
        assert_eq!(out, SendOutcome::Queued { deliver_at_s: 5.0 });
        assert_eq!(q.deliver_due(5.0).len(), 1);
    }

    #[test]
    fn payload_mismatch_is_rejected() {
        let mut ch = feeder_head_channel(1);
        let mut q = MessageQueue::new();
        let wrong = Payload::Setpoint { der_id: 0, p_kw: 1.0, q_kvar: 0.0 };
        assert!(ch.send(&mut q, wrong, 0.0).is_err());
    }

    #[test]
    fn degenerate_packet_loss() {
        let mut q = MessageQueue::new();

        let mut ch = feeder_head_channel(1);
        ch.set_fault(FaultModel::PacketLoss { p_drop: 0.0 }).unwrap();
        for k in 0..100 {
            let out = ch.send(&mut q, meas_payload(k as f64), k as f64).unwrap();
            assert!(matches!(out, SendOutcome::Queued { .. }));
        }

        let mut ch = feeder_head_channel(1);
        ch.set_fault(FaultModel::PacketLoss { p_drop: 1.0 }).unwrap();
        for k in 0..100 {
            let out = ch.send(&mut q, meas_payload(k as f64), k as f64).unwrap();
            assert_eq!(out, SendOutcome::Dropped);
        }
    }

    #[test]
    fn packet_loss_statistics_concentrate() {
        // 10,000 Bernoulli sends at p = 0.5; +-0.03 is a six-sigma band.
        let mut ch = feeder_head_channel(2024);
        ch.set_fault(FaultModel::PacketLoss { p_drop: 0.5 }).unwrap();
        let mut q = MessageQueue::new();
        let mut delivered = 0usize;
        for k in 0..10_000 {
            if matches!(ch.send(&mut q, meas_payload(0.0), k as f64).unwrap(), SendOutcome::Queued { .. }) {
                delivered += 1;
            }
        }
        let fraction = delivered as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&fraction), "delivered fraction {fraction}");
    }

    #[test]
    fn certain_link_failure_alternates_exactly() {
        let downtime = 30.0;
        let mut ch = feeder_head_channel(7);
        ch.set_fault(FaultModel::LinkFailure { p_fail: 1.0, downtime_s: downtime }).unwrap();
        let mut q = MessageQueue::new();

        // First send goes through and takes the link down.
        assert!(matches!(ch.send(&mut q, meas_payload(0.0), 0.0).unwrap(), SendOutcome::Queued { .. }));
        // Everything strictly inside the downtime is dropped.
        for t in [1.0, 10.0, 29.999] {
            assert_eq!(ch.send(&mut q, meas_payload(t), t).unwrap(), SendOutcome::Dropped);
        }
        // At exactly down-until the link is usable again, and fails again.
        assert!(matches!(ch.send(&mut q, meas_payload(30.0), 30.0).unwrap(), SendOutcome::Queued { .. }));
        assert_eq!(ch.send(&mut q, meas_payload(31.0), 31.0).unwrap(), SendOutcome::Dropped);
        assert!(matches!(ch.send(&mut q, meas_payload(60.0), 60.0).unwrap(), SendOutcome::Queued { .. }));
    }

    #[test]
    fn delay_adds_exact_latency() {
        // 80 s is the feeder-head reference delay limit; any constant works.
        let mut ch = feeder_head_channel(3);
        ch.set_fault(FaultModel::Delay { latency_s: 80.0 }).unwrap();
        let mut q = MessageQueue::new();
        let out = ch.send(&mut q, meas_payload(12.0), 12.0).unwrap();
        assert_eq!(out, SendOutcome::Queued { deliver_at_s: 92.0 });
        assert!(q.deliver_due(91.999).is_empty());
        let msgs = q.deliver_due(92.0);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].deliver_at_s - msgs[0].created_at_s, 80.0);
        assert!(msgs[0].delivered);
        // Payload content is untouched by transport.
        assert_eq!(msgs[0].payload, meas_payload(12.0));
    }

    #[test]
    fn empty_queue_delivers_nothing() {
        let mut q = MessageQueue::new();
        assert!(q.deliver_due(1e9).is_empty());
    }

    #[test]
    fn simultaneous_deliveries_keep_send_order() {
        let mut a = feeder_head_channel(1);
        let mut b = Channel::new(
            9,
            ChannelKind::FeederHeadMeasurement,
            EntityId::Substation(Phase::B),
            EntityId::Coordinator,
            1,
        );
        let mut q = MessageQueue::new();
        a.send(&mut q, meas_payload(1.0), 0.0).unwrap();
        b.send(&mut q, meas_payload(2.0), 0.0).unwrap();
        let due = q.deliver_due(0.0);
        assert_eq!(due.len(), 2);
        assert_eq!(due[0].channel_id, 0);
        assert_eq!(due[1].channel_id, 9);
    }

    #[test]
    fn deliver_due_matches_linear_scan() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut ch = feeder_head_channel(4);
        let mut q = MessageQueue::new();
        let mut all: Vec<(f64, f64)> = Vec::new(); // (created, deliver_at)
        for k in 0..200 {
            let now = k as f64;
            let latency = rng.gen_range(0.0..50.0);
            ch.set_fault(FaultModel::Delay { latency_s: latency }).unwrap();
            ch.send(&mut q, meas_payload(now), now).unwrap();
            all.push((now, now + latency));
        }
        let cutoff = 120.0;
        let due = q.deliver_due(cutoff);
        let expected: Vec<(f64, f64)> = all.iter().copied().filter(|(_, d)| *d <= cutoff).collect();
        assert_eq!(due.len(), expected.len());
        // Returned in nondecreasing delivery order.
        for w in due.windows(2) {
            assert!(w[0].deliver_at_s <= w[1].deliver_at_s);
        }
        for msg in &due {
            assert!(expected.iter().any(|(c, d)| *c == msg.created_at_s && *d == msg.deliver_at_s));
        }
    }

    #[test]
    fn faulty_channel_selection_is_deterministic() {
        let ids: Vec<u32> = (0..100).collect();
        assert!(select_faulty_channels(&ids, 0.0, 1).unwrap().is_empty());
        let all = select_faulty_channels(&ids, 1.0, 1).unwrap();
        assert_eq!(all.len(), 100);
        let half_a = select_faulty_channels(&ids, 0.5, 42).unwrap();
        let half_b = select_faulty_channels(&ids, 0.5, 42).unwrap();
        assert_eq!(half_a.len(), 50);
        assert_eq!(half_a, half_b);
        let other = select_faulty_channels(&ids, 0.5, 43).unwrap();
        assert_ne!(half_a, other);
    }

    #[test]
    fn per_channel_rng_streams_are_isolated() {
        // Drive channel 0 identically while channel 1's fault changes; the
        // outcome sequence on channel 0 must not move.
        let run = |other_p: f64| -> Vec<bool> {
            let mut ch0 = Channel::new(0, ChannelKind::FeederHeadMeasurement,
                EntityId::Substation(Phase::A), EntityId::Coordinator, 9);
            let mut ch1 = Channel::new(1, ChannelKind::FeederHeadMeasurement,
                EntityId::Substation(Phase::B), EntityId::Coordinator, 9);
            ch0.set_fault(FaultModel::PacketLoss { p_drop: 0.5 }).unwrap();
            ch1.set_fault(FaultModel::PacketLoss { p_drop: other_p }).unwrap();
            let mut q = MessageQueue::new();
            let mut outcomes = Vec::new();
            for k in 0..200 {
                let now = k as f64;
                ch1.send(&mut q, meas_payload(now), now).unwrap();
                let out = ch0.send(&mut q, meas_payload(now), now).unwrap();
                outcomes.push(matches!(out, SendOutcome::Queued { .. }));
            }
            outcomes
        };
        assert_eq!(run(0.1), run(0.9));
    }
}
