//! RTU communication layer: a deterministic D/D/m/K FIFO queue.
//!
//! Packets arrive at explicit times, `m` servers each take `service_time`
//! per packet, and at most `K` packets are buffered. Service is counted in
//! credits: every `service_step(dt)` adds `m·dt/service_time`, whole credits
//! are spent on head-of-line packets and the fraction carries over. Credits
//! that find an empty buffer are lost, as idle deterministic servers would be.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::grid_model::Phase;

/// Float slack when turning service credit into whole packets.
const CREDIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PacketKind {
    Measurement,
    Greeting,
}

impl PacketKind {
    pub fn label(self) -> &'static str {
        match self {
            PacketKind::Measurement => "measurement",
            PacketKind::Greeting => "greeting",
        }
    }
}

/// One phase of a measurement payload, engineering units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseReading {
    pub phase: Phase,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPacket {
    pub source: String,
    pub kind: PacketKind,
    pub timestamp: f64,
    pub seq: u64,
    /// Present phases of the source bus for measurements, empty for greetings.
    pub payload: Vec<PhaseReading>,
}

impl MeasurementPacket {
    pub fn greeting(source: &str, timestamp: f64, seq: u64) -> Self {
        MeasurementPacket {
            source: source.to_string(),
            kind: PacketKind::Greeting,
            timestamp,
            seq,
            payload: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueConfig {
    pub servers: usize,
    /// Seconds per packet per server.
    pub service_time: f64,
    pub capacity: usize,
    /// Accounting window for utilization, seconds.
    pub window: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            servers: 2,
            service_time: 0.005,
            capacity: 50,
            window: 0.5,
        }
    }
}

impl QueueConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.servers == 0 {
            return Err("queue needs at least one server".into());
        }
        if !(self.service_time > 0.0 && self.service_time.is_finite()) {
            return Err(format!("service time must be positive, got {}", self.service_time));
        }
        if self.capacity == 0 {
            return Err("queue capacity must be positive".into());
        }
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(format!("accounting window must be positive, got {}", self.window));
        }
        Ok(())
    }

    /// Packets per second the servers can clear.
    pub fn service_rate(&self) -> f64 {
        self.servers as f64 / self.service_time
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Admitted,
    /// Buffer full.
    Dropped,
    /// Source is disconnected.
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Admit,
    Drop,
    Deliver,
    Purge,
    Disconnect,
    Reconnect,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Admit => "admit",
            EventKind::Drop => "drop",
            EventKind::Deliver => "deliver",
            EventKind::Purge => "purge",
            EventKind::Disconnect => "disconnect",
            EventKind::Reconnect => "reconnect",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEvent {
    pub time: f64,
    pub kind: EventKind,
    pub source: String,
    pub packet: Option<PacketKind>,
    /// Buffer length after the event.
    pub occupancy: usize,
}

/// Lifetime counters of one source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceStats {
    pub admitted: u64,
    pub delivered: u64,
    pub purged: u64,
    pub dropped: u64,
    pub rejected: u64,
    pub buffered: u64,
}

#[derive(Debug, Clone)]
struct Slot {
    packet: MeasurementPacket,
    admitted_at: f64,
}

#[derive(Debug, Clone)]
pub struct RtuQueue {
    config: QueueConfig,
    buffer: VecDeque<Slot>,
    credit: f64,
    clock: f64,
    /// Admissions inside the retention horizon, oldest first.
    recent: VecDeque<(f64, String)>,
    stats: BTreeMap<String, SourceStats>,
    disconnected: BTreeSet<String>,
    drops: u64,
    events: Vec<QueueEvent>,
    log_events: bool,
}

impl RtuQueue {
    pub fn new(config: QueueConfig) -> Result<Self, String> {
        config.validate()?;
        Ok(RtuQueue {
            config,
            buffer: VecDeque::new(),
            credit: 0.0,
            clock: 0.0,
            recent: VecDeque::new(),
            stats: BTreeMap::new(),
            disconnected: BTreeSet::new(),
            drops: 0,
            events: Vec::new(),
            log_events: true,
        })
    }

    /// Turns the event log off, for long property runs.
    pub fn without_event_log(mut self) -> Self {
        self.log_events = false;
        self
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Total drops, including rejections of disconnected sources.
    pub fn drops(&self) -> u64 {
        self.drops
    }

    pub fn events(&self) -> &[QueueEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<QueueEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn stats(&self) -> &BTreeMap<String, SourceStats> {
        &self.stats
    }

    pub fn is_disconnected(&self, source: &str) -> bool {
        self.disconnected.contains(source)
    }

    /// Source labels in FIFO order.
    pub fn buffered_sources(&self) -> impl Iterator<Item = &str> {
        self.buffer.iter().map(|s| s.packet.source.as_str())
    }

    fn log(&mut self, kind: EventKind, source: &str, packet: Option<PacketKind>) {
        if self.log_events {
            self.events.push(QueueEvent {
                time: self.clock,
                kind,
                source: source.to_string(),
                packet,
                occupancy: self.buffer.len(),
            });
        }
    }

    fn advance_to(&mut self, now: f64) {
        debug_assert!(now + 1e-12 >= self.clock, "event time went backwards");
        if now > self.clock {
            self.clock = now;
        }
        let horizon = self.clock - self.config.window;
        while self.recent.front().is_some_and(|(t, _)| *t <= horizon) {
            self.recent.pop_front();
        }
    }

    pub fn enqueue(&mut self, packet: MeasurementPacket, now: f64) -> EnqueueOutcome {
        self.advance_to(now);
        let outcome = if self.disconnected.contains(&packet.source) {
            EnqueueOutcome::Rejected
        } else if self.buffer.len() >= self.config.capacity {
            EnqueueOutcome::Dropped
        } else {
            EnqueueOutcome::Admitted
        };
        let stats = self.stats.entry(packet.source.clone()).or_default();
        match outcome {
            EnqueueOutcome::Rejected => stats.rejected += 1,
            EnqueueOutcome::Dropped => stats.dropped += 1,
            EnqueueOutcome::Admitted => {
                stats.admitted += 1;
                stats.buffered += 1;
            }
        }
        let (source, kind) = (packet.source.clone(), packet.kind);
        if outcome == EnqueueOutcome::Admitted {
            self.recent.push_back((self.clock, source.clone()));
            self.buffer.push_back(Slot {
                packet,
                admitted_at: self.clock,
            });
            self.log(EventKind::Admit, &source, Some(kind));
        } else {
            self.drops += 1;
            self.log(EventKind::Drop, &source, Some(kind));
        }
        outcome
    }

    /// Runs the servers for `dt` seconds and returns delivered packets in order.
    pub fn service_step(&mut self, dt: f64) -> Vec<MeasurementPacket> {
        assert!(dt > 0.0, "service step must be positive");
        let now = self.clock + dt;
        self.advance_to(now);
        self.credit += self.config.servers as f64 * dt / self.config.service_time;
        let whole = (self.credit + CREDIT_EPS).floor();
        self.credit = (self.credit - whole).max(0.0);
        let n = (whole as usize).min(self.buffer.len());
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let slot = self.buffer.pop_front().expect("counted above");
            let s = self.stats.get_mut(&slot.packet.source).expect("admitted source has stats");
            s.delivered += 1;
            s.buffered -= 1;
            self.log(EventKind::Deliver, &slot.packet.source, Some(slot.packet.kind));
            out.push(slot.packet);
        }
        out
    }

    /// Services up to absolute time `t`; no-op when `t` is not ahead of the clock.
    pub fn service_until(&mut self, t: f64) -> Vec<MeasurementPacket> {
        if t > self.clock {
            self.service_step(t - self.clock)
        } else {
            Vec::new()
        }
    }

    /// Per-source share of `K` held by packets that are buffered or were
    /// admitted within the last `window` seconds. The window is capped at the
    /// configured accounting window, which bounds the retained history.
    pub fn utilization_by_source(&self, window: f64) -> BTreeMap<String, f64> {
        let window = window.min(self.config.window);
        let horizon = self.clock - window;
        let mut counts: BTreeMap<&str, usize> = self.stats.keys().map(|k| (k.as_str(), 0)).collect();
        for (t, s) in &self.recent {
            if *t > horizon {
                *counts.get_mut(s.as_str()).expect("known source") += 1;
            }
        }
        for slot in &self.buffer {
            if slot.admitted_at <= horizon {
                *counts.get_mut(slot.packet.source.as_str()).expect("known source") += 1;
            }
        }
        let k = self.config.capacity as f64;
        counts
            .into_iter()
            .map(|(s, c)| (s.to_string(), (c as f64 / k).max(0.0)))
            .collect()
    }

    /// Purges the source's buffered packets and rejects it until reconnected.
    /// Returns the number purged.
    pub fn disconnect_source(&mut self, source: &str) -> usize {
        let before = self.buffer.len();
        let mut kept = VecDeque::with_capacity(before);
        let mut purged = Vec::new();
        for slot in self.buffer.drain(..) {
            if slot.packet.source == source {
                purged.push(slot.packet.kind);
            } else {
                kept.push_back(slot);
            }
        }
        self.buffer = kept;
        let n = purged.len();
        if n > 0 {
            let s = self.stats.get_mut(source).expect("buffered source has stats");
            s.purged += n as u64;
            s.buffered -= n as u64;
        }
        for kind in purged {
            self.log(EventKind::Purge, source, Some(kind));
        }
        self.disconnected.insert(source.to_string());
        self.log(EventKind::Disconnect, source, None);
        n
    }

    pub fn reconnect_source(&mut self, source: &str) {
        if self.disconnected.remove(source) {
            self.log(EventKind::Reconnect, source, None);
        }
    }

    /// `admitted = delivered + buffered + purged` for every source, with the
    /// buffered count checked against the actual buffer.
    pub fn conservation_holds(&self) -> bool {
        let mut actual: BTreeMap<&str, u64> = BTreeMap::new();
        for s in self.buffered_sources() {
            *actual.entry(s).or_default() += 1;
        }
        self.stats.iter().all(|(src, s)| {
            s.admitted == s.delivered + s.buffered + s.purged && actual.get(src.as_str()).copied().unwrap_or(0) == s.buffered
        })
    }
}
