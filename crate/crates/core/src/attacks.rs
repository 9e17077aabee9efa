//! FDI tampering and DoS flooding on a schedule.

use thiserror::Error;

use crate::cybernet::{EnqueueOutcome, MeasurementPacket, PacketKind, RtuQueue};
use crate::grid_model::{NetworkModel, PhaseSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("attack start time must be finite and nonnegative, got {0}")]
    StartTime(f64),
    #[error("attack references unknown bus {0}")]
    UnknownBus(String),
    #[error("FDI on bus {bus}: {message}")]
    Fdi { bus: String, message: String },
    #[error("DoS from {source_id}: {message}")]
    Dos { source_id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdiMode {
    /// Payload replaced by `p_value` kW, `q_value` kVAr.
    SetAbsolute,
    /// Payload multiplied by `p_value`, `q_value`.
    Scale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdiEntry {
    pub bus: String,
    pub phases: PhaseSet,
    pub mode: FdiMode,
    pub p_value: f64,
    pub q_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DosEntry {
    /// Identity the flood packets claim; kept distinct from the victim so the
    /// attacker can be cut off without losing the victim's own telemetry.
    pub spoofed_source: String,
    /// Bus whose telemetry the flood is timed to crowd out.
    pub target: String,
    pub flood_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackSpec {
    pub start_time: f64,
    pub fdi: Vec<FdiEntry>,
    pub dos: Vec<DosEntry>,
}

/// Flood source label used by the builtin scenarios.
pub fn spoof_label(victim: &str) -> String {
    format!("spoof-{victim}")
}

pub const DEFAULT_FLOOD_RATE: f64 = 200.0;

impl AttackSpec {
    pub fn is_active(&self, now: f64) -> bool {
        now >= self.start_time
    }

    pub fn validate(&self, model: &NetworkModel) -> Result<(), AttackError> {
        if !(self.start_time.is_finite() && self.start_time >= 0.0) {
            return Err(AttackError::StartTime(self.start_time));
        }
        for e in &self.fdi {
            let b = model.bus_index(&e.bus).ok_or_else(|| AttackError::UnknownBus(e.bus.clone()))?;
            let fail = |message: String| AttackError::Fdi {
                bus: e.bus.clone(),
                message,
            };
            if !e.phases.is_subset(model.buses()[b].phases) {
                return Err(fail(format!("phases {} not all present on the bus", e.phases)));
            }
            if !(e.p_value.is_finite() && e.q_value.is_finite()) {
                return Err(fail("values must be finite".into()));
            }
            if e.mode == FdiMode::Scale && !(e.p_value > 0.0 && e.q_value > 0.0) {
                return Err(fail("scale factors must be positive".into()));
            }
        }
        for d in &self.dos {
            model
                .bus_index(&d.target)
                .ok_or_else(|| AttackError::UnknownBus(d.target.clone()))?;
            if !(d.flood_rate > 0.0 && d.flood_rate.is_finite()) {
                return Err(AttackError::Dos {
                    source_id: d.spoofed_source.clone(),
                    message: format!("flood rate must be positive, got {}", d.flood_rate),
                });
            }
            if d.spoofed_source == d.target {
                return Err(AttackError::Dos {
                    source_id: d.spoofed_source.clone(),
                    message: "spoofed identity must differ from the victim".into(),
                });
            }
        }
        Ok(())
    }
}

/// FDI on loads 680 (set to 500 kW/500 kVAr per phase) and 671 (+60%),
/// DoS against 652, from t = 3 s.
pub fn scenario_one() -> AttackSpec {
    AttackSpec {
        start_time: 3.0,
        fdi: vec![
            FdiEntry {
                bus: "680".into(),
                phases: PhaseSet::ABC,
                mode: FdiMode::SetAbsolute,
                p_value: 500.0,
                q_value: 500.0,
            },
            FdiEntry {
                bus: "671".into(),
                phases: PhaseSet::ABC,
                mode: FdiMode::Scale,
                p_value: 1.6,
                q_value: 1.6,
            },
        ],
        dos: vec![DosEntry {
            spoofed_source: spoof_label("652"),
            target: "652".into(),
            flood_rate: DEFAULT_FLOOD_RATE,
        }],
    }
}

/// FDI on 680 (500/500 per phase), 692 (100/100 on a and c) and 632, DoS
/// against 633, from t = 3 s. The 632 values are not known; `bus632` is the
/// scale factor applied to both P and Q there (1.0 leaves it inert).
pub fn scenario_two(bus632: f64) -> AttackSpec {
    AttackSpec {
        start_time: 3.0,
        fdi: vec![
            FdiEntry {
                bus: "680".into(),
                phases: PhaseSet::ABC,
                mode: FdiMode::SetAbsolute,
                p_value: 500.0,
                q_value: 500.0,
            },
            FdiEntry {
                bus: "692".into(),
                phases: PhaseSet::parse("ac").expect("valid literal"),
                mode: FdiMode::SetAbsolute,
                p_value: 100.0,
                q_value: 100.0,
            },
            FdiEntry {
                bus: "632".into(),
                phases: PhaseSet::ABC,
                mode: FdiMode::Scale,
                p_value: bus632,
                q_value: bus632,
            },
        ],
        dos: vec![DosEntry {
            spoofed_source: spoof_label("633"),
            target: "633".into(),
            flood_rate: DEFAULT_FLOOD_RATE,
        }],
    }
}

/// Tampers matching measurement packets in flight. Identity before `start_time`.
pub fn apply_fdi(packets: &[MeasurementPacket], spec: &AttackSpec, now: f64) -> Vec<MeasurementPacket> {
    let mut out = packets.to_vec();
    if !spec.is_active(now) {
        return out;
    }
    for p in out.iter_mut().filter(|p| p.kind == PacketKind::Measurement) {
        for e in spec.fdi.iter().filter(|e| e.bus == p.source) {
            for r in p.payload.iter_mut().filter(|r| e.phases.contains(r.phase)) {
                match e.mode {
                    FdiMode::SetAbsolute => {
                        r.p_kw = e.p_value;
                        r.q_kvar = e.q_value;
                    }
                    FdiMode::Scale => {
                        r.p_kw *= e.p_value;
                        r.q_kvar *= e.q_value;
                    }
                }
            }
        }
    }
    out
}

/// Fractional-rate carry and sequence counters for the DoS entries of a spec.
#[derive(Debug, Clone, Default)]
pub struct FloodState {
    carry: Vec<f64>,
    seq: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FloodTally {
    pub sent: usize,
    pub admitted: usize,
    pub dropped: usize,
    pub rejected: usize,
}

impl FloodState {
    pub fn new(spec: &AttackSpec) -> Self {
        FloodState {
            carry: vec![0.0; spec.dos.len()],
            seq: vec![0; spec.dos.len()],
        }
    }

    /// Greeting packets entry `i` sends for an interval `dt`, consuming carry.
    pub fn burst_size(&mut self, spec: &AttackSpec, i: usize, dt: f64) -> usize {
        assert!(dt > 0.0, "flood interval must be positive");
        let want = spec.dos[i].flood_rate * dt + self.carry[i];
        let n = (want + 1e-9).floor();
        self.carry[i] = (want - n).max(0.0);
        n as usize
    }

    /// Enqueues entry `i`'s burst for an interval `dt` at time `now`.
    pub fn flood_entry(&mut self, queue: &mut RtuQueue, spec: &AttackSpec, i: usize, now: f64, dt: f64) -> FloodTally {
        let mut tally = FloodTally::default();
        if !spec.is_active(now) {
            return tally;
        }
        let n = self.burst_size(spec, i, dt);
        let src = &spec.dos[i].spoofed_source;
        for _ in 0..n {
            let pkt = MeasurementPacket::greeting(src, now, self.seq[i]);
            self.seq[i] += 1;
            tally.sent += 1;
            match queue.enqueue(pkt, now) {
                EnqueueOutcome::Admitted => tally.admitted += 1,
                EnqueueOutcome::Dropped => tally.dropped += 1,
                EnqueueOutcome::Rejected => tally.rejected += 1,
            }
        }
        tally
    }
}

/// Enqueues every DoS entry's burst for an interval `dt`. No-op before `start_time`.
pub fn dos_flood(queue: &mut RtuQueue, spec: &AttackSpec, state: &mut FloodState, now: f64, dt: f64) -> FloodTally {
    let mut total = FloodTally::default();
    for i in 0..spec.dos.len() {
        let t = state.flood_entry(queue, spec, i, now, dt);
        total.sent += t.sent;
        total.admitted += t.admitted;
        total.dropped += t.dropped;
        total.rejected += t.rejected;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cybernet::{PhaseReading, QueueConfig};
    use crate::grid_model::document::ieee13;
    use crate::grid_model::Phase;

    fn meas(src: &str, vals: &[(Phase, f64, f64)]) -> MeasurementPacket {
        MeasurementPacket {
            source: src.into(),
            kind: PacketKind::Measurement,
            timestamp: 4.0,
            seq: 3,
            payload: vals
                .iter()
                .map(|&(phase, p_kw, q_kvar)| PhaseReading { phase, p_kw, q_kvar })
                .collect(),
        }
    }

    #[test]
    fn builtins_are_valid() {
        let m = ieee13();
        let s1 = scenario_one();
        s1.validate(&m).unwrap();
        assert_eq!((s1.fdi.len(), s1.dos.len(), s1.start_time), (2, 1, 3.0));
        let s2 = scenario_two(1.0);
        s2.validate(&m).unwrap();
        assert_eq!((s2.fdi.len(), s2.dos.len(), s2.start_time), (3, 1, 3.0));
        assert!(scenario_two(0.0).validate(&m).is_err());
    }

    #[test]
    fn fdi_cases() {
        let spec = scenario_one();
        let abc = [(Phase::A, 0.0, 0.0), (Phase::B, 0.0, 0.0), (Phase::C, 0.0, 0.0)];
        let pk = vec![meas("680", &abc), meas("671", &[(Phase::A, 200.0, 100.0)]), meas("652", &[(Phase::A, 64.0, 43.0)])];
        let out = apply_fdi(&pk, &spec, 4.0);
        assert!(out[0].payload.iter().all(|r| r.p_kw == 500.0 && r.q_kvar == 500.0));
        assert_eq!((out[1].payload[0].p_kw, out[1].payload[0].q_kvar), (320.0, 160.0));
        assert_eq!(out[2], pk[2]);
        assert_eq!((out[0].timestamp, out[0].seq), (4.0, 3));
        assert_eq!(apply_fdi(&pk, &spec, 2.0), pk);
        assert_eq!(apply_fdi(&pk, &AttackSpec::default(), 4.0), pk);
    }

    #[test]
    fn partial_phase_entry() {
        let spec = scenario_two(1.0);
        let pk = vec![meas("692", &[(Phase::A, 0.0, 0.0), (Phase::B, 0.0, 0.0), (Phase::C, 85.0, 75.5)])];
        let out = apply_fdi(&pk, &spec, 3.0);
        let p: Vec<f64> = out[0].payload.iter().map(|r| r.p_kw).collect();
        assert_eq!(p, vec![100.0, 0.0, 100.0]);
    }

    #[test]
    fn flood_counts() {
        let spec = AttackSpec {
            start_time: 1.0,
            fdi: vec![],
            dos: vec![DosEntry {
                spoofed_source: "x".into(),
                target: "652".into(),
                flood_rate: 200.0,
            }],
        };
        let mut q = RtuQueue::new(QueueConfig {
            capacity: 1000,
            ..Default::default()
        })
        .unwrap();
        let mut st = FloodState::new(&spec);
        assert_eq!(dos_flood(&mut q, &spec, &mut st, 0.5, 0.1).sent, 0);
        assert_eq!(dos_flood(&mut q, &spec, &mut st, 1.0, 0.1).sent, 20);
        // 2.5 packets per call: 2, 3, 2, 3
        let spec = AttackSpec {
            dos: vec![DosEntry {
                flood_rate: 250.0,
                ..spec.dos[0].clone()
            }],
            ..spec
        };
        let mut st = FloodState::new(&spec);
        let sent: Vec<usize> = (0..4).map(|k| dos_flood(&mut q, &spec, &mut st, 1.0 + k as f64 * 0.01, 0.01).sent).collect();
        assert_eq!(sent, vec![2, 3, 2, 3]);
        assert_eq!(dos_flood(&mut q, &AttackSpec::default(), &mut FloodState::default(), 5.0, 1.0).sent, 0);
    }

    #[test]
    fn flood_starves_victim() {
        let spec = scenario_one();
        let mut q = RtuQueue::new(QueueConfig::default()).unwrap();
        let mut st = FloodState::new(&spec);
        let t = dos_flood(&mut q, &spec, &mut st, 3.0, 0.5);
        assert_eq!(t.sent, 100);
        assert_eq!(t.admitted, 50);
        let victim = meas("652", &[(Phase::A, 64.0, 43.0)]);
        assert_eq!(q.enqueue(victim, 3.0), EnqueueOutcome::Dropped);
    }
}
