//! Closed-loop quasi-static simulation.
//!
//! Every control step `t_k` runs the causal chain
//! field emission → FDI → RTU queue (with flood) → defense or hold →
//! dispatch on believed loads → power flow on true loads.
//!
//! Field buses report once per step at evenly spaced instants in the first
//! half of the step; the RTU is then serviced to the end of the step. A DoS
//! entry sends its whole per-step burst just before its target's slot, which
//! is the moment that crowds the victim out of the buffer.
//!
//! The optimizer only ever sees loads rebuilt from delivered packets. True
//! loads reach the control side solely through the trusted head meter, as
//! total demand.

pub mod output;
pub mod scenario;
pub mod sweep;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attacks::{apply_fdi, AttackError, FloodState};
use crate::cybernet::{MeasurementPacket, PacketKind, PhaseReading, QueueEvent, RtuQueue};
use crate::defense_ann::dataset::{MeasurementLayout, DEMAND_LEN};
use crate::defense_ann::mlp::Mlp;
use crate::defense_ann::{self, received_vector, AnnError, DetectionReport};
use crate::grid_model::document::{ieee13, load_network};
use crate::grid_model::{ModelError, NetworkModel, PerPhase};
use crate::powerflow::{self, ControlSetpoints, PowerFlowError, PowerFlowResult};
use crate::voltvar_opt::{self, OptError, OptimizationProblem};
use scenario::{ScenarioConfig, ScenarioError, Source};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("network model: {0}")]
    Model(#[from] ModelError),
    #[error("attack spec: {0}")]
    Attack(#[from] AttackError),
    #[error("queue: {0}")]
    Queue(String),
    #[error("estimator: {0}")]
    Ann(#[from] AnnError),
    #[error("optimizer: {0}")]
    Opt(#[from] OptError),
    #[error("power flow: {0}")]
    PowerFlow(#[from] PowerFlowError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn read(path: &std::path::Path) -> Result<String, SimError> {
    std::fs::read_to_string(path).map_err(|e| SimError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_model(source: &Source) -> Result<NetworkModel, SimError> {
    match source {
        Source::Builtin(name) if name == "ieee13" => Ok(ieee13()),
        Source::Builtin(name) => Err(SimError::Io {
            path: format!("builtin:{name}"),
            message: "unknown builtin model".into(),
        }),
        Source::Path(p) => Ok(load_network(&read(p)?)?),
    }
}

pub fn load_estimator(source: &Source) -> Result<Mlp, SimError> {
    match source {
        Source::Builtin(name) if name == "ieee13" => Ok(defense_ann::ieee13_estimator()),
        Source::Builtin(name) => Err(SimError::Io {
            path: format!("builtin:{name}"),
            message: "unknown builtin estimator".into(),
        }),
        Source::Path(p) => Ok(Mlp::from_text(&read(p)?)?),
    }
}

/// One logged control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub t: f64,
    /// Voltage magnitude per bus and phase, pu; absent phases hold 0.
    pub v: Vec<PerPhase<f64>>,
    pub setpoints: ControlSetpoints,
    /// Objective of the physical flow under the applied setpoints, pu.
    pub objective: f64,
    pub detections: usize,
    /// Largest buffer length seen during the step.
    pub queue_occupancy: usize,
    pub drops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub t: f64,
    pub report: DetectionReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// True physical model (loads already scaled).
    pub model: NetworkModel,
    pub rows: Vec<StepRow>,
    pub detections: Vec<DetectionRecord>,
    pub queue_events: Vec<QueueEvent>,
    /// Sources disconnected by the defense, in order.
    pub disconnected: Vec<(f64, String)>,
}

impl RunOutput {
    /// Peak magnitude per bus and phase over the rows with `t >= from`.
    pub fn peak_after(&self, from: f64) -> Vec<PerPhase<f64>> {
        let mut peak = vec![[0.0f64; 3]; self.model.buses().len()];
        for r in self.rows.iter().filter(|r| r.t >= from) {
            for (p, v) in peak.iter_mut().zip(&r.v) {
                for k in 0..3 {
                    p[k] = p[k].max(v[k]);
                }
            }
        }
        peak
    }

    pub fn bus_peak_after(&self, bus: &str, from: f64) -> f64 {
        let b = self.model.bus_index(bus).expect("bus exists");
        self.peak_after(from)[b].iter().copied().fold(0.0, f64::max)
    }

    /// Rows where some voltage leaves `[v_min, v_max]`.
    pub fn violation_times(&self) -> Vec<f64> {
        let (lo, hi) = (self.model.v_min(), self.model.v_max());
        self.rows
            .iter()
            .filter(|r| {
                self.model
                    .buses()
                    .iter()
                    .zip(&r.v)
                    .any(|(b, v)| b.phases.iter().any(|p| v[p.index()] > hi || v[p.index()] < lo))
            })
            .map(|r| r.t)
            .collect()
    }
}

/// A failed run with everything logged up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: SimError,
    pub partial: Option<Box<RunOutput>>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

impl From<SimError> for RunFailure {
    fn from(error: SimError) -> Self {
        RunFailure { error, partial: None }
    }
}

/// Truthful field packets, one per field bus, in layout order.
pub fn emit_measurements(model: &NetworkModel, t: f64, seq: u64) -> Vec<MeasurementPacket> {
    let kw = model.base().kw_per_pu();
    model
        .field_buses()
        .into_iter()
        .map(|b| {
            let bus = &model.buses()[b];
            MeasurementPacket {
                source: bus.id.clone(),
                kind: PacketKind::Measurement,
                timestamp: t,
                seq,
                payload: bus
                    .phases
                    .iter()
                    .map(|p| PhaseReading {
                        phase: p,
                        p_kw: bus.load_p[p.index()] * kw,
                        q_kvar: bus.load_q[p.index()] * kw,
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Head-meter demand: substation injection plus the control center's own
/// device injections (DG output, capacitor vars), per phase.
pub fn metered_demand(model: &NetworkModel, setpoints: &ControlSetpoints, flow: &PowerFlowResult) -> [f64; DEMAND_LEN] {
    let mut d = [0.0; DEMAND_LEN];
    d[..3].copy_from_slice(&flow.head_p);
    d[3..].copy_from_slice(&flow.head_q);
    for (di, g) in model.dgs().iter().enumerate() {
        if setpoints.dg_connected[di] {
            for k in 0..3 {
                d[k] += g.p_out[k];
                d[3 + k] += setpoints.dg_q[di][k];
            }
        }
    }
    for q in &flow.cap_q {
        for k in 0..3 {
            d[3 + k] += q[k];
        }
    }
    d
}

fn magnitudes(model: &NetworkModel, flow: &PowerFlowResult) -> Vec<PerPhase<f64>> {
    model
        .buses()
        .iter()
        .zip(&flow.v)
        .map(|(b, v)| {
            let mut m = [0.0; 3];
            for p in b.phases.iter() {
                m[p.index()] = v[p.index()].sqrt();
            }
            m
        })
        .collect()
}

/// Runs a scenario with the model and estimator it names.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput, RunFailure> {
    let model = load_model(&config.model)?;
    let estimator = if config.defense_enabled {
        Some(load_estimator(&config.ann)?)
    } else {
        None
    };
    run_with(config, &model, estimator.as_ref())
}

/// Runs a scenario on an explicit nominal model and estimator.
pub fn run_with(config: &ScenarioConfig, nominal: &NetworkModel, estimator: Option<&Mlp>) -> Result<RunOutput, RunFailure> {
    config.validate().map_err(SimError::from)?;
    config.attack.validate(nominal).map_err(SimError::from)?;
    let truth = nominal.scale_loads(config.loading_factor).map_err(SimError::from)?;
    let layout = MeasurementLayout::new(&truth);
    let estimator = match (config.defense_enabled, estimator) {
        (false, _) => None,
        (true, Some(e)) if e.input_len() == layout.feature_len() && e.output_len() == layout.len() => Some(e),
        (true, Some(e)) => {
            return Err(SimError::Ann(AnnError::Shape(format!(
                "estimator maps {} -> {}, feeder needs {} -> {}",
                e.input_len(),
                e.output_len(),
                layout.feature_len(),
                layout.len()
            )))
            .into())
        }
        (true, None) => return Err(SimError::Ann(AnnError::Shape("defense enabled without an estimator".into())).into()),
    };
    let mut queue = RtuQueue::new(config.queue).map_err(SimError::Queue)?;
    let mut out = RunOutput {
        model: truth.clone(),
        rows: Vec::new(),
        detections: Vec::new(),
        queue_events: Vec::new(),
        disconnected: Vec::new(),
    };
    match simulate(config, &truth, &layout, estimator, &mut queue, &mut out) {
        Ok(()) => {
            out.queue_events = queue.take_events();
            Ok(out)
        }
        Err(error) => {
            out.queue_events = queue.take_events();
            Err(RunFailure {
                error,
                partial: Some(Box::new(out)),
            })
        }
    }
}

fn simulate(
    config: &ScenarioConfig,
    truth: &NetworkModel,
    layout: &MeasurementLayout,
    estimator: Option<&Mlp>,
    queue: &mut RtuQueue,
    out: &mut RunOutput,
) -> Result<(), SimError> {
    let dt = config.control_step;
    let attack = &config.attack;
    let mut flood = FloodState::new(attack);
    let sources = layout.sources();
    // floods aimed at a bus that sends nothing go in at the start of the step
    let untargeted: Vec<usize> = (0..attack.dos.len()).filter(|&i| !sources.contains(&attack.dos[i].target)).collect();
    // only the substation's own load, which its meter sees directly
    let mut control_base = vec![([0.0; 3], [0.0; 3]); truth.buses().len()];
    control_base[truth.substation()] = truth.loads()[truth.substation()];

    let mut applied = ControlSetpoints::from_model(truth);
    let mut held = vec![0.0; layout.len()];
    let mut prev_clean: Option<Vec<f64>> = None;

    for (k, &t) in config.times().iter().enumerate() {
        let emitted = emit_measurements(truth, t, k as u64);
        let packets = apply_fdi(&emitted, attack, t);

        let drops_before = queue.drops();
        let mut peak = queue.len();
        let mut delivered = Vec::new();
        let active = attack.is_active(t);
        if active {
            for &i in &untargeted {
                flood.flood_entry(queue, attack, i, t, dt);
                peak = peak.max(queue.len());
            }
        }
        let n = packets.len();
        for (j, pkt) in packets.into_iter().enumerate() {
            let at = t + (j + 1) as f64 / (n + 1) as f64 * dt / 2.0;
            delivered.extend(queue.service_until(at));
            if active {
                for i in (0..attack.dos.len()).filter(|&i| attack.dos[i].target == pkt.source) {
                    flood.flood_entry(queue, attack, i, at, dt);
                    peak = peak.max(queue.len());
                }
            }
            queue.enqueue(pkt, at);
            peak = peak.max(queue.len());
        }
        delivered.extend(queue.service_until(t + dt));
        let utilization: BTreeMap<String, f64> = queue.utilization_by_source(config.queue.window);

        let head_flow = powerflow::solve(truth, &applied)?;
        let demand = metered_demand(truth, &applied, &head_flow);

        let got = received_vector(layout, truth, &delivered);
        let mut detections = 0;
        let believed_vec = match estimator {
            Some(est) => {
                let prev = prev_clean.take().unwrap_or_else(|| got.iter().map(|v| v.unwrap_or(0.0)).collect());
                let mit = defense_ann::detect_and_mitigate(est, layout, truth, &delivered, &utilization, &prev, &demand, &config.defense)?;
                for s in &mit.disconnect {
                    let purged = queue.disconnect_source(s);
                    log::info!("t={t:.3}: disconnected {s}, {purged} buffered packets purged");
                    out.disconnected.push((t, s.clone()));
                }
                detections = mit.report.flag_count();
                if !mit.report.is_empty() {
                    log::debug!("t={t:.3}: {} fdi, {} dos, {} missing", mit.report.fdi.len(), mit.report.dos.len(), mit.report.missing.len());
                    out.detections.push(DetectionRecord { t, report: mit.report });
                }
                prev_clean = Some(mit.clean.clone());
                mit.clean
            }
            None => {
                for (h, g) in held.iter_mut().zip(&got) {
                    if let Some(v) = g {
                        *h = *v;
                    }
                }
                held.clone()
            }
        };
        let believed = layout.loads_from_vector(&believed_vec, &control_base);

        let problem = OptimizationProblem {
            model: truth,
            believed_loads: believed,
            v_band: truth.v_band(),
            incumbent: Some(applied.clone()),
        };
        let outcome = voltvar_opt::optimize(&problem, &config.optimizer)?;
        applied = outcome.setpoints;
        log::trace!("t={t:.3}: J={:.6} taps {:?} caps {:?}", outcome.objective, applied.taps, applied.cap_closed);

        let flow = powerflow::solve(truth, &applied)?;
        out.rows.push(StepRow {
            t,
            v: magnitudes(truth, &flow),
            objective: voltvar_opt::objective(&flow, config.optimizer.objective),
            setpoints: applied.clone(),
            detections,
            queue_occupancy: peak,
            drops: queue.drops() - drops_before,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackSpec;

    #[test]
    fn demand_matches_true_totals() {
        let m = ieee13().scale_loads(0.5).unwrap();
        let mut sp = ControlSetpoints::from_model(&m);
        sp.cap_closed = vec![true, true];
        sp.dg_q[0] = [0.05, -0.02, 0.01];
        let flow = powerflow::solve(&m, &sp).unwrap();
        let d = metered_demand(&m, &sp, &flow);
        let want = crate::defense_ann::dataset::total_demand(&m.loads());
        for k in 0..6 {
            assert!((d[k] - want[k]).abs() < 1e-12, "{k}: {} vs {}", d[k], want[k]);
        }
    }

    #[test]
    fn emission_covers_present_phases() {
        let m = ieee13();
        let pk = emit_measurements(&m, 0.0, 0);
        assert_eq!(pk.len(), m.buses().len() - 1);
        for p in &pk {
            let b = m.bus(&p.source).unwrap();
            assert_eq!(p.payload.len(), b.phases.len());
        }
    }

    #[test]
    fn hold_policy_without_attack() {
        let cfg = ScenarioConfig {
            defense_enabled: false,
            attack: AttackSpec::default(),
            t_end: 1.0,
            ..Default::default()
        };
        let out = run(&cfg).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert!(out.violation_times().is_empty());
        assert_eq!(out.rows[0].setpoints, out.rows[2].setpoints);
        assert!(out.rows.iter().all(|r| r.drops == 0));
    }
}
