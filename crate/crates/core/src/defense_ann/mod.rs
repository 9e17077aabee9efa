//! Measurement estimator and the control-center defense.
//!
//! The estimator predicts the current measurement vector from the last clean
//! one and the trusted feeder demand (see [`dataset`]). Detection applies
//! three rules per control step:
//!
//! * any source holding more than 60% of the RTU buffer is flagged as a DoS
//!   source and disconnected,
//! * a field bus whose packet never arrived has its values filled from the
//!   estimate,
//! * a received value that deviates from the estimate by more than 10%
//!   (relative to `max(|estimate|, floor)`) is replaced by the estimate.

pub mod dataset;
pub mod mlp;

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::cybernet::{MeasurementPacket, PacketKind};
use crate::grid_model::{NetworkModel, Phase};
use dataset::{mape, DataConfig, MeasurementLayout, Quantity, TrainingSet, DEMAND_LEN};
use mlp::{Mlp, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnError {
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },
}

/// The bundled estimator for the IEEE 13-bus feeder.
pub const IEEE13_ANN: &str = include_str!("../../../../data/ieee13.ann");

pub fn ieee13_estimator() -> Mlp {
    Mlp::from_text(IEEE13_ANN).expect("bundled estimator parses")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefenseConfig {
    pub fdi_threshold: f64,
    pub dos_threshold: f64,
    /// Denominator floor of the relative deviation, pu.
    pub floor_pu: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            fdi_threshold: 0.10,
            dos_threshold: 0.60,
            floor_pu: 0.01,
        }
    }
}

/// Relative deviation used by the FDI rule.
pub fn relative_deviation(received: f64, estimate: f64, floor: f64) -> f64 {
    (received - estimate).abs() / estimate.abs().max(floor)
}

/// Values of one bus phase quantity are reported in pu.
#[derive(Debug, Clone, PartialEq)]
pub struct FdiFlag {
    pub bus: String,
    pub phase: Phase,
    pub quantity: Quantity,
    pub received: f64,
    pub estimate: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DosFlag {
    pub source: String,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Substitution {
    pub bus: String,
    pub phase: Phase,
    pub quantity: Quantity,
    /// `None` when the packet was lost.
    pub received: Option<f64>,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionReport {
    pub fdi: Vec<FdiFlag>,
    pub dos: Vec<DosFlag>,
    /// Field buses with no delivered measurement.
    pub missing: Vec<String>,
    pub substitutions: Vec<Substitution>,
}

impl DetectionReport {
    pub fn is_empty(&self) -> bool {
        self.fdi.is_empty() && self.dos.is_empty() && self.missing.is_empty() && self.substitutions.is_empty()
    }

    /// Flags raised: FDI flags, DoS sources and missing buses.
    pub fn flag_count(&self) -> usize {
        self.fdi.len() + self.dos.len() + self.missing.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mitigation {
    pub clean: Vec<f64>,
    pub estimate: Vec<f64>,
    pub report: DetectionReport,
    pub disconnect: Vec<String>,
}

/// Received values in layout order, pu; `None` where no packet arrived. The
/// latest measurement per source wins; greetings carry nothing.
pub fn received_vector(layout: &MeasurementLayout, model: &NetworkModel, packets: &[MeasurementPacket]) -> Vec<Option<f64>> {
    let kw = model.base().kw_per_pu();
    let mut latest: BTreeMap<&str, &MeasurementPacket> = BTreeMap::new();
    for p in packets.iter().filter(|p| p.kind == PacketKind::Measurement) {
        match latest.get(p.source.as_str()) {
            Some(q) if q.seq >= p.seq => {}
            _ => {
                latest.insert(p.source.as_str(), p);
            }
        }
    }
    let mut out = vec![None; layout.len()];
    for (src, p) in latest {
        let Some(b) = model.bus_index(src) else { continue };
        for r in &p.payload {
            for (q, v) in [(Quantity::P, r.p_kw), (Quantity::Q, r.q_kvar)] {
                if let Some(i) = layout.index_of(b, r.phase, q) {
                    out[i] = Some(v / kw);
                }
            }
        }
    }
    out
}

/// Runs the three rules. `received` holds the delivered packets of the step,
/// `utilization` the per-source RTU share, `prev_clean` the previous clean
/// vector and `demand` the trusted feeder demand, all in pu.
#[allow(clippy::too_many_arguments)]
pub fn detect_and_mitigate(
    estimator: &Mlp,
    layout: &MeasurementLayout,
    model: &NetworkModel,
    received: &[MeasurementPacket],
    utilization: &BTreeMap<String, f64>,
    prev_clean: &[f64],
    demand: &[f64; DEMAND_LEN],
    config: &DefenseConfig,
) -> Result<Mitigation, AnnError> {
    if prev_clean.len() != layout.len() {
        return Err(AnnError::Dimension {
            expected: layout.len(),
            got: prev_clean.len(),
        });
    }
    let estimate = estimator.forward(&layout.features(prev_clean, demand))?;
    if estimate.len() != layout.len() {
        return Err(AnnError::Dimension {
            expected: layout.len(),
            got: estimate.len(),
        });
    }
    let mut report = DetectionReport::default();
    let mut disconnect = Vec::new();
    for (src, &u) in utilization {
        if u > config.dos_threshold {
            report.dos.push(DosFlag {
                source: src.clone(),
                utilization: u,
            });
            disconnect.push(src.clone());
        }
    }

    let got = received_vector(layout, model, received);
    let mut clean = Vec::with_capacity(layout.len());
    let mut last_missing: Option<usize> = None;
    for (i, e) in layout.entries().iter().enumerate() {
        let bus = layout.bus_id(e.bus).to_string();
        let est = estimate[i];
        match got[i] {
            None => {
                if last_missing != Some(e.bus) {
                    report.missing.push(bus.clone());
                    last_missing = Some(e.bus);
                }
                report.substitutions.push(Substitution {
                    bus,
                    phase: e.phase,
                    quantity: e.quantity,
                    received: None,
                    estimate: est,
                });
                clean.push(est);
            }
            Some(r) => {
                let dev = relative_deviation(r, est, config.floor_pu);
                if dev > config.fdi_threshold {
                    report.fdi.push(FdiFlag {
                        bus: bus.clone(),
                        phase: e.phase,
                        quantity: e.quantity,
                        received: r,
                        estimate: est,
                        deviation: dev,
                    });
                    report.substitutions.push(Substitution {
                        bus,
                        phase: e.phase,
                        quantity: e.quantity,
                        received: Some(r),
                        estimate: est,
                    });
                    clean.push(est);
                } else {
                    clean.push(r);
                }
            }
        }
    }
    Ok(Mitigation {
        clean,
        estimate,
        report,
        disconnect,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub hidden: Vec<usize>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            hidden: vec![64, 64],
            data: DataConfig::default(),
            train: TrainConfig::default(),
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub train_mape: f64,
    pub heldout_mape: f64,
    pub seconds: f64,
}

/// Loading factors kept out of training.
pub const HELDOUT_FACTORS: [f64; 4] = [0.55, 0.85, 1.25, 1.45];

pub fn heldout_set(model: &NetworkModel, data: &DataConfig) -> TrainingSet {
    dataset::generate_training_set(
        model,
        &DataConfig {
            factors: HELDOUT_FACTORS.to_vec(),
            samples_per_factor: data.samples_per_factor.max(10),
            seed: data.seed.wrapping_add(0x9e37_79b9),
            ..data.clone()
        },
    )
}

pub fn evaluate_mape(estimator: &Mlp, set: &TrainingSet) -> Result<f64, AnnError> {
    let pred = set
        .inputs
        .iter()
        .map(|x| estimator.forward(x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mape(&pred, &set.targets))
}

/// Generates data, trains and scores an estimator for `model`.
pub fn train_estimator(model: &NetworkModel, config: &EstimatorConfig) -> Result<(Mlp, TrainReport), AnnError> {
    let started = Instant::now();
    let layout = MeasurementLayout::new(model);
    let set = dataset::generate_training_set(model, &config.data);
    if set.is_empty() {
        return Err(AnnError::Shape("training set is empty".into()));
    }
    let mut sizes = vec![layout.feature_len()];
    sizes.extend(&config.hidden);
    sizes.push(layout.len());
    let mut net = Mlp::new(&sizes, config.init_seed)?;
    net.fit_normalizers(&set.inputs, &set.targets);
    let batch = net.batch(&set.inputs, &set.targets)?;
    let loss_curve = net.train(&batch, &config.train)?;
    let seconds = started.elapsed().as_secs_f64();
    let train_mape = evaluate_mape(&net, &set)?;
    let heldout_mape = evaluate_mape(&net, &heldout_set(model, &config.data))?;
    log::info!("trained on {} samples in {seconds:.1} s, held-out MAPE {heldout_mape:.2}%", set.len());
    Ok((
        net,
        TrainReport {
            loss_curve,
            train_mape,
            heldout_mape,
            seconds,
        },
    ))
}
