//! Measurement vector layout and estimator training data.
//!
//! The measurement vector lists, for every field bus in model order and every
//! present phase, the load `P` then `Q` in pu. Estimator features are the
//! previous step's clean vector followed by the feeder's total demand per
//! phase (`P_a P_b P_c Q_a Q_b Q_c`), which the control center gets from the
//! trusted head meter plus its own device injections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid_model::{BusIdx, NetworkModel, PerPhase, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quantity {
    P,
    Q,
}

impl Quantity {
    pub fn label(self) -> &'static str {
        match self {
            Quantity::P => "p",
            Quantity::Q => "q",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub bus: BusIdx,
    pub phase: Phase,
    pub quantity: Quantity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementLayout {
    entries: Vec<Entry>,
    bus_ids: Vec<String>,
    /// First vector slot of every bus, `None` for the substation.
    first: Vec<Option<usize>>,
}

pub const DEMAND_LEN: usize = 6;

impl MeasurementLayout {
    pub fn new(model: &NetworkModel) -> Self {
        let mut entries = Vec::new();
        let mut first = vec![None; model.buses().len()];
        for b in model.field_buses() {
            first[b] = Some(entries.len());
            for phase in model.buses()[b].phases.iter() {
                for quantity in [Quantity::P, Quantity::Q] {
                    entries.push(Entry { bus: b, phase, quantity });
                }
            }
        }
        MeasurementLayout {
            entries,
            bus_ids: model.buses().iter().map(|b| b.id.clone()).collect(),
            first,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn feature_len(&self) -> usize {
        self.len() + DEMAND_LEN
    }

    pub fn bus_id(&self, bus: BusIdx) -> &str {
        &self.bus_ids[bus]
    }

    /// Field bus labels in vector order.
    pub fn sources(&self) -> Vec<String> {
        self.first
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_some())
            .map(|(b, _)| self.bus_ids[b].clone())
            .collect()
    }

    pub fn index_of(&self, bus: BusIdx, phase: Phase, quantity: Quantity) -> Option<usize> {
        let start = self.first.get(bus).copied().flatten()?;
        self.entries[start..]
            .iter()
            .take_while(|e| e.bus == bus)
            .position(|e| e.phase == phase && e.quantity == quantity)
            .map(|k| start + k)
    }

    pub fn vector_from_loads(&self, loads: &[(PerPhase<f64>, PerPhase<f64>)]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| {
                let (p, q) = &loads[e.bus];
                match e.quantity {
                    Quantity::P => p[e.phase.index()],
                    Quantity::Q => q[e.phase.index()],
                }
            })
            .collect()
    }

    /// Writes the vector over `base`; the substation's own load is kept.
    pub fn loads_from_vector(&self, vector: &[f64], base: &[(PerPhase<f64>, PerPhase<f64>)]) -> Vec<(PerPhase<f64>, PerPhase<f64>)> {
        let mut out = base.to_vec();
        for (e, x) in self.entries.iter().zip(vector) {
            let slot = match e.quantity {
                Quantity::P => &mut out[e.bus].0,
                Quantity::Q => &mut out[e.bus].1,
            };
            slot[e.phase.index()] = *x;
        }
        out
    }

    pub fn features(&self, prev_clean: &[f64], demand: &[f64; DEMAND_LEN]) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.feature_len());
        f.extend_from_slice(prev_clean);
        f.extend_from_slice(demand);
        f
    }
}

/// Total demand per phase, `P_a P_b P_c Q_a Q_b Q_c`.
pub fn total_demand(loads: &[(PerPhase<f64>, PerPhase<f64>)]) -> [f64; DEMAND_LEN] {
    let mut d = [0.0; DEMAND_LEN];
    for (p, q) in loads {
        for k in 0..3 {
            d[k] += p[k];
            d[3 + k] += q[k];
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub factors: Vec<f64>,
    pub noise_sigma: f64,
    /// Relative step-to-step drift between the previous and current loads.
    pub step_sigma: f64,
    pub samples_per_factor: usize,
    pub seed: u64,
}

/// Loading factors 0.5, 0.6, ..., 1.5.
pub fn default_factors() -> Vec<f64> {
    (5..=15).map(|k| k as f64 / 10.0).collect()
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            factors: default_factors(),
            noise_sigma: 0.05,
            step_sigma: 0.05,
            samples_per_factor: 40,
            seed: 1,
        }
    }
}

/// For every factor and sample, the current loads are the nominal loads times
/// the factor, each bus phase load scaled by its own `1 + σ·N(0,1)`. The
/// previous step's vector is the current one perturbed again the same way.
/// Targets are the current vector; features are the previous vector plus the
/// current total demand.
pub fn generate_training_set(model: &NetworkModel, config: &DataConfig) -> TrainingSet {
    assert!(!config.factors.is_empty(), "at least one loading factor is needed");
    let layout = MeasurementLayout::new(model);
    let nominal = model.loads();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |sigma: f64| -> f64 {
        let n: f64 = StandardNormal.sample(&mut rng);
        1.0 + sigma * n
    };
    let mut set = TrainingSet {
        inputs: Vec::new(),
        targets: Vec::new(),
    };
    for &f in &config.factors {
        for _ in 0..config.samples_per_factor {
            let mut current = nominal.clone();
            let mut prev = nominal.clone();
            for ((cp, cq), (pp, pq)) in current.iter_mut().zip(prev.iter_mut()) {
                for k in 0..3 {
                    let m = f * draw(config.noise_sigma);
                    cp[k] *= m;
                    cq[k] *= m;
                    let m2 = draw(config.step_sigma);
                    pp[k] = cp[k] * m2;
                    pq[k] = cq[k] * m2;
                }
            }
            let target = layout.vector_from_loads(&current);
            let input = layout.features(&layout.vector_from_loads(&prev), &total_demand(&current));
            set.inputs.push(input);
            set.targets.push(target);
        }
    }
    set
}

/// Mean absolute percentage error over target entries that are nonzero.
pub fn mape(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        for (a, b) in p.iter().zip(t) {
            if *b != 0.0 {
                sum += ((a - b) / b).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}
