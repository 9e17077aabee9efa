//! Linearized unbalanced radial power flow (three-phase LinDistFlow).
//!
//! State is the squared voltage magnitude `v` per bus and phase. Flows are
//! accumulated from the leaves (lossless), then voltages are propagated from
//! the substation with
//!
//! `v_j^p = v_i^p - Σ_q 2·Re[S_ij^pq · conj(z_ij^pq)]`,
//!
//! where `S_ij^pq = s_ij^q · α_p / α_q` and `α = (1, e^{-j2π/3}, e^{j2π/3})`
//! encodes the nearly balanced phase angles. Off-diagonal coupling uses the
//! full 3×3 impedance of each line.
//!
//! An OLTC scales the squared voltage at its bus by `γ²`. Capacitor output
//! depends on the local squared voltage, so the sweep is repeated until the
//! voltages at switched-in capacitors stop moving.

use num_complex::Complex64;
use thiserror::Error;

use crate::grid_model::{CapacitorBank, NetworkModel, Oltc, PerPhase, Phase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("capacitor fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("invalid setpoints: {0}")]
    InvalidSetpoints(String),
}

/// Discrete and continuous control decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSetpoints {
    /// Per OLTC, per phase 1-based tap index.
    pub taps: Vec<PerPhase<u8>>,
    pub cap_closed: Vec<bool>,
    pub dg_connected: Vec<bool>,
    /// Per DG, per phase reactive dispatch (pu, positive = injection).
    pub dg_q: Vec<PerPhase<f64>>,
}

impl ControlSetpoints {
    /// The device states written in the model document.
    pub fn from_model(model: &NetworkModel) -> Self {
        ControlSetpoints {
            taps: model.oltcs().iter().map(|o| o.tap).collect(),
            cap_closed: model.capacitors().iter().map(|c| c.closed).collect(),
            dg_connected: model.dgs().iter().map(|d| d.connected).collect(),
            dg_q: model.dgs().iter().map(|d| d.q_set).collect(),
        }
    }

    pub fn validate(&self, model: &NetworkModel) -> Result<(), PowerFlowError> {
        let bad = |m: String| Err(PowerFlowError::InvalidSetpoints(m));
        if self.taps.len() != model.oltcs().len()
            || self.cap_closed.len() != model.capacitors().len()
            || self.dg_connected.len() != model.dgs().len()
            || self.dg_q.len() != model.dgs().len()
        {
            return bad("setpoint vectors do not match the device inventory".into());
        }
        for (o, t) in model.oltcs().iter().zip(&self.taps) {
            for (k, &tap) in t.iter().enumerate() {
                if tap < 1 || tap as usize > o.positions() {
                    return bad(format!("{} phase {} tap {tap} out of range", o.id, Phase::ALL[k]));
                }
            }
            if o.ganged && (t[0] != t[1] || t[0] != t[2]) {
                return bad(format!("{} is ganged but taps differ", o.id));
            }
        }
        for ((d, q), &on) in model.dgs().iter().zip(&self.dg_q).zip(&self.dg_connected) {
            for p in Phase::ALL {
                let i = p.index();
                if !q[i].is_finite() {
                    return bad(format!("{} reactive dispatch is not finite", d.id));
                }
                let lim = (d.s_rated[i].powi(2) - d.p_out[i].powi(2)).max(0.0).sqrt();
                if on && q[i].abs() > lim * (1.0 + 1e-9) + 1e-12 {
                    return bad(format!("{} phase {p} dispatch {} exceeds ±{lim}", d.id, q[i]));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowResult {
    /// Per line (model line order), per phase real flow at the sending end (pu).
    pub flow_p: Vec<PerPhase<f64>>,
    pub flow_q: Vec<PerPhase<f64>>,
    /// Per bus, per phase squared voltage magnitude (pu²); zero on absent phases.
    pub v: Vec<PerPhase<f64>>,
    /// Substation injection per phase (pu).
    pub head_p: PerPhase<f64>,
    pub head_q: PerPhase<f64>,
    /// Per capacitor, per phase injected reactive power (pu).
    pub cap_q: Vec<PerPhase<f64>>,
    pub iterations: usize,
}

impl PowerFlowResult {
    /// Voltage magnitude in pu.
    pub fn magnitude(&self, bus: usize, phase: Phase) -> f64 {
        self.v[bus][phase.index()].sqrt()
    }

    /// Largest squared voltage per phase over the buses carrying that phase.
    pub fn max_v_per_phase(&self, model: &NetworkModel) -> PerPhase<f64> {
        let mut out = [f64::NEG_INFINITY; 3];
        for (b, v) in model.buses().iter().zip(&self.v) {
            for p in b.phases.iter() {
                out[p.index()] = out[p.index()].max(v[p.index()]);
            }
        }
        out
    }

    /// Extreme squared voltages `(min, max)` over all present phases.
    pub fn v_range(&self, model: &NetworkModel) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (b, v) in model.buses().iter().zip(&self.v) {
            for p in b.phases.iter() {
                lo = lo.min(v[p.index()]);
                hi = hi.max(v[p.index()]);
            }
        }
        (lo, hi)
    }
}

/// How capacitor output is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CapacitorVoltage {
    /// Iterate `Q = b·Q_rated·v` to a fixed point.
    FixedPoint,
    /// Evaluate every capacitor at the given squared voltage, no iteration.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub capacitor_voltage: CapacitorVoltage,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            capacitor_voltage: CapacitorVoltage::FixedPoint,
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

/// Reactive output of a capacitor bank per phase for the local squared voltage.
pub fn capacitor_injection(cap: &CapacitorBank, closed: bool, v_node: &PerPhase<f64>) -> PerPhase<f64> {
    if !closed {
        return [0.0; 3];
    }
    [
        cap.q_rated[0] * v_node[0],
        cap.q_rated[1] * v_node[1],
        cap.q_rated[2] * v_node[2],
    ]
}

/// Turns ratio selected on `phase`.
pub fn tap_ratio(oltc: &Oltc, phase: Phase) -> f64 {
    oltc.ratios[oltc.tap[phase.index()] as usize - 1]
}

fn ratio_at(oltc: &Oltc, tap: &PerPhase<u8>, phase: Phase) -> f64 {
    oltc.ratios[tap[phase.index()] as usize - 1]
}

/// Phase rotation `α_p / α_q` for the nearly balanced voltage assumption.
fn rotation(p: usize, q: usize) -> Complex64 {
    let angle = -2.0 * std::f64::consts::PI / 3.0 * (p as f64 - q as f64);
    Complex64::from_polar(1.0, angle)
}

/// Precomputed `2·conj(z^pq)·α_p/α_q` per line.
fn coupling(model: &NetworkModel) -> Vec<[[Complex64; 3]; 3]> {
    model
        .lines()
        .iter()
        .map(|l| {
            let mut k = [[Complex64::new(0.0, 0.0); 3]; 3];
            for p in l.phases.iter() {
                for q in l.phases.iter() {
                    let (pi, qi) = (p.index(), q.index());
                    k[pi][qi] = 2.0 * l.z[pi][qi].conj() * rotation(pi, qi);
                }
            }
            k
        })
        .collect()
}

pub fn solve(model: &NetworkModel, setpoints: &ControlSetpoints) -> Result<PowerFlowResult, PowerFlowError> {
    solve_with(model, setpoints, &SolveOptions::default())
}

pub fn solve_with(
    model: &NetworkModel,
    setpoints: &ControlSetpoints,
    opts: &SolveOptions,
) -> Result<PowerFlowResult, PowerFlowError> {
    setpoints.validate(model)?;
    let n = model.buses().len();
    let topo = model.topology();

    // Net withdrawals before capacitors.
    let mut net_p = vec![[0.0; 3]; n];
    let mut net_q = vec![[0.0; 3]; n];
    for (i, b) in model.buses().iter().enumerate() {
        net_p[i] = b.load_p;
        net_q[i] = b.load_q;
    }
    for ((d, &on), q) in model.dgs().iter().zip(&setpoints.dg_connected).zip(&setpoints.dg_q) {
        if on {
            for k in 0..3 {
                net_p[d.bus][k] -= d.p_out[k];
                net_q[d.bus][k] -= q[k];
            }
        }
    }

    let mut gamma_sq = vec![[1.0; 3]; n];
    for (o, tap) in model.oltcs().iter().zip(&setpoints.taps) {
        for p in model.buses()[o.bus].phases.iter() {
            let g = ratio_at(o, tap, p);
            gamma_sq[o.bus][p.index()] *= g * g;
        }
    }

    let k = coupling(model);
    let source_v = model.v_source() * model.v_source();
    let mut flow_p = vec![[0.0; 3]; model.lines().len()];
    let mut flow_q = vec![[0.0; 3]; model.lines().len()];
    let mut v = vec![[0.0; 3]; n];
    let mut cap_q = vec![[0.0; 3]; model.capacitors().len()];

    let mut v_eval: Vec<PerPhase<f64>> = vec![[1.0; 3]; n];
    if let CapacitorVoltage::Fixed(vf) = opts.capacitor_voltage {
        v_eval = vec![[vf; 3]; n];
    }
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut inj_q = net_q.clone();
        for ((c, &closed), out) in model.capacitors().iter().zip(&setpoints.cap_closed).zip(cap_q.iter_mut()) {
            *out = capacitor_injection(c, closed, &v_eval[c.bus]);
            for kk in 0..3 {
                inj_q[c.bus][kk] -= out[kk];
            }
        }

        // Forward accumulation from the leaves.
        let mut acc_p = net_p.clone();
        let mut acc_q = inj_q;
        for &j in topo.order.iter().rev() {
            if let Some(li) = topo.parent_line[j] {
                let line = &model.lines()[li];
                for p in line.phases.iter() {
                    let pi = p.index();
                    flow_p[li][pi] = acc_p[j][pi];
                    flow_q[li][pi] = acc_q[j][pi];
                    acc_p[line.from][pi] += acc_p[j][pi];
                    acc_q[line.from][pi] += acc_q[j][pi];
                }
            }
        }
        let root = model.substation();
        let head_p = acc_p[root];
        let head_q = acc_q[root];

        // Voltage propagation from the substation.
        for &j in &topo.order {
            let phases = model.buses()[j].phases;
            match topo.parent_line[j] {
                None => {
                    for p in phases.iter() {
                        v[j][p.index()] = source_v;
                    }
                }
                Some(li) => {
                    let line = &model.lines()[li];
                    for p in line.phases.iter() {
                        let pi = p.index();
                        let mut drop = 0.0;
                        for q in line.phases.iter() {
                            let qi = q.index();
                            let s = Complex64::new(flow_p[li][qi], flow_q[li][qi]);
                            drop += (s * k[li][pi][qi]).re;
                        }
                        v[j][pi] = v[line.from][pi] - drop;
                    }
                }
            }
            for p in phases.iter() {
                v[j][p.index()] *= gamma_sq[j][p.index()];
            }
        }

        let mut residual: f64 = 0.0;
        for (c, &closed) in model.capacitors().iter().zip(&setpoints.cap_closed) {
            if closed {
                for p in model.buses()[c.bus].phases.iter() {
                    let i = p.index();
                    residual = residual.max((v[c.bus][i] - v_eval[c.bus][i]).abs());
                }
            }
        }
        let done = matches!(opts.capacitor_voltage, CapacitorVoltage::Fixed(_)) || residual < opts.tolerance;
        if done {
            return Ok(PowerFlowResult {
                flow_p,
                flow_q,
                v,
                head_p,
                head_q,
                cap_q,
                iterations,
            });
        }
        if iterations >= opts.max_iterations {
            return Err(PowerFlowError::NotConverged { iterations, residual });
        }
        v_eval.clone_from(&v);
    }
}
