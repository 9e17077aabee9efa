//! Volt-Var dispatch.
//!
//! The discrete devices (OLTC taps, capacitor switches, DG connection) are
//! enumerated exhaustively in a fixed mixed-radix order. For every discrete
//! assignment with connected DG, the reactive dispatch is picked by projected
//! coordinate descent on linear sensitivities of a secondary criterion.
//! Candidates are ranked by
//! `(infeasible, band violation, J, secondary, enumeration index)`.
//!
//! Under the lossless flow model `J` only moves with DG connection, so the
//! secondary term decides taps, capacitors and DG vars. The default secondary
//! is the second-order loss estimate, which is what `J` would also see if the
//! flow model kept losses; voltage flatness is available as an alternative.

use std::cmp::Ordering;

use thiserror::Error;

use crate::grid_model::{Dg, NetworkModel, PerPhase, Phase};
use crate::par::{self, ExecMode};
use crate::powerflow::{self, ControlSetpoints, PowerFlowError, PowerFlowResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error("discrete space has {size} assignments, above the cap of {cap}; use ganged taps or a tap neighborhood")]
    SpaceTooLarge { size: u128, cap: u128 },
    #[error("DG {dg} phase {phase}: real output {p} exceeds rating {s}")]
    DgOverRated { dg: String, phase: Phase, p: f64, s: f64 },
    #[error("believed loads cover {got} buses, model has {expected}")]
    LoadShape { got: usize, expected: usize },
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

/// Which line flows enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObjectiveKind {
    /// Sum of real flow over every line and phase.
    #[default]
    AllLines,
    /// Substation injection only.
    HeadLine,
}

/// Criterion that ranks assignments with equal `J` and drives the DG var dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Secondary {
    /// Second-order line losses `Σ r_pp |S_p|² / v_p`, the term the lossless
    /// flow model drops from `J`.
    #[default]
    Losses,
    /// Voltage flatness `Σ (v - 1)²`.
    Flatness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub max_assignments: u128,
    pub objective: ObjectiveKind,
    pub secondary: Secondary,
    /// When set, taps are searched within this many positions of the incumbent.
    pub tap_radius: Option<u8>,
    pub qdg_tolerance: f64,
    pub qdg_max_iterations: usize,
    pub exec: ExecMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_assignments: 1_000_000,
            objective: ObjectiveKind::AllLines,
            secondary: Secondary::default(),
            tap_radius: None,
            qdg_tolerance: 1e-6,
            qdg_max_iterations: 200,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationProblem<'a> {
    pub model: &'a NetworkModel,
    /// Per bus `(P, Q)` in pu, as the control center believes them.
    pub believed_loads: Vec<(PerPhase<f64>, PerPhase<f64>)>,
    /// Squared-voltage band.
    pub v_band: (f64, f64),
    /// Present device states; centers the tap neighborhood search.
    pub incumbent: Option<ControlSetpoints>,
}

impl<'a> OptimizationProblem<'a> {
    /// Problem using the model's own loads and band.
    pub fn from_model(model: &'a NetworkModel) -> Self {
        OptimizationProblem {
            model,
            believed_loads: model.loads(),
            v_band: model.v_band(),
            incumbent: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationOutcome {
    pub setpoints: ControlSetpoints,
    pub objective: f64,
    pub feasible: bool,
    /// Worst band violation in pu², zero when feasible.
    pub violation: f64,
    /// `Σ (v - 1)²` at the chosen setpoints.
    pub flatness: f64,
    /// Loss estimate at the chosen setpoints, pu.
    pub losses: f64,
    /// Power flow under the believed loads.
    pub predicted: PowerFlowResult,
    pub evaluated: usize,
}

/// Reactive capability `±sqrt(S² - P²)` of a DG phase.
pub fn qdg_bounds(dg: &Dg, phase: Phase) -> Result<(f64, f64), OptError> {
    let i = phase.index();
    let (s, p) = (dg.s_rated[i], dg.p_out[i]);
    if p.abs() > s {
        return Err(OptError::DgOverRated {
            dg: dg.id.clone(),
            phase,
            p,
            s,
        });
    }
    let h = (s * s - p * p).sqrt();
    Ok((-h, h))
}

pub fn objective(result: &PowerFlowResult, kind: ObjectiveKind) -> f64 {
    match kind {
        ObjectiveKind::AllLines => result.flow_p.iter().flat_map(|f| f.iter()).sum(),
        ObjectiveKind::HeadLine => result.head_p.iter().sum(),
    }
}

/// `Σ (v - 1)²` over all present bus phases.
pub fn flatness(model: &NetworkModel, result: &PowerFlowResult) -> f64 {
    model
        .buses()
        .iter()
        .zip(&result.v)
        .flat_map(|(b, v)| b.phases.iter().map(move |p| (v[p.index()] - 1.0).powi(2)))
        .sum()
}

/// Second-order loss estimate `Σ_lines Σ_p r_pp (P_p² + Q_p²) / v_from,p`.
pub fn loss_estimate(model: &NetworkModel, result: &PowerFlowResult) -> f64 {
    model
        .lines()
        .iter()
        .enumerate()
        .map(|(li, l)| {
            l.phases
                .iter()
                .map(|p| {
                    let i = p.index();
                    let s2 = result.flow_p[li][i].powi(2) + result.flow_q[li][i].powi(2);
                    l.z[i][i].re * s2 / result.v[l.from][i]
                })
                .sum::<f64>()
        })
        .sum()
}

pub fn secondary_value(model: &NetworkModel, result: &PowerFlowResult, kind: Secondary) -> f64 {
    match kind {
        Secondary::Losses => loss_estimate(model, result),
        Secondary::Flatness => flatness(model, result),
    }
}

/// Worst excursion outside `band` in pu², zero inside.
pub fn band_violation(model: &NetworkModel, result: &PowerFlowResult, band: (f64, f64)) -> f64 {
    let mut worst: f64 = 0.0;
    for (b, v) in model.buses().iter().zip(&result.v) {
        for p in b.phases.iter() {
            let x = v[p.index()];
            worst = worst.max(band.0 - x).max(x - band.1);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteAssignment {
    pub taps: Vec<PerPhase<u8>>,
    pub cap_closed: Vec<bool>,
    pub dg_connected: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Digit {
    /// OLTC index, phase index (`None` = ganged), candidate taps.
    Tap(usize, Option<usize>),
    Cap(usize),
    Dg(usize),
}

/// The ordered discrete search space.
#[derive(Debug, Clone)]
pub struct DiscreteSpace {
    digits: Vec<(Digit, Vec<u8>)>,
    template: DiscreteAssignment,
    len: usize,
}

impl DiscreteSpace {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Decodes the `index`-th assignment; the first digit is most significant.
    pub fn get(&self, mut index: usize) -> DiscreteAssignment {
        assert!(index < self.len, "assignment index out of range");
        let mut a = self.template.clone();
        for (digit, values) in self.digits.iter().rev() {
            let r = values.len();
            let v = values[index % r];
            index /= r;
            match *digit {
                Digit::Tap(o, None) => a.taps[o] = [v; 3],
                Digit::Tap(o, Some(p)) => a.taps[o][p] = v,
                Digit::Cap(c) => a.cap_closed[c] = v == 1,
                Digit::Dg(d) => a.dg_connected[d] = v == 1,
            }
        }
        a
    }

    pub fn iter(&self) -> impl Iterator<Item = DiscreteAssignment> + '_ {
        (0..self.len).map(|i| self.get(i))
    }
}

/// Builds the discrete space in canonical order: taps (per OLTC, then per
/// phase when unganged), then capacitors open-before-closed, then DG
/// disconnected-before-connected.
pub fn enumerate_discrete(problem: &OptimizationProblem, config: &OptimizerConfig) -> Result<DiscreteSpace, OptError> {
    let model = problem.model;
    let incumbent = problem
        .incumbent
        .clone()
        .unwrap_or_else(|| ControlSetpoints::from_model(model));
    let mut digits = Vec::new();
    let tap_values = |o: usize, center: u8| -> Vec<u8> {
        let n = model.oltcs()[o].positions() as u8;
        match config.tap_radius {
            None => (1..=n).collect(),
            Some(r) => {
                let lo = center.saturating_sub(r).max(1);
                let hi = center.saturating_add(r).min(n);
                (lo..=hi).collect()
            }
        }
    };
    let mut template = DiscreteAssignment {
        taps: incumbent.taps.clone(),
        cap_closed: vec![false; model.capacitors().len()],
        dg_connected: vec![false; model.dgs().len()],
    };
    for (oi, o) in model.oltcs().iter().enumerate() {
        if o.ganged {
            digits.push((Digit::Tap(oi, None), tap_values(oi, incumbent.taps[oi][0])));
        } else {
            let present = model.buses()[o.bus].phases;
            // absent phases follow the first present one so validation passes
            let first = present.iter().next().map(|p| p.index()).unwrap_or(0);
            let c = incumbent.taps[oi][first];
            template.taps[oi] = [c; 3];
            for p in present.iter() {
                digits.push((Digit::Tap(oi, Some(p.index())), tap_values(oi, incumbent.taps[oi][p.index()])));
            }
        }
    }
    for c in 0..model.capacitors().len() {
        digits.push((Digit::Cap(c), vec![0, 1]));
    }
    for d in 0..model.dgs().len() {
        digits.push((Digit::Dg(d), vec![0, 1]));
    }
    let size: u128 = digits.iter().map(|(_, v)| v.len() as u128).product();
    if size > config.max_assignments {
        return Err(OptError::SpaceTooLarge {
            size,
            cap: config.max_assignments,
        });
    }
    Ok(DiscreteSpace {
        digits,
        template,
        len: size as usize,
    })
}

/// Picks DG reactive dispatch for a fixed discrete assignment by projected
/// coordinate descent on a quadratic model of the secondary criterion.
///
/// The model is built from unit-injection sensitivities around the
/// zero-var solve: voltages for [`Secondary::Flatness`], reactive line flows
/// (weighted by `r / v_from`) for [`Secondary::Losses`].
pub fn dispatch_reactive(
    model: &NetworkModel,
    setpoints: &ControlSetpoints,
    config: &OptimizerConfig,
) -> Result<ControlSetpoints, OptError> {
    let mut sp = setpoints.clone();
    for q in sp.dg_q.iter_mut() {
        *q = [0.0; 3];
    }
    // (dg, phase, lo, hi)
    let mut coords = Vec::new();
    for (di, d) in model.dgs().iter().enumerate() {
        if !sp.dg_connected[di] {
            continue;
        }
        for p in model.buses()[d.bus].phases.iter() {
            let (lo, hi) = qdg_bounds(d, p)?;
            if hi > lo {
                coords.push((di, p.index(), lo, hi));
            }
        }
    }
    if coords.is_empty() {
        return Ok(sp);
    }

    let base = powerflow::solve(model, &sp)?;
    // each term is w * (c + Σ_k s_k q_k)²
    let (weights, center): (Vec<f64>, Vec<f64>) = match config.secondary {
        Secondary::Flatness => model
            .buses()
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.phases.iter().map(move |p| (i, p.index())))
            .map(|(b, p)| (1.0, base.v[b][p] - 1.0))
            .unzip(),
        Secondary::Losses => model
            .lines()
            .iter()
            .enumerate()
            .flat_map(|(li, l)| l.phases.iter().map(move |p| (li, l, p.index())))
            .map(|(li, l, p)| (l.z[p][p].re / base.v[l.from][p], base.flow_q[li][p]))
            .unzip(),
    };
    let observe = |r: &PowerFlowResult| -> Vec<f64> {
        match config.secondary {
            Secondary::Flatness => model
                .buses()
                .iter()
                .enumerate()
                .flat_map(|(i, b)| b.phases.iter().map(move |p| r.v[i][p.index()]))
                .collect(),
            Secondary::Losses => model
                .lines()
                .iter()
                .enumerate()
                .flat_map(|(li, l)| l.phases.iter().map(move |p| r.flow_q[li][p.index()]))
                .collect(),
        }
    };
    let y0 = observe(&base);
    let mut sens = Vec::with_capacity(coords.len());
    for &(di, pi, _, hi) in &coords {
        let delta = hi.min(0.05);
        let mut probe = sp.clone();
        probe.dg_q[di][pi] = delta;
        let y = observe(&powerflow::solve(model, &probe)?);
        sens.push(y.iter().zip(&y0).map(|(a, b)| (a - b) / delta).collect::<Vec<f64>>());
    }

    let mut q = vec![0.0; coords.len()];
    let mut resid = center;
    for _ in 0..config.qdg_max_iterations {
        let mut max_move: f64 = 0.0;
        for (k, &(_, _, lo, hi)) in coords.iter().enumerate() {
            let s = &sens[k];
            let h: f64 = s.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
            if h <= 0.0 {
                continue;
            }
            let g: f64 = s.iter().zip(&resid).zip(&weights).map(|((a, r), w)| w * a * r).sum();
            let next = (q[k] - g / h).clamp(lo, hi);
            let step = next - q[k];
            if step != 0.0 {
                for (r, a) in resid.iter_mut().zip(s) {
                    *r += a * step;
                }
                q[k] = next;
                let m = s.iter().fold(0.0f64, |m, a| m.max((a * step).abs()));
                max_move = max_move.max(m);
            }
        }
        if max_move < config.qdg_tolerance {
            break;
        }
    }
    for (k, &(di, pi, _, _)) in coords.iter().enumerate() {
        sp.dg_q[di][pi] = q[k];
    }
    Ok(sp)
}

#[derive(Debug, Clone)]
struct Candidate {
    index: usize,
    setpoints: ControlSetpoints,
    result: PowerFlowResult,
    objective: f64,
    secondary: f64,
    violation: f64,
}

impl Candidate {
    fn rank(&self, other: &Candidate) -> Ordering {
        let inf_a = self.violation > 0.0;
        let inf_b = other.violation > 0.0;
        inf_a
            .cmp(&inf_b)
            .then_with(|| self.violation.total_cmp(&other.violation))
            .then_with(|| self.objective.total_cmp(&other.objective))
            .then_with(|| self.secondary.total_cmp(&other.secondary))
            .then_with(|| self.index.cmp(&other.index))
    }
}

/// Evaluates one discrete assignment: dispatches DG vars, solves, scores.
/// Returns `(setpoints, flow, J, secondary, violation)`.
pub fn evaluate_assignment(
    model: &NetworkModel,
    band: (f64, f64),
    assignment: &DiscreteAssignment,
    config: &OptimizerConfig,
) -> Result<(ControlSetpoints, PowerFlowResult, f64, f64, f64), OptError> {
    let sp = ControlSetpoints {
        taps: assignment.taps.clone(),
        cap_closed: assignment.cap_closed.clone(),
        dg_connected: assignment.dg_connected.clone(),
        dg_q: vec![[0.0; 3]; model.dgs().len()],
    };
    let sp = dispatch_reactive(model, &sp, config)?;
    let result = powerflow::solve(model, &sp)?;
    let j = objective(&result, config.objective);
    let sec = secondary_value(model, &result, config.secondary);
    let viol = band_violation(model, &result, band);
    Ok((sp, result, j, sec, viol))
}

pub fn optimize(problem: &OptimizationProblem, config: &OptimizerConfig) -> Result<OptimizationOutcome, OptError> {
    let base = problem.model;
    if problem.believed_loads.len() != base.buses().len() {
        return Err(OptError::LoadShape {
            got: problem.believed_loads.len(),
            expected: base.buses().len(),
        });
    }
    let model = base.with_loads(&problem.believed_loads);
    let space = enumerate_discrete(&OptimizationProblem { model: &model, ..problem.clone() }, config)?;
    let evaluated = par::map_range(config.exec, space.len(), |i| {
        let a = space.get(i);
        evaluate_assignment(&model, problem.v_band, &a, config).map(|(setpoints, result, objective, secondary, violation)| {
            Candidate {
                index: i,
                setpoints,
                result,
                objective,
                secondary,
                violation,
            }
        })
    });
    let mut best: Option<Candidate> = None;
    for c in evaluated {
        let c = c?;
        best = match best {
            Some(b) if b.rank(&c) != Ordering::Greater => Some(b),
            _ => Some(c),
        };
    }
    let best = best.expect("discrete space is never empty");
    Ok(OptimizationOutcome {
        feasible: best.violation <= 0.0,
        violation: best.violation,
        objective: best.objective,
        flatness: flatness(&model, &best.result),
        losses: loss_estimate(&model, &best.result),
        setpoints: best.setpoints,
        predicted: best.result,
        evaluated: space.len(),
    })
}
