//! Radial three-phase feeder model.
//!
//! Everything stored here is per-unit: powers on the per-phase base
//! (`base_mva / 3`), impedances on `base_kv² / base_mva`. The model document
//! carries engineering units and is converted at ingestion (see [`document`]).

pub mod document;

use std::collections::HashMap;

use num_complex::Complex64;
use thiserror::Error;

pub use crate::phase::{Phase, PerPhase, PhaseSet};

pub type BusIdx = usize;
pub type PhaseMatrix = [[Complex64; 3]; 3];

/// Number of OLTC tap positions.
pub const TAP_POSITIONS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("invalid field `{location}`: {message}")]
    Field { location: String, message: String },
    #[error("network is not radial: {0}")]
    Radiality(String),
    #[error("{device} references unknown bus `{bus}`")]
    DanglingReference { device: String, bus: String },
    #[error("phase mismatch on {element}: {message}")]
    PhaseMismatch { element: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn field_err(location: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Field {
        location: location.into(),
        message: message.into(),
    }
}

/// Per-unit bases. `kv_ll` is line-to-line, `mva` is three-phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Base {
    pub kv_ll: f64,
    pub mva: f64,
}

impl Base {
    /// kW (or kVAr) corresponding to 1 pu on a single phase.
    pub fn kw_per_pu(&self) -> f64 {
        self.mva * 1000.0 / 3.0
    }

    pub fn ohm_base(&self) -> f64 {
        self.kv_ll * self.kv_ll / self.mva
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseSet,
    pub load_p: PerPhase<f64>,
    pub load_q: PerPhase<f64>,
}

impl Bus {
    pub fn has_load(&self) -> bool {
        self.phases
            .iter()
            .any(|p| self.load_p[p.index()] != 0.0 || self.load_q[p.index()] != 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    /// Upstream bus (towards the substation).
    pub from: BusIdx,
    pub to: BusIdx,
    pub phases: PhaseSet,
    pub z: PhaseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Oltc {
    pub id: String,
    pub bus: BusIdx,
    /// Turns ratio per tap position; position `i` (1-based) is `ratios[i - 1]`.
    pub ratios: Vec<f64>,
    /// Selected 1-based tap per phase.
    pub tap: PerPhase<u8>,
    pub ganged: bool,
}

impl Oltc {
    /// 32 ratios equally spaced over [0.90, 1.10].
    pub fn default_ratios() -> Vec<f64> {
        let n = TAP_POSITIONS;
        (0..n)
            .map(|i| 0.90 + 0.20 * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// 1-based index whose ratio is closest to 1.0, lower index on ties.
    pub fn nearest_unity_tap(ratios: &[f64]) -> u8 {
        let mut best = 0usize;
        for (i, r) in ratios.iter().enumerate() {
            if (r - 1.0).abs() < (ratios[best] - 1.0).abs() - 1e-12 {
                best = i;
            }
        }
        (best + 1) as u8
    }

    pub fn positions(&self) -> usize {
        self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacitorBank {
    pub id: String,
    pub bus: BusIdx,
    pub q_rated: PerPhase<f64>,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dg {
    pub id: String,
    pub bus: BusIdx,
    pub s_rated: PerPhase<f64>,
    pub p_out: PerPhase<f64>,
    pub q_set: PerPhase<f64>,
    pub connected: bool,
}

/// Breadth-first order from the substation and the child sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub order: Vec<BusIdx>,
    pub children: Vec<Vec<BusIdx>>,
    /// Line feeding each bus; `None` for the substation.
    pub parent_line: Vec<Option<usize>>,
    pub depth: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    oltcs: Vec<Oltc>,
    capacitors: Vec<CapacitorBank>,
    dgs: Vec<Dg>,
    substation: BusIdx,
    v_min: f64,
    v_max: f64,
    v_source: f64,
    base: Base,
    topology: Topology,
    index: HashMap<String, BusIdx>,
}

/// `(id, bus_id, ratio table, present tap, ganged)`.
pub type OltcParts = (String, String, Vec<f64>, PerPhase<u8>, bool);

/// Unvalidated parts handed to [`NetworkModel::new`].
#[derive(Debug, Clone, Default)]
pub struct ModelParts {
    pub buses: Vec<Bus>,
    /// Lines as `(from_id, to_id, phases, z)`; orientation is fixed up from the substation.
    pub lines: Vec<(String, String, PhaseSet, PhaseMatrix)>,
    pub oltcs: Vec<OltcParts>,
    pub capacitors: Vec<(String, String, PerPhase<f64>, bool)>,
    pub dgs: Vec<DgParts>,
    pub substation: String,
    pub v_min: f64,
    pub v_max: f64,
    pub v_source: f64,
    pub base: Option<Base>,
}

#[derive(Debug, Clone)]
pub struct DgParts {
    pub id: String,
    pub bus: String,
    pub s_rated: PerPhase<f64>,
    pub p_out: PerPhase<f64>,
    pub q_set: PerPhase<f64>,
    pub connected: bool,
}

impl NetworkModel {
    /// Validates the parts and builds the model.
    pub fn new(parts: ModelParts) -> Result<Self, ModelError> {
        let base = parts.base.unwrap_or(Base {
            kv_ll: 4.16,
            mva: 5.0,
        });
        if !(base.kv_ll > 0.0 && base.mva > 0.0 && base.kv_ll.is_finite() && base.mva.is_finite()) {
            return Err(field_err("system.base", "bases must be positive"));
        }
        if !(parts.v_min < 1.0 && 1.0 < parts.v_max && parts.v_min > 0.0) {
            return Err(field_err(
                "system.v_min/v_max",
                format!("need 0 < v_min < 1 < v_max, got {} and {}", parts.v_min, parts.v_max),
            ));
        }
        if !(parts.v_source > 0.0 && parts.v_source.is_finite()) {
            return Err(field_err("system.v_source", "must be positive"));
        }

        let mut index = HashMap::new();
        for (i, b) in parts.buses.iter().enumerate() {
            if index.insert(b.id.clone(), i).is_some() {
                return Err(field_err(format!("bus[{i}].id"), format!("duplicate bus `{}`", b.id)));
            }
            for p in Phase::ALL {
                let (lp, lq) = (b.load_p[p.index()], b.load_q[p.index()]);
                if !lp.is_finite() || !lq.is_finite() {
                    return Err(field_err(format!("bus[{i}]"), "loads must be finite"));
                }
                if !b.phases.contains(p) && (lp != 0.0 || lq != 0.0) {
                    return Err(ModelError::PhaseMismatch {
                        element: format!("bus {}", b.id),
                        message: format!("load on absent phase {p}"),
                    });
                }
            }
        }
        let lookup = |device: &str, id: &str| -> Result<BusIdx, ModelError> {
            index.get(id).copied().ok_or_else(|| ModelError::DanglingReference {
                device: device.to_string(),
                bus: id.to_string(),
            })
        };
        let substation = lookup("system.substation", &parts.substation)?;

        let n = parts.buses.len();
        let mut raw_lines = Vec::with_capacity(parts.lines.len());
        for (li, (f, t, phases, z)) in parts.lines.iter().enumerate() {
            let name = format!("line[{li}] {f}-{t}");
            let fi = lookup(&name, f)?;
            let ti = lookup(&name, t)?;
            if fi == ti {
                return Err(ModelError::Radiality(format!("{name} is a self loop")));
            }
            check_impedance(&name, *phases, z)?;
            raw_lines.push((fi, ti, *phases, *z));
        }
        if raw_lines.len() + 1 != n {
            return Err(ModelError::Radiality(format!(
                "{} buses need {} lines, found {}",
                n,
                n.saturating_sub(1),
                raw_lines.len()
            )));
        }

        // Orient every line away from the substation and check that the graph is a tree.
        let mut adjacency: Vec<Vec<(usize, BusIdx)>> = vec![Vec::new(); n];
        for (li, (f, t, _, _)) in raw_lines.iter().enumerate() {
            adjacency[*f].push((li, *t));
            adjacency[*t].push((li, *f));
        }
        let mut parent_line = vec![None; n];
        let mut depth = vec![0usize; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut children = vec![Vec::new(); n];
        let mut lines = Vec::with_capacity(raw_lines.len());
        let mut line_of = vec![usize::MAX; raw_lines.len()];
        seen[substation] = true;
        order.push(substation);
        let mut head = 0;
        while head < order.len() {
            let i = order[head];
            head += 1;
            for &(li, j) in &adjacency[i] {
                if line_of[li] != usize::MAX {
                    continue;
                }
                if seen[j] {
                    return Err(ModelError::Radiality(format!(
                        "cycle through buses {} and {}",
                        parts.buses[i].id, parts.buses[j].id
                    )));
                }
                seen[j] = true;
                let (_, _, phases, z) = raw_lines[li];
                line_of[li] = lines.len();
                parent_line[j] = Some(lines.len());
                lines.push(Line {
                    from: i,
                    to: j,
                    phases,
                    z,
                });
                depth[j] = depth[i] + 1;
                children[i].push(j);
                order.push(j);
            }
        }
        if order.len() != n {
            let missing: Vec<_> = (0..n)
                .filter(|i| !seen[*i])
                .map(|i| parts.buses[i].id.clone())
                .collect();
            return Err(ModelError::Radiality(format!(
                "buses not reachable from substation: {}",
                missing.join(", ")
            )));
        }
        for l in &lines {
            let (from, to) = (&parts.buses[l.from], &parts.buses[l.to]);
            if !l.phases.is_subset(from.phases) || l.phases != to.phases {
                return Err(ModelError::PhaseMismatch {
                    element: format!("line {}-{}", from.id, to.id),
                    message: format!(
                        "line phases {} must be within {} ({}) and equal {} ({})",
                        l.phases, from.id, from.phases, to.id, to.phases
                    ),
                });
            }
        }

        let mut oltcs = Vec::new();
        for (id, bus, ratios, tap, ganged) in parts.oltcs {
            let b = lookup(&format!("oltc {id}"), &bus)?;
            if ratios.is_empty() {
                return Err(field_err(format!("oltc {id}.ratios"), "empty tap table"));
            }
            if ratios.windows(2).any(|w| w[1] <= w[0]) {
                return Err(field_err(format!("oltc {id}.ratios"), "ratios must be strictly increasing"));
            }
            if ratios.iter().any(|r| !(*r > 0.0 && *r <= 2.0)) {
                return Err(field_err(format!("oltc {id}.ratios"), "ratios must lie in (0, 2]"));
            }
            for t in tap {
                if t < 1 || t as usize > ratios.len() {
                    return Err(field_err(format!("oltc {id}.tap"), format!("tap {t} out of range")));
                }
            }
            if ganged && (tap[1] != tap[0] || tap[2] != tap[0]) {
                return Err(field_err(format!("oltc {id}.tap"), "ganged OLTC needs one tap for all phases"));
            }
            oltcs.push(Oltc {
                id,
                bus: b,
                ratios,
                tap,
                ganged,
            });
        }

        let mut capacitors = Vec::new();
        for (id, bus, q_rated, closed) in parts.capacitors {
            let b = lookup(&format!("capacitor {id}"), &bus)?;
            for p in Phase::ALL {
                let q = q_rated[p.index()];
                if !(q >= 0.0 && q.is_finite()) {
                    return Err(field_err(format!("capacitor {id}.q"), "rating must be finite and nonnegative"));
                }
                if q != 0.0 && !parts.buses[b].phases.contains(p) {
                    return Err(ModelError::PhaseMismatch {
                        element: format!("capacitor {id}"),
                        message: format!("rating on absent phase {p}"),
                    });
                }
            }
            capacitors.push(CapacitorBank {
                id,
                bus: b,
                q_rated,
                closed,
            });
        }

        let mut dgs = Vec::new();
        for d in parts.dgs {
            let b = lookup(&format!("dg {}", d.id), &d.bus)?;
            for p in Phase::ALL {
                let i = p.index();
                let present = parts.buses[b].phases.contains(p);
                if !present && (d.s_rated[i] != 0.0 || d.p_out[i] != 0.0 || d.q_set[i] != 0.0) {
                    return Err(ModelError::PhaseMismatch {
                        element: format!("dg {}", d.id),
                        message: format!("rating on absent phase {p}"),
                    });
                }
                if d.s_rated[i].is_nan() || d.s_rated[i] < 0.0 || d.p_out[i].abs() > d.s_rated[i] + 1e-12 {
                    return Err(field_err(format!("dg {}.p", d.id), "real output exceeds rating"));
                }
                let head = (d.s_rated[i].powi(2) - d.p_out[i].powi(2)).max(0.0).sqrt();
                if d.connected && d.q_set[i].abs() > head + 1e-12 {
                    return Err(field_err(format!("dg {}.q", d.id), "reactive setpoint outside capability"));
                }
            }
            dgs.push(Dg {
                id: d.id,
                bus: b,
                s_rated: d.s_rated,
                p_out: d.p_out,
                q_set: d.q_set,
                connected: d.connected,
            });
        }

        Ok(NetworkModel {
            buses: parts.buses,
            lines,
            oltcs,
            capacitors,
            dgs,
            substation,
            v_min: parts.v_min,
            v_max: parts.v_max,
            v_source: parts.v_source,
            base,
            topology: Topology {
                order,
                children,
                parent_line,
                depth,
            },
            index,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
    pub fn oltcs(&self) -> &[Oltc] {
        &self.oltcs
    }
    pub fn capacitors(&self) -> &[CapacitorBank] {
        &self.capacitors
    }
    pub fn dgs(&self) -> &[Dg] {
        &self.dgs
    }
    pub fn substation(&self) -> BusIdx {
        self.substation
    }
    pub fn v_min(&self) -> f64 {
        self.v_min
    }
    pub fn v_max(&self) -> f64 {
        self.v_max
    }
    /// Voltage magnitude (pu) upstream of any substation OLTC.
    pub fn v_source(&self) -> f64 {
        self.v_source
    }
    pub fn base(&self) -> Base {
        self.base
    }
    pub fn topology(&self) -> &Topology {
        &self.topology
    }
    pub fn bus_index(&self, id: &str) -> Option<BusIdx> {
        self.index.get(id).copied()
    }
    pub fn bus(&self, id: &str) -> Option<&Bus> {
        self.bus_index(id).map(|i| &self.buses[i])
    }
    /// Squared-voltage band `(v_min², v_max²)`.
    pub fn v_band(&self) -> (f64, f64) {
        (self.v_min * self.v_min, self.v_max * self.v_max)
    }

    /// Sum of loads per phase, `(P, Q)` in pu.
    pub fn total_load(&self) -> (PerPhase<f64>, PerPhase<f64>) {
        let mut p = [0.0; 3];
        let mut q = [0.0; 3];
        for b in &self.buses {
            for i in 0..3 {
                p[i] += b.load_p[i];
                q[i] += b.load_q[i];
            }
        }
        (p, q)
    }

    /// Breadth-first node labels from the substation and each node's children.
    pub fn topology_order(&self) -> (Vec<&str>, Vec<(&str, Vec<&str>)>) {
        let order = self.topology.order.iter().map(|&i| self.buses[i].id.as_str()).collect();
        let children = self
            .topology
            .order
            .iter()
            .map(|&i| {
                (
                    self.buses[i].id.as_str(),
                    self.topology.children[i]
                        .iter()
                        .map(|&j| self.buses[j].id.as_str())
                        .collect(),
                )
            })
            .collect();
        (order, children)
    }

    /// Returns a copy with every load multiplied by `factor`.
    pub fn scale_loads(&self, factor: f64) -> Result<NetworkModel, ModelError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(ModelError::Invalid(format!("loading factor must be positive, got {factor}")));
        }
        let mut m = self.clone();
        for b in &mut m.buses {
            for i in 0..3 {
                b.load_p[i] *= factor;
                b.load_q[i] *= factor;
            }
        }
        Ok(m)
    }

    /// Returns a copy with loads replaced, `loads[bus] = (P, Q)` in pu.
    /// Entries for absent phases are ignored.
    pub fn with_loads(&self, loads: &[(PerPhase<f64>, PerPhase<f64>)]) -> NetworkModel {
        assert_eq!(loads.len(), self.buses.len(), "one load entry per bus");
        let mut m = self.clone();
        for (b, (p, q)) in m.buses.iter_mut().zip(loads) {
            for ph in Phase::ALL {
                let i = ph.index();
                let present = b.phases.contains(ph);
                b.load_p[i] = if present { p[i] } else { 0.0 };
                b.load_q[i] = if present { q[i] } else { 0.0 };
            }
        }
        m
    }

    pub fn loads(&self) -> Vec<(PerPhase<f64>, PerPhase<f64>)> {
        self.buses.iter().map(|b| (b.load_p, b.load_q)).collect()
    }

    /// Buses with at least one nonzero nominal load, excluding the substation.
    pub fn load_buses(&self) -> Vec<BusIdx> {
        (0..self.buses.len())
            .filter(|&i| i != self.substation && self.buses[i].has_load())
            .collect()
    }

    /// Telemetry-emitting buses: every bus except the substation, in document order.
    pub fn field_buses(&self) -> Vec<BusIdx> {
        (0..self.buses.len()).filter(|&i| i != self.substation).collect()
    }

    /// Buses in the subtree rooted at `root` (inclusive).
    pub fn subtree(&self, root: BusIdx) -> Vec<BusIdx> {
        let mut out = vec![root];
        let mut k = 0;
        while k < out.len() {
            let i = out[k];
            out.extend_from_slice(&self.topology.children[i]);
            k += 1;
        }
        out
    }
}

#[allow(clippy::needless_range_loop)]
fn check_impedance(name: &str, phases: PhaseSet, z: &PhaseMatrix) -> Result<(), ModelError> {
    for p in 0..3 {
        for q in 0..3 {
            let zpq = z[p][q];
            if !zpq.re.is_finite() || !zpq.im.is_finite() {
                return Err(field_err(name, "impedance must be finite"));
            }
            if (zpq - z[q][p]).norm() > 1e-12 * (1.0 + zpq.norm()) {
                return Err(field_err(name, "impedance matrix must be symmetric"));
            }
            let present = phases.contains(Phase::ALL[p]) && phases.contains(Phase::ALL[q]);
            if !present && zpq != Complex64::new(0.0, 0.0) {
                return Err(ModelError::PhaseMismatch {
                    element: name.to_string(),
                    message: format!(
                        "impedance entry {}{} set for a phase the line does not carry",
                        Phase::ALL[p],
                        Phase::ALL[q]
                    ),
                });
            }
        }
        if z[p][p].re < 0.0 {
            return Err(field_err(name, "diagonal resistance must be nonnegative"));
        }
    }
    Ok(())
}
