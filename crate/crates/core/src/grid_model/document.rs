//! TOML model document.
//!
//! ```toml
//! [system]
//! base_kv = 4.16          # line-to-line kV
//! base_mva = 5.0          # three-phase MVA
//! substation = "650"
//! v_min = 0.95
//! v_max = 1.05
//!
//! [[bus]]
//! id = "634"
//! phases = "abc"
//! p_kw = { a = 160.0, b = 120.0, c = 120.0 }
//! q_kvar = { a = 110.0, b = 90.0, c = 90.0 }
//!
//! [[line]]
//! from = "632"
//! to = "633"
//! phases = "abc"
//! units = "ohm_per_mile"     # or "ohm"
//! length_ft = 500.0          # or length_mi
//! r = [0.7526, 0.1580, 0.1560, 0.7475, 0.1535, 0.7436]   # aa ab ac bb bc cc
//! x = [1.1814, 0.4236, 0.5017, 1.1983, 0.3849, 1.2112]
//! ```
//!
//! Device sections are `[[oltc]]`, `[[capacitor]]` and `[[dg]]`.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{
    Base, Bus, DgParts, ModelError, ModelParts, NetworkModel, Oltc, PerPhase, Phase, PhaseMatrix,
    PhaseSet,
};

const FEET_PER_MILE: f64 = 5280.0;
const UPPER: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    system: SystemDoc,
    #[serde(default)]
    bus: Vec<BusDoc>,
    #[serde(default)]
    line: Vec<LineDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    oltc: Vec<OltcDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    capacitor: Vec<CapacitorDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    dg: Vec<DgDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemDoc {
    base_kv: f64,
    base_mva: f64,
    substation: String,
    #[serde(default = "default_v_min")]
    v_min: f64,
    #[serde(default = "default_v_max")]
    v_max: f64,
    #[serde(default = "default_v_source")]
    v_source: f64,
}

fn default_v_min() -> f64 {
    0.95
}
fn default_v_max() -> f64 {
    1.05
}
fn default_v_source() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

type PhaseMap = BTreeMap<String, f64>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusDoc {
    id: String,
    phases: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    p_kw: PhaseMap,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    q_kvar: PhaseMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ImpedanceUnits {
    Ohm,
    OhmPerMile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineDoc {
    from: String,
    to: String,
    phases: String,
    units: ImpedanceUnits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length_ft: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length_mi: Option<f64>,
    r: [f64; 6],
    x: [f64; 6],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OltcDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    bus: String,
    #[serde(default = "default_true")]
    ganged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tap: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    taps: Option<BTreeMap<String, u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ratios: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CapacitorDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    bus: String,
    q_kvar: PhaseMap,
    #[serde(default)]
    closed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DgDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    bus: String,
    s_kva: PhaseMap,
    p_kw: PhaseMap,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    q_kvar: PhaseMap,
    #[serde(default = "default_true")]
    connected: bool,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn phase_vector(map: &PhaseMap, scale: f64, location: &str) -> Result<PerPhase<f64>, ModelError> {
    let mut out = [0.0; 3];
    for (k, v) in map {
        let mut chars = k.chars();
        let p = match (chars.next().and_then(Phase::from_label), chars.next()) {
            (Some(p), None) => p,
            _ => {
                return Err(ModelError::Field {
                    location: format!("{location}.{k}"),
                    message: "phase keys must be a, b or c".into(),
                })
            }
        };
        if !v.is_finite() {
            return Err(ModelError::Field {
                location: format!("{location}.{k}"),
                message: "value must be finite".into(),
            });
        }
        out[p.index()] = v / scale;
    }
    Ok(out)
}

fn phase_map(values: &PerPhase<f64>, phases: PhaseSet, scale: f64, keep_zero: bool) -> PhaseMap {
    phases
        .iter()
        .filter(|p| keep_zero || values[p.index()] != 0.0)
        .map(|p| (p.label().to_string(), values[p.index()] * scale))
        .collect()
}

fn parse_phases(s: &str, location: &str) -> Result<PhaseSet, ModelError> {
    PhaseSet::parse(s).ok_or_else(|| ModelError::Field {
        location: location.to_string(),
        message: format!("`{s}` is not a phase set"),
    })
}

/// Parses and validates a model document.
pub fn load_network(text: &str) -> Result<NetworkModel, ModelError> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| ModelError::Parse {
        line: e.span().map(|s| line_of_offset(text, s.start)),
        message: e.message().to_string(),
    })?;
    NetworkModel::new(doc_to_parts(doc)?)
}

fn doc_to_parts(doc: ModelDoc) -> Result<ModelParts, ModelError> {
    let base = Base {
        kv_ll: doc.system.base_kv,
        mva: doc.system.base_mva,
    };
    if !(base.kv_ll > 0.0 && base.mva > 0.0) {
        return Err(ModelError::Field {
            location: "system".into(),
            message: "base_kv and base_mva must be positive".into(),
        });
    }
    let kw = base.kw_per_pu();
    let zb = base.ohm_base();

    let mut buses = Vec::with_capacity(doc.bus.len());
    for (i, b) in doc.bus.iter().enumerate() {
        let loc = format!("bus[{i}]");
        let phases = parse_phases(&b.phases, &format!("{loc}.phases"))?;
        buses.push(Bus {
            id: b.id.clone(),
            phases,
            load_p: phase_vector(&b.p_kw, kw, &format!("{loc}.p_kw"))?,
            load_q: phase_vector(&b.q_kvar, kw, &format!("{loc}.q_kvar"))?,
        });
    }

    let mut lines = Vec::with_capacity(doc.line.len());
    for (i, l) in doc.line.iter().enumerate() {
        let loc = format!("line[{i}]");
        let phases = parse_phases(&l.phases, &format!("{loc}.phases"))?;
        let scale = match l.units {
            ImpedanceUnits::Ohm => {
                if l.length_ft.is_some() || l.length_mi.is_some() {
                    return Err(ModelError::Field {
                        location: loc,
                        message: "direct ohms take no length".into(),
                    });
                }
                1.0
            }
            ImpedanceUnits::OhmPerMile => match (l.length_ft, l.length_mi) {
                (Some(ft), None) if ft >= 0.0 => ft / FEET_PER_MILE,
                (None, Some(mi)) if mi >= 0.0 => mi,
                _ => {
                    return Err(ModelError::Field {
                        location: loc,
                        message: "ohm_per_mile needs exactly one nonnegative length_ft or length_mi".into(),
                    })
                }
            },
        };
        let mut z: PhaseMatrix = [[Complex64::new(0.0, 0.0); 3]; 3];
        for (k, &(p, q)) in UPPER.iter().enumerate() {
            let v = Complex64::new(l.r[k], l.x[k]) * scale / zb;
            z[p][q] = v;
            z[q][p] = v;
        }
        lines.push((l.from.clone(), l.to.clone(), phases, z));
    }

    let mut oltcs = Vec::new();
    for (i, o) in doc.oltc.iter().enumerate() {
        let id = o.id.clone().unwrap_or_else(|| format!("oltc{}", o.bus));
        let ratios = o.ratios.clone().unwrap_or_else(Oltc::default_ratios);
        let tap = match (o.tap, &o.taps) {
            (Some(_), Some(_)) => {
                return Err(ModelError::Field {
                    location: format!("oltc[{i}]"),
                    message: "give either tap or taps".into(),
                })
            }
            (Some(t), None) => [t; 3],
            (None, Some(map)) => {
                let mut t = [Oltc::nearest_unity_tap(&ratios); 3];
                for (k, v) in map {
                    let p = k
                        .chars()
                        .next()
                        .filter(|_| k.len() == 1)
                        .and_then(Phase::from_label)
                        .ok_or_else(|| ModelError::Field {
                            location: format!("oltc[{i}].taps.{k}"),
                            message: "phase keys must be a, b or c".into(),
                        })?;
                    t[p.index()] = *v;
                }
                t
            }
            (None, None) => [Oltc::nearest_unity_tap(&ratios); 3],
        };
        oltcs.push((id, o.bus.clone(), ratios, tap, o.ganged));
    }

    let capacitors = doc
        .capacitor
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok((
                c.id.clone().unwrap_or_else(|| format!("cap{}", c.bus)),
                c.bus.clone(),
                phase_vector(&c.q_kvar, kw, &format!("capacitor[{i}].q_kvar"))?,
                c.closed,
            ))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;

    let dgs = doc
        .dg
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let loc = format!("dg[{i}]");
            Ok(DgParts {
                id: d.id.clone().unwrap_or_else(|| format!("dg{}", d.bus)),
                bus: d.bus.clone(),
                s_rated: phase_vector(&d.s_kva, kw, &format!("{loc}.s_kva"))?,
                p_out: phase_vector(&d.p_kw, kw, &format!("{loc}.p_kw"))?,
                q_set: phase_vector(&d.q_kvar, kw, &format!("{loc}.q_kvar"))?,
                connected: d.connected,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;

    Ok(ModelParts {
        buses,
        lines,
        oltcs,
        capacitors,
        dgs,
        substation: doc.system.substation,
        v_min: doc.system.v_min,
        v_max: doc.system.v_max,
        v_source: doc.system.v_source,
        base: Some(base),
    })
}

/// Writes a model back out as a document (engineering units, direct ohms).
pub fn to_document(model: &NetworkModel) -> String {
    let base = model.base();
    let kw = base.kw_per_pu();
    let zb = base.ohm_base();
    let buses = model.buses();
    let doc = ModelDoc {
        system: SystemDoc {
            base_kv: base.kv_ll,
            base_mva: base.mva,
            substation: buses[model.substation()].id.clone(),
            v_min: model.v_min(),
            v_max: model.v_max(),
            v_source: model.v_source(),
        },
        bus: buses
            .iter()
            .map(|b| BusDoc {
                id: b.id.clone(),
                phases: b.phases.to_string(),
                p_kw: phase_map(&b.load_p, b.phases, kw, false),
                q_kvar: phase_map(&b.load_q, b.phases, kw, false),
            })
            .collect(),
        line: model
            .lines()
            .iter()
            .map(|l| {
                let mut r = [0.0; 6];
                let mut x = [0.0; 6];
                for (k, &(p, q)) in UPPER.iter().enumerate() {
                    r[k] = l.z[p][q].re * zb;
                    x[k] = l.z[p][q].im * zb;
                }
                LineDoc {
                    from: buses[l.from].id.clone(),
                    to: buses[l.to].id.clone(),
                    phases: l.phases.to_string(),
                    units: ImpedanceUnits::Ohm,
                    length_ft: None,
                    length_mi: None,
                    r,
                    x,
                }
            })
            .collect(),
        oltc: model
            .oltcs()
            .iter()
            .map(|o| OltcDoc {
                id: Some(o.id.clone()),
                bus: buses[o.bus].id.clone(),
                ganged: o.ganged,
                tap: o.ganged.then_some(o.tap[0]),
                taps: (!o.ganged).then(|| {
                    buses[o.bus]
                        .phases
                        .iter()
                        .map(|p| (p.label().to_string(), o.tap[p.index()]))
                        .collect()
                }),
                ratios: Some(o.ratios.clone()),
            })
            .collect(),
        capacitor: model
            .capacitors()
            .iter()
            .map(|c| CapacitorDoc {
                id: Some(c.id.clone()),
                bus: buses[c.bus].id.clone(),
                q_kvar: phase_map(&c.q_rated, buses[c.bus].phases, kw, false),
                closed: c.closed,
            })
            .collect(),
        dg: model
            .dgs()
            .iter()
            .map(|d| {
                let ph = buses[d.bus].phases;
                DgDoc {
                    id: Some(d.id.clone()),
                    bus: buses[d.bus].id.clone(),
                    s_kva: phase_map(&d.s_rated, ph, kw, true),
                    p_kw: phase_map(&d.p_out, ph, kw, true),
                    q_kvar: phase_map(&d.q_set, ph, kw, false),
                    connected: d.connected,
                }
            })
            .collect(),
    };
    toml::to_string(&doc).expect("model document serializes")
}

/// The bundled IEEE 13-bus feeder with a DG at node 671.
pub const IEEE13_DOCUMENT: &str = include_str!("../../../../data/ieee13.model");

pub fn ieee13() -> NetworkModel {
    load_network(IEEE13_DOCUMENT).expect("bundled ieee13.model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = r#"
[system]
base_kv = 4.16
base_mva = 5.0
substation = "s"

[[bus]]
id = "s"
phases = "abc"

[[bus]]
id = "l"
phases = "abc"
p_kw = { a = 100.0, b = 50.0, c = 25.0 }
q_kvar = { a = 10.0 }

[[line]]
from = "s"
to = "l"
phases = "abc"
units = "ohm_per_mile"
length_ft = 2640.0
r = [0.3, 0.1, 0.1, 0.3, 0.1, 0.3]
x = [1.0, 0.4, 0.4, 1.0, 0.4, 1.0]
"#;

    #[test]
    fn two_bus_document() {
        let m = load_network(TWO_BUS).unwrap();
        assert_eq!(m.buses().len(), 2);
        assert_eq!(m.lines().len(), 1);
        let kw = m.base().kw_per_pu();
        assert!((m.buses()[1].load_p[0] * kw - 100.0).abs() < 1e-12);
        // half a mile of 0.3 ohm/mile
        let zb = m.base().ohm_base();
        assert!((m.lines()[0].z[0][0].re * zb - 0.15).abs() < 1e-12);
    }

    #[test]
    fn parse_error_has_line() {
        let bad = "[system]\nbase_kv = 4.16\nbase_mva = \"five\"\nsubstation = \"s\"\n";
        match load_network(bad) {
            Err(ModelError::Parse { line: Some(l), .. }) => assert_eq!(l, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_phase_key() {
        let bad = TWO_BUS.replace("q_kvar = { a = 10.0 }", "q_kvar = { d = 10.0 }");
        assert!(matches!(load_network(&bad), Err(ModelError::Field { .. })));
    }

    #[test]
    fn load_on_absent_phase() {
        let bad = TWO_BUS.replace("phases = \"abc\"\np_kw", "phases = \"a\"\np_kw");
        assert!(matches!(load_network(&bad), Err(ModelError::PhaseMismatch { .. })));
    }

    #[test]
    fn round_trip() {
        let m = ieee13();
        let again = load_network(&to_document(&m)).unwrap();
        assert_models_close(&m, &again);
        let third = load_network(&to_document(&again)).unwrap();
        assert_models_close(&again, &third);
    }

    fn assert_models_close(a: &NetworkModel, b: &NetworkModel) {
        assert_eq!(a.buses().len(), b.buses().len());
        for (x, y) in a.buses().iter().zip(b.buses()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.phases, y.phases);
            for i in 0..3 {
                assert!((x.load_p[i] - y.load_p[i]).abs() < 1e-12);
                assert!((x.load_q[i] - y.load_q[i]).abs() < 1e-12);
            }
        }
        for (x, y) in a.lines().iter().zip(b.lines()) {
            assert_eq!((x.from, x.to, x.phases), (y.from, y.to, y.phases));
            for p in 0..3 {
                for q in 0..3 {
                    assert!((x.z[p][q] - y.z[p][q]).norm() < 1e-12);
                }
            }
        }
        assert_eq!(a.oltcs(), b.oltcs());
        assert_eq!(a.capacitors().len(), b.capacitors().len());
        for (x, y) in a.capacitors().iter().zip(b.capacitors()) {
            assert_eq!((x.bus, x.closed, &x.id), (y.bus, y.closed, &y.id));
        }
        assert_eq!(a.dgs().len(), b.dgs().len());
        assert_eq!(a.substation(), b.substation());
        assert_eq!((a.v_min(), a.v_max()), (b.v_min(), b.v_max()));
    }
}
