//! Scenario files.
//!
//! ```toml
//! [scenario]
//! model_path = "builtin:ieee13"   # or a path relative to this file
//! loading_factor = 0.5
//! t_end = 10.0
//! control_step = 0.5
//! seed = 1
//! defense_enabled = true
//!
//! [queue]
//! m = 2
//! service_time_s = 0.005
//! capacity = 50
//! window_s = 0.5                  # defaults to control_step
//!
//! [attack]
//! builtin = "scenario1"           # optional base spec
//! start_time_s = 3.0              # overrides the builtin start
//! [[attack.fdi]]
//! bus = "680"
//! phases = "abc"
//! mode = "set_absolute"           # or "scale"
//! p = 500.0
//! q = 500.0
//! [[attack.dos]]
//! spoofed_source = "spoof-652"
//! target = "652"
//! flood_rate = 200.0
//!
//! [ann]
//! model_path = "builtin:ieee13"
//! ```
//!
//! Optional `[optimizer]` and `[sweep]` sections tune the dispatch and the
//! reliability sweep. The sweep has its own `loading_factor` (nominal loads
//! unless set); the scenario's factor only drives the time-domain run.
//! Dotted-key overrides (`queue.capacity=100`) are applied to the parsed
//! document before it is interpreted.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::attacks::{self, AttackSpec, DosEntry, FdiEntry, FdiMode};
use crate::cybernet::QueueConfig;
use crate::defense_ann::DefenseConfig;
use crate::grid_model::PhaseSet;
use crate::voltvar_opt::{ObjectiveKind, OptimizerConfig, Secondary};

pub const BUILTIN_PREFIX: &str = "builtin:";

pub const SCENARIO1: &str = include_str!("../../../../data/scenario1.toml");
pub const SCENARIO2: &str = include_str!("../../../../data/scenario2.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("override `{0}`: expected KEY=VALUE with a dotted key")]
    Override(String),
    #[error("scenario field {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Builtin(String),
    Path(PathBuf),
}

impl Source {
    fn parse(raw: &str, base: Option<&Path>) -> Source {
        match raw.strip_prefix(BUILTIN_PREFIX) {
            Some(name) => Source::Builtin(name.to_string()),
            None => {
                let p = PathBuf::from(raw);
                match base {
                    Some(b) if p.is_relative() => Source::Path(b.join(p)),
                    _ => Source::Path(p),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub k_max: Option<usize>,
    pub loading_factor: f64,
    pub delta_p_kw: f64,
    pub delta_q_kvar: f64,
    pub combinations_cap: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            k_max: None,
            loading_factor: 1.0,
            delta_p_kw: 100.0,
            delta_q_kvar: 100.0,
            combinations_cap: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub model: Source,
    pub loading_factor: f64,
    pub t_end: f64,
    pub control_step: f64,
    pub seed: u64,
    pub defense_enabled: bool,
    pub queue: QueueConfig,
    pub attack: AttackSpec,
    pub ann: Source,
    pub defense: DefenseConfig,
    pub optimizer: OptimizerConfig,
    pub sweep: SweepSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            model: Source::Builtin("ieee13".into()),
            loading_factor: 0.5,
            t_end: 10.0,
            control_step: 0.5,
            seed: 1,
            defense_enabled: true,
            queue: QueueConfig::default(),
            attack: AttackSpec::default(),
            ann: Source::Builtin("ieee13".into()),
            defense: DefenseConfig::default(),
            optimizer: OptimizerConfig::default(),
            sweep: SweepSettings::default(),
        }
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Doc {
    #[serde(default)]
    scenario: ScenarioSection,
    #[serde(default)]
    queue: QueueSection,
    #[serde(default)]
    attack: AttackSection,
    #[serde(default)]
    ann: AnnSection,
    #[serde(default)]
    optimizer: OptimizerSection,
    #[serde(default)]
    sweep: SweepSection,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    model_path: Option<String>,
    loading_factor: Option<f64>,
    t_end: Option<f64>,
    control_step: Option<f64>,
    seed: Option<u64>,
    defense_enabled: Option<bool>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct QueueSection {
    m: Option<usize>,
    service_time_s: Option<f64>,
    capacity: Option<usize>,
    window_s: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AttackSection {
    builtin: Option<String>,
    start_time_s: Option<f64>,
    /// Scale factor for the unstated bus-632 entry of the second builtin.
    bus632_scale: Option<f64>,
    #[serde(default)]
    fdi: Vec<FdiDoc>,
    #[serde(default)]
    dos: Vec<DosDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FdiDoc {
    bus: String,
    #[serde(default = "abc")]
    phases: String,
    mode: String,
    p: f64,
    q: f64,
}

fn abc() -> String {
    "abc".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DosDoc {
    spoofed_source: Option<String>,
    target: String,
    flood_rate: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AnnSection {
    model_path: Option<String>,
    fdi_threshold: Option<f64>,
    dos_threshold: Option<f64>,
    floor_pu: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OptimizerSection {
    objective: Option<String>,
    secondary: Option<String>,
    tap_radius: Option<u8>,
    max_assignments: Option<u64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    k_max: Option<usize>,
    loading_factor: Option<f64>,
    delta_p_kw: Option<f64>,
    delta_q_kvar: Option<f64>,
    combinations_cap: Option<usize>,
}

/// Parses `KEY=VALUE`; the value is read as TOML and falls back to a bare string.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), ScenarioError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| ScenarioError::Override(raw.to_string()))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.len() < 2 || path.iter().any(|s| s.is_empty()) {
        return Err(ScenarioError::Override(raw.to_string()));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ScenarioError> {
    let (last, parents) = path.split_last().expect("checked nonempty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ScenarioError::Override(format!("{} is not a section", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn fdi_mode(s: &str) -> Result<FdiMode, ScenarioError> {
    match s {
        "set_absolute" => Ok(FdiMode::SetAbsolute),
        "scale" => Ok(FdiMode::Scale),
        other => Err(invalid("attack.fdi.mode", format!("unknown mode `{other}`"))),
    }
}

impl ScenarioConfig {
    /// Parses a scenario document. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>, overrides: &[String]) -> Result<Self, ScenarioError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.message().to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let doc: Doc = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ScenarioError::Parse(e.message().to_string()))?;
        Self::from_doc(doc, base)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent(), overrides)
    }

    fn from_doc(doc: Doc, base: Option<&Path>) -> Result<Self, ScenarioError> {
        let d = ScenarioConfig::default();
        let s = doc.scenario;
        let control_step = s.control_step.unwrap_or(d.control_step);
        let mut attack = match doc.attack.builtin.as_deref() {
            None => AttackSpec::default(),
            Some("scenario1") => attacks::scenario_one(),
            Some("scenario2") => attacks::scenario_two(doc.attack.bus632_scale.unwrap_or(1.0)),
            Some(other) => return Err(invalid("attack.builtin", format!("unknown builtin `{other}`"))),
        };
        if let Some(t) = doc.attack.start_time_s {
            attack.start_time = t;
        }
        for f in doc.attack.fdi {
            let phases = PhaseSet::parse(&f.phases).ok_or_else(|| invalid("attack.fdi.phases", format!("bad phases `{}`", f.phases)))?;
            attack.fdi.push(FdiEntry {
                bus: f.bus,
                phases,
                mode: fdi_mode(&f.mode)?,
                p_value: f.p,
                q_value: f.q,
            });
        }
        for e in doc.attack.dos {
            attack.dos.push(DosEntry {
                spoofed_source: e.spoofed_source.unwrap_or_else(|| attacks::spoof_label(&e.target)),
                target: e.target,
                flood_rate: e.flood_rate.unwrap_or(attacks::DEFAULT_FLOOD_RATE),
            });
        }
        let q = doc.queue;
        let queue = QueueConfig {
            servers: q.m.unwrap_or(d.queue.servers),
            service_time: q.service_time_s.unwrap_or(d.queue.service_time),
            capacity: q.capacity.unwrap_or(d.queue.capacity),
            window: q.window_s.unwrap_or(control_step),
        };
        let a = doc.ann;
        let defense = DefenseConfig {
            fdi_threshold: a.fdi_threshold.unwrap_or(d.defense.fdi_threshold),
            dos_threshold: a.dos_threshold.unwrap_or(d.defense.dos_threshold),
            floor_pu: a.floor_pu.unwrap_or(d.defense.floor_pu),
        };
        let o = doc.optimizer;
        let mut optimizer = d.optimizer.clone();
        if let Some(obj) = o.objective.as_deref() {
            optimizer.objective = match obj {
                "all_lines" => ObjectiveKind::AllLines,
                "head_line" => ObjectiveKind::HeadLine,
                other => return Err(invalid("optimizer.objective", format!("unknown objective `{other}`"))),
            };
        }
        if let Some(sec) = o.secondary.as_deref() {
            optimizer.secondary = match sec {
                "losses" => Secondary::Losses,
                "flatness" => Secondary::Flatness,
                other => return Err(invalid("optimizer.secondary", format!("unknown criterion `{other}`"))),
            };
        }
        optimizer.tap_radius = o.tap_radius.or(optimizer.tap_radius);
        if let Some(m) = o.max_assignments {
            optimizer.max_assignments = m as u128;
        }
        let w = doc.sweep;
        let sweep = SweepSettings {
            k_max: w.k_max,
            loading_factor: w.loading_factor.unwrap_or(d.sweep.loading_factor),
            delta_p_kw: w.delta_p_kw.unwrap_or(d.sweep.delta_p_kw),
            delta_q_kvar: w.delta_q_kvar.unwrap_or(d.sweep.delta_q_kvar),
            combinations_cap: w.combinations_cap.unwrap_or(d.sweep.combinations_cap),
        };
        let cfg = ScenarioConfig {
            model: s.model_path.as_deref().map_or(d.model, |p| Source::parse(p, base)),
            loading_factor: s.loading_factor.unwrap_or(d.loading_factor),
            t_end: s.t_end.unwrap_or(d.t_end),
            control_step,
            seed: s.seed.unwrap_or(d.seed),
            defense_enabled: s.defense_enabled.unwrap_or(d.defense_enabled),
            queue,
            attack,
            ann: a.model_path.as_deref().map_or(d.ann, |p| Source::parse(p, base)),
            defense,
            optimizer,
            sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.loading_factor > 0.0 && self.loading_factor.is_finite()) {
            return Err(invalid("scenario.loading_factor", "must be positive"));
        }
        if !(self.control_step > 0.0 && self.control_step <= self.t_end && self.t_end.is_finite()) {
            return Err(invalid("scenario.control_step", "need 0 < control_step <= t_end"));
        }
        self.queue.validate().map_err(|m| invalid("queue", m))?;
        let d = &self.defense;
        for (name, v) in [("ann.fdi_threshold", d.fdi_threshold), ("ann.dos_threshold", d.dos_threshold), ("ann.floor_pu", d.floor_pu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be positive"));
            }
        }
        if !(self.sweep.loading_factor > 0.0 && self.sweep.loading_factor.is_finite()) {
            return Err(invalid("sweep.loading_factor", "must be positive"));
        }
        if !(self.sweep.delta_p_kw.is_finite() && self.sweep.delta_q_kvar.is_finite()) || self.sweep.combinations_cap == 0 {
            return Err(invalid("sweep", "deltas must be finite and the cap positive"));
        }
        Ok(())
    }

    /// Control-step times `0, dt, ..., t_end`.
    pub fn times(&self) -> Vec<f64> {
        let n = (self.t_end / self.control_step + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 * self.control_step).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_files_parse() {
        let s1 = ScenarioConfig::parse(SCENARIO1, None, &[]).unwrap();
        assert_eq!(s1.attack, attacks::scenario_one());
        assert_eq!(s1.queue, QueueConfig::default());
        assert_eq!(s1.times().len(), 21);
        let s2 = ScenarioConfig::parse(SCENARIO2, None, &[]).unwrap();
        assert_eq!(s2.attack, attacks::scenario_two(1.0));
    }

    #[test]
    fn overrides_apply() {
        let s = ScenarioConfig::parse(
            SCENARIO1,
            None,
            &[
                "queue.capacity=100".into(),
                "scenario.defense_enabled=false".into(),
                "optimizer.secondary=flatness".into(),
            ],
        )
        .unwrap();
        assert_eq!(s.queue.capacity, 100);
        assert!(!s.defense_enabled);
        assert_eq!(s.optimizer.secondary, Secondary::Flatness);
        assert!(ScenarioConfig::parse(SCENARIO1, None, &["capacity=3".into()]).is_err());
        assert!(ScenarioConfig::parse(SCENARIO1, None, &["queue.bogus=3".into()]).is_err());
    }

    #[test]
    fn explicit_entries_and_paths() {
        let text = r#"
[scenario]
model_path = "feeder.model"
control_step = 0.25
[attack]
start_time_s = 1.0
[[attack.fdi]]
bus = "692"
phases = "ac"
mode = "scale"
p = 2.0
q = 2.0
[[attack.dos]]
target = "633"
[ann]
model_path = "/abs/net.ann"
"#;
        let s = ScenarioConfig::parse(text, Some(Path::new("/cases")), &[]).unwrap();
        assert_eq!(s.model, Source::Path(PathBuf::from("/cases/feeder.model")));
        assert_eq!(s.ann, Source::Path(PathBuf::from("/abs/net.ann")));
        assert_eq!(s.queue.window, 0.25);
        assert_eq!(s.attack.start_time, 1.0);
        assert_eq!(s.attack.dos[0].spoofed_source, "spoof-633");
        assert_eq!(s.attack.fdi[0].mode, FdiMode::Scale);
        assert!(ScenarioConfig::parse("[scenario]\ncontrol_step = 20.0", None, &[]).is_err());
        assert!(ScenarioConfig::parse("[attack]\nbuiltin = \"nope\"", None, &[]).is_err());
    }
}
