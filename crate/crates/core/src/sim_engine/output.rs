//! CSV artifacts. Floats are written with fixed precision so identical runs
//! give identical bytes.

use std::io;
use std::path::{Path, PathBuf};

use super::sweep::SweepRow;
use super::RunOutput;
use crate::grid_model::Phase;

pub const TIMESERIES: &str = "timeseries.csv";
pub const DETECTIONS: &str = "detections.csv";
pub const QUEUE_EVENTS: &str = "queue_events.csv";
pub const SWEEP: &str = "sweep.csv";
pub const SUMMARY: &str = "summary.txt";

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn t3(x: f64) -> String {
    format!("{x:.3}")
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

/// Columns: `t_s`, `v_<bus>_<phase>_pu` per present phase, `tap_<oltc>`
/// (`tap_<oltc>_<phase>` when unganged), `cap_<id>`, `qdg_<id>_<phase>_pu`,
/// `J_pu`, `queue_occupancy`, `drops`, `detections`.
pub fn timeseries_csv(out: &RunOutput) -> String {
    let m = &out.model;
    let mut header = vec!["t_s".to_string()];
    for b in m.buses() {
        for p in b.phases.iter() {
            header.push(format!("v_{}_{}_pu", b.id, p));
        }
    }
    for o in m.oltcs() {
        if o.ganged {
            header.push(format!("tap_{}", o.id));
        } else {
            for p in m.buses()[o.bus].phases.iter() {
                header.push(format!("tap_{}_{}", o.id, p));
            }
        }
    }
    for c in m.capacitors() {
        header.push(format!("cap_{}", c.id));
    }
    for d in m.dgs() {
        for p in m.buses()[d.bus].phases.iter() {
            header.push(format!("qdg_{}_{}_pu", d.id, p));
        }
    }
    header.extend(["J_pu", "queue_occupancy", "drops", "detections"].map(String::from));
    let mut w = writer();
    w.write_record(&header).expect("in-memory write");
    for r in &out.rows {
        let mut rec = vec![t3(r.t)];
        for (b, v) in m.buses().iter().zip(&r.v) {
            for p in b.phases.iter() {
                rec.push(f6(v[p.index()]));
            }
        }
        for (oi, o) in m.oltcs().iter().enumerate() {
            let taps = r.setpoints.taps[oi];
            if o.ganged {
                rec.push(taps[0].to_string());
            } else {
                for p in m.buses()[o.bus].phases.iter() {
                    rec.push(taps[p.index()].to_string());
                }
            }
        }
        for c in &r.setpoints.cap_closed {
            rec.push(u8::from(*c).to_string());
        }
        for (di, d) in m.dgs().iter().enumerate() {
            for p in m.buses()[d.bus].phases.iter() {
                rec.push(f6(r.setpoints.dg_q[di][p.index()]));
            }
        }
        rec.push(f6(r.objective));
        rec.push(r.queue_occupancy.to_string());
        rec.push(r.drops.to_string());
        rec.push(r.detections.to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    finish(w)
}

/// Columns: `time, kind, bus, phase, quantity, received, estimate, action`.
/// Load values are kW or kVAr; for `dos` rows `bus` is the flagged source and
/// `received` its buffer share.
pub fn detections_csv(out: &RunOutput) -> String {
    let kw = out.model.base().kw_per_pu();
    let mut w = writer();
    w.write_record(["time", "kind", "bus", "phase", "quantity", "received", "estimate", "action"])
        .expect("in-memory write");
    let phase = |p: Phase| p.to_string();
    for d in &out.detections {
        let t = t3(d.t);
        for f in &d.report.dos {
            w.write_record([t.as_str(), "dos", &f.source, "", "", &f6(f.utilization), "", "disconnect"])
                .expect("in-memory write");
        }
        for s in &d.report.substitutions {
            let (kind, received, action) = match s.received {
                None => ("loss-fill", String::new(), "fill"),
                Some(r) => ("fdi", f6(r * kw), "substitute"),
            };
            w.write_record([
                t.as_str(),
                kind,
                &s.bus,
                &phase(s.phase),
                s.quantity.label(),
                &received,
                &f6(s.estimate * kw),
                action,
            ])
            .expect("in-memory write");
        }
    }
    finish(w)
}

/// Columns: `time, event, source, kind, occupancy`.
pub fn queue_events_csv(out: &RunOutput) -> String {
    let mut w = writer();
    w.write_record(["time", "event", "source", "kind", "occupancy"]).expect("in-memory write");
    for e in &out.queue_events {
        w.write_record([
            format!("{:.6}", e.time),
            e.kind.to_string(),
            e.source.clone(),
            e.packet.map_or(String::new(), |k| k.label().to_string()),
            e.occupancy.to_string(),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

/// Columns: `k, phase, v_max_pu`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = writer();
    w.write_record(["k", "phase", "v_max_pu"]).expect("in-memory write");
    for r in rows {
        for p in Phase::ALL {
            w.write_record([r.k.to_string(), p.to_string(), f6(r.v_max[p.index()])])
                .expect("in-memory write");
        }
    }
    finish(w)
}

/// Columns: `epoch, mse`.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut w = writer();
    w.write_record(["epoch", "mse"]).expect("in-memory write");
    for (i, l) in curve.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")]).expect("in-memory write");
    }
    finish(w)
}

/// Runs of consecutive out-of-band rows as `(first, last)` row times.
pub fn violation_intervals(out: &RunOutput) -> Vec<(f64, f64)> {
    let bad = out.violation_times();
    let step = match out.rows.as_slice() {
        [a, b, ..] => b.t - a.t,
        _ => 0.0,
    };
    let mut spans: Vec<(f64, f64)> = Vec::new();
    for t in bad {
        match spans.last_mut() {
            Some(last) if (t - last.1 - step).abs() <= 1e-9 => last.1 = t,
            _ => spans.push((t, t)),
        }
    }
    spans
}

/// Human-readable report: peak voltage per node, band violations and
/// detection counts.
pub fn summary_text(out: &RunOutput, title: &str) -> String {
    use std::fmt::Write;
    let m = &out.model;
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    if let (Some(a), Some(b)) = (out.rows.first(), out.rows.last()) {
        let _ = writeln!(s, "steps: {} ({} to {} s)", out.rows.len(), t3(a.t), t3(b.t));
    }
    let _ = writeln!(s, "band: [{:.3}, {:.3}] pu", m.v_min(), m.v_max());
    let _ = writeln!(s, "\npeak voltage per node (pu):");
    let peak = out.peak_after(f64::NEG_INFINITY);
    for (b, v) in m.buses().iter().zip(&peak) {
        let (ph, x) = b
            .phases
            .iter()
            .map(|p| (p, v[p.index()]))
            .fold((Phase::A, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
        let flag = if x > m.v_max() { "  over" } else { "" };
        let _ = writeln!(s, "  {:<6} {:.4} ({ph}){flag}", b.id, x);
    }
    let spans = violation_intervals(out);
    let _ = writeln!(s, "\nviolations:");
    if spans.is_empty() {
        let _ = writeln!(s, "  none");
    }
    for (a, b) in spans {
        let _ = writeln!(s, "  {} to {} s", t3(a), t3(b));
    }
    let (mut fdi, mut fill) = (0, 0);
    for d in &out.detections {
        for sub in &d.report.substitutions {
            if sub.received.is_some() {
                fdi += 1;
            } else {
                fill += 1;
            }
        }
    }
    let _ = writeln!(s, "\ndetections:");
    let _ = writeln!(s, "  fdi substitutions: {fdi}");
    let _ = writeln!(s, "  loss fills: {fill}");
    let _ = writeln!(s, "  dos disconnects: {}", out.disconnected.len());
    for (t, src) in &out.disconnected {
        let _ = writeln!(s, "    {src} at {} s", t3(*t));
    }
    s
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

/// Writes the three run CSVs into `dir`, with `prefix` before each file name.
pub fn emit_csv(out: &RunOutput, dir: &Path, prefix: &str) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        (TIMESERIES, timeseries_csv(out)),
        (DETECTIONS, detections_csv(out)),
        (QUEUE_EVENTS, queue_events_csv(out)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(format!("{prefix}{name}"));
        write_atomic(&p, &body)?;
        written.push(p);
    }
    Ok(written)
}
