//! `vvs`: run attack scenarios, reliability sweeps and estimator training on
//! the Volt-Var simulator.
//!
//! Every artifact is rendered in memory first and only then written (each file
//! through a temp file and a rename), so a failing command leaves no partial
//! outputs behind.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vvs_core::defense_ann::{train_estimator, EstimatorConfig};
use vvs_core::grid_model::NetworkModel;
use vvs_core::powerflow::{self, ControlSetpoints};
use vvs_core::sim_engine::output::{self, write_atomic};
use vvs_core::sim_engine::scenario::{ScenarioConfig, Source, SCENARIO1, SCENARIO2};
use vvs_core::sim_engine::sweep::{reliability_sweep, SweepConfig};
use vvs_core::sim_engine::{self, load_model, RunOutput};

#[derive(Parser, Debug)]
#[command(name = "vvs", version, about = "Volt-Var control under hybrid FDI/DoS attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a scenario file and write CSVs plus a summary.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        no_defense: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Dotted-key override applied after parsing, e.g. `queue.capacity=100`.
        #[arg(long = "set", value_name = "K=V")]
        overrides: Vec<String>,
    },
    /// Maximum voltage versus the number of inflated load measurements.
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        kmax: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long = "set", value_name = "K=V")]
        overrides: Vec<String>,
    },
    /// Train a load estimator for a network document.
    TrainAnn {
        /// Network document path, or `builtin:ieee13`.
        model: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds the training data; the weight init uses seed + 6.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a network document and print its base-case voltages.
    Validate {
        /// Network document path, or `builtin:ieee13`.
        model: String,
    },
    /// Rerun a bundled case.
    Repro {
        case: Case,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Case {
    Scenario1,
    Scenario2,
    Fig8,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VVS_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            scenario,
            no_defense,
            seed,
            out,
            overrides,
        } => {
            let mut cfg = scenario_config(&scenario, &overrides, seed)?;
            if no_defense {
                cfg.defense_enabled = false;
            }
            let title = format!("{} (defense {})", scenario.display(), on_off(cfg.defense_enabled));
            let run = simulate(&cfg)?;
            let summary = output::summary_text(&run, &title);
            write_all(&out, &run_files(&run, "", &summary))?;
            print!("{summary}");
            Ok(())
        }
        Command::Sweep {
            scenario,
            kmax,
            seed,
            out,
            overrides,
        } => {
            let cfg = scenario_config(&scenario, &overrides, seed)?;
            let rows = sweep(&cfg, kmax)?;
            write_all(&out, &[(output::SWEEP.to_string(), output::sweep_csv(&rows))])?;
            print_sweep(&rows);
            Ok(())
        }
        Command::TrainAnn { model, out, epochs, seed } => train(&model, &out, epochs, seed),
        Command::Validate { model } => validate(&model),
        Command::Repro { case, out } => repro(case, &out),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn scenario_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<ScenarioConfig> {
    if !path.is_file() {
        bail!("scenario file {} not found", path.display());
    }
    let mut cfg = ScenarioConfig::from_file(path, overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn simulate(cfg: &ScenarioConfig) -> Result<RunOutput> {
    sim_engine::run(cfg).map_err(|f| {
        let logged = f.partial.as_ref().map_or(0, |p| p.rows.len());
        anyhow::anyhow!("{} (after {logged} completed steps)", f.error)
    })
}

fn run_files(run: &RunOutput, prefix: &str, summary: &str) -> Vec<(String, String)> {
    vec![
        (format!("{prefix}{}", output::TIMESERIES), output::timeseries_csv(run)),
        (format!("{prefix}{}", output::DETECTIONS), output::detections_csv(run)),
        (format!("{prefix}{}", output::QUEUE_EVENTS), output::queue_events_csv(run)),
        (format!("{prefix}{}", output::SUMMARY), summary.to_string()),
    ]
}

fn write_all(dir: &Path, files: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, body) in files {
        let p = dir.join(name);
        write_atomic(&p, body).with_context(|| format!("writing {}", p.display()))?;
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn sweep(cfg: &ScenarioConfig, k_max: usize) -> Result<Vec<sim_engine::sweep::SweepRow>> {
    let nominal = load_model(&cfg.model)?;
    Ok(reliability_sweep(&nominal, &SweepConfig::from_scenario(cfg, k_max))?)
}

fn print_sweep(rows: &[sim_engine::sweep::SweepRow]) {
    println!("k  subsets  v_max a / b / c (pu)");
    for r in rows {
        let mode = if r.exhaustive { "" } else { " sampled" };
        println!(
            "{:<2} {:>7}  {:.4} / {:.4} / {:.4}{mode}",
            r.k, r.subsets, r.v_max[0], r.v_max[1], r.v_max[2]
        );
    }
}

fn model_source(raw: &str) -> Result<NetworkModel> {
    let source = match raw.strip_prefix("builtin:") {
        Some(name) => Source::Builtin(name.to_string()),
        None => {
            let p = PathBuf::from(raw);
            if !p.is_file() {
                bail!("network document {raw} not found");
            }
            Source::Path(p)
        }
    };
    Ok(load_model(&source)?)
}

fn train(model: &str, out: &Path, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    let net_model = model_source(model)?;
    let mut cfg = EstimatorConfig::default();
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
        cfg.init_seed = s.wrapping_add(6);
    }
    let (net, report) = train_estimator(&net_model, &cfg)?;
    let loss_path = loss_curve_path(out);
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = |p: &Path| p.file_name().expect("file name").to_string_lossy().into_owned();
    if out.file_name().is_none() {
        bail!("--out must name a file");
    }
    write_all(
        dir,
        &[
            (name(out), net.to_text()),
            (name(&loss_path), output::loss_curve_csv(&report.loss_curve)),
        ],
    )?;
    println!("layers: {:?}", net.layer_sizes());
    println!("epochs: {}", report.loss_curve.len() - 1);
    println!("final mse: {:e}", report.loss_curve.last().copied().unwrap_or(f64::NAN));
    println!("training time: {:.1} s", report.seconds);
    println!("training MAPE: {:.2}%", report.train_mape);
    println!("held-out MAPE: {:.2}%", report.heldout_mape);
    println!("wrote {} and {}", out.display(), loss_path.display());
    Ok(())
}

/// `model.ann` gets its loss curve in `model.loss.csv`.
fn loss_curve_path(out: &Path) -> PathBuf {
    out.with_extension("loss.csv")
}

fn validate(model: &str) -> Result<()> {
    let m = model_source(model)?;
    let depth = m.topology().depth.iter().copied().max().unwrap_or(0);
    println!("buses: {}", m.buses().len());
    println!("lines: {}", m.lines().len());
    println!("tree depth: {depth}");
    println!("substation: {}", m.buses()[m.substation()].id);
    for o in m.oltcs() {
        let kind = if o.ganged { "ganged" } else { "per-phase" };
        println!("oltc {} at {}: {} positions, {kind}", o.id, m.buses()[o.bus].id, o.positions());
    }
    let kw = m.base().kw_per_pu();
    for c in m.capacitors() {
        let q: f64 = c.q_rated.iter().sum::<f64>() * kw;
        println!("capacitor {} at {}: {q:.0} kVAr, {}", c.id, m.buses()[c.bus].id, if c.closed { "closed" } else { "open" });
    }
    for d in m.dgs() {
        let s: f64 = d.s_rated.iter().sum::<f64>() * kw;
        println!("dg {} at {}: {s:.0} kVA, {}", d.id, m.buses()[d.bus].id, if d.connected { "connected" } else { "disconnected" });
    }
    let flow = powerflow::solve(&m, &ControlSetpoints::from_model(&m))?;
    println!("base-case voltages (pu):");
    for (i, b) in m.buses().iter().enumerate() {
        let vs: Vec<String> = b.phases.iter().map(|p| format!("{p} {:.4}", flow.magnitude(i, p))).collect();
        println!("  {:<6} {}", b.id, vs.join("  "));
    }
    Ok(())
}

fn repro(case: Case, out: &Path) -> Result<()> {
    let (name, text) = match case {
        Case::Scenario1 => ("scenario1", SCENARIO1),
        Case::Scenario2 => ("scenario2", SCENARIO2),
        Case::Fig8 => {
            let cfg = ScenarioConfig::parse(SCENARIO1, None, &[])?;
            let rows = sweep(&cfg, cfg.sweep.k_max.unwrap_or(9))?;
            write_all(out, &[(output::SWEEP.to_string(), output::sweep_csv(&rows))])?;
            print_sweep(&rows);
            return Ok(());
        }
    };
    let mut files = Vec::new();
    let mut summaries = String::new();
    for defense in [false, true] {
        let mut cfg = ScenarioConfig::parse(text, None, &[])?;
        cfg.defense_enabled = defense;
        let run = simulate(&cfg)?;
        let summary = output::summary_text(&run, &format!("{name} (defense {})", on_off(defense)));
        files.extend(run_files(&run, &format!("defense_{}_", on_off(defense)), &summary));
        summaries.push_str(&summary);
        summaries.push('\n');
    }
    write_all(out, &files)?;
    print!("{summaries}");
    Ok(())
}
