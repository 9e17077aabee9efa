//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vvs_core::cybernet::{EnqueueOutcome, MeasurementPacket, QueueConfig, RtuQueue};
use vvs_core::defense_ann::dataset::MeasurementLayout;
use vvs_core::defense_ann::mlp::{Batch, Mlp, Normalizer};
use vvs_core::sim_engine::emit_measurements;
use vvs_core::grid_model::document::{ieee13, load_network, to_document};
use vvs_core::grid_model::NetworkModel;
use vvs_core::par::ExecMode;
use vvs_core::powerflow::ControlSetpoints;
use vvs_core::voltvar_opt::{
    evaluate_assignment, optimize, DiscreteAssignment, ObjectiveKind, OptimizationProblem, OptimizerConfig, Secondary,
};

// ---------------------------------------------------------------- power flow

/// A single-phase radial instance in pu: `parent[i]` feeds bus `i + 1`
/// through `z[i]`; bus 0 is the source.
#[derive(Debug, Clone)]
pub struct SinglePhase {
    pub parent: Vec<usize>,
    pub z: Vec<Complex64>,
    /// Load at buses `1..`, pu.
    pub load: Vec<Complex64>,
}

impl SinglePhase {
    pub fn random3(rng: &mut impl Rng) -> Self {
        let chain = rng.random_bool(0.5);
        let z = (0..2)
            .map(|_| Complex64::new(rng.random_range(0.0005..0.02), rng.random_range(0.0005..0.02)))
            .collect();
        let load = (0..2)
            .map(|_| Complex64::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)))
            .collect();
        SinglePhase {
            parent: if chain { vec![0, 1] } else { vec![0, 0] },
            z,
            load,
        }
    }

    /// Model document with 1 kV / 3 MVA bases, so 1 pu is 1000 kW per phase
    /// and the impedance base is 1/3 ohm.
    pub fn document(&self) -> String {
        let zb = 1.0 / 3.0;
        let mut s = String::from("[system]\nbase_kv = 1.0\nbase_mva = 3.0\nsubstation = \"b0\"\n\n[[bus]]\nid = \"b0\"\nphases = \"a\"\n");
        for (i, l) in self.load.iter().enumerate() {
            s += &format!(
                "\n[[bus]]\nid = \"b{}\"\nphases = \"a\"\np_kw = {{ a = {:?} }}\nq_kvar = {{ a = {:?} }}\n",
                i + 1,
                l.re * 1000.0,
                l.im * 1000.0
            );
        }
        for (i, (p, z)) in self.parent.iter().zip(&self.z).enumerate() {
            s += &format!(
                "\n[[line]]\nfrom = \"b{p}\"\nto = \"b{}\"\nphases = \"a\"\nunits = \"ohm\"\nr = [{:?}, 0.0, 0.0, 0.0, 0.0, 0.0]\nx = [{:?}, 0.0, 0.0, 0.0, 0.0, 0.0]\n",
                i + 1,
                z.re * zb,
                z.im * zb
            );
        }
        s
    }

    pub fn model(&self) -> NetworkModel {
        load_network(&self.document()).expect("generated document is valid")
    }

    /// Exact backward/forward sweep; squared magnitudes at buses `0..=n`.
    pub fn nonlinear_v(&self, v_source: f64) -> Vec<f64> {
        let n = self.load.len();
        let mut v = vec![Complex64::new(v_source, 0.0); n + 1];
        for _ in 0..200 {
            let mut i_branch: Vec<Complex64> = (0..n).map(|k| (self.load[k] / v[k + 1]).conj()).collect();
            for k in (0..n).rev() {
                let p = self.parent[k];
                if p > 0 {
                    let c = i_branch[k];
                    i_branch[p - 1] += c;
                }
            }
            let mut next = v.clone();
            for k in 0..n {
                next[k + 1] = next[self.parent[k]] - self.z[k] * i_branch[k];
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            v = next;
            if delta < 1e-14 {
                break;
            }
        }
        v.iter().map(|x| x.norm_sqr()).collect()
    }
}

// ---------------------------------------------------------------- optimizer

pub struct OptInstance {
    pub model: NetworkModel,
    pub believed: Vec<([f64; 3], [f64; 3])>,
    pub band: (f64, f64),
    pub incumbent: ControlSetpoints,
    pub config: OptimizerConfig,
}

impl OptInstance {
    pub fn problem(&self) -> OptimizationProblem<'_> {
        OptimizationProblem {
            model: &self.model,
            believed_loads: self.believed.clone(),
            v_band: self.band,
            incumbent: Some(self.incumbent.clone()),
        }
    }
}

/// A 13-bus instance with at most 512 discrete assignments: perturbed
/// loads, a random band and incumbent, ganged or per-phase taps.
pub fn random_opt_instance(rng: &mut impl Rng) -> OptInstance {
    let ganged = rng.random_bool(0.6);
    let base = if ganged {
        ieee13()
    } else {
        load_network(&to_document(&ieee13()).replace("ganged = true", "ganged = false")).unwrap()
    };
    let lf = rng.random_range(0.3..1.6);
    let mut believed = base.scale_loads(lf).unwrap().loads();
    for (p, q) in believed.iter_mut() {
        for k in 0..3 {
            p[k] *= rng.random_range(0.7..1.3);
            q[k] *= rng.random_range(0.7..1.3);
        }
    }
    let hi: f64 = rng.random_range(1.0..1.06);
    let lo: f64 = rng.random_range(0.9..0.99);
    let mut incumbent = ControlSetpoints::from_model(&base);
    incumbent.taps[0] = if ganged {
        [rng.random_range(1..=32); 3]
    } else {
        [rng.random_range(1..=32), rng.random_range(1..=32), rng.random_range(1..=32)]
    };
    let tap_radius = if ganged {
        match rng.random_range(0..5) {
            4 => None,
            r => Some(r as u8),
        }
    } else {
        Some(rng.random_range(0..=1))
    };
    let config = OptimizerConfig {
        objective: if rng.random_bool(0.5) { ObjectiveKind::AllLines } else { ObjectiveKind::HeadLine },
        secondary: if rng.random_bool(0.5) { Secondary::Losses } else { Secondary::Flatness },
        tap_radius,
        exec: if rng.random_bool(0.5) { ExecMode::Parallel } else { ExecMode::Sequential },
        ..OptimizerConfig::default()
    };
    OptInstance {
        model: base,
        believed,
        band: (lo * lo, hi * hi),
        incumbent,
        config,
    }
}

fn window(center: u8, radius: Option<u8>, n: u8) -> Vec<u8> {
    match radius {
        None => (1..=n).collect(),
        Some(r) => (center.saturating_sub(r).max(1)..=center.saturating_add(r).min(n)).collect(),
    }
}

/// Key `(infeasible, violation, J, secondary)`.
pub type Key = (bool, f64, f64, f64);

pub fn key_cmp(a: &Key, b: &Key) -> Ordering {
    a.0.cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
        .then(a.3.total_cmp(&b.3))
}

/// Brute force over every discrete assignment with nested loops in
/// lexicographic order; the first assignment with the smallest key wins.
pub fn exhaustive_optimum(inst: &OptInstance) -> (ControlSetpoints, Key, usize) {
    let model = inst.model.with_loads(&inst.believed);
    let mut digits: Vec<Vec<u8>> = Vec::new();
    for (oi, o) in model.oltcs().iter().enumerate() {
        let n = o.positions() as u8;
        if o.ganged {
            digits.push(window(inst.incumbent.taps[oi][0], inst.config.tap_radius, n));
        } else {
            for p in model.buses()[o.bus].phases.iter() {
                digits.push(window(inst.incumbent.taps[oi][p.index()], inst.config.tap_radius, n));
            }
        }
    }
    let n_caps = model.capacitors().len();
    let n_dgs = model.dgs().len();
    for _ in 0..n_caps + n_dgs {
        digits.push(vec![0, 1]);
    }
    let mut odometer = vec![0usize; digits.len()];
    let mut best: Option<(ControlSetpoints, Key)> = None;
    let mut count = 0;
    loop {
        let mut d = 0;
        let mut taps = inst.incumbent.taps.clone();
        for (oi, o) in model.oltcs().iter().enumerate() {
            if o.ganged {
                taps[oi] = [digits[d][odometer[d]]; 3];
                d += 1;
            } else {
                for p in model.buses()[o.bus].phases.iter() {
                    taps[oi][p.index()] = digits[d][odometer[d]];
                    d += 1;
                }
            }
        }
        let cap_closed = (0..n_caps).map(|c| digits[d + c][odometer[d + c]] == 1).collect();
        let dg_connected = (0..n_dgs).map(|g| digits[d + n_caps + g][odometer[d + n_caps + g]] == 1).collect();
        let a = DiscreteAssignment {
            taps,
            cap_closed,
            dg_connected,
        };
        let (sp, _, j, sec, viol) = evaluate_assignment(&model, inst.band, &a, &inst.config).unwrap();
        let key = (viol > 0.0, viol, j, sec);
        count += 1;
        if best.as_ref().is_none_or(|(_, k)| key_cmp(&key, k) == Ordering::Less) {
            best = Some((sp, key));
        }
        // advance, last digit fastest
        let mut i = digits.len();
        loop {
            if i == 0 {
                let (sp, key) = best.unwrap();
                return (sp, key, count);
            }
            i -= 1;
            odometer[i] += 1;
            if odometer[i] < digits[i].len() {
                break;
            }
            odometer[i] = 0;
        }
    }
}

/// Runs both and reports a mismatch, if any.
pub fn check_optimizer(inst: &OptInstance) -> Result<usize, String> {
    let (want, key, count) = exhaustive_optimum(inst);
    if count > 512 {
        return Err(format!("instance has {count} assignments"));
    }
    let got = optimize(&inst.problem(), &inst.config).map_err(|e| e.to_string())?;
    let model = inst.model.with_loads(&inst.believed);
    let got_sec = vvs_core::voltvar_opt::secondary_value(&model, &got.predicted, inst.config.secondary);
    let got_key = (!got.feasible, got.violation, got.objective, got_sec);
    if got.setpoints != want || key_cmp(&got_key, &key) != Ordering::Equal || got.evaluated != count {
        return Err(format!(
            "optimizer picked {:?} {:?} with key {got_key:?}, brute force {:?} {:?} with {key:?}",
            got.setpoints.taps, got.setpoints.cap_closed, want.taps, want.cap_closed
        ));
    }
    Ok(count)
}

// ---------------------------------------------------------------- MLP

pub fn random_net(rng: &mut impl Rng) -> (Mlp, Batch) {
    let mut sizes = vec![rng.random_range(1..=4)];
    for _ in 0..rng.random_range(0..=2) {
        sizes.push(rng.random_range(1..=5));
    }
    sizes.push(rng.random_range(1..=3));
    let mut net = Mlp::new(&sizes, rng.random()).unwrap();
    for b in net.biases.iter_mut() {
        b.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    let rows = rng.random_range(1..=6);
    let x: Vec<Vec<f64>> = (0..rows).map(|_| (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..*sizes.last().unwrap()).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let batch = net.batch(&x, &y).unwrap();
    (net, batch)
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between backprop and central
/// differences over every parameter, plus the worst absolute entry gap.
pub fn gradient_error(net: &Mlp, batch: &Batch) -> (f64, f64) {
    let (_, g) = net.loss_and_gradient(batch, ExecMode::Sequential);
    let h = 1e-6;
    let loss_at = |f: &dyn Fn(&mut Mlp)| {
        let mut n = net.clone();
        f(&mut n);
        n.loss(batch)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for l in 0..net.weights.len() {
        let (r, c) = net.weights[l].shape();
        for i in 0..r {
            for j in 0..c {
                let up = loss_at(&|n: &mut Mlp| n.weights[l][(i, j)] += h);
                let dn = loss_at(&|n: &mut Mlp| n.weights[l][(i, j)] -= h);
                numeric.push((up - dn) / (2.0 * h));
                analytic.push(g.weights[l][(i, j)]);
            }
        }
        for i in 0..net.biases[l].len() {
            let up = loss_at(&|n: &mut Mlp| n.biases[l][i] += h);
            let dn = loss_at(&|n: &mut Mlp| n.biases[l][i] -= h);
            numeric.push((up - dn) / (2.0 * h));
            analytic.push(g.biases[l][i]);
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
    let worst = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    (rel, worst)
}

// ---------------------------------------------------------------- defense

/// Estimator whose output is `estimate` whatever the input.
pub fn constant_estimator(layout: &MeasurementLayout, estimate: &[f64]) -> Mlp {
    let mut m = Mlp::new(&[layout.feature_len(), layout.len()], 0).unwrap();
    m.weights[0].fill(0.0);
    m.biases[0].fill(0.0);
    m.output_norm = Normalizer {
        offset: estimate.to_vec(),
        scale: vec![1.0; estimate.len()],
    };
    m
}

pub fn packets_for(model: &NetworkModel, layout: &MeasurementLayout, vector: &[f64]) -> Vec<MeasurementPacket> {
    emit_measurements(&model.with_loads(&layout.loads_from_vector(vector, &model.loads())), 0.0, 0)
}

// ---------------------------------------------------------------- queue

/// Tally kept outside the queue while driving it.
#[derive(Debug, Default)]
pub struct QueueAudit {
    pub offered: u64,
    pub admitted: u64,
    pub delivered: u64,
    pub purged: u64,
    pub lost: u64,
    /// Admission order of `(source, seq)`, for the FIFO check.
    admissions: std::collections::VecDeque<(String, u64)>,
    last_seq: BTreeMap<String, u64>,
    pub violation: Option<String>,
}

impl QueueAudit {
    pub fn enqueue(&mut self, q: &mut RtuQueue, p: MeasurementPacket, now: f64) -> EnqueueOutcome {
        let key = (p.source.clone(), p.seq);
        self.offered += 1;
        let out = q.enqueue(p, now);
        match out {
            EnqueueOutcome::Admitted => {
                self.admitted += 1;
                self.admissions.push_back(key);
            }
            _ => self.lost += 1,
        }
        self.check(q);
        out
    }

    pub fn service(&mut self, q: &mut RtuQueue, dt: f64) -> usize {
        let out = q.service_step(dt);
        for p in &out {
            self.delivered += 1;
            let want = self.admissions.pop_front();
            if want.as_ref() != Some(&(p.source.clone(), p.seq)) {
                self.fail(format!("delivered {}#{} out of admission order, expected {want:?}", p.source, p.seq));
            }
            if let Some(&prev) = self.last_seq.get(&p.source) {
                if p.seq <= prev {
                    self.fail(format!("{} seq {} after {prev}", p.source, p.seq));
                }
            }
            self.last_seq.insert(p.source.clone(), p.seq);
        }
        self.check(q);
        out.len()
    }

    pub fn disconnect(&mut self, q: &mut RtuQueue, source: &str) {
        let n = q.disconnect_source(source);
        self.purged += n as u64;
        self.admissions.retain(|(s, _)| s != source);
        self.check(q);
    }

    fn fail(&mut self, m: String) {
        if self.violation.is_none() {
            self.violation = Some(m);
        }
    }

    fn check(&mut self, q: &RtuQueue) {
        if q.len() > q.config().capacity {
            self.fail(format!("buffer {} above capacity", q.len()));
        }
        if self.admitted != self.delivered + q.len() as u64 + self.purged {
            self.fail(format!(
                "admitted {} != delivered {} + buffered {} + purged {}",
                self.admitted,
                self.delivered,
                q.len(),
                self.purged
            ));
        }
        if self.offered != self.admitted + self.lost || q.drops() != self.lost {
            self.fail("offered packets do not balance".into());
        }
        if !q.conservation_holds() {
            self.fail("per-source conservation failed".into());
        }
    }
}

/// Bursts of `burst` packets every step of `dt`, round-robin over `sources`.
/// Returns `(audit, drops per step)`.
pub fn drive_queue(config: QueueConfig, burst: usize, dt: f64, steps: usize, sources: usize) -> (QueueAudit, Vec<u64>) {
    let mut q = RtuQueue::new(config).unwrap().without_event_log();
    let mut audit = QueueAudit::default();
    let mut seq = vec![0u64; sources];
    let mut per_step = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = q.clock();
        let before = audit.lost;
        for j in 0..burst {
            let s = (k * burst + j) % sources;
            seq[s] += 1;
            audit.enqueue(&mut q, MeasurementPacket::greeting(&format!("n{s}"), t, seq[s]), t);
        }
        audit.service(&mut q, dt);
        per_step.push(audit.lost - before);
        if audit.violation.is_some() {
            break;
        }
    }
    (audit, per_step)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
