//! Reliability sweep: how far the feeder voltage climbs as more load
//! measurements are inflated.
//!
//! For each `k`, every size-`k` subset of load buses (or a seeded uniform
//! sample once the count exceeds the cap) has its believed loads raised by
//! `(ΔP, ΔQ)` on each present phase. The dispatch is computed on the believed
//! loads and applied to the true ones; the row records the largest voltage
//! per phase over all subsets.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scenario::ScenarioConfig;
use super::SimError;
use crate::grid_model::{BusIdx, NetworkModel, PerPhase};
use crate::par::{self, ExecMode};
use crate::powerflow;
use crate::voltvar_opt::{self, OptimizationProblem, OptimizerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub k_max: usize,
    pub delta_p_kw: f64,
    pub delta_q_kvar: f64,
    pub combinations_cap: usize,
    pub seed: u64,
    pub loading_factor: f64,
    pub optimizer: OptimizerConfig,
    pub exec: ExecMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            k_max: 9,
            delta_p_kw: 100.0,
            delta_q_kvar: 100.0,
            combinations_cap: 2000,
            seed: 1,
            loading_factor: 1.0,
            optimizer: OptimizerConfig::default(),
            exec: ExecMode::default(),
        }
    }
}

impl SweepConfig {
    /// Settings from a scenario's `[sweep]` and `[optimizer]` sections.
    pub fn from_scenario(scenario: &ScenarioConfig, k_max: usize) -> Self {
        SweepConfig {
            k_max,
            delta_p_kw: scenario.sweep.delta_p_kw,
            delta_q_kvar: scenario.sweep.delta_q_kvar,
            combinations_cap: scenario.sweep.combinations_cap,
            seed: scenario.seed,
            loading_factor: scenario.sweep.loading_factor,
            optimizer: scenario.optimizer.clone(),
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub subsets: usize,
    pub exhaustive: bool,
    /// Largest voltage magnitude per phase, pu.
    pub v_max: PerPhase<f64>,
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All size-`k` subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Per-phase maximum voltage after dispatching on inflated beliefs.
pub fn evaluate_subset(truth: &NetworkModel, buses: &[BusIdx], config: &SweepConfig) -> Result<PerPhase<f64>, SimError> {
    let kw = truth.base().kw_per_pu();
    let mut believed = truth.loads();
    for &b in buses {
        for p in truth.buses()[b].phases.iter() {
            believed[b].0[p.index()] += config.delta_p_kw / kw;
            believed[b].1[p.index()] += config.delta_q_kvar / kw;
        }
    }
    let problem = OptimizationProblem {
        model: truth,
        believed_loads: believed,
        v_band: truth.v_band(),
        incumbent: None,
    };
    let outcome = voltvar_opt::optimize(&problem, &config.optimizer)?;
    let flow = powerflow::solve(truth, &outcome.setpoints)?;
    Ok(flow.max_v_per_phase(truth).map(f64::sqrt))
}

/// Rows for `k = 0..=k_max`; `k = 0` is the uncompromised baseline.
pub fn reliability_sweep(nominal: &NetworkModel, config: &SweepConfig) -> Result<Vec<SweepRow>, SimError> {
    let truth = nominal.scale_loads(config.loading_factor)?;
    let candidates = truth.load_buses();
    let n = candidates.len();
    if config.k_max > n {
        return Err(SimError::Scenario(super::scenario::ScenarioError::Invalid {
            field: "sweep.k_max".into(),
            message: format!("{} exceeds the {n} load buses", config.k_max),
        }));
    }
    let inner = OptimizerConfig {
        exec: ExecMode::Sequential,
        ..config.optimizer.clone()
    };
    let cfg = SweepConfig {
        optimizer: inner,
        ..config.clone()
    };
    let mut rows = Vec::with_capacity(config.k_max + 1);
    for k in 0..=config.k_max {
        let exhaustive = binomial(n, k) <= config.combinations_cap as u128;
        let subsets: Vec<Vec<usize>> = if exhaustive {
            combinations(n, k)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(k as u64));
            (0..config.combinations_cap)
                .map(|_| {
                    let mut s = index::sample(&mut rng, n, k).into_vec();
                    s.sort_unstable();
                    s
                })
                .collect()
        };
        let results = par::map_slice(config.exec, &subsets, |s| {
            let buses: Vec<BusIdx> = s.iter().map(|&i| candidates[i]).collect();
            evaluate_subset(&truth, &buses, &cfg)
        });
        let mut v_max = [0.0f64; 3];
        for r in results {
            let v = r?;
            for p in 0..3 {
                v_max[p] = v_max[p].max(v[p]);
            }
        }
        rows.push(SweepRow {
            k,
            subsets: subsets.len(),
            exhaustive,
            v_max,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::document::ieee13;

    #[test]
    fn combination_counts() {
        assert_eq!(binomial(9, 4), 126);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(combinations(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        for k in 0..=9 {
            assert_eq!(combinations(9, k).len() as u128, binomial(9, k));
        }
    }

    #[test]
    fn k_one_is_the_best_single() {
        let m = ieee13();
        let cfg = SweepConfig {
            k_max: 1,
            ..Default::default()
        };
        let rows = reliability_sweep(&m, &cfg).unwrap();
        let truth = m.scale_loads(cfg.loading_factor).unwrap();
        let mut best = [0.0f64; 3];
        for b in truth.load_buses() {
            let v = evaluate_subset(&truth, &[b], &cfg).unwrap();
            for p in 0..3 {
                best[p] = best[p].max(v[p]);
            }
        }
        assert_eq!(rows[1].v_max, best);
        assert_eq!(rows[0].subsets, 1);
        assert!(reliability_sweep(&m, &SweepConfig { k_max: 10, ..cfg }).is_err());
    }

    #[test]
    fn sampling_kicks_in_above_cap() {
        let m = ieee13();
        let cfg = SweepConfig {
            k_max: 2,
            combinations_cap: 10,
            ..Default::default()
        };
        let rows = reliability_sweep(&m, &cfg).unwrap();
        assert!(rows[1].exhaustive && !rows[2].exhaustive);
        assert_eq!(rows[2].subsets, 10);
        assert_eq!(rows, reliability_sweep(&m, &cfg).unwrap());
    }
}
