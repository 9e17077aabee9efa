//! Sequential versus rayon execution of the three data-parallel kernels:
//! the discrete setpoint search, the reliability sweep and a training epoch.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vvs_core::defense_ann::dataset::{generate_training_set, MeasurementLayout};
use vvs_core::defense_ann::mlp::Mlp;
use vvs_core::defense_ann::EstimatorConfig;
use vvs_core::grid_model::document::ieee13;
use vvs_core::par::ExecMode;
use vvs_core::sim_engine::sweep::{reliability_sweep, SweepConfig};
use vvs_core::voltvar_opt::{optimize, OptimizationProblem, OptimizerConfig};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn bench_optimize(c: &mut Criterion) {
    let model = ieee13();
    let problem = OptimizationProblem::from_model(&model);
    let mut g = c.benchmark_group("optimize");
    for (name, exec) in MODES {
        let cfg = OptimizerConfig { exec, ..OptimizerConfig::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| optimize(&problem, &cfg).unwrap()));
    }
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let model = ieee13();
    let mut g = c.benchmark_group("sweep_k3");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = SweepConfig { k_max: 3, exec, ..SweepConfig::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| reliability_sweep(&model, &cfg).unwrap()));
    }
    g.finish();
}

fn bench_epoch(c: &mut Criterion) {
    let model = ieee13();
    let est = EstimatorConfig::default();
    let set = generate_training_set(&model, &est.data);
    let layout = MeasurementLayout::new(&model);
    let mut sizes = vec![layout.feature_len()];
    sizes.extend(&est.hidden);
    sizes.push(layout.len());
    let mut net = Mlp::new(&sizes, est.init_seed).unwrap();
    net.fit_normalizers(&set.inputs, &set.targets);
    let batch = net.batch(&set.inputs, &set.targets).unwrap();
    let mut g = c.benchmark_group("mlp_gradient");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| net.loss_and_gradient(&batch, exec)));
    }
    g.finish();
}

criterion_group!(benches, bench_optimize, bench_sweep, bench_epoch);
criterion_main!(benches);
