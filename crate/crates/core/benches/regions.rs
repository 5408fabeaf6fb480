use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metric_regions::evaluation::EvalOptions;
use metric_regions::experiment::{fit_algorithm, run_experiment, AlgorithmConfig, AlgorithmSpec, ExperimentSpec};
use metric_regions::simulation::{generate, ScenarioSpec};
use metric_regions::{Execution, RegionPredictor};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn tuned() -> AlgorithmConfig {
    AlgorithmConfig::new(AlgorithmSpec::HeteroTuned {
        mean_k_grid: vec![5, 10, 20, 40],
        radius_k_grid: vec![20, 40, 80],
        held_out_tune: false,
    })
}

fn batch_predict(c: &mut Criterion) {
    let data = generate(&ScenarioSpec::Setting1, 4000, 1).unwrap();
    let model = fit_algorithm(&tuned(), &data, 0.2, 1, Execution::Parallel).unwrap();
    let queries: Vec<Vec<f64>> = (0..2000).map(|i| vec![5.0 * i as f64 / 2000.0]).collect();
    let mut group = c.benchmark_group("predict_2000");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.try_map(queries.len(), |i| model.predict(black_box(&queries[i]))).unwrap())
        });
    }
    group.finish();
}

fn fit(c: &mut Criterion) {
    let data = generate(&ScenarioSpec::Setting1, 4000, 2).unwrap();
    let mut group = c.benchmark_group("fit_tuned_4000");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_algorithm(&tuned(), black_box(&data), 0.2, 2, exec).unwrap())
        });
    }
    group.finish();
}

fn replicates(c: &mut Criterion) {
    let spec = ExperimentSpec {
        scenario: ScenarioSpec::Setting1,
        algorithm: tuned(),
        n: 1000,
        n_eval: 1000,
        alpha: 0.2,
        replicates: 8,
        seed: 3,
        eval: EvalOptions::default(),
    };
    let mut group = c.benchmark_group("experiment_8x1000");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_experiment(black_box(&spec), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_predict, fit, replicates);
criterion_main!(benches);
