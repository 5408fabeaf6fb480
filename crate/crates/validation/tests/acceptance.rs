//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr
//! (unbuffered, so it is visible without `--nocapture`) and then asserts.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use metric_regions::dataset::SplitConfig;
use metric_regions::evaluation::{symmetric_difference_error, EvalOptions};
use metric_regions::experiment::{fit_algorithm, run_experiment, AlgorithmConfig, AlgorithmSpec, ExperimentSpec};
use metric_regions::frechet::{GlobalFrechetModel, KChoice, MeanSpec};
use metric_regions::metric::{distance, MetricKind, QuantileGrid, ResponsePoint};
use metric_regions::regions::{
    empirical_quantile, HeteroscedasticRegionModel, HomoscedasticRegionModel, RegionOptions, RegionPredictor,
    TunedKnnModel,
};
use metric_regions::rng::{hash_words, stream};
use metric_regions::simulation::{generate, linear, ScenarioSpec};
use metric_regions::{Execution, LabeledDataset};
use rand::Rng;

const EXEC: Execution = Execution::Parallel;

/// Standard errors allowed around coverage targets.
const Z: f64 = 3.0;
/// Fresh evaluation pairs per replicate for coverage curves.
const CURVE_EVAL_N: usize = 20_000;
/// Paper protocol evaluation-set size for the integrated error.
const PAPER_EVAL_N: usize = 2_000;

/// Criteria run one at a time so each runtime budget measures only itself.
static SERIAL: Mutex<()> = Mutex::new(());

fn start() -> (MutexGuard<'static, ()>, Instant) {
    let guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    (guard, Instant::now())
}

fn report(id: u32, name: &str, pass: bool, budget: Duration, start: Instant, detail: &str) -> bool {
    let elapsed = start.elapsed();
    let ok = pass && elapsed < budget;
    let verdict = if ok { "PASS" } else { "FAIL" };
    let timing = format!("{:.1}s of {}s", elapsed.as_secs_f64(), budget.as_secs());
    let line = format!("[{verdict}] criterion {id}: {name} | {detail} | {timing}\n");
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    ok
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

/// Marginal coverage of the homoscedastic algorithm on Setting 4: 200
/// replicates with one fresh pair each, plus one replicate with 10⁴ pairs.
fn finite_sample_coverage(mean: MeanSpec, seed: u64) -> (bool, String) {
    const N: usize = 2000;
    const N2: f64 = 1000.0;
    const B: usize = 200;
    const BIG: usize = 10_000;
    let alphas = [0.2, 0.1, 0.05];
    let algo = AlgorithmConfig::new(AlgorithmSpec::Homoscedastic { mean });
    let spec = ScenarioSpec::Setting4;

    let hits: Vec<[bool; 3]> = EXEC
        .try_map(B, |b| {
            let s = hash_words(seed, [b as u64]);
            let data = generate(&spec, N, s)?;
            let model = fit_algorithm(&algo, &data, 0.2, s, Execution::Sequential)?;
            let fresh = generate(&spec, 1, hash_words(s, [1]))?;
            let mut out = [false; 3];
            for (o, a) in out.iter_mut().zip(alphas) {
                *o = model.predict_at(fresh.x(0), a)?.contains_ref(fresh.y(0))?;
            }
            Ok(out)
        })
        .unwrap();

    let s = hash_words(seed, [B as u64]);
    let model = fit_algorithm(&algo, &generate(&spec, N, s).unwrap(), 0.2, s, EXEC).unwrap();
    let fresh = generate(&spec, BIG, hash_words(s, [1])).unwrap();

    let mut pass = true;
    let mut detail = Vec::new();
    for (j, a) in alphas.iter().enumerate() {
        let p = 1.0 - a;
        let (lo, hi) = (p, p + 1.0 / (N2 + 1.0));
        let single = hits.iter().filter(|h| h[j]).count() as f64 / B as f64;
        let se_single = (p * (1.0 - p) / B as f64).sqrt();
        // One calibration draw: coverage given the calibration set is
        // Beta-distributed, so its variance adds to the binomial one.
        let big = (0..BIG)
            .filter(|&i| model.predict_at(fresh.x(i), *a).unwrap().contains_ref(fresh.y(i)).unwrap())
            .count() as f64
            / BIG as f64;
        let se_big = (p * (1.0 - p) * (1.0 / (N2 + 2.0) + 1.0 / BIG as f64)).sqrt();
        let ok_single = single >= lo - Z * se_single && single <= hi + Z * se_single;
        let ok_big = big >= lo - Z * se_big && big <= hi + Z * se_big;
        pass &= ok_single && ok_big;
        detail.push(format!("α={a}: fresh-pair {single:.3} (±{:.3}), 10⁴-pair {big:.4} (±{:.4})", Z * se_single, Z * se_big));
    }
    (pass, detail.join("; "))
}

#[test]
fn criterion_1_finite_sample_marginal_coverage() {
    let (_serial, start) = start();
    let (pass, detail) = finite_sample_coverage(MeanSpec::knn_auto(), 101);
    assert!(report(1, "finite-sample marginal coverage", pass, mins(2), start, &detail));
}

#[test]
fn criterion_2_coverage_with_wrong_mean() {
    let (_serial, start) = start();
    let wrong = MeanSpec::Constant {
        point: ResponsePoint::euclidean(vec![-40.0]),
    };
    let (pass, detail) = finite_sample_coverage(wrong, 202);
    assert!(report(2, "coverage with a constant wrong mean", pass, mins(2), start, &detail));
}

#[test]
fn criterion_3_integrated_error_anchor() {
    let (_serial, start) = start();
    let spec = ExperimentSpec {
        scenario: ScenarioSpec::Setting1,
        algorithm: AlgorithmConfig::new(AlgorithmSpec::tuned()),
        n: 1000,
        n_eval: PAPER_EVAL_N,
        alpha: 0.2,
        replicates: 50,
        seed: 303,
        eval: EvalOptions::default(),
    };
    let r = run_experiment(&spec, EXEC).unwrap();
    let err = r.l2_error.unwrap();
    let detail = format!(
        "mean Err {:.4} (sd {:.4}) ≤ 0.10; marginal {:.3}",
        err.mean, err.sd, r.marginal_coverage.mean
    );
    assert!(report(3, "integrated coverage error, Setting 1", err.mean <= 0.10, mins(10), start, &detail));
}

fn gaussian_study(heteroscedastic: bool, algorithm: AlgorithmSpec, p: usize, replicates: usize, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        scenario: ScenarioSpec::GaussianMulti {
            p,
            d: 1,
            heteroscedastic,
        },
        algorithm: AlgorithmConfig::new(algorithm),
        n: 5000,
        n_eval: CURVE_EVAL_N,
        alpha: 0.2,
        replicates,
        seed,
        eval: EvalOptions::default(),
    }
}

#[test]
fn criterion_4_homoscedastic_misspecification() {
    let (_serial, start) = start();
    let homo = AlgorithmSpec::Homoscedastic {
        mean: MeanSpec::knn_auto(),
    };
    let r = run_experiment(&gaussian_study(true, homo, 1, 50, 404), EXEC).unwrap();
    let exits = r
        .runs
        .iter()
        .filter(|run| {
            let c = run.coverage_curve.as_ref().unwrap();
            c.p.iter().any(|&v| v <= 0.70 || v >= 0.90)
        })
        .count();
    let (lo, hi) = r.runs.iter().fold((1.0f64, 0.0f64), |(lo, hi), run| {
        let c = run.coverage_curve.as_ref().unwrap();
        (c.p.iter().copied().fold(lo, f64::min), c.p.iter().copied().fold(hi, f64::max))
    });
    let marginal = r.marginal_coverage.mean;
    let pass = exits as f64 >= 0.8 * 50.0 && (marginal - 0.8).abs() <= 0.02;
    let detail = format!(
        "curve leaves (0.70, 0.90) in {exits}/50 runs (need ≥ 40); curve range [{lo:.3}, {hi:.3}]; mean marginal {marginal:.4}"
    );
    assert!(report(4, "homoscedastic misspecification signature", pass, mins(10), start, &detail));
}

#[test]
fn criterion_5_homoscedastic_flatness() {
    let (_serial, start) = start();
    let homo = AlgorithmSpec::Homoscedastic {
        mean: MeanSpec::knn_auto(),
    };
    let r = run_experiment(&gaussian_study(false, homo, 1, 50, 505), EXEC).unwrap();
    let devs: Vec<f64> = r.runs.iter().map(|run| run.max_deviation.unwrap()).collect();
    let flat = devs.iter().filter(|d| **d < 0.05).count();
    let worst = devs.iter().copied().fold(0.0, f64::max);
    let detail = format!("max deviation < 0.05 in {flat}/50 runs (need ≥ 40); worst {worst:.3}");
    assert!(report(5, "homoscedastic flatness", flat >= 40, mins(10), start, &detail));
}

#[test]
fn criterion_6_dimension_degradation() {
    let (_serial, start) = start();
    let dims = [1, 50, 100];
    let errs: Vec<Vec<f64>> = dims
        .iter()
        .map(|&p| {
            let r = run_experiment(&gaussian_study(true, AlgorithmSpec::tuned(), p, 20, 606), EXEC).unwrap();
            r.runs.iter().map(|run| run.mean_abs_error.unwrap()).collect()
        })
        .collect();
    let ordered = |a: usize, b: usize| (0..20).filter(|&i| errs[a][i] <= errs[b][i]).count();
    let (o1, o2) = (ordered(0, 1), ordered(1, 2));
    let means: Vec<f64> = errs.iter().map(|e| e.iter().sum::<f64>() / 20.0).collect();
    let pass = o1 > 10 && o2 > 10;
    let detail = format!(
        "mean abs error p=1 {:.4}, p=50 {:.4}, p=100 {:.4}; err(1) ≤ err(50) in {o1}/20, err(50) ≤ err(100) in {o2}/20",
        means[0], means[1], means[2]
    );
    assert!(report(6, "dimension degradation trend", pass, mins(20), start, &detail));
}

#[test]
fn criterion_7_consistency_trend() {
    let (_serial, start) = start();
    const B: usize = 50;
    let spec = ScenarioSpec::Setting1;
    let algo = AlgorithmConfig::new(AlgorithmSpec::tuned());
    let err = |n: usize, b: usize| {
        let s = hash_words(707, [b as u64]);
        let data = generate(&spec, n, s).unwrap();
        let model = fit_algorithm(&algo, &data, 0.2, s, Execution::Sequential).unwrap();
        symmetric_difference_error(&model, &spec, 0.2, 10_000, hash_words(s, [9]), Execution::Sequential).unwrap()
    };
    let pairs: Vec<(f64, f64)> = EXEC.map(B, |b| (err(500, b), err(5000, b)));
    let better = pairs.iter().filter(|(small, large)| large < small).count();
    let mean = |f: fn(&(f64, f64)) -> f64| pairs.iter().map(f).sum::<f64>() / B as f64;
    let detail = format!(
        "error decreases in {better}/{B} pairs (need ≥ 40); mean error n=500 {:.4}, n=5000 {:.4}",
        mean(|p| p.0),
        mean(|p| p.1)
    );
    assert!(report(7, "consistency trend", better >= 40, mins(10), start, &detail));
}

fn random_point<R: Rng>(kind: MetricKind, rng: &mut R) -> ResponsePoint {
    if kind.applies_to_quantiles() {
        let mut v = 0.0;
        let values = (0..101)
            .map(|_| {
                v += rng.random_range(0.0..0.3);
                v - 10.0
            })
            .collect();
        ResponsePoint::quantile(QuantileGrid::standard(), values).unwrap()
    } else {
        ResponsePoint::euclidean((0..3).map(|_| rng.random_range(-5.0..5.0)).collect())
    }
}

fn metric_axioms() -> Result<(), String> {
    let mut rng = stream(808, &[1]);
    for kind in MetricKind::ALL {
        for t in 0..10_000 {
            let (a, b, c) = (
                random_point(kind, &mut rng),
                random_point(kind, &mut rng),
                random_point(kind, &mut rng),
            );
            let d = |x: &ResponsePoint, y: &ResponsePoint| kind.distance(x, y).unwrap();
            let (ab, ba, bc, ac) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c));
            let ok = d(&a, &a) == 0.0 && ab > 0.0 && ab == ba && ac <= ab + bc + 1e-12;
            if !ok {
                return Err(format!("{} violates an axiom at triple {t}", kind.name()));
            }
        }
    }
    Ok(())
}

fn quantile_oracle() -> Result<(), String> {
    let mut rng = stream(808, &[2]);
    for t in 0..1000 {
        let n = rng.random_range(1..60);
        let discrete = t % 2 == 0;
        let values: Vec<f64> = (0..n)
            .map(|_| {
                if discrete {
                    f64::from(rng.random_range(0..5))
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let level: f64 = rng.random_range(0.001..0.999);
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let j = ((n as f64 + 1.0) * level).ceil() as usize;
        let expected = if j > n { f64::INFINITY } else { sorted[j - 1] };
        for randomized in [false, true] {
            let got = empirical_quantile(&values, level, randomized, t).map_err(|e| e.to_string())?;
            if got != expected {
                return Err(format!("array {t}: got {got}, sort oracle {expected}"));
            }
        }
    }
    Ok(())
}

fn knn_equivalence_and_monotonicity() -> Result<(), String> {
    let data = generate(&ScenarioSpec::Setting1, 600, 808).unwrap();
    let (train, test) = SplitConfig {
        train_fraction: 0.5,
        seed: 1,
    }
    .split(&data)
    .unwrap();
    let n2 = test.len();
    let mean = MeanSpec::Knn { k: KChoice::Fixed(15) };
    let queries: Vec<f64> = (0..200).map(|i| 5.0 * i as f64 / 199.0).collect();
    for randomized in [false, true] {
        let opts = RegionOptions {
            randomized_ties: Some(randomized),
            seed: 3,
            ..RegionOptions::default()
        };
        let homo = HomoscedasticRegionModel::fit(&train, test.clone(), 0.2, &mean, &opts, EXEC).unwrap();
        let full = HeteroscedasticRegionModel::fit(&train, test.clone(), 0.2, n2, &mean, &opts, EXEC).unwrap();
        for &x in &queries {
            for a in [0.2, 0.1, 0.05, 0.01] {
                let (h, k) = (homo.predict_at(&[x], a).unwrap(), full.predict_at(&[x], a).unwrap());
                if h.radius != k.radius || h.center != k.center {
                    return Err(format!("k = n₂ differs from homoscedastic at x={x}, α={a}"));
                }
            }
        }
    }
    let opts = RegionOptions::default();
    let models: Vec<Box<dyn RegionPredictor>> = vec![
        Box::new(HomoscedasticRegionModel::fit(&train, test.clone(), 0.2, &mean, &opts, EXEC).unwrap()),
        Box::new(HeteroscedasticRegionModel::fit(&train, test.clone(), 0.2, 40, &mean, &opts, EXEC).unwrap()),
        Box::new(TunedKnnModel::fit(&train, test.clone(), None, 0.2, &[5, 10, 20], &[10, 20, 40, 80], &opts, EXEC).unwrap()),
    ];
    for (m, model) in models.iter().enumerate() {
        for &x in &queries {
            let radii: Vec<f64> = [0.3, 0.2, 0.1, 0.05]
                .iter()
                .map(|&a| model.predict_at(&[x], a).unwrap().radius)
                .collect();
            if radii.windows(2).any(|w| w[1] < w[0]) {
                return Err(format!("model {m}: radii {radii:?} not monotone in α at x={x}"));
            }
        }
    }
    Ok(())
}

/// Minimises `Σᵢ ωᵢ d²_W2(y, Yᵢ)` over nondecreasing `y` restricted to a fine
/// value grid, by dynamic programming over grid coordinates.
fn grid_search_w2_mean(ys: &[Vec<f64>], w: &[f64], quad: &[f64], lo: f64, hi: f64, m: usize) -> Vec<f64> {
    let values: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let g = quad.len();
    let cost = |j: usize, v: f64| -> f64 { ys.iter().zip(w).map(|(y, wi)| wi * quad[j] * (v - y[j]).powi(2)).sum() };
    // best[i]: minimal cost of coordinates 0..=j with coordinate j at values[i] or below.
    let mut best: Vec<f64> = values.iter().map(|&v| cost(0, v)).collect();
    let mut choice = vec![vec![0usize; m]; g];
    let prefix_min = |row: &mut Vec<f64>, arg: &mut Vec<usize>| {
        for i in 1..m {
            if row[i - 1] < row[i] {
                row[i] = row[i - 1];
                arg[i] = arg[i - 1];
            }
        }
    };
    choice[0] = (0..m).collect();
    prefix_min(&mut best, &mut choice[0]);
    for j in 1..g {
        let mut row: Vec<f64> = values.iter().enumerate().map(|(i, &v)| best[i] + cost(j, v)).collect();
        let mut arg: Vec<usize> = (0..m).collect();
        prefix_min(&mut row, &mut arg);
        best = row;
        choice[j] = arg;
    }
    let mut out = vec![0.0; g];
    let mut i = m - 1;
    for j in (0..g).rev() {
        i = choice[j][i];
        out[j] = values[i];
    }
    out
}

fn w2_mean_optimality() -> Result<(), String> {
    let mut rng = stream(808, &[3]);
    let grid = std::sync::Arc::new(QuantileGrid::new(vec![0.1, 0.3, 0.5, 0.7, 0.9]).unwrap());
    for t in 0..20 {
        let n = 6;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let ys: Vec<ResponsePoint> = (0..n)
            .map(|_| {
                let slope = rng.random_range(0.0..3.0);
                let shift = rng.random_range(-1.0..1.0);
                let values = grid.levels().iter().map(|l| shift + slope * (l - 0.5).powi(3) * 8.0).collect();
                ResponsePoint::quantile(grid.clone(), values).unwrap()
            })
            .collect();
        let data = LabeledDataset::from_rows(xs, &ys).unwrap();
        let model = GlobalFrechetModel::fit(data, MetricKind::Wasserstein2).unwrap();
        let x = [rng.random_range(-0.5..1.5)];
        // Weights follow the model's own row order.
        let w = model.weights(&x).unwrap();
        let ours = model.predict(&x).unwrap();
        let ys: Vec<ResponsePoint> = (0..n)
            .map(|i| ResponsePoint::quantile(grid.clone(), model.training().y(i).values().to_vec()).unwrap())
            .collect();
        let objective = |y: &ResponsePoint| -> f64 {
            ys.iter()
                .zip(&w)
                .map(|(yi, wi)| wi * distance(MetricKind::Wasserstein2, y.as_ref(), yi.as_ref()).unwrap().powi(2))
                .sum()
        };
        let raw: Vec<Vec<f64>> = ys.iter().map(|y| y.values().to_vec()).collect();
        let lo = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min) - 2.0;
        let hi = raw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max) + 2.0;
        let searched = grid_search_w2_mean(&raw, &w, grid.weights(), lo, hi, 200_001);
        let searched = ResponsePoint::quantile(grid.clone(), searched).unwrap();
        let (fo, fs) = (objective(&ours), objective(&searched));
        if fo > fs + 1e-6 {
            return Err(format!("instance {t}: objective {fo} exceeds grid-search optimum {fs}"));
        }
    }
    Ok(())
}

#[test]
fn criterion_8_property_suites() {
    let (_serial, start) = start();
    let checks: [(&str, fn() -> Result<(), String>); 4] = [
        ("metric axioms", metric_axioms),
        ("quantile vs sort oracle", quantile_oracle),
        ("k=n₂ equivalence and α-monotonicity", knn_equivalence_and_monotonicity),
        ("W2 Fréchet mean vs grid search", w2_mean_optimality),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(()) => detail.push(format!("{name} ok")),
            Err(e) => {
                pass = false;
                detail.push(format!("{name} FAILED: {e}"));
            }
        }
    }
    assert!(report(8, "property suites", pass, mins(2), start, &detail.join("; ")));
}

#[test]
fn criterion_9_wasserstein_homoscedasticity() {
    let (_serial, start) = start();
    let g = vec![1.0, 3.0];
    let spec = ScenarioSpec::WassersteinExample {
        n_obs_per_curve: 50,
        sigma_eps: 1.0,
        g: g.clone(),
    };
    let data = generate(&spec, 5000, 909).unwrap();
    let model = GlobalFrechetModel::fit(data.clone(), MetricKind::Wasserstein2).unwrap();
    let d: Vec<f64> = EXEC.map(data.len(), |i| {
        let m = model.predict(data.x(i)).unwrap();
        distance(MetricKind::Wasserstein2, data.y(i), m.as_ref()).unwrap()
    });
    let s: Vec<f64> = (0..data.len()).map(|i| linear(&g, data.x(i))).collect();
    let corr = pearson(&d, &s);
    let detail = format!("corr(d_W2(Y, m̂(X)), g(X)) = {corr:.4}, need |·| ≤ 0.05");
    assert!(report(9, "Wasserstein homoscedasticity", corr.abs() <= 0.05, mins(5), start, &detail));
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
