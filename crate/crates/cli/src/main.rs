mod config;
mod error;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metric_regions::evaluation::{evaluate, EvalOptions};
use metric_regions::experiment::{fit_algorithm, run_experiment, run_replicate, ExperimentSpec};
use metric_regions::simulation::generate;
use metric_regions::{Execution, FittedModel, MetricKind, RegionPredictor};
use serde::{Deserialize, Serialize};

use config::{check_alpha, check_fractions, section, Loaded, CONFIG_HELP};
use error::{CliError, CliResult};

const MODEL_FORMAT: &str = "metric-regions-model";
const MODEL_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "metric-regions",
    version,
    about = "Conformal prediction regions for metric-space responses",
    after_long_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from [scenario] and write it as CSV.
    Simulate(Common),
    /// Fit [algorithm] on a CSV dataset and write a model JSON file.
    Fit(Common),
    /// Predict regions for the query points of a CSV file.
    Predict(Common),
    /// Coverage report for one model (or one simulated fit).
    Evaluate(Common),
    /// Replicated simulation study.
    Replicate(Common),
}

#[derive(Args)]
struct Common {
    /// Config file (TOML); see --help for keys.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the command's output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Ctx {
    cfg: Loaded,
    seed: u64,
    exec: Execution,
    out: Option<PathBuf>,
}

impl Ctx {
    fn new(c: &Common) -> CliResult<Self> {
        let cfg = Loaded::read(&c.config)?;
        let threads = c.threads.or(cfg.config.threads);
        if threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        #[cfg(feature = "parallel")]
        if let Some(t) = threads {
            // Fails only if a pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        Ok(Self {
            seed: c.seed.or(cfg.config.seed).unwrap_or(0),
            exec: if threads == Some(1) {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
            out: c.out.clone(),
            cfg,
        })
    }

    fn output(&self, section: Option<&Path>, what: &str) -> CliResult<PathBuf> {
        self.cfg.output(self.out.as_deref(), section, what)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    algorithm: String,
    seed: u64,
    model: FittedModel,
}

fn read_model(path: &Path) -> CliResult<FittedModel> {
    let raw: serde_json::Value = io::read_json(path)?;
    let format = raw.get("format").and_then(|v| v.as_str());
    let version = raw.get("version").and_then(|v| v.as_u64());
    if format != Some(MODEL_FORMAT) {
        return Err(CliError::Data(format!("{}: not a {MODEL_FORMAT} file", path.display())));
    }
    if version != Some(u64::from(MODEL_VERSION)) {
        return Err(CliError::Data(format!(
            "{}: model version {version:?} is not supported (expected {MODEL_VERSION})",
            path.display()
        )));
    }
    let file: ModelFile =
        serde_json::from_value(raw).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(file.model)
}

fn simulate(ctx: &Ctx) -> CliResult<()> {
    let sec = section(&ctx.cfg.config.simulate, "simulate")?;
    let data = generate(ctx.cfg.scenario()?, sec.n, ctx.seed)?;
    io::write_dataset(&ctx.output(sec.out.as_deref(), "simulate")?, &data)
}

fn fit(ctx: &Ctx) -> CliResult<()> {
    let sec = section(&ctx.cfg.config.fit, "fit")?;
    let algorithm = ctx.cfg.algorithm()?;
    check_fractions(algorithm)?;
    let alpha = check_alpha(sec.alpha)?;
    let out = ctx.output(sec.out.as_deref(), "fit")?;
    let data = io::read_dataset(&ctx.cfg.resolve(&sec.data))?;
    let model = fit_algorithm(algorithm, &data, alpha, ctx.seed, ctx.exec)?;
    io::write_json(
        &out,
        &ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            algorithm: model.algorithm_name().into(),
            seed: ctx.seed,
            model,
        },
    )
}

#[derive(Serialize)]
struct RegionRecord {
    query: usize,
    x: Vec<f64>,
    alpha: f64,
    center: Vec<f64>,
    /// `null` for the whole space.
    radius: Option<f64>,
    region_metric: MetricKind,
}

#[derive(Serialize)]
struct RegionsFile {
    algorithm: String,
    regions: Vec<RegionRecord>,
}

fn predict(ctx: &Ctx) -> CliResult<()> {
    let sec = section(&ctx.cfg.config.predict, "predict")?;
    let out = ctx.output(sec.out.as_deref(), "predict")?;
    let model = read_model(&ctx.cfg.resolve(&sec.model))?;
    let alphas = if sec.alphas.is_empty() {
        vec![model.alpha()]
    } else {
        sec.alphas.iter().map(|&a| check_alpha(a)).collect::<CliResult<_>>()?
    };
    let queries = io::read_predictors(&ctx.cfg.resolve(&sec.queries), model.predictor_dim())?;
    let per_query = ctx.exec.try_map(queries.len(), |i| {
        alphas
            .iter()
            .map(|&alpha| {
                let r = model.predict_at(&queries[i], alpha)?;
                Ok(RegionRecord {
                    query: i,
                    x: queries[i].clone(),
                    alpha,
                    center: r.center.values().to_vec(),
                    radius: r.radius.is_finite().then_some(r.radius),
                    region_metric: r.region_metric,
                })
            })
            .collect::<metric_regions::Result<Vec<_>>>()
    })?;
    io::write_json(
        &out,
        &RegionsFile {
            algorithm: model.algorithm_name().into(),
            regions: per_query.into_iter().flatten().collect(),
        },
    )
}

fn eval_options(ctx: &Ctx, mc_draws: usize, grid_points: usize) -> EvalOptions {
    EvalOptions {
        grid_points,
        mc_draws,
        seed: ctx.seed,
        ..EvalOptions::default()
    }
}

fn experiment(ctx: &Ctx, n: usize, n_eval: usize, alpha: f64, replicates: usize, eval: EvalOptions) -> CliResult<ExperimentSpec> {
    let algorithm = ctx.cfg.algorithm()?;
    check_fractions(algorithm)?;
    Ok(ExperimentSpec {
        scenario: ctx.cfg.scenario()?.clone(),
        algorithm: algorithm.clone(),
        n,
        n_eval,
        alpha: check_alpha(alpha)?,
        replicates,
        seed: ctx.seed,
        eval,
    })
}

fn need<T>(v: Option<T>, key: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Config(format!("[evaluate] needs `{key}`")))
}

fn evaluate_cmd(ctx: &Ctx) -> CliResult<()> {
    let sec = section(&ctx.cfg.config.evaluate, "evaluate")?;
    let out = ctx.output(sec.out.as_deref(), "evaluate")?;
    let options = eval_options(ctx, sec.mc_draws, sec.grid_points);
    let report = match (&sec.model, &sec.data) {
        (Some(model), Some(data)) => {
            let model = read_model(&ctx.cfg.resolve(model))?;
            let data = io::read_dataset(&ctx.cfg.resolve(data))?;
            let scenario = ctx.cfg.config.scenario.as_ref();
            evaluate(&model, &data, scenario, &options, ctx.exec)?
        }
        (None, None) => {
            let spec = experiment(
                ctx,
                need(sec.n, "n")?,
                need(sec.n_eval, "n_eval")?,
                need(sec.alpha, "alpha")?,
                1,
                options,
            )?;
            run_replicate(&spec, 0, ctx.exec)?
        }
        _ => return Err(CliError::Config("[evaluate] needs both `model` and `data`, or neither".into())),
    };
    io::write_json(&out, &report)?;
    if let (Some(curve), Some(c)) = (&sec.curve, &report.coverage_curve) {
        io::write_curves(&ctx.cfg.resolve(curve), [("replicate_0".to_string(), c)])?;
    }
    Ok(())
}

fn replicate(ctx: &Ctx) -> CliResult<()> {
    let sec = section(&ctx.cfg.config.replicate, "replicate")?;
    let out = ctx.output(sec.out.as_deref(), "replicate")?;
    if sec.replicates == 0 {
        return Err(CliError::Config("replicates must be at least 1".into()));
    }
    let options = eval_options(ctx, sec.mc_draws, sec.grid_points);
    let spec = experiment(ctx, sec.n, sec.n_eval, sec.alpha, sec.replicates, options)?;
    let report = run_experiment(&spec, ctx.exec)?;
    io::write_json(&out, &report)?;
    if let Some(curve) = &sec.curve {
        let mean = report.mean_curve.iter().map(|c| ("mean".to_string(), c));
        let runs = report
            .runs
            .iter()
            .enumerate()
            .filter_map(|(b, r)| r.coverage_curve.as_ref().map(|c| (format!("replicate_{b}"), c)));
        io::write_curves(&ctx.cfg.resolve(curve), mean.chain(runs))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let (common, f): (&Common, fn(&Ctx) -> CliResult<()>) = match &cli.command {
        Command::Simulate(c) => (c, simulate),
        Command::Fit(c) => (c, fit),
        Command::Predict(c) => (c, predict),
        Command::Evaluate(c) => (c, evaluate_cmd),
        Command::Replicate(c) => (c, replicate),
    };
    f(&Ctx::new(common)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metric-regions: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
