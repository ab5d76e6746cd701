//! `taml`: generate benchmarks, meta-train, evaluate checkpoints and run the
//! Monte-Carlo theory suites.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric abort,
//! 4 failed theory check.

mod theory;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use taml::metatrain::{evaluate, load_checkpoint, save_checkpoint, MetricsRecord, OptimizerName, TrainConfig, Trainer};
use taml::model::HeadConfig;
use taml::worldgen::{make_benchmark, Benchmark, BenchmarkSpec, TaskLayout};
use taml::ENGINE_VERSION;

#[derive(Debug)]
enum Failure {
    Input(String),
    Numeric(String),
    Theory(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Theory(_) => 4,
        }
    }
}

impl From<taml::Error> for Failure {
    fn from(e: taml::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn input_err(context: &str, e: impl std::fmt::Display) -> Failure {
    Failure::Input(format!("{context}: {e}"))
}

#[derive(Parser)]
#[command(name = "taml", version, about = "Task augmentation for cross-domain few-shot meta-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain benchmark.
    Gen(GenArgs),
    /// Meta-train on the source domains of a benchmark.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on one domain.
    Eval(EvalArgs),
    /// Run a Monte-Carlo verification suite.
    Theory(theory::TheoryArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON benchmark spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of source domains.
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long)]
    targets: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Cosine,
    Prototypical,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with optional `benchmark` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark file from `taml gen`; without it the benchmark is generated
    /// from the config's `benchmark` section.
    #[arg(long)]
    bench: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Tasks mixed per interpolation; resets gamma to one value per task.
    #[arg(long)]
    m: Option<usize>,
    /// Dirichlet concentration shared by all mixed tasks.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long, allow_negative_numbers = true)]
    fm_init: Option<f64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    style_probe_tasks: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    no_fm: bool,
    #[arg(long)]
    no_mtst: bool,
    #[arg(long)]
    no_mti: bool,
    #[arg(long)]
    stopgrad_stats: bool,
    /// Transfer every task onto its own style and skip the interpolated task.
    #[arg(long)]
    identity_transfer: bool,
    #[arg(long)]
    record_timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Benchmark to draw episodes from; defaults to the one stored in the
    /// checkpoint.
    #[arg(long)]
    bench: Option<PathBuf>,
    /// Domain id; defaults to the first target domain.
    #[arg(long)]
    domain: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    benchmark: BenchmarkSpec,
    train: TrainConfig,
}

/// Fully resolved inputs of a training run.
#[derive(Clone, Serialize)]
struct RunConfig {
    engine: String,
    /// Benchmark file, or `None` when generated from `benchmark_spec`.
    bench_path: Option<PathBuf>,
    benchmark_spec: BenchmarkSpec,
    train: TrainConfig,
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    #[serde(flatten)]
    record: &'a MetricsRecord,
    provenance: &'a RunConfig,
}

#[derive(Serialize)]
struct EvalReport {
    engine: String,
    checkpoint: PathBuf,
    checkpoint_iteration: u64,
    train: TrainConfig,
    benchmark_spec: BenchmarkSpec,
    domain_id: usize,
    episodes: usize,
    way: usize,
    shot: usize,
    query: usize,
    seed: u64,
    accuracy: f64,
    ci_half_width: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| input_err(&path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| input_err(&path.display().to_string(), e))
}

fn read_bench(path: &Path) -> CliResult<Benchmark> {
    let text = fs::read_to_string(path).map_err(|e| input_err(&path.display().to_string(), e))?;
    Benchmark::from_json(&text).map_err(|e| input_err(&path.display().to_string(), e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| input_err(&path.display().to_string(), e))
}

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let mut spec: BenchmarkSpec = match &args.config {
        Some(p) => read_json(p)?,
        None => BenchmarkSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.domains {
        spec.n_source_domains = v;
    }
    if let Some(v) = args.targets {
        spec.n_target_domains = v;
    }
    if let Some(v) = args.dim {
        spec.dim = v;
    }
    if let Some(v) = args.classes {
        spec.classes_per_domain = v;
    }
    let bench = make_benchmark(&spec)?;
    write_file(&args.out, &bench.to_json()?)?;
    println!("wrote {} ({} source, {} target domains)", args.out.display(), bench.source.len(), bench.target.len());
    Ok(())
}

fn resolve_train(args: &TrainArgs, mut c: TrainConfig) -> TrainConfig {
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.iterations {
        c.iterations = v;
    }
    if let Some(v) = args.lr {
        c.lr = v;
    }
    if let Some(v) = args.optimizer {
        c.optimizer = match v {
            OptimizerArg::Adam => OptimizerName::Adam,
            OptimizerArg::Sgd => OptimizerName::Sgd,
        };
    }
    if args.m.is_some() || args.gamma.is_some() {
        let m = args.m.unwrap_or(c.m);
        let g = args.gamma.or(c.gamma.first().copied()).unwrap_or(taml::augment::DEFAULT_GAMMA);
        c.m = m;
        c.gamma = vec![g; m];
    }
    if let Some(v) = args.way {
        c.n_way = v;
    }
    if let Some(v) = args.shot {
        c.k_shot = v;
    }
    if let Some(v) = args.query {
        c.k_query = v;
    }
    if let Some(h) = args.head {
        c.head = match h {
            HeadArg::Cosine => HeadConfig::matching_cosine(),
            HeadArg::Prototypical => HeadConfig::prototypical(),
        };
    }
    if let Some(v) = args.fm_init {
        c.fm_init = v;
    }
    if let Some(v) = args.eval_episodes {
        c.eval_episodes = v;
    }
    if let Some(v) = args.eval_interval {
        c.eval_interval = v;
    }
    if let Some(v) = args.style_probe_tasks {
        c.style_probe_tasks = v;
    }
    if let Some(v) = args.pretrain_epochs {
        c.pretrain.epochs = v;
    }
    c.fm_enabled &= !args.no_fm;
    c.mtst &= !args.no_mtst;
    c.mti &= !args.no_mti;
    c.stopgrad_stats |= args.stopgrad_stats;
    c.identity_transfer |= args.identity_transfer;
    c.record_timing |= args.record_timing;
    c
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let file: ConfigFile = match &args.config {
        Some(p) => read_json(p)?,
        None => ConfigFile::default(),
    };
    let train = resolve_train(args, file.train);
    train.validate()?;
    let bench = match &args.bench {
        Some(p) => read_bench(p)?,
        None => make_benchmark(&file.benchmark)?,
    };
    let run = RunConfig {
        engine: ENGINE_VERSION.to_string(),
        bench_path: args.bench.clone(),
        benchmark_spec: bench.spec.clone(),
        train: train.clone(),
        out_dir: args.out_dir.clone(),
    };
    fs::create_dir_all(&args.out_dir).map_err(|e| input_err(&args.out_dir.display().to_string(), e))?;
    let run_json = serde_json::to_string_pretty(&run).map_err(|e| input_err("run config", e))?;
    write_file(&args.out_dir.join("run_config.json"), &run_json)?;

    let metrics_path = args.out_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| input_err(&metrics_path.display().to_string(), e))?;
    let mut trainer = Trainer::new(&bench, train)?;
    let mut last = None;
    trainer.run(|rec| {
        let line = serde_json::to_string(&MetricsLine {
            record: rec,
            provenance: &run,
        })?;
        writeln!(metrics, "{line}")?;
        last = Some(rec.clone());
        Ok(())
    })?;
    save_checkpoint(&args.out_dir.join("checkpoint.taml"), &trainer.checkpoint())?;
    match last {
        Some(r) => {
            for t in &r.target {
                println!(
                    "iteration {}: domain {} accuracy {:.4} ± {:.4}",
                    r.iteration, t.domain_id, t.accuracy, t.ci_half_width
                );
            }
        }
        None => println!("no iterations run"),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(|e| input_err(&args.checkpoint.display().to_string(), e))?;
    let bench = match &args.bench {
        Some(p) => read_bench(p)?,
        None => ckpt.benchmark.clone(),
    };
    let model = ckpt.config.model_config(bench.dim())?;
    let domain = match args.domain {
        Some(id) => bench.domain(id)?,
        None => bench
            .target
            .first()
            .ok_or_else(|| Failure::Input("benchmark has no target domain".into()))?,
    };
    let layout = TaskLayout {
        n_way: args.way,
        k_shot: args.shot,
        k_query: args.query,
    };
    if args.episodes == 0 {
        return Err(Failure::Input("--episodes must be >= 1".into()));
    }
    let r = evaluate(&ckpt.params, &model, &bench, domain, layout, args.episodes, args.seed)?;
    let report = EvalReport {
        engine: ENGINE_VERSION.to_string(),
        checkpoint: args.checkpoint.clone(),
        checkpoint_iteration: ckpt.iteration,
        train: ckpt.config.clone(),
        benchmark_spec: bench.spec.clone(),
        domain_id: domain.domain_id,
        episodes: args.episodes,
        way: args.way,
        shot: args.shot,
        query: args.query,
        seed: args.seed,
        accuracy: r.accuracy,
        ci_half_width: r.ci_half_width,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| input_err("report", e))?;
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Theory(a) => theory::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Input(m) => eprintln!("error: {m}"),
                Failure::Numeric(m) => eprintln!("numeric abort: {m}"),
                Failure::Theory(m) => eprintln!("theory check failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
