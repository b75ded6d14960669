use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use xvit::attention::assoc_check;
use xvit::bench::{
    fit_scaling, read_csv, run_bench, run_model_bench, time_slack, write_csv_with_comments, write_gnuplot,
    BenchRecord, BenchSpec, Field, Mechanism, TIME_SLACK_ENV,
};
use xvit::grad::{
    evaluate, gradcheck_with, quadrant_dataset, train_toy, GradCheckOptions, QuadrantSpec, TrainConfig,
};
use xvit::model::{checkpoint_info, count_flops, count_params, load_checkpoint, save_checkpoint, ModelConfig};
use xvit::tensor::set_deterministic;
use xvit::{DType, Element, Error, Tensor};

#[derive(Debug, Parser)]
#[command(name = "xvit", version, about = "XNorm attention benchmarks, checks and toy training")]
struct Cli {
    /// Single-threaded ops with a fixed reduction order. On by default except for `bench`.
    #[arg(long, global = true, value_name = "BOOL")]
    deterministic: Option<bool>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Time and memory of attention across token counts.
    Bench(BenchArgs),
    /// Compare backprop gradients with central differences (always f64).
    Gradcheck(GradcheckArgs),
    /// Parameter and FLOP counts for a named config.
    Count(CountArgs),
    /// Difference between (QKᵀ)V and Q(KᵀV) on random inputs.
    Assoc(AssocArgs),
    /// Train on the quadrant task with SGD.
    TrainToy(TrainArgs),
    /// Evaluate a checkpoint on the quadrant task.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MechanismArg {
    Xnorm,
    Softmax,
    Both,
}

impl MechanismArg {
    fn mechanisms(self) -> Vec<Mechanism> {
        match self {
            MechanismArg::Xnorm => vec![Mechanism::Xnorm],
            MechanismArg::Softmax => vec![Mechanism::Softmax],
            MechanismArg::Both => Mechanism::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "both")]
    mechanism: MechanismArg,
    /// Strictly ascending token counts.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 192)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Skip the exponent fits (allows fewer than four sizes).
    #[arg(long)]
    no_fit: bool,
    /// Also write `<out stem>.<mechanism>.dat` files.
    #[arg(long)]
    gnuplot: bool,
    /// Also benchmark the whole model forward pass, written to `<out stem>.model.csv`.
    #[arg(long)]
    full_model: bool,
    /// Config for `--full-model`.
    #[arg(long, default_value = "nano")]
    config: String,
    /// Image sizes for `--full-model`.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    image_sizes: Vec<usize>,
    /// Treat sizes whose peak exceeds this many bytes as out of memory.
    #[arg(long)]
    memory_budget: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value = "nano")]
    config: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Scalars sampled per parameter tensor.
    #[arg(long, default_value_t = 200)]
    max_samples: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Args, Serialize)]
struct CountArgs {
    #[arg(long, default_value = "nano")]
    config: String,
    /// Defaults to the config's own image size.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Args, Serialize)]
struct AssocArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    f32: bool,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value = "nano")]
    config: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    samples: Option<usize>,
    /// Loss curve CSV (`epoch,loss,accuracy`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint of the trained parameters.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Exit 1 if the final train accuracy is below this.
    #[arg(long, default_value_t = 0.0)]
    min_acc: f64,
    /// Keep the XNorm scales fixed at 1.
    #[arg(long)]
    freeze_gamma: bool,
    /// Train in f64 instead of f32.
    #[arg(long)]
    f64: bool,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset seed; matches `train-toy --seed` to reproduce its final accuracy.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2048)]
    samples: usize,
}

/// Exit status 1: a check ran and failed. Everything else that goes wrong is 2.
#[derive(Debug)]
enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::Numeric(_) => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

#[derive(Debug, Serialize)]
struct RunManifest<'a, F: Serialize> {
    subcommand: &'a str,
    flags: &'a F,
    seed: Option<u64>,
    version: &'a str,
    dtype: DType,
    deterministic: bool,
    timestamp: String,
    /// Environment overrides in effect.
    env: Vec<(String, String)>,
}

struct Ctx {
    deterministic: bool,
}

impl Ctx {
    /// Writes `<path>.manifest.json` next to an output file.
    fn manifest<F: Serialize>(
        &self,
        path: &Path,
        subcommand: &str,
        flags: &F,
        seed: Option<u64>,
        dtype: DType,
    ) -> Outcome {
        let env = std::env::var(TIME_SLACK_ENV)
            .ok()
            .filter(|_| subcommand == "bench")
            .map(|v| vec![(TIME_SLACK_ENV.to_string(), v)])
            .unwrap_or_default();
        let m = RunManifest {
            subcommand,
            flags,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            dtype,
            deterministic: self.deterministic,
            timestamp: chrono::Utc::now().to_rfc3339(),
            env,
        };
        let mut name = path.as_os_str().to_owned();
        name.push(".manifest.json");
        fs::write(PathBuf::from(name), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

fn config(name: &str) -> Result<ModelConfig, Failure> {
    Ok(ModelConfig::named(name)?)
}

fn with_extension_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.with_extension("");
    let mut name = stem.into_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

fn cmd_bench(ctx: &Ctx, args: &BenchArgs) -> Outcome {
    if args.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::Usage(format!("--n-list must be strictly ascending, got {:?}", args.n_list)));
    }
    if !args.no_fit && args.n_list.len() < 4 {
        return Err(Failure::Usage("need ≥ 4 N values for fit (or pass --no-fit)".into()));
    }
    let slack = time_slack()?;
    let mut comments = Vec::new();
    if let Some(s) = slack {
        eprintln!("note: {TIME_SLACK_ENV}={s} widens the time-exponent thresholds");
        comments.push(format!("{TIME_SLACK_ENV}={s}"));
    }

    let mut records: Vec<BenchRecord> = Vec::new();
    for mech in args.mechanism.mechanisms() {
        let spec = BenchSpec {
            batch: args.batch,
            iters: args.iters,
            warmup: args.warmup,
            seed: args.seed,
            memory_budget: args.memory_budget,
            ..BenchSpec::new(mech, args.n_list.clone(), args.dim, args.heads)
        };
        let report = run_bench(&spec)?;
        for (r, median) in report.records.iter().zip(&report.median_ms) {
            eprintln!("{mech} N={} mean {:.3} ms median {median:.3} ms peak {} B", r.n, r.mean_ms, r.peak_bytes);
        }
        for s in &report.skipped {
            eprintln!("{mech} N={} skipped: {}", s.n, s.reason);
        }
        records.extend(report.records);
    }
    write_csv_with_comments(&records, &comments, &args.out)?;
    ctx.manifest(&args.out, "bench", args, Some(args.seed), DType::F32)?;
    if args.gnuplot {
        for path in write_gnuplot(&records, args.out.with_extension(""))? {
            ctx.manifest(&path, "bench", args, Some(args.seed), DType::F32)?;
        }
    }

    if !args.no_fit {
        // Fit what was written, so the printed exponents are reproducible from the file.
        let written = read_csv(&args.out)?;
        for mech in args.mechanism.mechanisms() {
            let rows: Vec<BenchRecord> = written.iter().filter(|r| r.mechanism == mech).cloned().collect();
            for field in [Field::MeanMs, Field::PeakBytes] {
                match fit_scaling(&rows, field) {
                    Ok(fit) => println!("{mech} {} {:.6} {:.6}", field.name(), fit.exponent, fit.r2),
                    Err(e) => eprintln!("{mech} {}: no fit: {e}", field.name()),
                }
            }
        }
    }

    if args.full_model {
        let cfg = config(&args.config)?;
        let report = run_model_bench(&cfg, &args.image_sizes, args.batch, args.iters, args.warmup, args.seed)?;
        let path = with_extension_suffix(&args.out, ".model.csv");
        write_csv_with_comments(&report.records, &[format!("full model, config {}", args.config)], &path)?;
        ctx.manifest(&path, "bench", args, Some(args.seed), DType::F32)?;
        for (r, median) in report.records.iter().zip(&report.median_ms) {
            eprintln!("model N={} mean {:.3} ms median {median:.3} ms peak {} B", r.n, r.mean_ms, r.peak_bytes);
        }
    }
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, args: &GradcheckArgs) -> Outcome {
    let cfg = config(&args.config)?;
    let opts = GradCheckOptions {
        tolerance: args.tol,
        max_samples: args.max_samples,
        ..GradCheckOptions::default()
    };
    let report = gradcheck_with(&cfg, args.seed, &opts)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    print!("{json}");
    if let Some(out) = &args.out {
        fs::write(out, &json)?;
        ctx.manifest(out, "gradcheck", args, Some(args.seed), DType::F64)?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed: worst parameter {} has relative error {:e} > {:e}",
            report.worst_param, report.max_rel_err, args.tol
        )))
    }
}

#[derive(Serialize)]
struct CountOutput {
    config: String,
    image_size: usize,
    tokens: usize,
    params: usize,
    /// Whole model with XNorm attention.
    flops_xnorm: u64,
    /// Encoder attention alone, XNorm.
    flops_xnorm_attn: u64,
    /// Encoder attention alone, if it used softmax.
    flops_softmax_attn: u64,
    breakdown: xvit::model::FlopBreakdown,
}

fn cmd_count(args: &CountArgs) -> Outcome {
    let cfg = config(&args.config)?;
    let image_size = args.image_size.unwrap_or(cfg.image_size);
    let flops = count_flops(&cfg, image_size)?;
    let out = CountOutput {
        config: args.config.clone(),
        image_size,
        tokens: flops.tokens,
        params: count_params(&cfg)?,
        flops_xnorm: flops.total,
        flops_xnorm_attn: flops.attention_xnorm,
        flops_softmax_attn: flops.attention_softmax,
        breakdown: flops,
    };
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&out)?),
        Format::Text => {
            println!("config              {} @ {}px ({} tokens)", out.config, image_size, out.tokens);
            println!("params              {}", out.params);
            println!("flops_xnorm         {}", out.flops_xnorm);
            println!("flops_xnorm_attn    {}", out.flops_xnorm_attn);
            println!("flops_softmax_attn  {}", out.flops_softmax_attn);
        }
    }
    Ok(())
}

fn assoc_diff<T: Element>(n: usize, dim: usize, seed: u64) -> Result<f64, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Tensor::<T>::uniform([n, dim], -1.0, 1.0, &mut rng);
    let (q, k, v) = (draw(), draw(), draw());
    Ok(assoc_check(&q, &k, &v)?)
}

fn cmd_assoc(args: &AssocArgs) -> Outcome {
    if args.n == 0 || args.dim == 0 {
        return Err(Failure::Usage("--n and --dim must be positive".into()));
    }
    let (diff, threshold, dtype) = if args.f32 {
        (assoc_diff::<f32>(args.n, args.dim, args.seed)?, 1e-4, "f32")
    } else {
        (assoc_diff::<f64>(args.n, args.dim, args.seed)?, 1e-9, "f64")
    };
    println!("max_abs_diff {diff:e} threshold {threshold:e} dtype {dtype}");
    if diff <= threshold {
        Ok(())
    } else {
        Err(Failure::Check(format!("association orders differ by {diff:e} > {threshold:e}")))
    }
}

fn train_typed<T: Element>(ctx: &Ctx, args: &TrainArgs, cfg: &ModelConfig, tc: &TrainConfig) -> Outcome {
    let report = train_toy::<T>(cfg, tc)?;
    if let Some(out) = &args.out {
        let mut text = String::from("epoch,loss,accuracy\n");
        for e in &report.epochs {
            text.push_str(&format!("{},{:e},{}\n", e.epoch, e.loss, e.accuracy));
        }
        fs::write(out, text)?;
        ctx.manifest(out, "train-toy", args, Some(tc.seed), T::DTYPE)?;
    }
    if let Some(path) = &args.save {
        save_checkpoint(&report.params, cfg, path)?;
        ctx.manifest(path, "train-toy", args, Some(tc.seed), T::DTYPE)?;
    }
    let last = report.final_stats();
    println!("epochs {} final_loss {:e} final_accuracy {}", report.epochs.len(), last.loss, last.accuracy);
    if last.accuracy >= args.min_acc {
        Ok(())
    } else {
        Err(Failure::Check(format!("final accuracy {} is below --min-acc {}", last.accuracy, args.min_acc)))
    }
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> Outcome {
    let cfg = config(&args.config)?;
    let d = TrainConfig::default();
    let tc = TrainConfig {
        epochs: args.epochs.unwrap_or(d.epochs),
        lr: args.lr.unwrap_or(d.lr),
        momentum: args.momentum.unwrap_or(d.momentum),
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        seed: args.seed,
        samples: args.samples.unwrap_or(d.samples),
        freeze_gamma: args.freeze_gamma,
    };
    if args.f64 {
        train_typed::<f64>(ctx, args, &cfg, &tc)
    } else {
        train_typed::<f32>(ctx, args, &cfg, &tc)
    }
}

fn eval_typed<T: Element>(args: &EvalArgs) -> Outcome {
    let (cfg, mp) = load_checkpoint::<T>(&args.checkpoint)?;
    let data = quadrant_dataset::<T>(&cfg, &QuadrantSpec { samples: args.samples, seed: args.seed })?;
    let (loss, accuracy) = evaluate(&mp, &cfg, &data)?;
    println!("loss {loss:e} accuracy {accuracy}");
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Outcome {
    match checkpoint_info(&args.checkpoint)?.1 {
        DType::F32 => eval_typed::<f32>(args),
        DType::F64 => eval_typed::<f64>(args),
    }
}

fn run(cli: Cli) -> Outcome {
    let is_bench = matches!(cli.command, Command::Bench(_));
    let ctx = Ctx { deterministic: cli.deterministic.unwrap_or(!is_bench) };
    set_deterministic(ctx.deterministic);
    match &cli.command {
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Count(a) => cmd_count(a),
        Command::Assoc(a) => cmd_assoc(a),
        Command::TrainToy(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
