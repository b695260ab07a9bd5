//! `flora`: verify, inspect, train, and benchmark fused low-rank adapters
//! in a toy Llama-shaped transformer.
//!
//! Exit status: 0 on success, 1 when a verification check fails or a run
//! aborts, 2 on configuration/usage errors.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flora::adapters::{AdapterSpec, Nonlinearity, Variant};
use flora::bench::{emit_report, run_bench, standard_specs};
use flora::config::{parse_token_list, RunConfig};
use flora::error::Error;
use flora::model::checkpoint;
use flora::model::{param_count, ModelConfig, TransformerModel};
use flora::tensor::DType;
use flora::train::sweep::{default_learning_rates, lr_sweep};
use flora::train::{evaluate, train_adapters, OptimizerKind, SyntheticTask, TaskKind, TrainConfig};
use flora::verify::{self, param_table};

#[derive(Parser)]
#[command(
    name = "flora",
    version,
    about = "Fused forward-backward low-rank adapters: verification, training, benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Adapter variant (none, lora, pf_lora, ffa, ffba_ab, ffba_aorb, ffba_qg_add, fpa)
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Adapter rank
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// Run seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (env FLORA_OUT also applies)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Element precision
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Model shape preset: toy, micro, bench, llama1b, llama3b
    #[arg(long, global = true)]
    shape: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suites (equivalence, gradients, base
    /// preservation, frozen weights, parameter table, canary)
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Random trials per equivalence cell
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Print trainable-parameter counts; optionally emit the full table
    Params {
        #[command(flatten)]
        common: CommonArgs,
        /// Write param_table.md and param_table.csv under --out
        #[arg(long)]
        table: bool,
    },
    /// Fine-tune adapters on a synthetic task
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_tokens: Option<usize>,
        /// Optimizer: sgd or adam
        #[arg(long)]
        optimizer: Option<String>,
    },
    /// 7-point learning-rate sweep with validation selection
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        task: Option<String>,
        /// Comma-separated learning rates (default: 7 log-spaced)
        #[arg(long)]
        lrs: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_tokens: Option<usize>,
        #[arg(long)]
        optimizer: Option<String>,
        /// Parallel workers (env FLORA_JOBS also applies)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate a checkpoint on a task split
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<String>,
        /// Split: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Greedy decoding from a checkpoint or a fresh seeded model
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated prompt token ids
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        gen_len: usize,
    },
    /// Latency and op-count benchmark across adapter variants
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        prompt_len: Option<usize>,
        #[arg(long)]
        gen_len: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Comma-separated variant list (default: the full table)
        #[arg(long)]
        variants: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::ShapeMismatch { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Resolved inputs shared by the subcommands.
struct Ctx {
    run: RunConfig,
    seed: u64,
    out: Option<PathBuf>,
    precision: Precision,
}

fn resolve(common: &CommonArgs, default_shape: &str) -> Result<Ctx, Error> {
    let mut run = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let shape = common.shape.as_deref().unwrap_or(default_shape);
            RunConfig::for_model(ModelConfig::shape_preset(shape)?)
        }
    };
    if common.config.is_some() {
        if let Some(shape) = &common.shape {
            run.model = ModelConfig::shape_preset(shape)?.with_adapter(run.model.adapter.clone());
        }
    }
    if let Some(v) = &common.variant {
        let variant = Variant::from_str(v)?;
        let rank = common
            .rank
            .or(run.adapter.as_ref().map(|a| a.rank))
            .unwrap_or(default_rank(&run.model));
        let adapter = if variant == Variant::None {
            AdapterSpec::none()
        } else {
            AdapterSpec::new(variant, rank)
        };
        run.adapter = Some(adapter);
    } else if let Some(rank) = common.rank {
        if let Some(adapter) = &mut run.adapter {
            adapter.rank = rank;
        } else if run.model.adapter.variant != Variant::None {
            run.model.adapter.rank = rank;
        }
    }
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os("FLORA_OUT").map(PathBuf::from))
        .or_else(|| run.output_dir.clone());
    let precision = common.precision.unwrap_or(Precision::F32);
    run.validate()?;
    Ok(Ctx { seed: run.seed, run, out, precision })
}

fn default_rank(model: &ModelConfig) -> usize {
    if model.d_model >= 512 {
        32
    } else if model.d_model >= 64 {
        8
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Verify { common, trials } => cmd_verify(common, trials),
        Command::Params { common, table } => cmd_params(common, table),
        Command::Train { common, task, lr, epochs, batch_tokens, optimizer } => {
            cmd_train(common, task, lr, epochs, batch_tokens, optimizer)
        }
        Command::Sweep { common, task, lrs, epochs, batch_tokens, optimizer, jobs } => {
            cmd_sweep(common, task, lrs, epochs, batch_tokens, optimizer, jobs)
        }
        Command::Eval { common, checkpoint, task, split } => {
            cmd_eval(common, checkpoint, task, split)
        }
        Command::Generate { common, checkpoint, prompt, gen_len } => {
            cmd_generate(common, checkpoint, prompt, gen_len)
        }
        Command::Bench { common, prompt_len, gen_len, repeats, variants } => {
            cmd_bench(common, prompt_len, gen_len, repeats, variants)
        }
    }
}

fn cmd_verify(common: CommonArgs, trials: usize) -> Result<ExitCode, Error> {
    if common.precision == Some(Precision::F32) {
        return Err(Error::Config(
            "the verification suites are defined at 64-bit precision; use --precision f64".into(),
        ));
    }
    let ctx = resolve(&common, "toy")?;
    let variant_filter = common
        .variant
        .as_deref()
        .map(Variant::from_str)
        .transpose()?;
    let report = verify::run_all(ctx.seed, variant_filter, trials)?;
    print!("{}", report.summary());
    if let Some(out) = &ctx.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(
            out.join("verify_report.json"),
            serde_json::to_vec_pretty(&report.to_json())?,
        )?;
        std::fs::write(out.join("verify_summary.txt"), report.summary())?;
        ctx.run.write_resolved(out)?;
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_params(common: CommonArgs, table: bool) -> Result<ExitCode, Error> {
    let ctx = resolve(&common, "toy")?;
    let model = ctx.run.resolved_model()?;
    let pc = param_count(&model);
    println!("{}", verify::format_grouped(pc.trainable));
    println!(
        "{} trainable ({}) of {} total parameters — variant {}, rank {}",
        verify::format_grouped(pc.trainable),
        verify::human_millions(pc.trainable),
        verify::format_grouped(pc.total),
        model.adapter.variant,
        model.adapter.rank,
    );
    if table {
        let rank = if model.adapter.variant == Variant::None { 32 } else { model.adapter.rank };
        let t = param_table(&[
            ("toy".into(), ModelConfig::toy(), 8),
            ("llama1b".into(), ModelConfig::llama1b_shape(), rank),
            ("llama3b".into(), ModelConfig::llama3b_shape(), rank),
        ]);
        match &ctx.out {
            Some(out) => {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("param_table.md"), t.to_markdown())?;
                std::fs::write(out.join("param_table.csv"), t.to_csv())?;
                ctx.run.write_resolved(out)?;
                println!("table written to {}", out.display());
            }
            None => print!("{}", t.to_markdown()),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn build_train_config(
    ctx: &Ctx,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_tokens: Option<usize>,
    optimizer: Option<String>,
) -> Result<TrainConfig, Error> {
    let mut tc = ctx
        .run
        .train
        .clone()
        .unwrap_or_else(|| TrainConfig::new(1e-3, 10, ctx.seed));
    if let Some(lr) = lr {
        tc.learning_rate = lr;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    if let Some(b) = batch_tokens {
        tc.batch_tokens = b;
    }
    if let Some(opt) = optimizer {
        tc.optimizer = match opt.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::adam(),
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
    }
    tc.seed = ctx.seed;
    tc.validate()?;
    Ok(tc)
}

fn resolve_task(ctx: &Ctx, task_flag: Option<String>) -> Result<SyntheticTask, Error> {
    let mut task = ctx.run.task_or_default();
    if let Some(kind) = task_flag {
        task.kind = TaskKind::from_str(&kind)?;
    }
    task.validate(ctx.run.model.vocab_size)?;
    Ok(task)
}

fn cmd_train(
    common: CommonArgs,
    task: Option<String>,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_tokens: Option<usize>,
    optimizer: Option<String>,
) -> Result<ExitCode, Error> {
    let ctx = resolve(&common, "toy")?;
    let out = ctx.out.clone().ok_or_else(|| {
        Error::Config("train writes checkpoints; pass --out or set FLORA_OUT".into())
    })?;
    let model_cfg = ctx.run.resolved_model()?;
    if model_cfg.adapter.variant == Variant::None {
        return Err(Error::Config("train requires an adapter variant (--variant)".into()));
    }
    let tc = build_train_config(&ctx, lr, epochs, batch_tokens, optimizer)?;
    let task = resolve_task(&ctx, task)?;
    let dataset = task.generate()?;
    ctx.run.write_resolved(&out)?;

    let result = match ctx.precision {
        Precision::F32 => {
            let mut model = TransformerModel::<f32>::new(model_cfg, ctx.seed)?;
            train_adapters(&mut model, &dataset, &tc, Some(&out))?
        }
        Precision::F64 => {
            let mut model = TransformerModel::<f64>::new(model_cfg, ctx.seed)?;
            train_adapters(&mut model, &dataset, &tc, Some(&out))?
        }
    };
    for e in &result.epochs {
        println!(
            "epoch {:2}  train_loss {:.4}  val_acc {:.4}  val_exact {:.4}",
            e.epoch, e.train_loss, e.val.token_accuracy, e.val.sequence_exact_match
        );
    }
    if let Some(msg) = &result.aborted {
        eprintln!("aborted: {msg}");
        return Ok(ExitCode::from(1));
    }
    println!("run artifacts in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    common: CommonArgs,
    task: Option<String>,
    lrs: Option<String>,
    epochs: Option<usize>,
    batch_tokens: Option<usize>,
    optimizer: Option<String>,
    jobs: Option<usize>,
) -> Result<ExitCode, Error> {
    let ctx = resolve(&common, "toy")?;
    let out = ctx.out.clone().ok_or_else(|| {
        Error::Config("sweep writes a result grid; pass --out or set FLORA_OUT".into())
    })?;
    let model_cfg = ctx.run.resolved_model()?;
    if model_cfg.adapter.variant == Variant::None {
        return Err(Error::Config("sweep requires an adapter variant (--variant)".into()));
    }
    let tc = build_train_config(&ctx, None, epochs, batch_tokens, optimizer)?;
    let rates: Vec<f64> = match &lrs {
        Some(text) => text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad --lrs list: {e}")))?,
        None => default_learning_rates(),
    };
    let jobs = jobs
        .or_else(|| std::env::var("FLORA_JOBS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let task = resolve_task(&ctx, task)?;
    let dataset = task.generate()?;
    ctx.run.write_resolved(&out)?;

    let outcome = match ctx.precision {
        Precision::F32 => lr_sweep::<f32>(&model_cfg, &dataset, &tc, &rates, Some(&out), jobs)?,
        Precision::F64 => lr_sweep::<f64>(&model_cfg, &dataset, &tc, &rates, Some(&out), jobs)?,
    };
    println!(
        "best: lr={} epoch={} val_acc={:.4} ({} grid cells, {} diverged)",
        outcome.best.lr,
        outcome.best.epoch,
        outcome.best.val.token_accuracy,
        outcome.grid.len(),
        outcome.diverged.len()
    );
    if let Some(path) = &outcome.best.checkpoint {
        println!("selected checkpoint: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    common: CommonArgs,
    ckpt: PathBuf,
    task: Option<String>,
    split: String,
) -> Result<ExitCode, Error> {
    let ctx = resolve(&common, "toy")?;
    let task = resolve_task(&ctx, task)?;
    let dataset = task.generate()?;
    let examples = match split.as_str() {
        "train" => &dataset.train,
        "val" => &dataset.val,
        "test" => &dataset.test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let (_, dtype) = checkpoint::peek(&ckpt)?;
    let metrics = match dtype {
        DType::F32 => evaluate(&checkpoint::load_model::<f32>(&ckpt)?, examples)?,
        DType::F64 => evaluate(&checkpoint::load_model::<f64>(&ckpt)?, examples)?,
    };
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    if let Some(out) = &ctx.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("eval.json"), serde_json::to_vec_pretty(&metrics)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(
    common: CommonArgs,
    ckpt: Option<PathBuf>,
    prompt: String,
    gen_len: usize,
) -> Result<ExitCode, Error> {
    let ctx = resolve(&common, "toy")?;
    let tokens = parse_token_list(&prompt)?;
    let generated = match &ckpt {
        Some(path) => {
            let (_, dtype) = checkpoint::peek(path)?;
            match dtype {
                DType::F32 => checkpoint::load_model::<f32>(path)?.generate(&tokens, gen_len)?,
                DType::F64 => checkpoint::load_model::<f64>(path)?.generate(&tokens, gen_len)?,
            }
        }
        None => {
            let cfg = ctx.run.resolved_model()?;
            match ctx.precision {
                Precision::F32 => {
                    TransformerModel::<f32>::new(cfg, ctx.seed)?.generate(&tokens, gen_len)?
                }
                Precision::F64 => {
                    TransformerModel::<f64>::new(cfg, ctx.seed)?.generate(&tokens, gen_len)?
                }
            }
        }
    };
    println!(
        "{}",
        generated.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(
    common: CommonArgs,
    prompt_len: Option<usize>,
    gen_len: Option<usize>,
    repeats: Option<usize>,
    variants: Option<String>,
) -> Result<ExitCode, Error> {
    let ctx = resolve(&common, "bench")?;
    let mut params = ctx.run.bench.unwrap_or_default();
    if let Some(p) = prompt_len {
        params.prompt_len = p;
    }
    if let Some(g) = gen_len {
        params.gen_len = g;
    }
    if let Some(r) = repeats {
        params.repeats = r;
    }
    params.seed = ctx.seed;
    params.validate()?;

    let mut shape = ctx.run.resolved_model()?;
    let rank = if shape.adapter.variant == Variant::None {
        common.rank.unwrap_or(32)
    } else {
        shape.adapter.rank
    };
    shape.adapter = AdapterSpec::none();

    let specs = match &variants {
        Some(list) => {
            let mut specs = Vec::new();
            for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if name == "base" {
                    specs.push(("base".to_string(), AdapterSpec::none()));
                } else if name == "ffba_relu_aorb" {
                    specs.push((
                        name.to_string(),
                        AdapterSpec::new(Variant::FfbaAorb, rank)
                            .with_nonlinearity(Nonlinearity::Relu),
                    ));
                } else {
                    specs.push((name.to_string(), AdapterSpec::new(Variant::from_str(name)?, rank)));
                }
            }
            specs
        }
        None => standard_specs(rank),
    };
    // shapes must tile for every requested variant
    for (label, spec) in &specs {
        shape
            .clone()
            .with_adapter(spec.clone())
            .validate()
            .map_err(|e| Error::Config(format!("variant {label}: {e}")))?;
    }

    let report = match ctx.precision {
        Precision::F32 => run_bench::<f32>(&shape, &specs, &params)?,
        Precision::F64 => run_bench::<f64>(&shape, &specs, &params)?,
    };
    println!(
        "{:<16} {:>10} {:>10} {:>10} {:>7}",
        "variant", "#param", "ttft_ms", "tpot_ms", "pct"
    );
    for row in &report.rows {
        println!(
            "{:<16} {:>10} {:>10.3} {:>10.3} {:>7.1}",
            row.variant,
            verify::human_millions(row.params_trainable),
            row.ttft_ms,
            row.tpot_ms,
            row.pct_increase
        );
    }
    if report.env.timer_resolution_ms > 0.01 * report.rows[0].tpot_ms {
        eprintln!("warning: timer resolution is coarse relative to measured values");
    }
    if let Some(out) = &ctx.out {
        emit_report(&report, out)?;
        ctx.run.write_resolved(out)?;
        println!("report written to {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}
