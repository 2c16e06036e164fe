use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gamsi::checkpoint::load_checkpoint;
use gamsi::config::{Precision, RunConfig};
use gamsi::diag::run_diagnostics;
use gamsi::error::Error;
use gamsi::eval::{evaluate, Decoding};
use gamsi::mask::{build_mask_with, summarize, verify_mask, SequenceLayout};
use gamsi::model::GamsiModel;
use gamsi::synth::{generate, load_dataset, task_counts, write_dataset, TaskType};
use gamsi::train::{heldout_samples, run_job, to_examples, TrainJob, CONFIG_FILE};
use gamsi::Scalar;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_COMPAT: u8 = 4;
const EXIT_DIAG: u8 = 5;

/// Dual-query spatial grounding toolkit.
///
/// Environment: GAMSI_THREADS caps worker threads (default: all cores).
#[derive(Parser)]
#[command(name = "gamsi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic QA dataset: JSONL manifest plus expert feature files.
    GenData(GenDataArgs),
    /// Train one stage and write model.gams, metrics.csv, config.json and summary.json.
    Train(TrainArgs),
    /// Greedy-decode held-out questions and report per-task accuracy.
    Eval(EvalArgs),
    /// Run mask, contamination, gradient and loss-identity checks.
    Diag(DiagArgs),
    /// Print the attention mask of a sequence layout.
    InspectMask(MaskArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run config JSON file, or a preset name: toy, large, micro.
    #[arg(long, default_value = "toy")]
    config: String,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    count: usize,
    /// Dataset seed.
    #[arg(long)]
    seed: u64,
    /// Task mixture of this stage (1: perception-weighted, 2: balanced).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Curriculum stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Checkpoint to start from. Optimizer state of the same stage is
    /// picked up from its directory when present.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Allow stage 2 without a stage-1 checkpoint.
    #[arg(long)]
    from_scratch: bool,
    /// Dataset manifest from gen-data; default generates the stage's split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to config.json beside the checkpoint.
    #[arg(long)]
    config: Option<String>,
    /// Dataset manifest; default is the config's stage-2 held-out split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where to write the JSON report; printed to stdout otherwise.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DiagArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to config.json beside the checkpoint.
    #[arg(long)]
    config: Option<String>,
    /// Seed of the random probes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MaskArgs {
    /// Frames N.
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// Patches per frame P.
    #[arg(long, default_value_t = 4)]
    patches: usize,
    /// Queries per bank K.
    #[arg(long, default_value_t = 2)]
    queries: usize,
    /// Question tokens.
    #[arg(long, default_value_t = 2)]
    question: usize,
    /// Answer tokens.
    #[arg(long, default_value_t = 1)]
    answer: usize,
    /// Omit the structural-to-metric blocking (ablation).
    #[arg(long)]
    no_decouple: bool,
    /// Print the summary JSON instead of the grid.
    #[arg(long)]
    json: bool,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Numeric(_) | Error::NonFiniteActivation { .. } => EXIT_NUMERIC,
            Error::Compat(_) | Error::Parse { .. } | Error::Index { .. } => EXIT_COMPAT,
            Error::Config(_) | Error::Json(_) => EXIT_USAGE,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

fn load_config(arg: &str) -> Result<RunConfig, Failure> {
    if Path::new(arg).exists() {
        Ok(RunConfig::load(arg)?)
    } else if ["toy", "large", "micro"].contains(&arg) {
        Ok(RunConfig::preset(arg)?)
    } else {
        Err(usage(format!("config {arg} is neither a file nor a preset")))
    }
}

fn config_for_checkpoint(ckpt: &Path, arg: Option<&str>) -> Result<RunConfig, Failure> {
    match arg {
        Some(s) => load_config(s),
        None => {
            let beside = ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
            if !beside.exists() {
                return Err(usage(format!("no --config given and {} not found", beside.display())));
            }
            Ok(RunConfig::load(beside)?)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = load_config(&a.config.config)?;
    let mixture = cfg.train.get(a.stage)?.mixture;
    let samples = generate(
        &cfg.data.synth(),
        cfg.heads.visual_queries,
        cfg.heads.expert_dim,
        mixture,
        a.count,
        a.seed,
    );
    let manifest = write_dataset(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), manifest.display());
    for (t, n) in TaskType::ALL.iter().zip(task_counts(&samples)) {
        println!("{:<20} {n}", t.name());
    }
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let config = load_config(&a.config.config)?;
    if a.stage == 2 && a.resume.is_none() && !a.from_scratch {
        return Err(usage("stage 2 needs --resume <stage-1 checkpoint> or --from-scratch"));
    }
    let job = TrainJob {
        config,
        stage: a.stage,
        resume: a.resume,
        data: a.data,
        out: a.out,
    };
    let s = run_job(&job)?;
    println!(
        "stage {} ({}) finished {} steps in {:.1}s",
        s.stage, s.variant, s.steps, s.seconds
    );
    println!("held-out before: {}", s.initial_heldout);
    println!("held-out after:  {}", s.final_heldout);
    if !s.final_heldout.is_finite() {
        return Err(Failure {
            code: EXIT_NUMERIC,
            msg: "final held-out loss is not finite".into(),
        });
    }
    Ok(())
}

fn eval_as<T: Scalar>(a: &EvalArgs, cfg: &RunConfig) -> CmdResult {
    let mut model = GamsiModel::<T>::new(&cfg.model_config())?;
    load_checkpoint(&mut model.store, &a.checkpoint)?;
    let samples = match &a.data {
        Some(m) => load_dataset(&cfg.data.synth(), m)?,
        None => heldout_samples(cfg, 2)?,
    };
    let vocab = model.config().backbone.vocab;
    if let Some(t) = samples
        .iter()
        .flat_map(|s| s.qa.question.iter().chain(&s.qa.answer))
        .find(|&&t| t >= vocab)
    {
        return Err(Failure {
            code: EXIT_COMPAT,
            msg: format!("token {t} is outside the model vocabulary of {vocab}"),
        });
    }
    let data = to_examples(&model, &samples)?;
    let report = evaluate(&model, &data, Decoding::Options(cfg.data.synth().vocab()))?;
    let json = report.to_json();
    match &a.report {
        Some(p) => {
            std::fs::write(p, &json).map_err(Error::from)?;
            for (task, t) in &report.per_task {
                println!("{task:<20} {:.4} ({}/{})", t.accuracy, t.correct, t.total);
            }
            println!("macro                {:.4}", report.macro_accuracy);
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let cfg = config_for_checkpoint(&a.checkpoint, a.config.as_deref())?;
    match cfg.model.precision {
        Precision::F32 => eval_as::<f32>(&a, &cfg),
        Precision::F64 => eval_as::<f64>(&a, &cfg),
    }
}

fn diag_as<T: Scalar>(a: &DiagArgs, cfg: &RunConfig) -> CmdResult {
    let mut model = GamsiModel::<T>::new(&cfg.model_config())?;
    load_checkpoint(&mut model.store, &a.checkpoint)?;
    let report = run_diagnostics(&model, cfg.data.frames, a.seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    } else {
        print!("{}", report.table());
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_DIAG,
            msg: "diagnostics failed".into(),
        })
    }
}

fn diag(a: DiagArgs) -> CmdResult {
    let cfg = config_for_checkpoint(&a.checkpoint, a.config.as_deref())?;
    match cfg.model.precision {
        Precision::F32 => diag_as::<f32>(&a, &cfg),
        Precision::F64 => diag_as::<f64>(&a, &cfg),
    }
}

fn inspect_mask(a: MaskArgs) -> CmdResult {
    let layout = SequenceLayout::with_banks(a.frames, a.patches, a.queries, a.queries, a.question, a.answer)?;
    let mask = build_mask_with(&layout, !a.no_decouple);
    if a.json {
        let s = summarize(&mask, &layout);
        println!("{}", serde_json::to_string_pretty(&s).map_err(Error::from)?);
    } else {
        print!("{}", mask.render(&layout));
        let rep = verify_mask(&mask, &layout);
        println!("verify: {} ({} violations)", if rep.passed { "pass" } else { "fail" }, rep.violations.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("GAMSI_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: GAMSI_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diag(a) => diag(a),
        Command::InspectMask(a) => inspect_mask(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
