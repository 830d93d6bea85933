//! `hct`: train, evaluate and probe the RGB-D saliency model.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
//! 3 a check (`gradcheck`, `oracle`) ran and found a mismatch.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hct_core::harness::{
    dump_attention, evaluate_all, load_checkpoint, load_predictions, predict_dataset, read_dataset, synth_dataset,
    synth_sample, toy_gradcheck, train_run, write_dataset, write_reports, RunConfig,
};
use hct_core::{oracle, Error, HctModel64, ModelConfig};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CHECK: u8 = 3;
const GRAD_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "hct",
    version,
    about = "Hierarchical cross-modal transformer for RGB-D salient object detection",
    after_help = "Exit codes: 0 success, 1 runtime failure, 2 usage or config error, 3 check mismatch."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model; writes model.hct, loss.log and config.txt.
    Train(TrainArgs),
    /// Score saliency maps; writes metrics.txt and metrics.jsonl.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter gradient of the toy model.
    Gradcheck(GradcheckArgs),
    /// Write attention rows and decoder maps of one sample as PGM images.
    DumpAttn(DumpArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Compare fast kernels against brute-force references.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file and flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Number of synthetic training samples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory; synthetic data when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory holding the groundtruth.
    #[arg(long)]
    data: PathBuf,
    /// Predict with this checkpoint.
    #[arg(long, conflicts_with = "pred_dir", required_unless_present = "pred_dir")]
    checkpoint: Option<PathBuf>,
    /// Score stored maps `<id>.pgm` instead.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Input side, a multiple of 16.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Scalars checked per parameter tensor.
    #[arg(long, default_value_t = 2, conflicts_with = "all")]
    per_tensor: usize,
    /// Check every scalar of every tensor.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct DumpArgs {
    /// Trained model; a fresh toy model from `--seed` when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory to take the sample from; synthetic when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample position in the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "attn")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { EXIT_USAGE } else { EXIT_RUNTIME };
        Failure { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn run_config(a: &TrainArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    let flags = [
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch.map(|v| v.to_string())),
        ("n", a.n.map(|v| v.to_string())),
        ("train_seed", a.seed.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Outcome {
    let cfg = run_config(&a)?;
    let out = train_run(&cfg, a.data.as_deref(), &a.out)?;
    let last = out.history.steps.last().map_or(f64::NAN, |s| s.loss.total);
    println!(
        "{} steps, final loss {last:.6}; wrote {} and {}",
        out.history.steps.len(),
        out.checkpoint.display(),
        out.loss_log.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let items = match (&a.checkpoint, &a.pred_dir) {
        (Some(ck), None) => {
            let model: HctModel64 = load_checkpoint(ck)?;
            predict_dataset(&model, &read_dataset(&a.data)?)?
        }
        (None, Some(dir)) => load_predictions(dir, &a.data)?,
        _ => return Err(usage("give exactly one of --checkpoint and --pred-dir")),
    };
    let rows = evaluate_all(&items)?;
    write_reports(&a.out, &rows)?;
    print!("{}", hct_core::harness::table(&rows));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    ModelConfig {
        image_size: a.size,
        ..ModelConfig::toy()
    }
    .validate()?;
    if a.per_tensor == 0 {
        return Err(usage("--per-tensor must be positive"));
    }
    let report = toy_gradcheck(a.seed, a.size, (!a.all).then_some(a.per_tensor))?;
    let mut failed = 0;
    for p in &report.params {
        let ok = p.max_rel_err < GRAD_TOL;
        failed += usize::from(!ok);
        println!(
            "{} {:<40} {:>3}/{:<6} rel {:.3e}  (analytic {:+.6e}, numeric {:+.6e}, {} refined)",
            if ok { "ok  " } else { "FAIL" },
            p.name,
            p.checked,
            p.total,
            p.max_rel_err,
            p.analytic,
            p.numeric,
            p.refined
        );
    }
    println!(
        "loss {:.12}; {} scalars in {} tensors, {} refined; max rel err {:.3e}",
        report.loss,
        report.scalars_checked(),
        report.params.len(),
        report.scalars_refined(),
        report.max_rel_err()
    );
    if failed > 0 {
        return Err(Failure {
            code: EXIT_CHECK,
            msg: format!("{failed} parameter tensors reach relative error {GRAD_TOL:e}"),
        });
    }
    Ok(())
}

fn dump(a: DumpArgs) -> Outcome {
    let model: HctModel64 = match &a.checkpoint {
        Some(ck) => load_checkpoint(ck)?,
        None => HctModel64::new(ModelConfig {
            seed: a.seed,
            ..ModelConfig::toy()
        })?,
    };
    let sample = match &a.data {
        Some(dir) => {
            let mut data = read_dataset(dir)?;
            if a.index >= data.len() {
                return Err(usage(format!("--index {} but the dataset has {} samples", a.index, data.len())));
            }
            data.swap_remove(a.index)
        }
        None => synth_sample(a.seed, a.index, model.cfg.image_size),
    };
    let written = dump_attention(&model, &sample, &a.out)?;
    println!("wrote {} images to {}", written.len(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    let data = synth_dataset(a.seed, a.n, a.size).map_err(|e| usage(e.to_string()))?;
    write_dataset(&a.out, &data)?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn oracle_cmd(a: OracleArgs) -> Outcome {
    let checks = oracle::run_all(a.seed)?;
    let mut failed = 0;
    for c in &checks {
        failed += usize::from(!c.passed());
        println!(
            "{} {:<40} max err {:.3e} (tol {:.0e})",
            if c.passed() { "ok  " } else { "FAIL" },
            c.name,
            c.max_err,
            c.tol
        );
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_CHECK,
            msg: format!("{failed} of {} oracle comparisons failed", checks.len()),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DumpAttn(a) => dump(a),
        Command::Synth(a) => synth(a),
        Command::Oracle(a) => oracle_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hct: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
