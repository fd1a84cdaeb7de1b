use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::ConfigFile;

/// Outline-then-fill caption decoding on a synthetic scene task.
///
/// Every flag except --config mirrors a key of the flat `key = value`
/// config file; flags override the file, which overrides the defaults.
#[derive(Parser)]
#[command(name = "saic", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen(GenArgs),
    /// Train the autoregressive teacher.
    TrainTeacher(TeacherArgs),
    /// Decode the training split with the teacher and store the results.
    Distill(DistillArgs),
    /// Fine-tune the teacher for outline-then-fill decoding.
    TrainSaic(SaicArgs),
    /// Decode a split and write one record per scene.
    Decode(DecodeArgs),
    /// Run the hypothesis-masking experiment.
    MaskExp(MaskExpArgs),
    /// Time single-sentence decoding, or print the analytical cost grid.
    Bench(BenchArgs),
    /// Score decode records (or a split file) against a split's references.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// [default: 2000]
    #[arg(long)]
    n: Option<usize>,
    /// Dataset directory [default: data].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCommon {
    /// [default: data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: <out>.log.tsv]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from the checkpoint at --out.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    resume: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    curriculum_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    /// A number or `none`.
    #[arg(long)]
    clip_norm: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    /// A rate or `none`.
    #[arg(long)]
    target_exact: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p_hybr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TeacherArgs {
    #[command(flatten)]
    train: TrainCommon,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    rpr_window: Option<usize>,
}

#[derive(Args)]
struct SaicArgs {
    #[command(flatten)]
    train: TrainCommon,
    /// [default: teacher.ckpt]
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// [default: 5]
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// [default: saic.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// [default: test]
    #[arg(long)]
    split: Option<String>,
    /// [default: saic]
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m_out: Option<usize>,
    #[arg(long)]
    m_fill: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// `oracle` or a fixed length.
    #[arg(long)]
    length: Option<String>,
    /// Record latency; `false` writes 0 so output is reproducible.
    #[arg(long)]
    timing: Option<bool>,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskExpArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// [default: saic.ckpt]
    #[arg(long)]
    filler: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// [default: 0.1,0.2,...,0.9]
    #[arg(long)]
    grid: Option<String>,
    /// [default: head,tail,random,group]
    #[arg(long)]
    strategies: Option<String>,
    #[arg(long)]
    random_runs: Option<usize>,
    #[arg(long)]
    filler_k: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Output directory [default: mask-exp].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// [default: 3]
    #[arg(long)]
    runs: Option<usize>,
    /// [default: linear]
    #[arg(long)]
    cost_model: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    analytic: Option<bool>,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Decode records or a split file.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| {
        let file = match &cli.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let seed = file.get("seed", cli.seed, 0u64)?;
        match &cli.command {
            Command::Gen(a) => commands::gen(&file, seed, a),
            Command::TrainTeacher(a) => commands::train_teacher(&file, seed, a),
            Command::Distill(a) => commands::distill(&file, a),
            Command::TrainSaic(a) => commands::train_saic(&file, seed, a),
            Command::Decode(a) => commands::decode(&file, a),
            Command::MaskExp(a) => commands::mask_exp(&file, seed, a),
            Command::Bench(a) => commands::bench(&file, a),
            Command::Eval(a) => commands::eval(&file, a),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
