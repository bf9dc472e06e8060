mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use attnedit::model::EditTarget;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Edit a trained transformer's attention and distill the edited student
/// back towards its teacher.
#[derive(Debug, Parser)]
#[command(name = "attnedit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "RUN_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the reference GQA teacher on the synthetic mixture.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Teacher spec JSON (default: the desk reference teacher).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Replace the teacher's attention; writes the student init and its transplant manifest.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum)]
        target: Target,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        d_c: Option<usize>,
        #[arg(long)]
        d_r: Option<usize>,
        #[arg(long)]
        reinit_qkv: bool,
    },
    /// Stage I (block-wise regression) then Stage II (KL distillation).
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stage1_steps: Option<u64>,
        #[arg(long)]
        stage2_steps: Option<u64>,
        /// Cold start: Stage II from the freshly edited student.
        #[arg(long)]
        skip_stage1: bool,
        /// Continue from the Stage-I checkpoint in `out`.
        #[arg(long)]
        resume: bool,
        /// Record wall-clock time in the metrics log.
        #[arg(long)]
        timing: bool,
    },
    /// Teacher–student agreement, perplexities and KD loss on held-out data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 64)]
        sequences: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// KV-cache table; without specs, the full-scale GQA/MLA/GateSWA comparison.
    Report {
        /// Baseline spec (JSON file or checkpoint directory) for `--spec` rows.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        spec: Vec<PathBuf>,
        /// Add per-layer byte reports at this sequence length.
        #[arg(long)]
        seq_len: Option<u64>,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Re-render a JSON report instead of computing one.
        #[arg(long, conflicts_with_all = ["baseline", "spec"])]
        parse: Option<PathBuf>,
        /// Text loss curves from a metrics log.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Target {
    Identity,
    Mla,
    Gateswa,
}

impl From<Target> for EditTarget {
    fn from(t: Target) -> Self {
        match t {
            Target::Identity => EditTarget::Identity,
            Target::Mla => EditTarget::Mla,
            Target::Gateswa => EditTarget::Gateswa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                attnedit::Error::Numeric(_) => 2,
                _ => 1,
            })
        }
    }
}
