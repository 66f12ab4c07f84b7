mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fuyu_core::ErrorKind;

#[derive(Parser, Debug)]
#[command(
    name = "fuyu",
    version,
    about = "Encoder-free multimodal decoder: tokenize, train, generate, evaluate, benchmark",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Seed for every random stream [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// error, warn, info, debug or trace [default: warn]
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    /// Default location for checkpoints read or written
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON settings file; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print failures as JSON on stderr
    #[arg(long, global = true)]
    pub json_errors: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Image and newline token counts for an image size
    CountTokens {
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
    },
    /// Resize and cut an image into patches
    Patchify {
        #[arg(long = "in")]
        input: PathBuf,
        /// fixed:S, dynamic:S1,S2,... or original
        #[arg(long, default_value = "original")]
        resolution: String,
        /// Print rows, columns and sequence length
        #[arg(long)]
        summary: bool,
        /// Write the patch matrix as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a freshly initialised checkpoint
    Init {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset
    Synth {
        #[arg(long, value_enum)]
        task: SynthTask,
        #[arg(long)]
        out: PathBuf,
    },
    /// Instruction-tune on a mixture manifest
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// fixed:S, dynamic:S1,S2,... or original [default: fixed:512]
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        /// Output directory [default: --checkpoint-dir]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialisation
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        warmup: Option<f64>,
        #[arg(long)]
        grad_accum: Option<usize>,
        #[arg(long)]
        lora_rank: Option<usize>,
        #[arg(long)]
        lora_alpha: Option<f64>,
    },
    /// Greedy answer to an instruction about an image
    Generate {
        /// Checkpoint file or training directory [default: --checkpoint-dir]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value = "original")]
        resolution: String,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
    },
    /// Score a checkpoint on a benchmark dataset
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// mc, freeform or both
        #[arg(long, default_value = "both")]
        protocol: String,
        #[arg(long, value_enum, default_value = "stub")]
        judge: JudgeArg,
        #[arg(long, default_value = "original")]
        resolution: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Judge calls in flight
        #[arg(long, default_value_t = fuyu_core::eval::DEFAULT_CONCURRENCY)]
        concurrency: usize,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Tokens per second over a wall-clock window
    Bench {
        #[arg(long)]
        resolution: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Seconds
        #[arg(long, default_value_t = 60.0)]
        window: f64,
        #[arg(long, default_value_t = 100)]
        text_len: usize,
        /// naive or blocked:N
        #[arg(long, default_value = "blocked:64")]
        kernel: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    /// Twenty solid colours with one-letter answers
    Toy,
    /// Benchmark records with drawn scenes
    Eval,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Full,
    Lora,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum JudgeArg {
    Stub,
    External,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Io => 2,
    }
}

fn report_error(json: bool, kind: &str, code: u8, message: &str) {
    if json {
        let v = serde_json::json!({"error": {"kind": kind, "exit_code": code, "message": message}});
        eprintln!("{v}");
    } else {
        eprintln!("error: {message}");
    }
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                report_error(true, "usage", 1, e.to_string().trim());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(e.kind());
            let kind = match e.kind() {
                ErrorKind::Usage => "usage",
                ErrorKind::Io => "io",
            };
            report_error(json_errors, kind, code, &e.to_string());
            ExitCode::from(code)
        }
    }
}
