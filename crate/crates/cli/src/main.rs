//! `acdae`: phantom generation, training, follow-up synthesis, evaluation
//! and attention-map figures from one binary.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use acdae_core::DiseaseState;

#[derive(Parser)]
#[command(name = "acdae", version, about = "Attention-aligned conditional diffusion auto-encoder on progression phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset into DIR/train and DIR/test.
    GenData(GenData),
    /// Train a model on DIR/train.
    Train(Train),
    /// Synthesize every slice of a subject's follow-up at a target age.
    Infer(Infer),
    /// Score one checkpoint, or compare two, on DIR/test.
    Eval(Eval),
    /// Write attention overlay and difference-map figures for one slice.
    AttnMap(AttnMap),
}

#[derive(Args)]
pub struct GenData {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct Train {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop both attention terms (lambda_imax = lambda_align = 0).
    #[arg(long)]
    pub ablate_alignment: bool,
    /// Drop the information-maximisation term (lambda_imax = 0).
    #[arg(long)]
    pub ablate_imax: bool,
    /// Continue from this checkpoint directory, restoring its RNG state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct Infer {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub subject: String,
    #[arg(long)]
    pub target_age: f64,
    #[arg(long)]
    pub disease: DiseaseState,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `inference.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `inference.sample_steps`.
    #[arg(long)]
    pub sample_steps: Option<usize>,
}

#[derive(Args)]
pub struct Eval {
    /// One checkpoint, or two for a side-by-side comparison.
    #[arg(long, required = true, num_args = 1..=2)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `inference.sample_steps`.
    #[arg(long)]
    pub sample_steps: Option<usize>,
    /// Overrides `eval.max_subjects`.
    #[arg(long)]
    pub max_subjects: Option<usize>,
}

#[derive(Args)]
pub struct AttnMap {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub subject: String,
    /// Decoder layer; the first three are the supervised taps.
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Slice index; defaults to the middle slice.
    #[arg(long)]
    pub slice: Option<usize>,
    /// Follow-up scan index; defaults to the last scan.
    #[arg(long)]
    pub scan: Option<usize>,
    /// Overrides `inference.attention_step` (default T/2).
    #[arg(long)]
    pub step: Option<usize>,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<acdae_core::Error> for Failure {
    fn from(e: acdae_core::Error) -> Self {
        use acdae_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_) | E::ShapeMismatch(_) | E::Config(_) => Failure::Usage(msg),
            E::Format { .. } | E::Io { .. } | E::Version { .. } => Failure::Data(msg),
            E::Numerical(_) => Failure::Numerical(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::AttnMap(a) => commands::attn_map(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
