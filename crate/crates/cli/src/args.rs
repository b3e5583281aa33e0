use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glyphslot::datagen::Split;

#[derive(Debug, Parser)]
#[command(name = "glyphslot", version, about = "Few-shot symbol detection and transcription for cipher manuscripts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic glyph atlas (alphabet/character/sample.png).
    GenAtlas(GenAtlasArgs),
    /// Compose an annotated line corpus, with its support crops, from an atlas.
    Gen(GenArgs),
    /// Train a detector on an atlas (episodic) or on an annotated corpus.
    Train(TrainArgs),
    /// Retrain a checkpoint on a few annotated lines of a target alphabet.
    Finetune(FinetuneArgs),
    /// Detect every support class on one line image.
    Detect(DetectArgs),
    /// Transcribe a line or a whole page.
    Transcribe(TranscribeArgs),
    /// Sweep confidence thresholds over an annotated corpus.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Style {
    Default,
    Cipher,
}

#[derive(Debug, Args)]
pub struct GenAtlasArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub alphabets: usize,
    /// Classes per alphabet.
    #[arg(long, default_value_t = 1)]
    pub classes: usize,
    /// Samples per class.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = Style::Default)]
    pub style: Style,
    /// Prefix of the alphabet directory names.
    #[arg(long, default_value = "alphabet")]
    pub prefix: String,
}

/// How an atlas is divided into training and test alphabets.
#[derive(Debug, Args)]
pub struct SplitArgs {
    /// The last N alphabets (sorted by name) form the test split.
    #[arg(long, default_value_t = 10)]
    pub test_alphabets: usize,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub atlas: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lines: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the split in the config's data section.
    #[arg(long)]
    pub split: Option<Split>,
    #[command(flatten)]
    pub split_args: SplitArgs,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["atlas", "corpus"]))]
pub struct TrainArgs {
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's iteration count.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[command(flatten)]
    pub split_args: SplitArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus directory with the labelled lines.
    #[arg(long)]
    pub pages: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training settings; defaults to those stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SupportArgs {
    /// Directory of class_name/shot_*.png.
    #[arg(long)]
    pub supports: PathBuf,
    /// Use at most this many shots per class.
    #[arg(long)]
    pub shots: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub line: PathBuf,
    #[command(flatten)]
    pub supports: SupportArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["line", "page"]))]
pub struct TranscribeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub line: Option<PathBuf>,
    /// A page image: binarized and split into lines first.
    #[arg(long)]
    pub page: Option<PathBuf>,
    #[command(flatten)]
    pub supports: SupportArgs,
    #[arg(long, default_value_t = 0.4)]
    pub confidence: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to the corpus's own supports directory.
    #[arg(long)]
    pub supports: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.6,0.8")]
    pub thresholds: Vec<f32>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
}
