use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "mpfn",
    version,
    about = "Multi-perspective fusion network for two-choice reading comprehension"
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metric trace and manifest.
    Train(TrainCmd),
    /// Accuracy of a checkpoint (or an ensemble) on one split.
    Evaluate(EvaluateCmd),
    /// Majority vote of several checkpoints on one split.
    Ensemble(EnsembleCmd),
    /// Perspective, input and interaction sweeps.
    Ablate(AblateCmd),
    /// Finite-difference check of every gradient path.
    Gradcheck(GradcheckCmd),
    /// Per-token fusion matrices and attention maps of one instance.
    ExportFusion(ExportCmd),
    /// Write a synthetic overlap corpus to disk.
    Synth(SynthCmd),
    /// Re-run a training manifest and compare metric traces.
    Replay(ReplayCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum FormatArg {
    Jsonl,
    Xml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Corpus directory holding `train`/`dev`/`test` files, a single split
    /// file, or `synth` for a generated overlap corpus.
    #[arg(long, default_value = "synth")]
    pub corpus: String,

    /// Corpus file format; guessed from extensions when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,

    /// Pretrained word vectors, `token v1 ... vN` per line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,

    /// Word counts, `token count` per line.
    #[arg(long)]
    pub freq_table: Option<PathBuf>,

    /// Relation lexicon, `word<TAB>word<TAB>relation` per line.
    #[arg(long)]
    pub relations: Option<PathBuf>,

    /// Directory with `<split>.pos` / `<split>.ner` tag sidecars.
    #[arg(long)]
    pub tags: Option<PathBuf>,

    /// Synthetic split sizes as `train,dev,test`.
    #[arg(long, default_value = "256,64,0")]
    pub synth_sizes: String,

    /// Synthetic vocabulary size.
    #[arg(long, default_value_t = mpfn::pipeline::SYNTH_VOCAB)]
    pub synth_vocab: usize,

    /// Seed of the synthetic corpus, independent of the model seed.
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,

    /// Half-width of the uniform word vectors used without `--embeddings`.
    /// Defaults to a pretrained-like spread for `synth`, 0.1 otherwise.
    #[arg(long)]
    pub vector_scale: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Active fusion perspectives, letters from u, d and s.
    #[arg(long, default_value = "sdu")]
    pub perspectives: String,

    /// Recurrent aggregation after each perspective's FNN: none or birnn.
    #[arg(long, default_value = "none")]
    pub post_agg: String,

    /// Encoder hidden size per direction.
    #[arg(long, default_value_t = 123)]
    pub hidden: usize,

    /// Word vector width.
    #[arg(long, default_value_t = 300)]
    pub word_dim: usize,

    /// Pairwise softmax or independent sigmoid scores.
    #[arg(long, default_value = "softmax")]
    pub output: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    #[arg(long, default_value_t = 30)]
    pub epochs: usize,

    #[arg(long, default_value_t = 10)]
    pub patience: usize,

    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,

    /// Rescale batch gradients to this global norm when larger.
    #[arg(long)]
    pub clip_norm: Option<f64>,

    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, required_unless_present = "ensemble")]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated checkpoints voting together.
    #[arg(long, value_delimiter = ',', conflicts_with = "checkpoint")]
    pub ensemble: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "dev")]
    pub split: SplitArg,
    /// Write per-instance predictions here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EnsembleCmd {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated member checkpoints.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ensemble: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "dev")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Study {
    Perspectives,
    Inputs,
    Interaction,
    All,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, value_enum, default_value = "perspectives")]
    pub study: Study,
    /// Repeat the perspective sweep with recurrent post-aggregation.
    #[arg(long)]
    pub with_birnn: bool,
    /// Number of seeds per row, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value = "runs/ablation")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckCmd {
    /// Largest accepted relative error. Tiny values such as 1e-12 are
    /// expected to fail and probe the harness itself.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Also check a default-width model on sampled coordinates.
    #[arg(long)]
    pub full_width: bool,
    #[arg(long, default_value_t = 4)]
    pub coords: usize,
    /// Flip the sign of one op's backward pass, e.g. `difference_fusion`.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub instance: String,
    #[arg(long, default_value = "runs/export")]
    pub out: PathBuf,
    /// Fuse each choice with itself in place of its attended passage
    /// context; the difference matrices are then exactly zero.
    #[arg(long)]
    pub self_fusion: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "jsonl", value_enum)]
    pub write_format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayCmd {
    /// Manifest written by `train`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the replayed run goes.
    #[arg(long)]
    pub out: PathBuf,
}
