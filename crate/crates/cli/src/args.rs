use std::path::PathBuf;

use agenet::parity::ArtifactStage;
use agenet::{Pipeline, Split};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Override;

#[derive(Debug, Parser)]
#[command(name = "agenet", version, about = "Facial age regression pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Take the resolved configuration of an earlier run as the base layer.
    #[arg(long, global = true, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
    /// Output directory name under the runs directory; derived from the
    /// command and configuration when omitted.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite an existing run directory (and, for hpo-finalize, allow a
    /// further locked run).
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Curate raw images into a sample list.
    Prepare(PrepareArgs),
    /// Stratified train/val/test assignment.
    Split(SplitArgs),
    /// Two-stage fine-tuning with one configuration.
    Train(TrainArgs),
    /// Random search over the training configuration.
    #[command(name = "hpo-search")]
    HpoSearch(HpoSearchArgs),
    /// The single locked training run of a finished search.
    #[command(name = "hpo-finalize")]
    HpoFinalize(FinalizeArgs),
    /// Search and finalize as subcommands.
    Hpo {
        #[command(subcommand)]
        command: HpoCommand,
    },
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Write the portable and deployment graphs for a checkpoint.
    Export(ExportArgs),
    /// Compare two exported stages on identical inputs.
    Parity(ParityArgs),
    /// Latency of one artifact.
    Bench(BenchArgs),
    /// Summarize the latest run of every command.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum HpoCommand {
    Search(HpoSearchArgs),
    Finalize(FinalizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Source,
    Portable,
    Deployment,
}

impl From<StageArg> for ArtifactStage {
    fn from(s: StageArg) -> ArtifactStage {
        match s {
            StageArg::Source => ArtifactStage::SourceCheckpoint,
            StageArg::Portable => ArtifactStage::PortableGraph,
            StageArg::Deployment => ArtifactStage::DeploymentGraph,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    #[value(name = "norm_256")]
    Norm256,
    #[value(name = "norm_256_flip")]
    Norm256Flip,
    #[value(name = "resize_colorjit_flip_blur")]
    ResizeColorjitFlipBlur,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Pipeline {
        match p {
            PipelineArg::Norm256 => Pipeline::Norm256,
            PipelineArg::Norm256Flip => Pipeline::Norm256Flip,
            PipelineArg::ResizeColorjitFlipBlur => Pipeline::ResizeColorjitFlipBlur,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory of images named `<age>_...`.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// `path,age` index file used instead of file names.
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Sample list written by `prepare`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Split manifest written by `split`.
    #[arg(long)]
    pub split: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"])]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Backbone weights file.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub freeze_epochs: Option<usize>,
    #[arg(long)]
    pub transform: Option<PipelineArg>,
    /// Continue an interrupted run in the same run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this epoch as if interrupted.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HpoSearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub study_id: Option<String>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub epoch_cap: Option<usize>,
    #[arg(long)]
    pub final_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinalizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Locked configuration written by `hpo-search`.
    #[arg(long)]
    pub locked: PathBuf,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Where finalized runs are registered per study.
    #[arg(long)]
    pub registry_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub on: SplitArg,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParityArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory (or its `artifacts` folder) written by `export`.
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long, value_enum, default_value = "portable")]
    pub a: StageArg,
    #[arg(long, value_enum, default_value = "deployment")]
    pub b: StageArg,
    /// Needed when either stage is `source`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub on: SplitArg,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Training log (`logs/train.jsonl`) providing the best validation MAE.
    #[arg(long)]
    pub train_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    /// Inferred from the file extension when omitted.
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub budget_ms: Option<f64>,
}

fn push<T: serde::Serialize>(out: &mut Vec<Override>, path: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(Override::new(path, v));
    }
}

impl ModelFlags {
    fn overrides(&self, out: &mut Vec<Override>) {
        push(out, "model.input_size", self.input_size);
        push(out, "model.dropout", self.dropout);
        push(out, "pretrained", self.pretrained.clone());
    }
}

impl Cli {
    /// Flags that map onto configuration fields.
    pub fn overrides(&self) -> Vec<Override> {
        let mut o = Vec::new();
        push(&mut o, "runs_dir", self.runs_dir.clone());
        push(&mut o, "seed", self.seed);
        match &self.command {
            Command::Prepare(a) => push(&mut o, "data_root", a.data_root.clone()),
            Command::Split(a) => {
                if let Some(r) = &a.ratios {
                    o.push(Override::new(
                        "split.ratios",
                        serde_json::json!({ "train": r[0], "val": r[1], "test": r[2] }),
                    ));
                }
            }
            Command::Train(a) => {
                a.model.overrides(&mut o);
                push(&mut o, "train.epochs", a.epochs);
                push(&mut o, "train.lr", a.lr);
                push(&mut o, "train.batch_size", a.batch_size);
                push(&mut o, "train.freeze_epochs", a.freeze_epochs);
                push(&mut o, "train.transform", a.transform.map(Pipeline::from));
            }
            Command::HpoSearch(a) | Command::Hpo { command: HpoCommand::Search(a) } => {
                a.model.overrides(&mut o);
                push(&mut o, "hpo.budget", a.budget);
                push(&mut o, "hpo.epoch_cap", a.epoch_cap);
                push(&mut o, "hpo.final_epochs", a.final_epochs);
            }
            Command::HpoFinalize(a) | Command::Hpo { command: HpoCommand::Finalize(a) } => {
                push(&mut o, "pretrained", a.pretrained.clone());
            }
            Command::Evaluate(a) => push(&mut o, "eval.batch_size", a.batch_size),
            Command::Parity(a) => push(&mut o, "parity.limit", a.limit),
            Command::Bench(a) => {
                push(&mut o, "bench.runs", a.runs);
                push(&mut o, "bench.warmup", a.warmup);
                push(&mut o, "bench.budget_ms", a.budget_ms);
            }
            Command::Export(_) | Command::Report => {}
        }
        o
    }

    pub fn command_name(&self) -> &'static str {
        match &self.command {
            Command::Prepare(_) => "prepare",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::HpoSearch(_) | Command::Hpo { command: HpoCommand::Search(_) } => "hpo-search",
            Command::HpoFinalize(_) | Command::Hpo { command: HpoCommand::Finalize(_) } => "hpo-finalize",
            Command::Evaluate(_) => "evaluate",
            Command::Export(_) => "export",
            Command::Parity(_) => "parity",
            Command::Bench(_) => "bench",
            Command::Report => "report",
        }
    }
}
