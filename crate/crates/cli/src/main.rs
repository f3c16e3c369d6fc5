use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use probeseg::labels::Provenance;
use probeseg::probe::{LossHead, Normalization};
use tracing_subscriber::EnvFilter;

mod commands;
mod record;

/// Linear segmentation probes on frozen ViT patch features.
#[derive(Debug, Parser)]
#[command(name = "probeseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Derive point, scribble or noisy labels from a store's ground truth into a new store.
    SynthLabels(SynthLabelsArgs),
    /// Train a linear probe on a store's labeled samples.
    Train(TrainArgs),
    /// Score a probe checkpoint against a store's masks.
    Eval(EvalArgs),
    /// K-means over the patch tokens of one image.
    Cluster(ClusterArgs),
    /// Audit a feature store and print a JSON report.
    VerifyStore(VerifyArgs),
    /// Write a synthetic store with known class structure.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Regime {
    Point,
    Scribble,
    Noisy,
}

#[derive(Debug, Args)]
pub struct SynthLabelsArgs {
    /// Source store (directory or manifest.json); its masks are treated as ground truth.
    #[arg(long)]
    pub store: PathBuf,
    /// Directory of the new store.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub regime: Regime,
    /// Points per class (point regime).
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Stroke width in pixels (scribble regime).
    #[arg(long, default_value_t = 3)]
    pub thickness: usize,
    /// Walk length as a fraction of each component's diameter (scribble regime).
    #[arg(long, default_value_t = 0.5)]
    pub length_frac: f64,
    /// Target mIoU of the noisy masks against ground truth, in percent (noisy regime).
    #[arg(long)]
    pub target_quality: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProvenanceArg {
    Gt,
    Point,
    Scribble,
    Noisy,
    ExternalPseudo,
}

impl From<ProvenanceArg> for Provenance {
    fn from(p: ProvenanceArg) -> Self {
        match p {
            ProvenanceArg::Gt => Provenance::Gt,
            ProvenanceArg::Point => Provenance::Point,
            ProvenanceArg::Scribble => Provenance::Scribble,
            ProvenanceArg::Noisy => Provenance::Noisy,
            ProvenanceArg::ExternalPseudo => Provenance::ExternalPseudo,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormalizationArg {
    LabeledCount,
    ImageArea,
}

impl From<NormalizationArg> for Normalization {
    fn from(n: NormalizationArg) -> Self {
        match n {
            NormalizationArg::LabeledCount => Normalization::LabeledCount,
            NormalizationArg::ImageArea => Normalization::ImageArea,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossHeadArg {
    Softmax,
    PerClassSigmoid,
}

impl From<LossHeadArg> for LossHead {
    fn from(h: LossHeadArg) -> Self {
        match h {
            LossHeadArg::Softmax => LossHead::Softmax,
            LossHeadArg::PerClassSigmoid => LossHead::PerClassSigmoid,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Output directory for the checkpoint, loss history and run record.
    #[arg(long, required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train only on samples carrying this provenance tag.
    #[arg(long, value_enum)]
    pub labels_provenance: Option<ProvenanceArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Crop side in pixels; must be a multiple of the store's patch size.
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long, value_enum)]
    pub normalization: Option<NormalizationArg>,
    #[arg(long, value_enum)]
    pub loss_head: Option<LossHeadArg>,
    /// Standardize feature channels with training-set statistics.
    #[arg(long)]
    pub standardize: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Store whose masks serve as ground truth.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each predicted mask as a PNG.
    #[arg(long)]
    pub save_predictions: bool,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub image_id: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale every token to unit length before clustering.
    #[arg(long)]
    pub l2_normalize: bool,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Also write the report and a run record to this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    /// Patch grid side.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Standard deviation of the Gaussian token noise.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Voronoi regions per image.
    #[arg(long, default_value_t = 6)]
    pub regions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    let result = match cli.command {
        Command::SynthLabels(a) => commands::synth_labels(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::VerifyStore(a) => commands::verify_store(a),
        Command::MakeSynthetic(a) => commands::make_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
