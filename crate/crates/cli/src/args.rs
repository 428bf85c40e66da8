use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "exprsaug", version, about = "Predict missing sample metadata from small-RNA expression profiles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (matrix + metadata)
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Join, filter and normalize an expression matrix
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        prep: PrepArgs,
    },
    /// Fit a classifier on all labeled samples
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        prep: PrepArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Label new samples with a trained model
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        bundle: BundleArgs,
    },
    /// Cross-validation and one-dataset-out evaluation
    Validate {
        #[command(subcommand)]
        mode: ValidateMode,
    },
    /// DeepLIFT scores, class rankings and knockout analyses for an MLP
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        bundle: BundleArgs,
        #[command(flatten)]
        explain: ExplainArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum ValidateMode {
    /// k-fold cross-validation
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        prep: PrepArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Hold out whole datasets (all of them unless --dataset is given)
    Odo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        prep: PrepArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        dataset: Option<String>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat TOML file (or a previous run_manifest.json) supplying flag values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads [default: all cores]
    #[arg(long, env = "EXPRSAUG_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, default_value = "exprsaug-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// sRNA expression matrix (features × samples TSV)
    #[arg(long)]
    pub srna: Option<PathBuf>,
    /// Contaminant expression matrix (features × samples TSV)
    #[arg(long)]
    pub contam: Option<PathBuf>,
    /// Sample metadata TSV
    #[arg(long)]
    pub metadata: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureSet {
    Srna,
    Contam,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Label {
    Tissue,
    Sex,
    Age,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Mlp,
    Rf,
}

#[derive(Debug, Clone, Args)]
pub struct PrepArgs {
    #[arg(long, value_enum, default_value_t = FeatureSet::Srna)]
    pub feature_set: FeatureSet,
    #[arg(long, value_enum, default_value_t = Label::Tissue)]
    pub label_field: Label,
    /// Age binning scheme (2, 3 or 4 intervals); required with --label-field age
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    pub age_scheme: Option<u8>,
    /// Replace tissues by their tissue group
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub group_tissues: bool,
    /// Reads-per-million normalization
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub rpm: bool,
    /// Scale every feature to [0, 1]
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub minmax: bool,
    /// Drop features with a zero fraction above this value
    #[arg(long)]
    pub zero_threshold: Option<f64>,
    /// Drop classes with fewer samples
    #[arg(long)]
    pub min_class_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Mlp)]
    pub model: ModelKind,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 30)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Hidden layers as width:dropout pairs
    #[arg(long, default_value = "1000:0.5,250:0.4,250:0.4")]
    pub hidden: String,
    #[arg(long, default_value_t = 100)]
    pub stage1_trees: usize,
    /// Features kept after the first forest
    #[arg(long, default_value_t = 1000)]
    pub keep: usize,
    #[arg(long, default_value_t = 500)]
    pub stage2_trees: usize,
    /// Downsample classes to equal size before fitting forests
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    pub balance: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Fit the MinMax scaler inside each training portion
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub fold_safe_scaling: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BundleArgs {
    /// Output directory of a previous `train` run
    #[arg(long)]
    pub model_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    /// Per-feature, per-class scores of one sample
    #[arg(long)]
    pub sample: Option<String>,
    /// Class-average score table
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub class_scores: bool,
    #[arg(long, default_value_t = 300)]
    pub top: usize,
    /// Mean knockout steps until a sample leaves its class
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub stability: bool,
    /// Mean knockout steps until a sample turns into each other class
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub similarity: bool,
    /// Cap on knockout steps [default: number of features]
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Also write SVG heatmaps
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub svg: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub features: usize,
    /// Informative features per class
    #[arg(long, default_value_t = 20)]
    pub informative: usize,
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
    #[arg(long, default_value_t = 5.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub datasets: usize,
    /// Log-scale spread of the per-dataset, per-feature multiplicative bias
    #[arg(long, default_value_t = 0.0)]
    pub dataset_bias: f64,
}
