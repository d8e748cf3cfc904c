use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "iconokit",
    version,
    about = "Iconometric proportions of statue faces and metadata classification benchmarks",
    args_override_self = true
)]
pub struct Cli {
    /// Key-value file of default flags for the subcommand (`key = value`,
    /// one per line). Flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Landmarks to proportions: pose normalization, guidelines, measurement.
    Measure(MeasureArgs),
    /// Per-style proportion distributions joined with the catalog.
    Analyze(AnalyzeArgs),
    /// Build the artistic knowledge graph and train node embeddings.
    Kg(KgArgs),
    /// Validate and convert a precomputed embedding file.
    EmbedIngest(EmbedIngestArgs),
    /// Cross-validated classification over tasks, sources and classifiers.
    Classify(ClassifyArgs),
    /// Render the comparison table of a finished classification run.
    Report(ReportArgs),
    /// Generate a synthetic catalog with posed landmarks.
    Synth(SynthArgs),
    /// Write the bundled canonical frontal template.
    Template(TemplateArgs),
}

#[derive(Debug, Args, serde::Serialize)]
pub struct MeasureArgs {
    /// Landmark JSON: array of {image_id, points: 68 × [x, y, z]}.
    #[arg(long, value_name = "FILE")]
    pub landmarks: PathBuf,
    /// Alignment template landmarks [D-LM-2] (default: bundled synthetic template).
    #[arg(long, value_name = "FILE")]
    pub template: Option<PathBuf>,
    /// Output proportion CSV `image_id,lh,rh,el,e,n,lf`.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Optional guideline overlay JSON (L1..L8 per image).
    #[arg(long, value_name = "FILE")]
    pub guidelines: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct AnalyzeArgs {
    /// Proportion CSV written by `measure`.
    #[arg(long, value_name = "FILE")]
    pub proportions: PathBuf,
    /// Statue catalog (.csv or .json).
    #[arg(long, value_name = "FILE")]
    pub catalog: PathBuf,
    /// Output distribution CSV: per style and statistic, plus canon baselines
    /// and deltas of style means from each baseline.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Optional per-image CSV `image_id,style,lh,...` for plotting.
    #[arg(long, value_name = "FILE")]
    pub points: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingFormat {
    Csv,
    Bin,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct Node2VecArgs {
    /// Walk length [D-KG-2].
    #[arg(long, default_value_t = 80)]
    pub walk_length: usize,
    /// Walks started from every node [D-KG-2].
    #[arg(long, default_value_t = 10)]
    pub walks_per_node: usize,
    /// Return parameter p [D-KG-2].
    #[arg(long, default_value_t = 1.0)]
    pub return_p: f64,
    /// In-out parameter q [D-KG-2].
    #[arg(long, default_value_t = 1.0)]
    pub inout_q: f64,
    /// Skip-gram context window [D-KG-2].
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Negative samples per pair, drawn from unigram^0.75 [D-KG-2, D-KG-3].
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    /// Passes over the walks [D-KG-2].
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Initial learning rate, decayed linearly [D-KG-2].
    #[arg(long, default_value_t = 0.025)]
    pub learning_rate: f64,
    /// Random seed for walks and training.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Skip-gram workers; only 1 is bit-reproducible [D-KG-4].
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct KgArgs {
    /// Statue catalog (.csv or .json).
    #[arg(long, value_name = "FILE")]
    pub catalog: PathBuf,
    /// Add century attribute nodes (the KG_time variant).
    #[arg(long)]
    pub time: bool,
    /// Directory for `edges.tsv` and `nodes.csv`.
    #[arg(long, value_name = "DIR")]
    pub out_graph: PathBuf,
    /// Node embedding output `node_id,v0..v127`.
    #[arg(long, value_name = "FILE")]
    pub out_emb: PathBuf,
    /// Embedding file format.
    #[arg(long, value_enum, default_value_t = EmbeddingFormat::Csv)]
    pub format: EmbeddingFormat,
    #[command(flatten)]
    pub node2vec: Node2VecArgs,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct EmbedIngestArgs {
    /// Embedding file (CSV `image_id,v0..` or ICOEMB1 binary).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Feature source tag, which fixes the expected dimension.
    #[arg(long, value_name = "SOURCE")]
    pub source: String,
    /// Catalog used to exclude unknown image ids.
    #[arg(long, value_name = "FILE")]
    pub catalog: Option<PathBuf>,
    /// Validated output file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = EmbeddingFormat::Csv)]
    pub format: EmbeddingFormat,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ClassifyArgs {
    /// Statue catalog (.csv or .json).
    #[arg(long, value_name = "FILE")]
    pub catalog: PathBuf,
    /// Feature file as SOURCE=PATH, repeatable. Sources: iconometry,
    /// image_embedding_full, image_embedding_cropped, image_embedding_face,
    /// graph_kg, graph_kg_time.
    #[arg(long = "features", value_name = "SOURCE=PATH", required = true)]
    pub features: Vec<String>,
    /// Comma-separated task ids (T1, T3, T5.2 or T1_style, ...) or `all`.
    #[arg(long, default_value = "all")]
    pub tasks: String,
    /// Comma-separated classifiers: svm, nn.
    #[arg(long, default_value = "svm,nn")]
    pub classifiers: String,
    /// Fold images independently instead of keeping a statue's images in
    /// one fold [D-EVAL-2].
    #[arg(long)]
    pub per_image_folds: bool,
    /// Cross-validation seed [D-EVAL-1]; also seeds training.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Number of folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Evaluate each source on all of its own samples instead of the samples
    /// shared by every source [D-FEA-1].
    #[arg(long)]
    pub per_source_universe: bool,
    /// Label-shuffle control: permute labels among statues with this seed
    /// before evaluation.
    #[arg(long, value_name = "SEED")]
    pub shuffle_labels: Option<u64>,
    /// Tasks a source may serve, as SOURCE=T1,T3; repeatable. Without it,
    /// graph sources skip tasks whose labels are graph attributes.
    #[arg(long = "allow", value_name = "SOURCE=TASKS")]
    pub allow: Vec<String>,
    /// Network epochs [D-LRN-2].
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Network batch size [D-LRN-2].
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Adam learning rate [D-LRN-2].
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// SVM regularization trade-off C [D-LRN-1].
    #[arg(long, default_value_t = 1.0)]
    pub penalty_c: f64,
    /// Maximum coordinate-descent passes per binary SVM.
    #[arg(long, default_value_t = 1000)]
    pub svm_epochs: usize,
    /// Train without the N/(k·n_m) class weights.
    #[arg(long)]
    pub no_class_weights: bool,
    /// Skip per-fold feature standardization [D-LRN-4].
    #[arg(long)]
    pub no_standardize: bool,
    /// Output directory for results.csv, summary.csv, table.txt, suite.json.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Markdown,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ReportArgs {
    /// suite.json written by `classify`.
    #[arg(long, value_name = "FILE")]
    pub suite: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
    /// Write the table here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SynthArgs {
    /// Output directory for catalog.csv and landmarks.json.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub statues_per_style: usize,
    #[arg(long, default_value_t = 4)]
    pub max_images_per_statue: usize,
    /// Added to the China style's nose proportion.
    #[arg(long, default_value_t = 0.05)]
    pub china_nose_offset: f64,
    #[arg(long, default_value_t = 0.01)]
    pub proportion_noise: f64,
    #[arg(long, default_value_t = 0.01)]
    pub landmark_noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write image_embedding_full.csv with style-dependent 2048-d vectors.
    #[arg(long)]
    pub image_embeddings: bool,
    /// Distance of each style's mean embedding from the origin.
    #[arg(long, default_value_t = 2.0)]
    pub embedding_separation: f64,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TemplateArgs {
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}
