use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "memprior", version, about = "Retrieval-grounded visual priors for open-vocabulary detection")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,

    #[command(subcommand)]
    pub command: Command,
}

/// Configuration file plus per-field overrides. Flags win over the file.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// TOML configuration file with [memory], [retrieval], [index], [priors], [refine] and [seed] tables
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Root seed for every stage [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Phrase weight in keys and queries [default: 1.0]
    #[arg(long, global = true)]
    pub w_p: Option<f32>,
    /// Scene weight in keys and queries [default: 0.3]
    #[arg(long, global = true)]
    pub w_s: Option<f32>,
    /// Global image weight in keys and queries [default: 0.01]
    #[arg(long, global = true)]
    pub w_g: Option<f32>,
    /// Minimum normalized box area kept in memory [default: 0.0001]
    #[arg(long, global = true)]
    pub min_area: Option<f64>,
    /// IoU at which same-image, same-phrase boxes merge [default: 0.9]
    #[arg(long, global = true)]
    pub iou_threshold: Option<f64>,
    /// Fraction of lowest-sharpness records dropped [default: 0.1]
    #[arg(long, global = true)]
    pub drop_fraction: Option<f64>,

    /// Entries retrieved per category [default: 12]
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Softmax temperature for prototype weights [default: 0.07]
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Candidate pool rescored exactly on the IVF-PQ route [default: 200]
    #[arg(long, global = true)]
    pub recall_size: Option<usize>,

    /// Inverted lists [default: 256]
    #[arg(long, global = true)]
    pub nlist: Option<usize>,
    /// Product-quantizer subspaces [default: 16]
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Bits per subspace code [default: 8]
    #[arg(long, global = true)]
    pub nbits: Option<usize>,
    /// Lists probed per query [default: 16]
    #[arg(long, global = true)]
    pub nprobe: Option<usize>,
    /// Lloyd iterations for coarse and sub-quantizer training [default: 25]
    #[arg(long, global = true)]
    pub kmeans_iters: Option<usize>,

    /// Gaussian smoothing of heatmaps, in cells [default: 1.0]
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Minimum heatmap value for an anchor [default: 0.5]
    #[arg(long, global = true)]
    pub threshold: Option<f32>,
    /// Anchor suppression radius in cells of the longer side [default: 3]
    #[arg(long, global = true)]
    pub radius_cells: Option<f64>,
    /// Anchors kept per category [default: 10]
    #[arg(long, global = true)]
    pub max_anchors: Option<usize>,

    /// Side of the dense-feature window, odd [default: 5]
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Divide dense features by the window's heatmap mass [default: off]
    #[arg(long, global = true)]
    pub normalized_dense: bool,
    /// Pooling factor per feature scale, comma separated [default: 1]
    #[arg(long, global = true, value_delimiter = ',')]
    pub scales: Option<Vec<usize>>,
    /// Parameter initialization when no parameter file is given [default: seeded]
    #[arg(long, global = true, value_enum)]
    pub init: Option<InitArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum InitArg {
    Zero,
    Seeded,
}

/// Embedding tables for text, global image and patch features.
#[derive(Args, Debug, Clone)]
pub struct ProviderArgs {
    /// Text embedding table (phrases and scenes)
    #[arg(long, value_name = "PATH")]
    pub text: PathBuf,
    /// Global image embedding table
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Patch feature grids
    #[arg(long, value_name = "PATH")]
    pub features: PathBuf,
}

/// Memory bank and optional IVF-PQ index used for retrieval.
#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    #[arg(long, value_name = "PATH")]
    pub bank: PathBuf,
    /// IVF-PQ index; exact search is used when omitted
    #[arg(long, value_name = "PATH")]
    pub index: Option<PathBuf>,
}

/// The image being processed and its candidate categories.
#[derive(Args, Debug, Clone)]
pub struct QueryArgs {
    #[arg(long)]
    pub image_id: String,
    /// Scene descriptor of the image
    #[arg(long, default_value = "")]
    pub scene: String,
    /// Candidate category; repeat for several
    #[arg(long = "category")]
    pub categories: Vec<String>,
    /// File with one candidate category per line
    #[arg(long, value_name = "PATH")]
    pub categories_file: Option<PathBuf>,
    /// Ignore memory entries grounded in the same image
    #[arg(long)]
    pub exclude_self: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter grounding records and write a memory bank
    BuildMemory {
        /// NDJSON grounding records
        #[arg(long, value_name = "PATH")]
        records: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
        /// Image whose records are removed before filtering; repeatable
        #[arg(long)]
        exclude_image: Vec<String>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train an IVF-PQ index over a bank's keys
    BuildIndex {
        #[arg(long, value_name = "PATH")]
        bank: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Retrieve neighbors and prototype weights per category (JSON)
    Retrieve {
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// Output file; stdout when omitted
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Write heatmap priors and anchors per category
    Priors {
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Refine prompts from a heatmap and its anchors
    Refine {
        /// Patch feature grids
        #[arg(long, value_name = "PATH")]
        features: PathBuf,
        #[arg(long)]
        image_id: String,
        /// Heatmap raster written by `priors`
        #[arg(long, value_name = "PATH")]
        heatmap: PathBuf,
        /// Anchor NDJSON written by `priors`
        #[arg(long, value_name = "PATH")]
        anchors: PathBuf,
        /// Category to refine when the anchor file holds several
        #[arg(long)]
        category: Option<String>,
        /// Refinement parameter file; initialized from the config when omitted
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        /// Prompt vectors; metadata goes to `<out>.json`
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Run every stage for one image and write a JSON report
    Pipeline {
        #[command(flatten)]
        search: SearchArgs,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// Refinement parameter file; initialized from the config when omitted
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        /// Category embeddings for the stand-in scoring head; seeded when omitted
        #[arg(long, value_name = "PATH")]
        head: Option<PathBuf>,
        /// Report file; stdout when omitted
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Also write all prompt vectors here (metadata to `<path>.json`)
        #[arg(long, value_name = "PATH")]
        prompts_out: Option<PathBuf>,
    },
    /// Generate a seeded synthetic scenario
    GenSynthetic {
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// JSON scenario description; defaults are used for absent fields
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        /// Replace the planted regions with this many seeded ones
        #[arg(long)]
        planted: Option<usize>,
        /// Per-component feature noise
        #[arg(long)]
        noise: Option<f32>,
        /// Scenario seed
        #[arg(long)]
        scenario_seed: Option<u64>,
    },
    /// Measure IVF-PQ throughput and recall against exact search
    Bench {
        #[arg(long, value_name = "PATH")]
        bank: PathBuf,
        #[arg(long, value_name = "PATH")]
        index: PathBuf,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Norm of the perturbation applied to sampled keys
        #[arg(long, default_value_t = 0.1)]
        query_noise: f32,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Write a refinement parameter file
    InitParams {
        /// Prompt dimension (the feature dimension)
        #[arg(long)]
        dim: usize,
        /// Number of per-scale sets; one shared set when omitted
        #[arg(long)]
        per_scale: Option<usize>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML
    Config,
}
