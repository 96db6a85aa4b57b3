//! Command-line front end.
//!
//! Every value can come from a `key = value` file passed with `--config` or from
//! the matching `--flag`; flags win. Each artifact gets a `.meta` sidecar echoing
//! the resolved configuration.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::annealing::{self, TrainConfig, TrainReport};
use crate::atree::{self, ATree, SearchParams};
use crate::codebook::{self, hash_hex, Codebook, CrossProductTable, EncodedDataset};
use crate::data_io::{self, GroundTruth, SyntheticMode, VectorSet};
use crate::diagnostics::{self, EvalReport, SearchIndex};
use crate::meta::{sidecar_path, Meta};
use crate::{Error, Result};

/// Comma-separated list value.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|_| format!("invalid list element {p:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(List)
    }
}

impl fmt::Display for List<usize> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, f64, f32, String, List<usize>, List<PathBuf>);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Option<Self> {
        Some(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl fmt::Display for List<PathBuf> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.display().to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty $(= $default:expr)? ),* $(,)?) => {
        /// Values shared by all commands.
        #[derive(Debug, Clone, Default, PartialEq, Args)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* #[arg(long)] pub $field: Option<$ty>, )*
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets `key` from its text form; unknown keys and unparsable values are errors.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let key = key.replace('-', "_");
                match key.as_str() {
                    $( stringify!($field) => {
                        self.$field = Some(<$ty as ConfigValue>::parse_value(value).ok_or_else(|| {
                            Error::invalid(format!("invalid value {value:?} for {key}"))
                        })?);
                    } )*
                    _ => return Err(Error::invalid(format!("unknown configuration key {key:?}"))),
                }
                Ok(())
            }

            /// `self` with every value present in `flags` replaced.
            pub fn overlay(mut self, flags: &RunConfig) -> Self {
                $( if flags.$field.is_some() { self.$field = flags.$field.clone(); } )*
                self
            }

            /// Fills unset keys that have defaults.
            pub fn with_defaults(mut self) -> Self {
                $( $( if self.$field.is_none() { self.$field = Some($default); } )? )*
                self
            }

            pub fn echo(&self) -> Meta {
                let mut meta = Meta::new();
                $( if let Some(v) = &self.$field { meta.push(stringify!($field), v.render()); } )*
                meta
            }
        }
    };
}

run_config! {
    /// Base vectors (.fvecs/.bvecs).
    base: PathBuf,
    /// Query vectors.
    queries: PathBuf,
    /// Training vectors; defaults to the base set.
    learn: PathBuf,
    /// Ground truth (.ivecs).
    ground_truth: PathBuf,
    /// Codebook file.
    codebook: PathBuf,
    /// Starting codebook for refine/online training.
    init: PathBuf,
    /// Encoded dataset file.
    codes: PathBuf,
    /// Tree file.
    tree: PathBuf,
    /// Output file for search, eval and diagnose.
    out: PathBuf,
    /// Training log CSV; defaults to `<codebook>.train.csv`.
    report: PathBuf,
    /// Online training batches.
    batches: List<PathBuf>,
    /// Synthetic base size.
    n: usize = 10_000,
    /// Synthetic query count.
    nq: usize = 100,
    /// Synthetic dimension.
    d: usize = 32,
    /// Synthetic mixture components.
    clusters: usize = 64,
    /// Synthetic noise standard deviation.
    spread: f32 = 0.2,
    /// Dictionaries.
    m: usize = 8,
    /// Codewords per dictionary.
    k: usize = 256,
    /// Encoding beam width.
    beam: usize = 10,
    /// Dimension-schedule stages.
    stages: usize = 10,
    /// Lloyd iterations per stage.
    kmeans_iters: usize = 30,
    /// Maximum training sweeps.
    sweeps: usize = 10,
    /// Relative improvement below which training stops.
    rel_tol: f64 = 1e-3,
    /// Seed for every random stream.
    seed: u64 = 0,
    /// First-layer candidate budget.
    l0: usize = 8,
    /// Budget growth factor per layer.
    ls: f64 = 2.0,
    /// L0 values swept by eval.
    l0_list: List<usize> = List(vec![1, 2, 4, 8, 16, 32, 64]),
    /// Number of results.
    r: usize = 100,
    /// Neighbors stored per query in the ground truth.
    gt_depth: usize = 100,
    /// Row cap for the MI matrix.
    sample_cap: usize = diagnostics::DEFAULT_SAMPLE_CAP,
    /// Neighborhood size for the locality profile.
    neighborhood: usize = 10,
    /// Worker threads (default: all cores).
    threads: usize,
}

impl RunConfig {
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in Meta::parse(text)?.entries() {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Config file (if any) overlaid with flags, then defaults.
    pub fn resolve(file: Option<&Path>, flags: &RunConfig) -> Result<Self> {
        let base = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse_text(&text)?
            }
            None => RunConfig::default(),
        };
        Ok(base.overlay(flags).with_defaults())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            m: self.m.unwrap_or(8),
            k: self.k.unwrap_or(256),
            beam: self.beam.unwrap_or(10),
            schedule_stages: self.stages.unwrap_or(10),
            kmeans_iters: self.kmeans_iters.unwrap_or(30),
            sweeps: self.sweeps.unwrap_or(10),
            rel_tol: self.rel_tol.unwrap_or(1e-3),
            seed: self.seed.unwrap_or(0),
        }
    }
}

fn require<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::invalid(format!("missing required value: --{} (or `{key}` in the config file)", key.replace('_', "-"))))
}

fn val<T: Copy>(v: &Option<T>) -> T {
    v.expect("resolved by defaults")
}

#[derive(Debug, Parser)]
#[command(name = "annealvq", version, about = "Dictionary-annealed additive quantization and prefix-tree search")]
pub struct Cli {
    /// key = value configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic base and query sets.
    Gen {
        #[command(flatten)]
        cfg: RunConfig,
        /// Uniform data instead of a Gaussian mixture.
        #[arg(long)]
        uniform: bool,
    },
    /// Exact nearest neighbors of the queries.
    GroundTruth {
        #[command(flatten)]
        cfg: RunConfig,
    },
    /// Learn a codebook.
    Train {
        #[command(flatten)]
        cfg: RunConfig,
        #[arg(long, value_enum, default_value = "scratch")]
        mode: TrainMode,
    },
    /// Encode vectors with a codebook.
    Encode {
        #[command(flatten)]
        cfg: RunConfig,
    },
    /// Build a search tree over encoded vectors.
    BuildTree {
        #[command(flatten)]
        cfg: RunConfig,
    },
    /// Answer queries.
    Search {
        #[command(flatten)]
        cfg: RunConfig,
        /// Scan every code instead of the tree.
        #[arg(long)]
        exhaustive: bool,
        /// Search the tree without pruning.
        #[arg(long, conflicts_with = "exhaustive")]
        unbounded: bool,
    },
    /// Recall and latency over a sweep of L0 values.
    Eval {
        #[command(flatten)]
        cfg: RunConfig,
        /// Add an exhaustive-ADC baseline row (needs --codes).
        #[arg(long)]
        exhaustive: bool,
    },
    /// Entropy diagnostics of the codes.
    Diagnose {
        #[command(flatten)]
        cfg: RunConfig,
        /// The ground truth rows are the base vectors themselves.
        #[arg(long)]
        self_join: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainMode {
    Scratch,
    Refine,
    Online,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Scratch => "scratch",
            TrainMode::Refine => "refine",
            TrainMode::Online => "online",
        })
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config_file = cli.config.clone();
    let resolve = |flags: &RunConfig| -> Result<RunConfig> {
        let cfg = RunConfig::resolve(config_file.as_deref(), flags)?;
        set_threads(cfg.threads)?;
        Ok(cfg)
    };
    match &cli.command {
        Command::Gen { cfg, uniform } => cmd_gen(&resolve(cfg)?, *uniform),
        Command::GroundTruth { cfg } => cmd_ground_truth(&resolve(cfg)?),
        Command::Train { cfg, mode } => cmd_train(&resolve(cfg)?, *mode),
        Command::Encode { cfg } => cmd_encode(&resolve(cfg)?),
        Command::BuildTree { cfg } => cmd_build_tree(&resolve(cfg)?),
        Command::Search {
            cfg,
            exhaustive,
            unbounded,
        } => cmd_search(&resolve(cfg)?, *exhaustive, *unbounded),
        Command::Eval { cfg, exhaustive } => cmd_eval(&resolve(cfg)?, *exhaustive),
        Command::Diagnose { cfg, self_join } => cmd_diagnose(&resolve(cfg)?, *self_join),
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn write_meta(artifact: &Path, command: &str, cfg: &RunConfig, extra: Meta) -> Result<()> {
    let mut meta = Meta::new();
    meta.push("command", command);
    meta.push("version", env!("CARGO_PKG_VERSION"));
    meta.extend(cfg.echo());
    meta.extend(extra);
    meta.write(sidecar_path(artifact))
}

fn hash_meta(codebook: &Codebook) -> Meta {
    let mut m = Meta::new();
    m.push("codebook_hash", hash_hex(&codebook.content_hash()));
    m
}

fn cmd_gen(cfg: &RunConfig, uniform: bool) -> Result<()> {
    let base_path = require(&cfg.base, "base")?;
    let (n, nq, d) = (val(&cfg.n), val(&cfg.nq), val(&cfg.d));
    let mode = if uniform {
        SyntheticMode::Uniform
    } else {
        SyntheticMode::GaussianMixture {
            clusters: val(&cfg.clusters),
            spread: val(&cfg.spread),
        }
    };
    let all = data_io::generate_synthetic(n + nq, d, mode, val(&cfg.seed))?;
    let base = all.select(&(0..n).collect::<Vec<_>>());
    data_io::write_fvecs(base_path, &base)?;
    let mut extra = Meta::new();
    extra.push("mode", if uniform { "uniform" } else { "mixture" });
    write_meta(base_path, "gen", cfg, extra.clone())?;
    println!("wrote {} vectors (d={d}) to {}", n, base_path.display());
    if nq > 0 {
        let q_path = require(&cfg.queries, "queries")?;
        let queries = all.select(&(n..n + nq).collect::<Vec<_>>());
        data_io::write_fvecs(q_path, &queries)?;
        write_meta(q_path, "gen", cfg, extra)?;
        println!("wrote {nq} queries to {}", q_path.display());
    }
    Ok(())
}

fn cmd_ground_truth(cfg: &RunConfig) -> Result<()> {
    let base = data_io::read_vectors(require(&cfg.base, "base")?)?;
    let queries = data_io::read_vectors(require(&cfg.queries, "queries")?)?;
    let out = require(&cfg.ground_truth, "ground_truth")?;
    let depth = val(&cfg.gt_depth).min(base.len());
    let gt = data_io::brute_force_knn(&base, &queries, depth)?;
    data_io::write_ivecs(out, &gt.to_ivecs_rows()?)?;
    write_meta(out, "ground-truth", cfg, Meta::new())?;
    println!("wrote {depth} neighbors for {} queries to {}", queries.len(), out.display());
    Ok(())
}

fn training_set(cfg: &RunConfig) -> Result<VectorSet> {
    let path = cfg.learn.as_ref().or(cfg.base.as_ref()).ok_or_else(|| {
        Error::invalid("missing training data: --learn or --base (or `learn`/`base` in the config file)")
    })?;
    data_io::read_vectors(path)
}

fn write_report(cfg: &RunConfig, codebook_path: &Path, report: &TrainReport) -> Result<PathBuf> {
    let path = cfg.report.clone().unwrap_or_else(|| {
        let mut s = codebook_path.as_os_str().to_owned();
        s.push(".train.csv");
        PathBuf::from(s)
    });
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    report.write_csv(std::io::BufWriter::new(file))?;
    write_meta(&path, "train", cfg, Meta::new())?;
    Ok(path)
}

fn cmd_train(cfg: &RunConfig, mode: TrainMode) -> Result<()> {
    let out = require(&cfg.codebook, "codebook")?.clone();
    let tc = cfg.train_config();
    let mut extra = Meta::new();
    extra.push("mode", mode);
    let (codebook, report) = match mode {
        TrainMode::Scratch => {
            let data = training_set(cfg)?;
            let trained = annealing::train_from_scratch(&data, &tc)?;
            (trained.codebook, trained.report)
        }
        TrainMode::Refine => {
            let init = Codebook::load(require(&cfg.init, "init")?)?;
            let data = training_set(cfg)?;
            annealing::train_online(&init, &data, &tc)?
        }
        TrainMode::Online => {
            let batches = require(&cfg.batches, "batches")?;
            if batches.0.is_empty() {
                return Err(Error::invalid("--batches lists no files"));
            }
            let mut current = match &cfg.init {
                Some(p) => Some(Codebook::load(p)?),
                None => None,
            };
            let mut report = TrainReport::default();
            for (i, batch_path) in batches.0.iter().enumerate() {
                let batch = data_io::read_vectors(batch_path)?;
                let (cb, r) = match &current {
                    None => {
                        let t = annealing::train_from_scratch(&batch, &tc)?;
                        (t.codebook, t.report)
                    }
                    Some(cb) => annealing::train_online(cb, &batch, &tc)?,
                };
                let ckpt = checkpoint_path(&out, i + 1);
                let last = *r.steps.last().expect("training records steps");
                annealing::write_checkpoint(&ckpt, &cb, &last, &tc)?;
                println!(
                    "batch {} ({}): distortion {:.6} -> checkpoint {}",
                    i + 1,
                    batch_path.display(),
                    last.distortion,
                    ckpt.display()
                );
                report.steps.extend(r.steps.iter().map(|s| annealing::TrainStep {
                    sweep: s.sweep,
                    ..*s
                }));
                current = Some(cb);
            }
            (current.expect("at least one batch"), report)
        }
    };
    codebook.save(&out)?;
    extra.extend(hash_meta(&codebook));
    if let Some(d) = report.final_distortion() {
        extra.push("final_distortion", d);
    }
    write_meta(&out, "train", cfg, extra)?;
    let report_path = write_report(cfg, &out, &report)?;
    println!(
        "codebook {} (M={}, K={}, d={}); final distortion {:.6}; log {}",
        out.display(),
        codebook.num_dicts(),
        codebook.num_codewords(),
        codebook.dim(),
        report.final_distortion().unwrap_or(f64::NAN),
        report_path.display()
    );
    Ok(())
}

/// `<codebook>.ckpt<i>`.
pub fn checkpoint_path(codebook: &Path, i: usize) -> PathBuf {
    let mut s = codebook.as_os_str().to_owned();
    s.push(format!(".ckpt{i}"));
    PathBuf::from(s)
}

fn cmd_encode(cfg: &RunConfig) -> Result<()> {
    let codebook = Codebook::load(require(&cfg.codebook, "codebook")?)?;
    let data = data_io::read_vectors(require(&cfg.base, "base")?)?;
    let out = require(&cfg.codes, "codes")?;
    if data.dim() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: data.dim(),
        });
    }
    let cross = CrossProductTable::new(&codebook);
    let (codes, errors) = codebook::encode_dataset_with_errors(&codebook, &cross, &data, val(&cfg.beam))?;
    let distortion = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    codes.save(out)?;
    let mut extra = hash_meta(&codebook);
    extra.push("distortion", distortion);
    write_meta(out, "encode", cfg, extra)?;
    println!("distortion={distortion}");
    println!("encoded {} vectors to {}", codes.len(), out.display());
    Ok(())
}

fn cmd_build_tree(cfg: &RunConfig) -> Result<()> {
    let codebook = Codebook::load(require(&cfg.codebook, "codebook")?)?;
    let codes = EncodedDataset::load(require(&cfg.codes, "codes")?)?;
    let out = require(&cfg.tree, "tree")?;
    let cross = CrossProductTable::new(&codebook);
    let tree = atree::build_atree(&codes, &codebook, &cross)?;
    tree.save(out)?;
    let mut extra = hash_meta(&codebook);
    extra.push("node_count", tree.node_count());
    extra.push("leaf_count", tree.leaf_count());
    extra.push("internal_count", tree.internal_count());
    write_meta(out, "build-tree", cfg, extra)?;
    println!(
        "tree {}: {} nodes ({} leaves, {} internal) over {} vectors",
        out.display(),
        tree.node_count(),
        tree.leaf_count(),
        tree.internal_count(),
        tree.len()
    );
    Ok(())
}

fn search_params(cfg: &RunConfig, unbounded: bool) -> SearchParams {
    if unbounded {
        SearchParams::unbounded(val(&cfg.r))
    } else {
        SearchParams::geometric(val(&cfg.l0), val(&cfg.ls), val(&cfg.r))
    }
}

fn output_writer(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<output>", io),
        other => Error::Invariant(format!("csv error: {other:?}")),
    }
}

fn cmd_search(cfg: &RunConfig, exhaustive: bool, unbounded: bool) -> Result<()> {
    let codebook = Codebook::load(require(&cfg.codebook, "codebook")?)?;
    let queries = data_io::read_vectors(require(&cfg.queries, "queries")?)?;
    if queries.dim() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: queries.dim(),
        });
    }
    let r = val(&cfg.r);
    let mut results = csv::Writer::from_writer(output_writer(cfg.out.as_ref())?);
    results.write_record(["query", "rank", "id", "distance"]).map_err(csv_err)?;
    let mut stats_rows = Vec::new();
    if exhaustive {
        let codes = EncodedDataset::load(require(&cfg.codes, "codes")?)?;
        let cross = CrossProductTable::new(&codebook);
        for (qi, q) in queries.rows().enumerate() {
            let hits = codebook::exhaustive_adc_search(&codebook, &cross, &codes, q, r.min(codes.len()))?;
            for (rank, h) in hits.iter().enumerate() {
                results
                    .write_record([qi.to_string(), rank.to_string(), h.id.to_string(), h.distance.to_string()])
                    .map_err(csv_err)?;
            }
        }
    } else {
        let tree = ATree::load(require(&cfg.tree, "tree")?)?;
        let params = search_params(cfg, unbounded);
        for (qi, q) in queries.rows().enumerate() {
            let out = atree::atree_search(&tree, &codebook, q, &params)?;
            for (rank, h) in out.neighbors.iter().enumerate() {
                results
                    .write_record([qi.to_string(), rank.to_string(), h.id.to_string(), h.distance.to_string()])
                    .map_err(csv_err)?;
            }
            stats_rows.push((qi, out.stats));
        }
    }
    results.flush().map_err(|e| Error::io("<output>", e))?;
    drop(results);
    if let Some(out) = &cfg.out {
        let mut extra = hash_meta(&codebook);
        extra.push("exhaustive", exhaustive);
        extra.push("unbounded", unbounded);
        write_meta(out, "search", cfg, extra)?;
        if !stats_rows.is_empty() {
            let mut s = out.as_os_str().to_owned();
            s.push(".stats.csv");
            let stats_path = PathBuf::from(s);
            let mut w = csv::Writer::from_writer(output_writer(Some(&stats_path))?);
            w.write_record(["query", "nodes_visited", "layer_sizes", "table_secs", "traversal_secs"])
                .map_err(csv_err)?;
            for (qi, st) in &stats_rows {
                let sizes: Vec<String> = st.layer_sizes.iter().map(|v| v.to_string()).collect();
                w.write_record([
                    qi.to_string(),
                    st.nodes_visited.to_string(),
                    sizes.join(" "),
                    st.table_secs.to_string(),
                    st.traversal_secs.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(&stats_path, e))?;
            let mean = stats_rows.iter().map(|(_, s)| s.nodes_visited).sum::<usize>() as f64 / stats_rows.len() as f64;
            println!("mean nodes visited {mean:.1} of {}", tree_nodes_hint(cfg));
        }
        println!("wrote results for {} queries to {}", queries.len(), out.display());
    }
    Ok(())
}

fn tree_nodes_hint(cfg: &RunConfig) -> String {
    cfg.tree
        .as_ref()
        .and_then(|p| Meta::read(sidecar_path(p)).ok())
        .and_then(|m| m.get("node_count").map(str::to_string))
        .unwrap_or_else(|| "?".into())
}

fn cmd_eval(cfg: &RunConfig, with_exhaustive: bool) -> Result<()> {
    let codebook = Codebook::load(require(&cfg.codebook, "codebook")?)?;
    let queries = data_io::read_vectors(require(&cfg.queries, "queries")?)?;
    let gt = GroundTruth::from_ivecs_rows(&data_io::read_ivecs(require(&cfg.ground_truth, "ground_truth")?)?)?;
    let tree = ATree::load(require(&cfg.tree, "tree")?)?;
    let (r, ls) = (val(&cfg.r), val(&cfg.ls));
    let l0s = require(&cfg.l0_list, "l0_list")?.0.clone();
    if l0s.is_empty() {
        return Err(Error::invalid("--l0-list is empty"));
    }
    let codes = match &cfg.codes {
        Some(p) => Some(EncodedDataset::load(p)?),
        None => None,
    };
    let distortion = match (&codes, &cfg.base) {
        (Some(c), Some(b)) => Some(codebook.distortion(&data_io::read_vectors(b)?, c)?),
        _ => None,
    };
    let echo: std::collections::BTreeMap<String, String> = cfg.echo().entries().iter().cloned().collect();
    let mut reports: Vec<EvalReport> = Vec::new();
    if with_exhaustive {
        let codes = codes
            .as_ref()
            .ok_or_else(|| Error::invalid("--exhaustive needs --codes"))?;
        let cross = CrossProductTable::new(&codebook);
        let index = SearchIndex::Exhaustive {
            codebook: &codebook,
            cross: &cross,
            encoded: codes,
        };
        reports.push(diagnostics::evaluate(&index, &queries, &gt, r)?);
    }
    for &l0 in &l0s {
        let index = SearchIndex::ATree {
            tree: &tree,
            codebook: &codebook,
            params: SearchParams::geometric(l0, ls, r),
        };
        reports.push(diagnostics::evaluate(&index, &queries, &gt, r)?);
    }
    for rep in &mut reports {
        rep.distortion = distortion;
        for (k, v) in &echo {
            rep.params.entry(format!("config.{k}")).or_insert_with(|| v.clone());
        }
    }

    let mut w = csv::Writer::from_writer(output_writer(cfg.out.as_ref())?);
    let cut_labels: Vec<String> = reports[0].recall.iter().map(|(c, _)| format!("recall@{c}")).collect();
    let mut header = vec!["index".to_string(), "l0".into(), "ls".into(), "queries".into(), "r".into()];
    header.extend(cut_labels);
    header.extend(
        ["mean_latency_ms", "median_latency_ms", "mean_nodes_visited", "node_count", "distortion"]
            .map(String::from),
    );
    w.write_record(&header).map_err(csv_err)?;
    for rep in &reports {
        let mut row = vec![
            rep.index.clone(),
            rep.params.get("l0").cloned().unwrap_or_default(),
            rep.params.get("ls").cloned().unwrap_or_default(),
            rep.queries.to_string(),
            rep.r.to_string(),
        ];
        row.extend(rep.recall.iter().map(|(_, v)| v.to_string()));
        row.push(rep.mean_latency_ms.to_string());
        row.push(rep.median_latency_ms.to_string());
        row.push(rep.mean_nodes_visited.map(|v| v.to_string()).unwrap_or_default());
        row.push(rep.node_count.map(|v| v.to_string()).unwrap_or_default());
        row.push(rep.distortion.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    drop(w);
    if let Some(out) = &cfg.out {
        let mut s = out.as_os_str().to_owned();
        s.push(".json");
        let json_path = PathBuf::from(s);
        let body = serde_json::json!({
            "schema_version": diagnostics::REPORT_SCHEMA_VERSION,
            "reports": reports,
        });
        std::fs::write(&json_path, serde_json::to_string_pretty(&body).expect("json"))
            .map_err(|e| Error::io(&json_path, e))?;
        write_meta(out, "eval", cfg, hash_meta(&codebook))?;
        println!("wrote {} rows to {} and {}", reports.len(), out.display(), json_path.display());
    }
    Ok(())
}

fn cmd_diagnose(cfg: &RunConfig, self_join: bool) -> Result<()> {
    let codes = EncodedDataset::load(require(&cfg.codes, "codes")?)?;
    let out = require(&cfg.out, "out")?;
    let mi = diagnostics::mi_matrix(&codes, val(&cfg.sample_cap), val(&cfg.seed))?;
    std::fs::write(out, mi.to_csv()).map_err(|e| Error::io(out, e))?;
    let mut extra = Meta::new();
    extra.push("samples", mi.samples);
    extra.push("estimator", "grassberger");
    write_meta(out, "diagnose", cfg, extra)?;
    println!("MI matrix over {} rows written to {}", mi.samples, out.display());
    if let Some(gt_path) = &cfg.ground_truth {
        let gt = GroundTruth::from_ivecs_rows(&data_io::read_ivecs(gt_path)?)?;
        let profile = diagnostics::locality_profile(&codes, &gt, val(&cfg.neighborhood), self_join)?;
        let mut s = out.as_os_str().to_owned();
        s.push(".locality.csv");
        let loc_path = PathBuf::from(s);
        let mut w = csv::Writer::from_writer(output_writer(Some(&loc_path))?);
        w.write_record(["m", "conditional_entropy", "prefix_entropy"]).map_err(csv_err)?;
        for (m, (c, h)) in profile.conditional.iter().zip(&profile.prefix_entropy).enumerate() {
            w.write_record([(m + 1).to_string(), c.to_string(), h.to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&loc_path, e))?;
        drop(w);
        let mut s = out.as_os_str().to_owned();
        s.push(".local-mi.csv");
        let local_path = PathBuf::from(s);
        std::fs::write(&local_path, profile.mi.to_csv()).map_err(|e| Error::io(&local_path, e))?;
        let mut extra = Meta::new();
        extra.push("population", profile.population);
        extra.push("self_join", self_join);
        write_meta(&loc_path, "diagnose", cfg, extra)?;
        println!(
            "locality profile over {} pooled neighbors written to {}",
            profile.population,
            loc_path.display()
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keys_and_overlay() {
        let file = RunConfig::parse_text("m = 4\nrel-tol = 0.5\nl0_list = 1,2,4\nbase = a.fvecs").unwrap();
        assert_eq!(file.m, Some(4));
        assert_eq!(file.rel_tol, Some(0.5));
        assert_eq!(file.l0_list, Some(List(vec![1, 2, 4])));
        let flags = RunConfig {
            m: Some(6),
            ..Default::default()
        };
        let merged = file.overlay(&flags).with_defaults();
        assert_eq!(merged.m, Some(6));
        assert_eq!(merged.k, Some(256));
        assert_eq!(merged.echo().get("base"), Some("a.fvecs"));
        assert!(RunConfig::parse_text("bogus = 1").is_err());
        assert!(RunConfig::parse_text("m = many").is_err());
    }

    #[test]
    fn every_key_round_trips_through_echo() {
        let cfg = RunConfig::default().with_defaults();
        let text = cfg.echo().to_text();
        assert_eq!(RunConfig::parse_text(&text).unwrap(), cfg);
        for key in RunConfig::KEYS {
            assert!(!key.contains('-'));
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["annealvq", "frobnicate"]), 2);
        assert_eq!(main_with_args(["annealvq", "encode"]), 2);
    }
}
