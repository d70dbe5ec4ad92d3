//! Command-line front end.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{self, RunSpec};
use crate::data::{load_mnist, ImageSet, Split};
use crate::error::{Error, ErrorClass, Result};
use crate::evaluation::{evaluate_model, KMeansConfig};
use crate::fetch::{self, sha256_hex};
use crate::inspect;
use crate::ksubspaces::TrainTrace;
use crate::metalearn::{self, AdaptiveSampler, ForcedSampler, RandomSampler, SearchConfig, SearchSpace, TrialData, TrialOptions};
use crate::network::{self, data_digest, load_model, save_model, ProbeSet, StackOptions, Tap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Jsonl,
}

#[derive(Debug, Parser)]
#[command(name = "energynet", version, about = "Convolutional energy layers trained by minibatch K-Subspaces")]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory holding the MNIST IDX files.
    #[arg(long, global = true, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Directory for models, curves, reports and provenance.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download MNIST and verify it by digest.
    Fetch(FetchArgs),
    /// Train a network and write the model file and energy curves.
    Train(TrainArgs),
    /// Clustering error of a trained model at each tap.
    Eval(EvalArgs),
    /// Hyperparameter search scored by train-set clustering error.
    Search(SearchArgs),
    /// Write kernel, whitening-filter and feature-map images.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// URL or local path of a gzipped tarball containing the IDX files.
    #[arg(long, default_value = fetch::DEFAULT_SOURCE)]
    pub source: String,
}

#[derive(Debug, Args, Clone)]
pub struct SpecArgs {
    /// Bundled preset name (e.g. table1, table6-2layer, ablation-random).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ablation switch applied on top of the spec; repeatable.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
}

impl SpecArgs {
    fn resolve(&self) -> Result<RunSpec> {
        let mut spec = match (&self.preset, &self.config) {
            (Some(p), None) => config::preset(p)?,
            (None, Some(c)) => config::load_run_spec(c)?,
            (None, None) => config::preset("table1")?,
            (Some(_), Some(_)) => return Err(Error::Config("give either --preset or --config".into())),
        };
        for a in &self.ablate {
            spec.network.ablations.apply(a)?;
        }
        spec.network.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Model output path (default: <out-dir>/model.enet).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Also track test-set energy and write this layer's curve here.
    #[arg(long)]
    pub dump_energy: Option<PathBuf>,
    /// Layer whose curve goes to --dump-energy.
    #[arg(long, default_value_t = 1)]
    pub energy_layer: usize,
    /// Test images used for the tracked energy.
    #[arg(long, default_value_t = 1000)]
    pub probe_images: usize,
    /// Patch locations per probe image (0 = all).
    #[arg(long, default_value_t = 10)]
    pub probe_patches: usize,
    /// Probe every N iterations.
    #[arg(long, default_value_t = 1)]
    pub probe_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model file (default: <out-dir>/model.enet).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Comma-separated taps: pixels, zca, layer1.., pooled (default: all).
    #[arg(long, value_delimiter = ',')]
    pub taps: Vec<String>,
    /// Use only the first N images of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Random,
    Adaptive,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 50)]
    pub budget: usize,
    /// Labels revealed to the scorer.
    #[arg(long, default_value_t = 60000)]
    pub labels: usize,
    #[arg(long, value_enum, default_value_t = SamplerArg::Random)]
    pub sampler: SamplerArg,
    /// Config files replayed as the first trials.
    #[arg(long, num_args = 1..)]
    pub forced_specs: Vec<PathBuf>,
    /// Preset names replayed as the first trials (after --forced-specs).
    #[arg(long, num_args = 1..)]
    pub forced_presets: Vec<String>,
    /// History file to continue (default: <out-dir>/history.jsonl).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Also score each trial on the test split.
    #[arg(long)]
    pub with_test: bool,
    /// Per-trial time cap in minutes.
    #[arg(long, default_value_t = 15.0)]
    pub trial_minutes: f64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(subcommand)]
    pub what: InspectWhat,
    /// Model file (default: <out-dir>/model.enet).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum InspectWhat {
    /// One image per S-row of a layer.
    Kernels {
        #[arg(long, default_value_t = 1)]
        layer: usize,
    },
    /// Whitening kernel and its DC fraction.
    Zca,
    /// C-map grids for the first test image of each digit.
    Maps {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        digits: Vec<u8>,
    },
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(format: Format, text: &str, value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let line = match format {
        Format::Text => text.to_string(),
        Format::Jsonl => serde_json::to_string(value)?,
    };
    let _ = writeln!(out, "{line}");
    Ok(())
}

fn load_split(cli: &Cli, split: Split, limit: Option<usize>) -> Result<ImageSet> {
    let set = load_mnist(&cli.data_dir, split).map_err(|e| match e {
        Error::Io { path, source } => Error::Io {
            source: std::io::Error::new(source.kind(), format!("{source} (run `energynet fetch` first)")),
            path,
        },
        other => other,
    })?;
    Ok(match limit {
        Some(n) => set.head(n),
        None => set,
    })
}

fn model_path(cli: &Cli, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cli.out_dir.join("model.enet"))
}

fn write_provenance(cli: &Cli, name: &str, value: serde_json::Value) -> Result<()> {
    ensure_dir(&cli.out_dir)?;
    let path = cli.out_dir.join(name);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    write_file(&path, text.as_bytes())
}

fn run_fetch(cli: &Cli, args: &FetchArgs) -> Result<()> {
    let report = fetch::fetch_mnist(&args.source, &cli.data_dir)?;
    let msg = if report.already_present {
        format!("MNIST already present and verified in {}", cli.data_dir.display())
    } else {
        format!("wrote {} verified files to {}", report.written.len(), cli.data_dir.display())
    };
    emit(cli.format, &msg, &json!({"dir": cli.data_dir, "already_present": report.already_present}))
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let spec = args.spec.resolve()?;
    if args.dump_energy.is_some() && (args.energy_layer == 0 || args.energy_layer > spec.network.layers.len()) {
        return Err(Error::Config(format!("--energy-layer {} outside the network", args.energy_layer)));
    }
    let train = load_split(cli, Split::Train, args.train_limit)?;
    let probe = match &args.dump_energy {
        Some(_) => {
            let test = load_split(cli, Split::Test, Some(args.probe_images))?;
            Some(ProbeSet {
                images: test.into_tensor(),
                patches_per_image: args.probe_patches,
                every: args.probe_every.max(1),
            })
        }
        None => None,
    };
    let opts = StackOptions {
        schedule: spec.schedule,
        seed: cli.seed,
        probe,
        ..StackOptions::default()
    };
    let (model, traces) = network::train_stack(train.pixels(), &spec.network, &opts)?;
    ensure_dir(&cli.out_dir)?;
    let path = model_path(cli, &args.model);
    save_model(&model, &path)?;
    for (i, t) in traces.iter().enumerate() {
        write_file(&cli.out_dir.join(format!("energy_layer{}.txt", i + 1)), t.to_text().as_bytes())?;
    }
    if let Some(dump) = &args.dump_energy {
        let trace: &TrainTrace = &traces[args.energy_layer - 1];
        write_file(dump, trace.to_text().as_bytes())?;
    }
    let model_bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let config_text = config::to_toml(&spec)?;
    write_provenance(
        cli,
        "provenance.json",
        json!({
            "command": "train",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cli.seed,
            "config_sha256": sha256_hex(config_text.as_bytes()),
            "config": spec,
            "train_images": train.len(),
            "data_digest": model.provenance.data_digest,
            "model": path,
            "model_sha256": sha256_hex(&model_bytes),
        }),
    )?;
    let iters: Vec<usize> = traces.iter().map(|t| t.iterations.len()).collect();
    emit(
        cli.format,
        &format!("trained {} layers ({:?} iterations) -> {}", model.depth(), iters, path.display()),
        &json!({"model": path, "iterations": iters, "model_sha256": sha256_hex(&model_bytes)}),
    )
}

#[derive(Serialize)]
struct EvalRow {
    tap: String,
    dim: usize,
    error: f64,
    split: &'static str,
}

fn run_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let path = model_path(cli, &args.model);
    let model = load_model(&path)?;
    let taps: Vec<Tap> = if args.taps.is_empty() {
        Tap::all(model.depth())
    } else {
        args.taps.iter().map(|t| t.parse()).collect::<Result<_>>()?
    };
    let (split, name) = match args.split {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let images = load_split(cli, split, args.limit)?;
    let km = KMeansConfig {
        restarts: args.restarts,
        ..KMeansConfig::default()
    };
    if cli.format == Format::Text {
        println!("{:<10} {:>8} {:>10}", "tap", "dim", "error(%)");
    }
    let mut rows = Vec::new();
    for tap in taps {
        let s = evaluate_model(&model, &images, tap, &km, cli.seed)?;
        let row = EvalRow {
            tap: s.tap.clone(),
            dim: s.dim,
            error: s.error,
            split: name,
        };
        emit(cli.format, &format!("{:<10} {:>8} {:>10.2}", row.tap, row.dim, 100.0 * row.error), &row)?;
        rows.push(row);
    }
    ensure_dir(&cli.out_dir)?;
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_file(&cli.out_dir.join(format!("eval_{name}.jsonl")), text.as_bytes())?;
    let model_bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    write_provenance(
        cli,
        &format!("provenance_eval_{name}.json"),
        json!({
            "command": "eval",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cli.seed,
            "model_sha256": sha256_hex(&model_bytes),
            "images": images.len(),
            "data_digest": data_digest(images.pixels()),
            "restarts": args.restarts,
        }),
    )
}

fn run_search(cli: &Cli, args: &SearchArgs) -> Result<()> {
    if !(args.trial_minutes > 0.0) {
        return Err(Error::Config("--trial-minutes must be positive".into()));
    }
    let train = load_split(cli, Split::Train, args.train_limit)?;
    let test = if args.with_test { Some(load_split(cli, Split::Test, None)?) } else { None };
    let data = TrialData::new(train, test, args.labels, cli.seed)?;
    let mut forced = Vec::new();
    for p in &args.forced_specs {
        forced.push(config::load_run_spec(p)?.network);
    }
    for p in &args.forced_presets {
        forced.push(config::preset(p)?.network);
    }
    let cfg = SearchConfig {
        budget: args.budget,
        workers: cli.workers.unwrap_or(1).max(1),
        seed: cli.seed,
        trial: TrialOptions {
            kmeans: KMeansConfig {
                restarts: args.restarts,
                ..KMeansConfig::default()
            },
            time_cap: Some(Duration::from_secs_f64(args.trial_minutes * 60.0)),
            ..TrialOptions::default()
        },
    };
    ensure_dir(&cli.out_dir)?;
    let history = args.resume.clone().unwrap_or_else(|| cli.out_dir.join("history.jsonl"));
    let space = SearchSpace::default();
    let outcome = match args.sampler {
        SamplerArg::Random => metalearn::search(&space, &data, &ForcedSampler { specs: forced, then: RandomSampler }, &cfg, Some(&history))?,
        SamplerArg::Adaptive => metalearn::search(
            &space,
            &data,
            &ForcedSampler {
                specs: forced,
                then: AdaptiveSampler::default(),
            },
            &cfg,
            Some(&history),
        )?,
    };
    for r in &outcome.history {
        let status = match &r.status {
            metalearn::TrialStatus::Ok => "ok".to_string(),
            metalearn::TrialStatus::Failed(m) => format!("failed: {m}"),
        };
        emit(
            cli.format,
            &format!("trial {:>4}  train error {:>6.2}%  {status}", r.index, 100.0 * r.train_error),
            r,
        )?;
    }
    let best = RunSpec {
        network: outcome.best.spec.clone(),
        schedule: cfg.trial.schedule,
    };
    write_file(&cli.out_dir.join("best_spec.toml"), config::to_toml(&best)?.as_bytes())?;
    write_provenance(
        cli,
        "provenance_search.json",
        json!({
            "command": "search",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cli.seed,
            "sampler": format!("{:?}", args.sampler).to_lowercase(),
            "adaptive_sampler": format!("{:?}", AdaptiveSampler::default()),
            "budget": args.budget,
            "label_budget": args.labels,
            "workers": cfg.workers,
            "search_space": space,
            "history": history,
            "data_digest": data_digest(data.train.pixels()),
        }),
    )?;
    if cli.format == Format::Text {
        println!(
            "best trial {} with train error {:.2}% (spec in {})",
            outcome.best.index,
            100.0 * outcome.best.train_error,
            cli.out_dir.join("best_spec.toml").display()
        );
    }
    Ok(())
}

fn run_inspect(cli: &Cli, args: &InspectArgs) -> Result<()> {
    let model = load_model(model_path(cli, &args.model))?;
    let dir = cli.out_dir.join("inspect");
    ensure_dir(&dir)?;
    let mut notes = Vec::new();
    let entries = match &args.what {
        InspectWhat::Kernels { layer } => inspect::dump_kernels(&model, *layer, &dir)?,
        InspectWhat::Zca => {
            let (e, dc) = inspect::dump_zca(&model, &dir)?;
            notes.push(format!("dc_fraction {dc:.6}"));
            emit(cli.format, &format!("dc_fraction {dc:.4}"), &json!({"dc_fraction": dc}))?;
            e
        }
        InspectWhat::Maps { digits } => {
            let test = load_split(cli, Split::Test, None)?;
            let labels = test.labels().expect("MNIST has labels");
            let mut idx = Vec::new();
            let mut names = Vec::new();
            for &d in digits {
                let i = labels
                    .iter()
                    .position(|&l| l == d)
                    .ok_or_else(|| Error::Config(format!("no test image of digit {d}")))?;
                idx.push(i);
                names.push(format!("digit{d}"));
            }
            let picked = test.select(&idx);
            inspect::dump_maps(&model, picked.pixels(), &names, &dir)?
        }
    };
    inspect::write_sidecar(&dir, &entries, &notes)?;
    emit(
        cli.format,
        &format!("wrote {} images to {}", entries.len(), dir.display()),
        &json!({"images": entries.len(), "dir": dir}),
    )
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Runtime => EXIT_RUNTIME,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // Ignore the error if a pool already exists (e.g. repeated calls in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    match &cli.command {
        Command::Fetch(a) => run_fetch(cli, a),
        Command::Train(a) => run_train(cli, a),
        Command::Eval(a) => run_eval(cli, a),
        Command::Search(a) => run_search(cli, a),
        Command::Inspect(a) => run_inspect(cli, a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
