//! `geoloc`: generate benchmarks, train, embed, evaluate and run ablations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use geoloc_core::config::{apply_overrides, load_toml};
use geoloc_core::dataset::{load_manifest, Manifest, SatScale};
use geoloc_core::eval::{evaluate, extract_features, EvalOptions, GalleryFilter};
use geoloc_core::experiment::{run_ablate, run_compare_baselines, run_sweep_alpha, Bench, Table};
use geoloc_core::synth::{generate, SynthConfig};
use geoloc_core::train::{load_encoder, precompute_geo, train_with, TrainConfig, TrainOptions};
use geoloc_core::{Error, ErrorClass, Result};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const GIT_DESCRIBE: &str = env!("GEOLOC_GIT_DESCRIBE");

#[derive(Parser)]
#[command(name = "geoloc", version, about = "Geographic contrastive learning for UAV self-positioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dense-sampling benchmark.
    Generate(GenerateArgs),
    /// Train an encoder on a manifest.
    Train(TrainArgs),
    /// Extract embeddings for every record of a manifest.
    Embed(EmbedArgs),
    /// Score a checkpoint with Recall@K and SDM@K.
    Evaluate(EvaluateArgs),
    /// Train and score the eight loss-part ablation rows.
    Ablate(ExperimentArgs),
    /// Train and score one model per α.
    SweepAlpha(SweepArgs),
    /// Compare the geographic objective against triplet baselines.
    CompareBaselines(ExperimentArgs),
    /// Build the k-nearest-location index of a manifest.
    NeighborIndex(NeighborArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.alpha=2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Run seed; replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Recorded in run_info.json; every kernel here is deterministic.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Clone)]
struct EvalFlags {
    #[arg(long, value_enum, default_value = "all")]
    scale: ScaleFlag,
    /// Capture year of gallery images, or `all`.
    #[arg(long, default_value = "all")]
    time: String,
    /// Comma-separated K list.
    #[arg(long, default_value = "1,3,5,10", value_delimiter = ',')]
    k: Vec<usize>,
    /// Distance scale of SDM@K in meters.
    #[arg(long, default_value_t = 20.0)]
    sigma: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleFlag {
    Small,
    Middle,
    Big,
    All,
}

impl EvalFlags {
    fn options(&self) -> EvalOptions {
        let scale = match self.scale {
            ScaleFlag::Small => Some(SatScale::Small),
            ScaleFlag::Middle => Some(SatScale::Middle),
            ScaleFlag::Big => Some(SatScale::Big),
            ScaleFlag::All => None,
        };
        EvalOptions {
            ks: self.k.clone(),
            sigma_m: self.sigma,
            filter: GalleryFilter {
                scale,
                time: (self.time != "all").then(|| self.time.clone()),
            },
            batch_size: self.batch_size,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest (JSON Lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest holding the UAV queries.
    #[arg(long)]
    query: PathBuf,
    /// Manifest holding the satellite gallery.
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    eval: EvalFlags,
    /// Keep the top entries of each ranking in the report.
    #[arg(long, default_value_t = 0)]
    per_query: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    query: PathBuf,
    /// Gallery manifest; defaults to the training manifest.
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
    /// Seeds per row (ablation) or the single run seed (others).
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Trained-model cache; defaults to `<out>/cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct NeighborArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunInfo<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    git: &'a str,
    deterministic: bool,
    args: Vec<String>,
    config: &'a C,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn write_run_info<C: Serialize>(out: &Path, command: &str, deterministic: bool, config: &C) -> Result<()> {
    create_dir(out)?;
    let info = RunInfo {
        command,
        version: VERSION,
        git: GIT_DESCRIBE,
        deterministic,
        args: std::env::args().collect(),
        config,
    };
    write_json(&out.join("run_info.json"), &info)
}

fn resolve<T>(common: &Common, set_seed: impl FnOnce(&mut T, u64)) -> Result<T>
where
    T: Default + Serialize + serde::de::DeserializeOwned,
{
    let base: T = match &common.config {
        Some(path) => load_toml(path)?,
        None => T::default(),
    };
    let mut config = apply_overrides(&base, &common.overrides)?;
    if let Some(seed) = common.seed {
        set_seed(&mut config, seed);
    }
    Ok(config)
}

fn write_table(out: &Path, name: &str, table: &Table) -> Result<()> {
    table.write_csv(&out.join(format!("{name}.csv")))?;
    table.write_json(&out.join(format!("{name}.json")))?;
    for row in &table.rows {
        println!(
            "{name} {:>12} seed {:>3}  recall@1 {:.4}  sdm@1 {:.4}",
            row.label,
            row.seed,
            row.recall.get(&1).copied().unwrap_or(f64::NAN),
            row.sdm.get(&1).copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn experiment_setup(args: &ExperimentArgs) -> Result<(TrainConfig, Manifest, Manifest, Manifest)> {
    let config: TrainConfig = resolve(&args.common, |c: &mut TrainConfig, s| c.seed = s)?;
    config.validate()?;
    let train_m = load_manifest(&args.manifest)?;
    let query = load_manifest(&args.query)?;
    let gallery = match &args.gallery {
        Some(p) => load_manifest(p)?,
        None => train_m.clone(),
    };
    Ok((config, train_m, query, gallery))
}

fn bench<'a>(args: &ExperimentArgs, train_m: &'a Manifest, query: &'a Manifest, gallery: &'a Manifest) -> Bench<'a> {
    Bench {
        train: train_m,
        query,
        gallery,
        eval: args.eval.options(),
        cache_dir: args.cache.clone().unwrap_or_else(|| args.common.out.join("cache")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let config: SynthConfig = resolve(&a.common, |c: &mut SynthConfig, s| c.seed = s)?;
            write_run_info(&a.common.out, "generate", a.common.deterministic, &config)?;
            let m = generate(&config, &a.common.out)?;
            println!("wrote {} records for {} locations to {}", m.len(), m.correspondence().len(), a.common.out.display());
        }
        Command::Train(a) => {
            let config: TrainConfig = resolve(&a.common, |c: &mut TrainConfig, s| c.seed = s)?;
            config.validate()?;
            let manifest = load_manifest(&a.manifest)?;
            write_run_info(&a.common.out, "train", a.common.deterministic, &config)?;
            let out = train_with(&config, &manifest, &a.common.out, &TrainOptions { resume: a.resume })?;
            write_json(&a.common.out.join("epoch_losses.json"), &out.epoch_losses)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("log {}", out.log.display());
        }
        Command::Embed(a) => {
            let (encoder, _) = load_encoder(&a.checkpoint)?;
            let manifest = load_manifest(&a.manifest)?;
            write_run_info(&a.out, "embed", true, &serde_json::json!({ "checkpoint": a.checkpoint, "manifest": a.manifest }))?;
            let store = extract_features(manifest.records(), &encoder, a.batch_size)?;
            let path = a.out.join("features.bin");
            store.save(&path)?;
            println!("wrote {} x {} features to {}", store.len(), store.dim(), path.display());
        }
        Command::Evaluate(a) => {
            let (encoder, _) = load_encoder(&a.checkpoint)?;
            let query = load_manifest(&a.query)?;
            let gallery = load_manifest(&a.gallery)?;
            let mut options = a.eval.options();
            options.per_query_head = a.per_query;
            write_run_info(&a.out, "evaluate", true, &options)?;
            let report = evaluate(&query, &gallery, &encoder, &options)?;
            report.write_json(&a.out.join("report.json"))?;
            report.write_csv(&a.out.join("report.csv"))?;
            for k in &report.ks {
                println!("K={k:<3} recall {:.4}  sdm {:.4}", report.recall[k], report.sdm[k]);
            }
        }
        Command::Ablate(a) => {
            let (config, train_m, query, gallery) = experiment_setup(&a)?;
            write_run_info(&a.common.out, "ablate", a.common.deterministic, &config)?;
            let table = run_ablate(&config, &bench(&a, &train_m, &query, &gallery), &a.seeds)?;
            write_table(&a.common.out, "ablation", &table)?;
        }
        Command::SweepAlpha(s) => {
            let a = &s.experiment;
            let (mut config, train_m, query, gallery) = experiment_setup(a)?;
            if a.common.seed.is_none() {
                if let Some(&seed) = a.seeds.first() {
                    config.seed = seed;
                }
            }
            write_run_info(&a.common.out, "sweep-alpha", a.common.deterministic, &config)?;
            let table = run_sweep_alpha(&config, &bench(a, &train_m, &query, &gallery), &s.alphas)?;
            write_table(&a.common.out, "sweep_alpha", &table)?;
        }
        Command::CompareBaselines(a) => {
            let (mut config, train_m, query, gallery) = experiment_setup(&a)?;
            if a.common.seed.is_none() {
                if let Some(&seed) = a.seeds.first() {
                    config.seed = seed;
                }
            }
            write_run_info(&a.common.out, "compare-baselines", a.common.deterministic, &config)?;
            let table = run_compare_baselines(&config, &bench(&a, &train_m, &query, &gallery))?;
            write_table(&a.common.out, "baselines", &table)?;
        }
        Command::NeighborIndex(a) => {
            let manifest = load_manifest(&a.manifest)?;
            write_run_info(&a.out, "neighbor-index", true, &serde_json::json!({ "k": a.k, "manifest": a.manifest }))?;
            let index = precompute_geo(&manifest, a.k)?;
            let path = a.out.join("neighbor_index.json");
            std::fs::write(&path, index.to_json()?).map_err(|e| Error::io(&path, e))?;
            println!("wrote {} entries to {}", index.entries.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Runtime => 4,
            })
        }
    }
}
