use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use weakinv_core::attack::AttackConfig;
use weakinv_core::forge::{Dataset, DatasetManifest};
use weakinv_core::metrics::{evaluate, CodeFactorTable, MetricSettings};
use weakinv_experiment::checkpoint::{self, Checkpoint};
use weakinv_experiment::plots::export_plots;
use weakinv_experiment::run::{attack_csv, build_dataset, load_dataset_dir, run_ablation, run_attacks, run_metrics, run_train, Variant};
use weakinv_experiment::{tables, ResultTable, RunConfig};

#[derive(Parser)]
#[command(name = "weakinv", version, about = "Train, evaluate and attack swap-disentangled VAE classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; keys not given keep the preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config is given.
    #[arg(long, global = true, default_value = "colored_mnist")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (overrides `out_dir`).
    #[arg(long = "out-dir", global = true)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint, step log and result row.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Average and worst-group test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory from `forge build`; defaults to the run's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Disentanglement metrics of a checkpoint, or of raw arrays with `metrics run`.
    #[command(args_conflicts_with_subcommands = true)]
    Metrics {
        #[command(subcommand)]
        action: Option<MetricsAction>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Adversarial robustness of a checkpoint over the configured attack grid.
    #[command(args_conflicts_with_subcommands = true)]
    Attack {
        #[command(subcommand)]
        action: Option<AttackAction>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Train a grid of variants over several seeds and merge the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `mode:warmup` names; all nine when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also compute MIG for every run.
        #[arg(long)]
        mig: bool,
    },
    /// Embedding scatters, latent-response heatmaps and reconstruction grids.
    Plots {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Dataset generation.
    Forge {
        #[command(subcommand)]
        action: ForgeAction,
    },
}

#[derive(Subcommand)]
enum MetricsAction {
    /// Score a flat code array against a flat factor array.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        factors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AttackAction {
    /// Attack a checkpoint on a built dataset with an explicit grid.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// JSON list of attack configurations.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ForgeAction {
    /// Write the factor tuples and split of the configured dataset to a directory.
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also cache rendered images.
        #[arg(long)]
        cache: bool,
    },
}

fn dataset_for(ck: &Checkpoint, dir: Option<&Path>, fallback: &RunConfig) -> anyhow::Result<Dataset> {
    Ok(match (dir, &ck.header.run) {
        (Some(d), _) => load_dataset_dir(d)?,
        (None, Some(run)) => build_dataset(&run.dataset)?,
        (None, None) => build_dataset(&fallback.dataset)?,
    })
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let out = run_train(&cfg)?;
            println!(
                "{} seed {}: average {:.4} worst-group {:.4} (group {}) -> {}",
                out.row.variant,
                out.row.seed,
                out.row.average_accuracy,
                out.row.worst_group_accuracy,
                out.row.worst_group,
                out.checkpoint.display()
            );
        }
        Command::Eval { common, ckpt, dataset } => {
            let cfg = common.load()?;
            let ck = checkpoint::load(&ckpt)?;
            let ds = dataset_for(&ck, dataset.as_deref(), &cfg)?;
            let (variant, seed) = ck.header.run.as_ref().map_or(("unknown".into(), cfg.seed), |r| {
                (weakinv_experiment::run::variant_of(r), r.seed)
            });
            let row = weakinv_experiment::results::evaluate(&ck.model, &ds, &variant, seed)?;
            let mut table = ResultTable::default();
            table.push(row);
            let path = cfg.reports_dir().join("eval.csv");
            table.write_csv(&path)?;
            print!("{}", table.to_csv());
        }
        Command::Metrics { action: Some(MetricsAction::Run { common, codes, factors, out }), .. } => {
            let cfg = common.load()?;
            let table = CodeFactorTable::new(tables::read_f64(&codes)?, tables::read_usize(&factors)?)?;
            let settings = MetricSettings { seed: cfg.seed, ..cfg.metrics };
            let report = evaluate(&table, &settings)?;
            write(&out, &serde_json::to_string_pretty(&report)?)?;
            for (name, v) in report.scores() {
                println!("{name}: {v:.4}");
            }
        }
        Command::Metrics { action: None, common, ckpt } => {
            let cfg = common.load()?;
            let Some(ckpt) = ckpt else { bail!("metrics needs --ckpt (or use `metrics run`)") };
            let ck = checkpoint::load(&ckpt)?;
            let ds = dataset_for(&ck, None, &cfg)?;
            let settings = MetricSettings { seed: cfg.seed, ..cfg.metrics.clone() };
            let report = run_metrics(&ck.model, &ds, cfg.metrics_split, &settings, cfg.eval_batch)?;
            write(&cfg.reports_dir().join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
            for (name, v) in report.scores() {
                println!("{name}: {v:.4}");
            }
        }
        Command::Attack { action: Some(AttackAction::Run { common, ckpt, dataset, grid, out }), .. } => {
            let cfg = common.load()?;
            let ck = checkpoint::load(&ckpt)?;
            let ds = load_dataset_dir(&dataset)?;
            let grid: Vec<AttackConfig> = serde_json::from_slice(&fs::read(&grid)?)?;
            let report = run_attacks(&ck.model, &ds, &grid, cfg.attack_samples, cfg.eval_batch, cfg.seed)?;
            write(&out, &attack_csv(&report))?;
            print!("{}", attack_csv(&report));
        }
        Command::Attack { action: None, common, ckpt } => {
            let cfg = common.load()?;
            let Some(ckpt) = ckpt else { bail!("attack needs --ckpt (or use `attack run`)") };
            let ck = checkpoint::load(&ckpt)?;
            let ds = dataset_for(&ck, None, &cfg)?;
            let report = run_attacks(&ck.model, &ds, &cfg.attacks, cfg.attack_samples, cfg.eval_batch, cfg.seed)?;
            write(&cfg.reports_dir().join("attacks.csv"), &attack_csv(&report))?;
            print!("{}", attack_csv(&report));
        }
        Command::Ablate { common, variants, seeds, mig } => {
            let cfg = common.load()?;
            let variants = if variants.is_empty() { Variant::grid() } else { variants };
            let table = run_ablation(&cfg, &variants, &seeds, mig)?;
            print!("{}", table.to_csv());
        }
        Command::Plots { common, ckpt } => {
            let cfg = common.load()?;
            let ck = checkpoint::load(&ckpt)?;
            let ds = dataset_for(&ck, None, &cfg)?;
            let files = export_plots(&ck.model, &ds, &cfg.plots, cfg.seed, &cfg.figures_dir())?;
            for p in files.embeddings.iter().chain(&files.heatmaps).chain([&files.reconstruction]) {
                println!("{}", p.display());
            }
        }
        Command::Forge { action: ForgeAction::Build { common, out, cache } } => {
            let cfg = common.load()?;
            let ds = build_dataset(&cfg.dataset)?;
            let manifest = DatasetManifest::new(&ds, cfg.seed).write(&out, &ds, cache)?;
            println!("{} train / {} test tuples -> {}", manifest.train.len(), manifest.test.len(), out.display());
        }
    }
    Ok(())
}
