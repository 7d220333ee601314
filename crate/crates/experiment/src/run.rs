use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use weakinv_core::attack::{evaluate_attacks, AttackConfig, AttackReport};
use weakinv_core::forge::{Dataset, DatasetConfig, DatasetManifest, FactorTuple, Side};
use weakinv_core::invariance::LossBreakdown;
use weakinv_core::metrics::{evaluate as evaluate_metrics, CodeFactorTable, MetricReport, MetricSettings};
use weakinv_core::tape::Mat;
use weakinv_core::trainer::{PairSource, StepReport, TrainMode, Trainer};
use weakinv_core::vae::Vae;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{ExpError, Result};
use crate::results::{evaluate, ResultRow, ResultTable};

pub const STEP_LOG_HEADER: &str = "step,k,num_swap,lr,ce,recon,kl,disentangle,supcon,zp,total";
pub const ATTACK_HEADER: &str = "attack,label,strength,clean_accuracy,attacked_accuracy,mean_linf,mean_l2,failures";

/// Which curricula are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    None,
    Amount,
    Both,
}

impl Warmup {
    pub const ALL: [Warmup; 3] = [Warmup::None, Warmup::Amount, Warmup::Both];

    pub fn name(self) -> &'static str {
        match self {
            Warmup::None => "none",
            Warmup::Amount => "amount",
            Warmup::Both => "both",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        let c = &mut cfg.train.curriculum;
        (c.amount, c.difficulty) = match self {
            Warmup::None => (false, false),
            Warmup::Amount => (true, false),
            Warmup::Both => (true, true),
        };
    }
}

pub fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Alternating => "alternating",
        TrainMode::Joint => "joint",
        TrainMode::CeOnly => "ce_only",
    }
}

/// A training mode plus a warmup setting, written `mode:warmup`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub mode: TrainMode,
    pub warmup: Warmup,
}

impl Variant {
    pub fn name(&self) -> String {
        format!("{}:{}", mode_name(self.mode), self.warmup.name())
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.train.mode = self.mode;
        self.warmup.apply(cfg);
    }

    /// Every combination of warmup and mode.
    pub fn grid() -> Vec<Variant> {
        let modes = [TrainMode::CeOnly, TrainMode::Joint, TrainMode::Alternating];
        Warmup::ALL.iter().flat_map(|&warmup| modes.iter().map(move |&mode| Variant { mode, warmup })).collect()
    }
}

impl FromStr for Variant {
    type Err = ExpError;

    fn from_str(s: &str) -> Result<Self> {
        let (m, w) = s.split_once(':').unwrap_or((s, "both"));
        let mode = match m {
            "alternating" => TrainMode::Alternating,
            "joint" => TrainMode::Joint,
            "ce_only" => TrainMode::CeOnly,
            _ => return Err(ExpError::Config(format!("unknown mode {m:?}"))),
        };
        let warmup = match w {
            "none" => Warmup::None,
            "amount" => Warmup::Amount,
            "both" => Warmup::Both,
            _ => return Err(ExpError::Config(format!("unknown warmup {w:?}"))),
        };
        Ok(Variant { mode, warmup })
    }
}

/// Variant label of a config: `mode:warmup`.
pub fn variant_of(cfg: &RunConfig) -> String {
    let c = &cfg.train.curriculum;
    let warmup = match (c.amount, c.difficulty) {
        (false, false) => "none",
        (true, false) => "amount",
        (false, true) => "difficulty",
        (true, true) => "both",
    };
    format!("{}:{warmup}", mode_name(cfg.train.mode))
}

fn log_line(r: &StepReport) -> String {
    let mut s = format!("{},{},{},{}", r.step, r.k, r.num_swap, r.lr);
    for v in r.loss.values() {
        let _ = write!(s, ",{v}");
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Vae,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub row: ResultRow,
    pub final_loss: Option<LossBreakdown>,
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    Ok(cfg.build()?)
}

/// Trains with the configured mode and curricula, writing a per-step CSV
/// log, the final checkpoint and a one-row result table under `out_dir`.
///
/// A non-finite loss aborts the run after saving the last good parameters
/// to `ckpt/last_good.ckpt`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = build_dataset(&cfg.dataset)?;
    let model_cfg = cfg.resolved_model(&dataset)?;
    let model = Vae::new(model_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.seed)?;
    let mut source = PairSource::new(dataset.clone(), cfg.train.pairs_fix_class)?;

    for dir in [cfg.ckpt_dir(), cfg.logs_dir(), cfg.reports_dir()] {
        fs::create_dir_all(dir)?;
    }
    fs::write(cfg.out_dir.join("config.json"), cfg.to_json()?)?;
    let log_path = cfg.logs_dir().join("train.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{STEP_LOG_HEADER}")?;
    let mut final_loss = None;
    let every = cfg.checkpoint_every;
    let ckpt_dir = cfg.ckpt_dir();
    let fitted = trainer.fit(&mut source, |r, model| {
        writeln!(log, "{}", log_line(r)).map_err(weakinv_core::Error::Io)?;
        final_loss = Some(r.loss);
        if every > 0 && (r.step + 1) % every == 0 {
            checkpoint::save(&ckpt_dir.join(format!("step{}.ckpt", r.step + 1)), model, Some(cfg), r.step + 1)
                .map_err(|e| weakinv_core::Error::Io(std::io::Error::other(e.to_string())))?;
        }
        Ok(())
    });
    log.flush()?;
    if let Err(e) = fitted {
        let step = trainer.curriculum().step;
        let path = cfg.ckpt_dir().join("last_good.ckpt");
        checkpoint::save(&path, trainer.model(), Some(cfg), step)?;
        log::error!("training aborted at step {step}: {e}; last good parameters in {}", path.display());
        return Err(e.into());
    }
    let model = trainer.into_model();
    let ckpt = cfg.ckpt_dir().join("model.ckpt");
    checkpoint::save(&ckpt, &model, Some(cfg), cfg.train.steps)?;
    let row = evaluate(&model, &dataset, &variant_of(cfg), cfg.seed)?;
    let mut table = ResultTable::default();
    table.push(row.clone());
    table.write_csv(&cfg.reports_dir().join("result.csv"))?;
    Ok(TrainOutcome { model, checkpoint: ckpt, log: log_path, row, final_loss })
}

/// Evaluates a checkpoint on a dataset's test split.
pub fn run_eval(ckpt: &Path, dataset: &Dataset) -> Result<ResultRow> {
    let ck = checkpoint::load(ckpt)?;
    let (variant, seed) = match &ck.header.run {
        Some(r) => (variant_of(r), r.seed),
        None => ("unknown".to_string(), 0),
    };
    evaluate(&ck.model, dataset, &variant, seed)
}

/// Posterior means `[N, d_z]`, encoded in chunks.
pub fn encode_means(model: &Vae, x: &Mat, batch: usize) -> Result<Mat> {
    let mut out = Array2::zeros((0, model.partition().d_z()));
    for chunk in x.axis_chunks_iter(Axis(0), batch.max(1)) {
        let code = model.encode(&chunk.to_owned())?;
        out.append(Axis(0), code.mu.view()).expect("matching widths");
    }
    Ok(out)
}

pub fn split_tuples(dataset: &Dataset, side: Side) -> Vec<FactorTuple> {
    match side {
        Side::Train => dataset.train.tuples(),
        Side::Test => dataset.test.tuples(),
    }
}

/// Metric table of posterior means against the factor values of every tuple in a split.
pub fn metric_table(model: &Vae, dataset: &Dataset, side: Side, batch: usize) -> Result<CodeFactorTable> {
    let tuples = split_tuples(dataset, side);
    let x = dataset.render_rows(&tuples)?;
    let codes = encode_means(model, &x, batch)?;
    let nf = dataset.grid.spec().num_factors();
    let factors = Array2::from_shape_fn((tuples.len(), nf), |(i, f)| tuples[i][f]);
    Ok(CodeFactorTable::new(codes, factors)?)
}

pub fn run_metrics(model: &Vae, dataset: &Dataset, side: Side, settings: &MetricSettings, batch: usize) -> Result<MetricReport> {
    let table = metric_table(model, dataset, side, batch)?;
    Ok(evaluate_metrics(&table, settings)?)
}

/// Evenly spaced test rows (all of them when `samples` is 0 or too large).
pub fn attack_subset(dataset: &Dataset, samples: usize) -> Result<(Mat, Vec<usize>)> {
    let tuples = dataset.test.tuples();
    let n = tuples.len();
    let picked: Vec<FactorTuple> = if samples == 0 || samples >= n {
        tuples
    } else {
        (0..samples).map(|i| tuples[i * n / samples].clone()).collect()
    };
    Ok((dataset.render_rows(&picked)?, dataset.labels(&picked)))
}

pub fn run_attacks(
    model: &Vae,
    dataset: &Dataset,
    configs: &[AttackConfig],
    samples: usize,
    batch: usize,
    seed: u64,
) -> Result<AttackReport> {
    let (x, y) = attack_subset(dataset, samples)?;
    Ok(evaluate_attacks(model, &x, &y, configs, batch, seed)?)
}

pub fn attack_csv(report: &AttackReport) -> String {
    let mut s = format!("{ATTACK_HEADER}\n");
    for r in &report.rows {
        let kind = serde_json::to_value(r.attack).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{kind},{},{},{},{},{},{},{}",
            r.label, r.strength, r.clean_accuracy, r.attacked_accuracy, r.mean_linf, r.mean_l2, r.failures
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub average_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub mig: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,average_accuracy,worst_group_accuracy,mig\n");
        for r in &self.rows {
            let mig = r.mig.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{mig}", r.variant, r.seed, r.average_accuracy, r.worst_group_accuracy);
        }
        s
    }

    pub fn values(&self, variant: &str, f: impl Fn(&AblationRow) -> Option<f64>) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant).filter_map(f).collect()
    }
}

/// Trains every variant for every seed under `out_dir/<variant>/seed<k>`
/// and merges the results. MIG is computed when `with_mig` is set.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], seeds: &[u64], with_mig: bool) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for v in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            v.apply(&mut cfg);
            cfg.seed = seed;
            cfg.out_dir = base.out_dir.join(v.name().replace(':', "_")).join(format!("seed{seed}"));
            let out = run_train(&cfg)?;
            let mig = if with_mig {
                let ds = build_dataset(&cfg.dataset)?;
                let settings = MetricSettings { seed, ..cfg.metrics.clone() };
                Some(run_metrics(&out.model, &ds, cfg.metrics_split, &settings, cfg.eval_batch)?.mig)
            } else {
                None
            };
            log::info!("{} seed {seed}: avg {:.4} worst {:.4} mig {mig:?}", v.name(), out.row.average_accuracy, out.row.worst_group_accuracy);
            table.rows.push(AblationRow {
                variant: v.name(),
                seed,
                average_accuracy: out.row.average_accuracy,
                worst_group_accuracy: out.row.worst_group_accuracy,
                mig,
            });
        }
    }
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("ablation.csv"), table.to_csv())?;
    Ok(table)
}

/// Builds a dataset from a `forge build` directory, checking the stored split.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(dir)?;
    let ds = manifest.dataset.build()?;
    if ds.train.tuples() != manifest.train || ds.test.tuples() != manifest.test {
        return Err(ExpError::Config(format!("{} does not match its dataset config", dir.display())));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::grid() {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!(Variant::grid().len(), 9);
        assert!("sgd:both".parse::<Variant>().is_err());
        assert!("joint:half".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_label_of_config() {
        let mut cfg = RunConfig::default();
        Variant { mode: TrainMode::Joint, warmup: Warmup::Amount }.apply(&mut cfg);
        assert_eq!(variant_of(&cfg), "joint:amount");
    }
}
