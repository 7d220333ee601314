//! Disentanglement scores on (posterior mean, ground-truth factor) tables.

mod bijection;
mod dci;
mod fvae;
mod irs;
mod mig;
mod sap;

pub use bijection::{entangling_bijection, householder, BIJECTION_CLIP};
pub use dci::{dci_disentanglement, disentanglement_from_importance, importance_matrix, DciScore, ForestConfig};
pub use fvae::{fvae_score, FvaeScore};
pub use irs::{irs, IrsScore};
pub use mig::{discretize, entropy, mig, mutual_information, MigScore};
pub use sap::{sap, SapScore};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};

/// Below this many rows scores are noisy; a warning is logged.
pub const RECOMMENDED_ROWS: usize = 1000;

/// Codes `[N, d]` paired with factor values `[N, F]`.
///
/// Factor values are re-coded densely per column (sorted distinct values
/// become `0..levels`).
#[derive(Clone, Debug)]
pub struct CodeFactorTable {
    codes: Array2<f64>,
    factors: Array2<usize>,
    levels: Vec<usize>,
}

impl CodeFactorTable {
    pub fn new(codes: Array2<f64>, factors: Array2<usize>) -> Result<Self> {
        let n = codes.nrows();
        if n == 0 {
            return Err(argument("metric table has no rows"));
        }
        if factors.nrows() != n {
            return Err(argument(format!(
                "codes have {n} rows but factors have {}",
                factors.nrows()
            )));
        }
        if codes.ncols() == 0 || factors.ncols() == 0 {
            return Err(argument("metric table needs at least one code dim and one factor"));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(argument("codes contain non-finite values"));
        }
        if n < RECOMMENDED_ROWS {
            log::warn!("metric table has {n} rows; fewer than {RECOMMENDED_ROWS} gives unstable scores");
        }
        let mut dense = Array2::zeros(factors.dim());
        let mut levels = Vec::with_capacity(factors.ncols());
        for (f, col) in factors.columns().into_iter().enumerate() {
            let mut distinct: Vec<usize> = col.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 {
                log::warn!("factor {f} takes a single value; metrics skip it");
            }
            for (i, v) in col.iter().enumerate() {
                dense[[i, f]] = distinct.binary_search(v).expect("value present");
            }
            levels.push(distinct.len());
        }
        Ok(Self { codes, factors: dense, levels })
    }

    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.nrows() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.codes.ncols()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.ncols()
    }

    pub fn codes(&self) -> &Array2<f64> {
        &self.codes
    }

    /// Densely re-coded factor values.
    pub fn factors(&self) -> &Array2<usize> {
        &self.factors
    }

    /// Number of distinct values per factor.
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub(crate) fn code(&self, j: usize) -> ArrayView1<'_, f64> {
        self.codes.column(j)
    }

    pub(crate) fn factor(&self, f: usize) -> Vec<usize> {
        self.factors.column(f).to_vec()
    }

    pub(crate) fn informative(&self, f: usize) -> bool {
        self.levels[f] >= 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub mig_bins: usize,
    pub fvae_votes: usize,
    pub fvae_probe: usize,
    pub forest: ForestConfig,
    pub seed: u64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { mig_bins: 20, fvae_votes: 800, fvae_probe: 64, forest: ForestConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mig: f64,
    pub sap: f64,
    pub irs: f64,
    pub fvae: f64,
    pub dci: f64,
    /// Per-factor MIG gaps (`None` for skipped factors).
    pub mig_per_factor: Vec<Option<f64>>,
    pub sap_per_factor: Vec<Option<f64>>,
    /// Per-dimension IRS robustness.
    pub irs_per_dim: Vec<f64>,
    pub dci_per_dim: Vec<f64>,
    pub num_samples: usize,
    pub latent_dim: usize,
    pub num_factors: usize,
    pub settings: MetricSettings,
}

impl MetricReport {
    pub fn scores(&self) -> [(&'static str, f64); 5] {
        [("mig", self.mig), ("sap", self.sap), ("irs", self.irs), ("fvae", self.fvae), ("dci", self.dci)]
    }
}

/// All five scores with shared settings.
pub fn evaluate(table: &CodeFactorTable, settings: &MetricSettings) -> Result<MetricReport> {
    let m = mig(table, settings.mig_bins)?;
    let s = sap(table, settings.seed)?;
    let i = irs(table)?;
    let fv = fvae_score(table, settings.fvae_votes, settings.fvae_probe, settings.seed)?;
    let d = dci_disentanglement(table, &settings.forest, settings.seed)?;
    Ok(MetricReport {
        mig: m.score,
        sap: s.score,
        irs: i.score,
        fvae: fv.score,
        dci: d.score,
        mig_per_factor: m.per_factor,
        sap_per_factor: s.per_factor,
        irs_per_dim: i.per_dim,
        dci_per_dim: d.per_dim,
        num_samples: table.len(),
        latent_dim: table.latent_dim(),
        num_factors: table.num_factors(),
        settings: settings.clone(),
    })
}

pub(crate) fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}
