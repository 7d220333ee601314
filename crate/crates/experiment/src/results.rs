use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use weakinv_core::forge::{Dataset, FactorTuple};
use weakinv_core::tape::Mat;
use weakinv_core::vae::Vae;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    /// Value of the grouping factor.
    pub value: usize,
    pub correct: usize,
    pub total: usize,
}

impl GroupAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub average_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub worst_group: usize,
    /// Name of the factor defining the groups.
    pub group_factor: String,
    pub groups: Vec<GroupAccuracy>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

pub const RESULT_HEADER: &str = "dataset,variant,seed,average_accuracy,worst_group_accuracy,worst_group,group_factor";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

/// Mean, sample standard deviation and median.
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: f64::NAN, std: f64::NAN, median: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Summary { mean, std, median, n }
}

impl ResultTable {
    pub fn push(&mut self, row: ResultRow) {
        self.rows.push(row);
    }

    pub fn variant(&self, name: &str) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.variant == name).collect()
    }

    /// `(average, worst-group)` summaries per variant, in first-seen order.
    pub fn aggregate(&self) -> Vec<(String, Summary, Summary)> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        names
            .into_iter()
            .map(|n| {
                let rows = self.variant(&n);
                let avg: Vec<f64> = rows.iter().map(|r| r.average_accuracy).collect();
                let worst: Vec<f64> = rows.iter().map(|r| r.worst_group_accuracy).collect();
                (n, summarize(&avg), summarize(&worst))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RESULT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.dataset, r.variant, r.seed, r.average_accuracy, r.worst_group_accuracy, r.worst_group, r.group_factor
            );
        }
        s
    }

    /// Per-variant `mean ± std` lines.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,runs,average_mean,average_std,worst_mean,worst_std\n");
        for (name, a, w) in self.aggregate() {
            let _ = writeln!(s, "{name},{},{},{},{},{}", a.n, a.mean, a.std, w.mean, w.std);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Renders a split in the given tuple order.
pub fn split_arrays(dataset: &Dataset, tuples: &[FactorTuple]) -> Result<(Mat, Vec<usize>)> {
    Ok((dataset.render_rows(tuples)?, dataset.labels(tuples)))
}

/// Average and worst-group accuracy on the test split; groups are the values
/// of the dataset's group factor.
pub fn evaluate(model: &Vae, dataset: &Dataset, variant: &str, seed: u64) -> Result<ResultRow> {
    let tuples = dataset.test.tuples();
    let (x, y) = split_arrays(dataset, &tuples)?;
    let pred = model.predict(&x)?;
    Ok(score_predictions(dataset, &tuples, &pred, &y, variant, seed))
}

pub fn score_predictions(
    dataset: &Dataset,
    tuples: &[FactorTuple],
    pred: &[usize],
    labels: &[usize],
    variant: &str,
    seed: u64,
) -> ResultRow {
    let gf = dataset.group_factor;
    let mut groups: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for ((t, p), y) in tuples.iter().zip(pred).zip(labels) {
        let e = groups.entry(t[gf]).or_default();
        e.1 += 1;
        if p == y {
            e.0 += 1;
            correct += 1;
        }
    }
    let groups: Vec<GroupAccuracy> =
        groups.into_iter().map(|(value, (correct, total))| GroupAccuracy { value, correct, total }).collect();
    let worst = groups
        .iter()
        .fold(None, |best: Option<&GroupAccuracy>, g| match best {
            Some(b) if b.accuracy() <= g.accuracy() => best,
            _ => Some(g),
        })
        .expect("non-empty test split");
    ResultRow {
        dataset: dataset.config.name().to_string(),
        variant: variant.to_string(),
        seed,
        average_accuracy: correct as f64 / tuples.len() as f64,
        worst_group_accuracy: worst.accuracy(),
        worst_group: worst.value,
        group_factor: dataset.grid.spec().factors()[gf].name.clone(),
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use weakinv_core::forge::{DatasetConfig, ShapesConfig};

    fn small_shapes() -> Dataset {
        DatasetConfig::Shapes(ShapesConfig { canvas: 16, pos_x: 2, pos_y: 2, scales: 2, ..Default::default() })
            .build()
            .unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let ds = small_shapes();
        let tuples = ds.test.tuples();
        let y = ds.labels(&tuples);
        let row = score_predictions(&ds, &tuples, &y, &y, "oracle", 0);
        assert_eq!(row.average_accuracy, 1.0);
        assert_eq!(row.worst_group_accuracy, 1.0);
    }

    #[test]
    fn group_counts_partition_the_test_set() {
        let ds = small_shapes();
        let tuples = ds.test.tuples();
        let y = ds.labels(&tuples);
        let pred: Vec<usize> = y.iter().enumerate().map(|(i, &v)| if i % 3 == 0 { (v + 1) % 4 } else { v }).collect();
        let row = score_predictions(&ds, &tuples, &pred, &y, "x", 0);
        assert_eq!(row.groups.iter().map(|g| g.total).sum::<usize>(), tuples.len());
        assert!(row.worst_group_accuracy <= row.average_accuracy);
        assert_eq!(row.group_factor, "color");
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[1.0, 2.0, 4.0]);
        assert!((s.mean - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.median, 2.0);
        assert!((s.std - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[1.0, 3.0]).median, 2.0);
    }

    #[test]
    fn csv_has_fixed_header() {
        let mut t = ResultTable::default();
        t.push(ResultRow {
            dataset: "d".into(),
            variant: "v".into(),
            seed: 1,
            average_accuracy: 0.5,
            worst_group_accuracy: 0.25,
            worst_group: 3,
            group_factor: "background".into(),
            groups: vec![],
        });
        let csv = t.to_csv();
        assert!(csv.starts_with(RESULT_HEADER));
        assert_eq!(csv.lines().nth(1), Some("d,v,1,0.5,0.25,3,background"));
    }
}
