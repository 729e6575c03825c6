use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Method;
use super::experiment::Cell;
use crate::error::{Error, Result};
use crate::privacy_accountant::{extended_float, PrivacySpec};

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// One metric value of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub delta: f64,
    pub steps: usize,
    pub embed_norm: f64,
    pub sigma: f64,
    pub seed: u64,
    pub epochs: usize,
    pub split: String,
    pub metric: String,
    pub k: usize,
    /// Percent.
    pub value: f64,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub delta: f64,
    pub steps: usize,
    pub embed_norm: f64,
    pub sigma: f64,
    pub epochs: usize,
    pub split: String,
    pub metric: String,
    pub k: usize,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProvenance {
    pub cell: Cell,
    pub privacy: PrivacySpec,
    pub sigma: f64,
    /// Forward passes that drew aggregation noise over the same edges.
    pub noisy_passes: usize,
    #[serde(with = "extended_float")]
    pub epsilon2_recomputed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub version: String,
    pub num_users: usize,
    pub num_items: usize,
    pub num_edges: usize,
    /// Train, validation and test sample counts.
    pub samples: [usize; 3],
    pub delta: f64,
    pub cells: Vec<CellProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub provenance: Provenance,
}

/// Seed-independent grouping key; floats compared by bit pattern.
type GroupKey = (Method, u64, u64, usize, u64, String, String, usize);

fn group_key(r: &ReportRow) -> GroupKey {
    (
        r.method,
        r.epsilon1.to_bits(),
        r.epsilon2.to_bits(),
        r.steps,
        r.embed_norm.to_bits(),
        r.split.clone(),
        r.metric.clone(),
        r.k,
    )
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl EvalReport {
    /// Value for the first row matching method, seed, split, metric and K.
    pub fn value(&self, method: Method, seed: u64, split: &str, metric: &str, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.seed == seed && r.split == split && r.metric == metric && r.k == k)
            .map(|r| r.value)
    }

    /// Rows grouped over seeds, in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order: Vec<GroupKey> = Vec::new();
        let mut groups: BTreeMap<GroupKey, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = group_key(r);
            let entry = groups.entry(key.clone()).or_default();
            if entry.is_empty() {
                order.push(key);
            }
            entry.push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
                let (mean, std) = mean_std(&values);
                let first = rows[0];
                SummaryRow {
                    method: first.method,
                    epsilon1: first.epsilon1,
                    epsilon2: first.epsilon2,
                    delta: first.delta,
                    steps: first.steps,
                    embed_norm: first.embed_norm,
                    sigma: first.sigma,
                    epochs: first.epochs,
                    split: first.split.clone(),
                    metric: first.metric.clone(),
                    k: first.k,
                    seeds: rows.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    /// Mean and std over seeds for rows selected by `filter`, at one
    /// split/metric/K.
    pub fn aggregate(
        &self,
        filter: impl Fn(&ReportRow) -> bool,
        split: &str,
        metric: &str,
        k: usize,
    ) -> Option<(f64, f64)> {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric && r.k == k && filter(r))
            .map(|r| r.value)
            .collect();
        (!values.is_empty()).then(|| mean_std(&values))
    }

    /// Range, K-monotonicity, MRR ≤ Recall and provenance checks.
    pub fn check_invariants(&self) -> Result<()> {
        let mut by_cell: BTreeMap<(GroupKey, u64), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            if !(0.0..=100.0).contains(&r.value) {
                return Err(Error::Config(format!("metric out of range: {r:?}")));
            }
            if !(r.delta > 0.0) || r.epochs == 0 || r.steps == 0 || !(r.embed_norm > 0.0) || !(r.sigma >= 0.0) {
                return Err(Error::Config(format!("incomplete provenance: {r:?}")));
            }
            let mut key = group_key(r);
            key.6 = String::new();
            key.7 = 0;
            by_cell.entry((key, r.seed)).or_default().push(r);
        }
        for rows in by_cell.values() {
            let mut recall: Vec<(usize, f64)> = rows.iter().filter(|r| r.metric == "recall").map(|r| (r.k, r.value)).collect();
            recall.sort_by_key(|&(k, _)| k);
            if recall.windows(2).any(|w| w[1].1 < w[0].1) {
                return Err(Error::Config(format!("recall decreases in K: {recall:?}")));
            }
            for r in rows.iter().filter(|r| r.metric == "mrr") {
                if let Some(&(_, rec)) = recall.iter().find(|&&(k, _)| k == r.k) {
                    if r.value > rec + 1e-9 {
                        return Err(Error::Config(format!("MRR@{} = {} exceeds recall {rec}", r.k, r.value)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_rows(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.summary())
    }

    pub fn write_provenance(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.provenance).map_err(|e| Error::parse(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Writes the report, summary and provenance files into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_rows(&dir.join(REPORT_FILE))?;
        self.write_summary(&dir.join(SUMMARY_FILE))?;
        self.write_provenance(&dir.join(PROVENANCE_FILE))
    }

    pub fn read_all(dir: &Path) -> Result<Self> {
        let rows = read_rows(&dir.join(REPORT_FILE))?;
        let path = dir.join(PROVENANCE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let provenance = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        Ok(EvalReport { rows, provenance })
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::parse(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| Error::parse(path, e))).collect()
}
