//! Dataset preparation and the method × budget × seed experiment grid.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::metrics::MetricAccumulator;
use super::report::{EvalReport, ReportRow};
use super::synthetic;
use crate::error::{Error, Result};
use crate::gnn::edgerand::{edgerand_perturb, edgerand_spec};
use crate::gnn::model::{ForwardConfig, GraphInput};
use crate::gnn::params::ModelParams;
use crate::gnn::train::{self, stream_rng, LogRecord, Sample, TrainConfig, TrainingData};
use crate::graph_pipeline::{
    build_graph, chronological_split, core_filter, read_interactions, BehaviorGraph, InteractionLog, SplitDataset,
};
use crate::ldp_feature::{perturb_features, read_feature_file, FeatureSchema, FeatureTable};
use crate::privacy_accountant::{delta_default, extended_float, PrivacySpec};

const TAG_FEATURES: u64 = 11;
const TAG_EDGERAND: u64 = 12;
const TAG_EVAL: u64 = 13;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// One labeled subsequence with its exact behavior graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub user: usize,
    pub graph: BehaviorGraph,
    pub label: usize,
}

/// Everything about the dataset that does not depend on the method or seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: SplitDataset,
    /// `None` when the run has no user features.
    pub schema: Option<FeatureSchema>,
    /// Encoded, unperturbed features per user index.
    pub features: Vec<Vec<f64>>,
    /// Samples per entry of [`SPLITS`].
    pub samples: [Vec<GraphSample>; 3],
    pub delta: f64,
}

impl PreparedData {
    pub fn feature_width(&self) -> usize {
        self.features.first().map_or(1, Vec::len)
    }

    pub fn num_items(&self) -> usize {
        self.split.items.len()
    }
}

/// Reads or generates the interactions and features named by `config`.
pub fn load_sources(config: &ExperimentConfig) -> Result<(InteractionLog, Option<FeatureSchema>, Option<FeatureTable>)> {
    if let Some(syn) = &config.synthetic {
        let data = synthetic::generate(syn)?;
        return Ok((data.log, Some(data.schema), Some(data.features)));
    }
    let path = config
        .data
        .interactions
        .as_deref()
        .ok_or_else(|| Error::Config("no interactions file configured".into()))?;
    let log = read_interactions(path, config.delimiter())?;
    let schema = if config.schema.is_empty() { None } else { Some(FeatureSchema::new(config.schema.clone())?) };
    let table = match (&config.data.features, &schema) {
        (Some(p), Some(_)) => Some(read_feature_file(p, config.delimiter())?),
        (Some(_), None) => return Err(Error::Config("a features file needs a [[schema]]".into())),
        (None, _) => None,
    };
    Ok((log, schema, table))
}

/// Filters, splits and encodes the configured dataset.
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedData> {
    let (log, schema, table) = load_sources(config)?;
    let log = if config.data.min_count > 0 && config.synthetic.is_none() {
        core_filter(&log, config.data.min_count)
    } else {
        log
    };
    let split = chronological_split(&log, &config.split)?;
    prepare_split(split, schema, table.as_ref(), config.privacy.delta)
}

/// Encodes features and builds graphs for an existing split.
pub fn prepare_split(
    split: SplitDataset,
    schema: Option<FeatureSchema>,
    table: Option<&FeatureTable>,
    delta: Option<f64>,
) -> Result<PreparedData> {
    if split.train.is_empty() {
        return Err(Error::Config("the split has no training samples".into()));
    }
    let (schema, features) = match (schema, table) {
        (Some(mut schema), Some(table)) => {
            let by_user = table.by_user();
            schema.fit_ranges(split.users.ids().iter().filter_map(|u| by_user.get(u.as_str()).copied()))?;
            let features = split
                .users
                .ids()
                .iter()
                .map(|u| match by_user.get(u.as_str()) {
                    Some(row) => schema.encode(row).map(|f| f.values().to_vec()),
                    None => Ok(vec![0.0; schema.width()]),
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(schema), features)
        }
        (Some(schema), None) => {
            let width = schema.width();
            (Some(schema), vec![vec![0.0; width]; split.users.len()])
        }
        (None, _) => (None, vec![vec![0.0; 1]; split.users.len()]),
    };
    let delta = match delta {
        Some(d) => d,
        None => delta_default(split.num_edges())?,
    };
    let build = |pairs: &[crate::graph_pipeline::LabeledSequence]| -> Result<Vec<GraphSample>> {
        pairs
            .par_iter()
            .map(|p| {
                Ok(GraphSample {
                    user: split.users.index_of(&p.user)?,
                    graph: build_graph(&p.items, &split.items)?,
                    label: split.items.index_of(&p.label)?,
                })
            })
            .collect()
    };
    let samples = [build(&split.train)?, build(&split.valid)?, build(&split.test)?];
    Ok(PreparedData { split, schema, features, samples, delta })
}

/// One point of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    #[serde(with = "extended_float")]
    pub epsilon1: f64,
    #[serde(with = "extended_float")]
    pub epsilon2: f64,
    pub steps: usize,
    pub embed_norm: f64,
    pub seed: u64,
}

impl Cell {
    /// File-name friendly identifier.
    pub fn label(&self) -> String {
        format!(
            "{}_e1-{}_e2-{}_T{}_C{}_seed{}",
            self.method, self.epsilon1, self.epsilon2, self.steps, self.embed_norm, self.seed
        )
    }
}

/// Grid cells in a fixed order. The non-private method ignores both budgets,
/// so it contributes one cell per `(T, C, seed)`.
pub fn cells(config: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for &method in &config.methods {
        for &e1 in &config.epsilon1_values() {
            for &e2 in &config.epsilon2_values() {
                for &steps in &config.steps_values() {
                    for &embed_norm in &config.embed_norm_values() {
                        for &seed in &config.seeds {
                            let (e1, e2) = if method == Method::Nonprivate { (f64::INFINITY, f64::INFINITY) } else { (e1, e2) };
                            let key = (method, e1.to_bits(), e2.to_bits(), steps, embed_norm.to_bits(), seed);
                            if seen.insert(key) {
                                out.push(Cell { method, epsilon1: e1, epsilon2: e2, steps, embed_norm, seed });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Privacy budget of a cell and the aggregation σ used by the model.
pub fn cell_privacy(cell: &Cell, delta: f64) -> Result<(PrivacySpec, f64)> {
    match cell.method {
        Method::Dipsgnn => {
            let spec = PrivacySpec::calibrated(cell.epsilon1, cell.epsilon2, delta, cell.steps, cell.embed_norm)?;
            Ok((spec, spec.sigma))
        }
        Method::Edgerand => Ok((edgerand_spec(cell.epsilon1, cell.epsilon2, delta)?, 0.0)),
        Method::Nonprivate => {
            let spec = PrivacySpec::calibrated(f64::INFINITY, f64::INFINITY, delta, cell.steps, cell.embed_norm)?;
            Ok((spec, 0.0))
        }
    }
}

pub fn train_config(config: &ExperimentConfig, cell: &Cell, sigma: f64) -> TrainConfig {
    TrainConfig {
        epochs: config.training.epochs,
        learning_rate: config.training.learning_rate,
        batch_size: config.training.batch_size,
        item_dim: config.model.item_dim,
        user_dim: config.model.user_dim,
        forward: ForwardConfig { steps: cell.steps, embed_norm: cell.embed_norm, loss: config.model.loss },
        sigma,
        ks: config.eval.ks.clone(),
        exclude_seen: config.eval.exclude_seen,
        seed: cell.seed,
    }
}

/// Per-user model inputs: perturbed for the private methods, raw otherwise.
pub fn cell_features(data: &PreparedData, cell: &Cell, spec: &PrivacySpec) -> Result<Vec<Vec<f64>>> {
    let schema = match &data.schema {
        Some(s) if cell.method != Method::Nonprivate && spec.epsilon1.is_finite() => s,
        _ => return Ok(data.features.clone()),
    };
    data.features
        .par_iter()
        .enumerate()
        .map(|(u, raw)| {
            let x = crate::ldp_feature::FeatureVector::new(schema, raw.clone());
            let x = match x {
                Ok(x) => x,
                // Users without a feature row have nothing to perturb.
                Err(_) => return Ok(vec![0.0; raw.len()]),
            };
            let mut rng = stream_rng(cell.seed, TAG_FEATURES, u as u64);
            Ok(perturb_features(schema, &x, spec.epsilon1, &mut rng)?.values)
        })
        .collect()
}

/// Model inputs for one split; EdgeRand graphs get their one-off noise here.
pub fn cell_samples(data: &PreparedData, split: usize, cell: &Cell, spec: &PrivacySpec) -> Result<Vec<Sample>> {
    data.samples[split]
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let graph = if cell.method == Method::Edgerand {
                let mut rng = stream_rng(cell.seed, TAG_EDGERAND + ((split as u64) << 8), i as u64);
                edgerand_perturb(&s.graph, spec, &mut rng)?
            } else {
                GraphInput::from(&s.graph)
            };
            Ok(Sample { user: s.user, graph, label: s.label })
        })
        .collect()
}

/// Outcome of one grid cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub privacy: PrivacySpec,
    /// Noise scale actually applied: aggregation σ for DIPSGNN, adjacency σ
    /// for EdgeRand, zero otherwise.
    pub sigma: f64,
    pub epochs: usize,
    /// Per entry of [`SPLITS`]; `None` for an empty split.
    pub metrics: [Option<MetricAccumulator>; 3],
    pub noisy_passes: usize,
    pub log: Vec<LogRecord>,
    pub params: ModelParams,
}

pub fn evaluation_seed(cell: &Cell, split: usize) -> u64 {
    cell.seed ^ (TAG_EVAL << 40) ^ ((split as u64) << 32)
}

/// Trains and evaluates one cell.
pub fn run_cell(config: &ExperimentConfig, data: &PreparedData, cell: &Cell) -> Result<CellResult> {
    let (privacy, sigma) = cell_privacy(cell, data.delta)?;
    let features = cell_features(data, cell, &privacy)?;
    let train_samples = cell_samples(data, 0, cell, &privacy)?;
    let valid_samples = cell_samples(data, 1, cell, &privacy)?;
    let test_samples = cell_samples(data, 2, cell, &privacy)?;
    let tcfg = train_config(config, cell, sigma);
    let training = TrainingData { features, train: train_samples, valid: valid_samples };
    let outcome = train::train(&training, data.num_items(), &tcfg)?;

    let mut noisy_passes = outcome.noisy_passes;
    let mut metrics: [Option<MetricAccumulator>; 3] = [None, None, None];
    let sets = [&training.train, &training.valid, &test_samples];
    for (i, set) in sets.into_iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        metrics[i] = Some(train::evaluate(&outcome.params, &training.features, set, &tcfg, evaluation_seed(cell, i))?);
        if sigma > 0.0 {
            noisy_passes += set.len();
        }
    }
    let reported_sigma = if cell.method == Method::Edgerand { privacy.sigma } else { sigma };
    Ok(CellResult {
        cell: *cell,
        privacy,
        sigma: reported_sigma,
        epochs: config.training.epochs,
        metrics,
        noisy_passes,
        log: outcome.log,
        params: outcome.params,
    })
}

/// Runs every cell of the grid (in parallel) and assembles the report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport> {
    Ok(run_experiment_detailed(config)?.0)
}

/// As [`run_experiment`], also returning each cell's full result.
pub fn run_experiment_detailed(config: &ExperimentConfig) -> Result<(EvalReport, Vec<CellResult>)> {
    config.validate()?;
    let data = prepare(config)?;
    if let Some(&k) = config.eval.ks.iter().find(|&&k| k > data.num_items()) {
        return Err(Error::Config(format!("K={k} exceeds the {} items", data.num_items())));
    }
    let grid = cells(config);
    let results = grid
        .par_iter()
        .map(|cell| {
            run_cell(config, &data, cell).map_err(|e| Error::Cell {
                method: cell.method.to_string(),
                seed: cell.seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = assemble(config, &data, &results)?;
    Ok((report, results))
}

pub fn report_rows(result: &CellResult) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    let c = &result.cell;
    for (split, acc) in SPLITS.iter().zip(&result.metrics) {
        let Some(acc) = acc else { continue };
        let metric_lists = [("recall", acc.recall()), ("mrr", acc.mrr())];
        for (metric, values) in metric_lists {
            for (&k, value) in acc.ks.iter().zip(values) {
                rows.push(ReportRow {
                    method: c.method,
                    epsilon1: c.epsilon1,
                    epsilon2: c.epsilon2,
                    delta: result.privacy.delta,
                    steps: c.steps,
                    embed_norm: c.embed_norm,
                    sigma: result.sigma,
                    seed: c.seed,
                    epochs: result.epochs,
                    split: (*split).to_owned(),
                    metric: metric.to_owned(),
                    k,
                    value,
                });
            }
        }
    }
    rows
}

fn assemble(config: &ExperimentConfig, data: &PreparedData, results: &[CellResult]) -> Result<EvalReport> {
    let rows = results.iter().flat_map(report_rows).collect();
    let provenance = super::report::Provenance {
        config_hash: config.hash()?,
        version: env!("CARGO_PKG_VERSION").to_owned(),
        num_users: data.split.users.len(),
        num_items: data.num_items(),
        num_edges: data.split.num_edges(),
        samples: [data.samples[0].len(), data.samples[1].len(), data.samples[2].len()],
        delta: data.delta,
        cells: results
            .iter()
            .map(|r| super::report::CellProvenance {
                cell: r.cell,
                privacy: r.privacy,
                sigma: r.sigma,
                noisy_passes: r.noisy_passes,
                epsilon2_recomputed: r.privacy.recomputed_epsilon2(),
            })
            .collect(),
    };
    Ok(EvalReport { rows, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synthetic::{SyntheticConfig, SyntheticKind};

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synthetic = Some(SyntheticConfig { users: 30, items: 12, length: 10, ..SyntheticConfig::default() });
        cfg.model.item_dim = 6;
        cfg.model.user_dim = 3;
        cfg.training.epochs = 2;
        cfg.training.batch_size = 32;
        cfg.training.learning_rate = 0.01;
        cfg.eval.ks = vec![1, 5];
        cfg.methods = Method::ALL.to_vec();
        cfg.seeds = vec![3, 4];
        cfg
    }

    #[test]
    fn grid_dedupes_nonprivate() {
        let mut cfg = small_config();
        cfg.sweep.epsilon2 = vec![3.0, 5.0];
        let grid = cells(&cfg);
        assert_eq!(grid.iter().filter(|c| c.method == Method::Dipsgnn).count(), 4);
        assert_eq!(grid.iter().filter(|c| c.method == Method::Nonprivate).count(), 2);
        assert_eq!(grid, cells(&cfg));
    }

    #[test]
    fn sigma_decreases_along_epsilon2_sweep() {
        let mut cfg = small_config();
        cfg.methods = vec![Method::Dipsgnn];
        cfg.seeds = vec![7];
        cfg.training.epochs = 1;
        cfg.sweep.epsilon2 = vec![3.0, 4.0, 5.0];
        let report = run_experiment(&cfg).unwrap();
        let sigmas: Vec<f64> = report.provenance.cells.iter().map(|c| c.sigma).collect();
        assert_eq!(sigmas.len(), 3);
        assert!(sigmas[0] > sigmas[1] && sigmas[1] > sigmas[2], "{sigmas:?}");
    }

    #[test]
    fn report_is_deterministic_and_consistent() {
        let cfg = small_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        // 5 dipsgnn/edgerand/nonprivate cells × 3 splits × 2 metrics × 2 K.
        assert_eq!(a.rows.len(), 6 * 3 * 2 * 2);
        let edgerand = a.provenance.cells.iter().find(|c| c.cell.method == Method::Edgerand).unwrap();
        assert_eq!(edgerand.noisy_passes, 0);
        assert!(edgerand.sigma > 0.0);
        let dips = a.provenance.cells.iter().find(|c| c.cell.method == Method::Dipsgnn).unwrap();
        assert!(dips.noisy_passes > 0);
        assert!((dips.epsilon2_recomputed - 5.0).abs() < 1e-9);
    }

    #[test]
    fn nonprivate_overfits_cycle() {
        let mut cfg = ExperimentConfig::default();
        cfg.synthetic = Some(SyntheticConfig { kind: SyntheticKind::Cycle, users: 20, items: 10, length: 12, ..SyntheticConfig::default() });
        cfg.split.valid_frac = 0.0;
        cfg.model.item_dim = 8;
        cfg.model.user_dim = 4;
        cfg.training.learning_rate = 0.02;
        cfg.training.batch_size = 16;
        cfg.eval.ks = vec![1, 5];
        cfg.methods = vec![Method::Nonprivate];
        cfg.seeds = vec![1];
        let report = run_experiment(&cfg).unwrap();
        let r1 = report.value(Method::Nonprivate, 1, "train", "recall", 1).unwrap();
        assert!(r1 >= 90.0, "{r1}");
    }
}
