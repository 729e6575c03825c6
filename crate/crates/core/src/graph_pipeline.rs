//! Interaction ingestion, core filtering, chronological splitting and
//! behavior-graph construction.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum sequence lengths used for ML-1M, Yelp and Tmall.
pub const MAX_LEN_ML1M: usize = 100;
pub const MAX_LEN_YELP: usize = 30;
pub const MAX_LEN_TMALL: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(records: Vec<Interaction>) -> Self {
        InteractionLog { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-user item sequences in chronological order. Users appear in order
    /// of their first record; timestamp ties keep file order.
    pub fn sequences(&self) -> Vec<(String, Vec<String>)> {
        let mut order: Vec<&str> = Vec::new();
        let mut per_user: HashMap<&str, Vec<&Interaction>> = HashMap::new();
        for rec in &self.records {
            per_user
                .entry(rec.user.as_str())
                .or_insert_with(|| {
                    order.push(rec.user.as_str());
                    Vec::new()
                })
                .push(rec);
        }
        order
            .into_iter()
            .map(|user| {
                let mut recs = per_user.remove(user).unwrap_or_default();
                recs.sort_by_key(|r| r.timestamp);
                (user.to_owned(), recs.into_iter().map(|r| r.item.clone()).collect())
            })
            .collect()
    }
}

/// Reads `user_id, item_id, timestamp` rows after a one-line header.
pub fn read_interactions(path: &Path, delimiter: u8) -> Result<InteractionLog> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::parse(path, e))?;
        if row.len() < 3 {
            return Err(Error::parse(path, format!("row {}: expected 3 columns, got {}", line + 2, row.len())));
        }
        let timestamp = row[2]
            .parse::<i64>()
            .map_err(|e| Error::parse(path, format!("row {}: bad timestamp `{}`: {e}", line + 2, &row[2])))?;
        records.push(Interaction { user: row[0].to_owned(), item: row[1].to_owned(), timestamp });
    }
    Ok(InteractionLog { records })
}

pub fn write_interactions(path: &Path, log: &InteractionLog, delimiter: u8) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    writer.write_record(["user_id", "item_id", "timestamp"]).map_err(|e| Error::parse(path, e))?;
    for r in &log.records {
        writer
            .write_record([r.user.as_str(), r.item.as_str(), &r.timestamp.to_string()])
            .map_err(|e| Error::parse(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Keeps the largest sub-log in which every user and item has at least
/// `min_count` interactions.
pub fn core_filter(log: &InteractionLog, min_count: usize) -> InteractionLog {
    let mut keep: Vec<&Interaction> = log.records.iter().collect();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &keep {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let before = keep.len();
        keep.retain(|r| users[r.user.as_str()] >= min_count && items[r.item.as_str()] >= min_count);
        if keep.len() == before {
            break;
        }
    }
    InteractionLog { records: keep.into_iter().cloned().collect() }
}

/// The 10-core setting: users and items with fewer than ten interactions are
/// removed until a fixed point.
pub fn ten_core_filter(log: &InteractionLog) -> InteractionLog {
    core_filter(log, 10)
}

/// Ordered id ↔ index map.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(ids: Vec<String>) -> Self {
        let mut vocab = Vocabulary::default();
        for id in ids {
            vocab.insert(&id);
        }
        vocab
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.ids
    }
}

impl Vocabulary {
    pub fn insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.get(id).ok_or_else(|| Error::UnknownItem(id.to_owned()))
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// A (prefix, next item) training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub user: String,
    pub items: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_frac: 0.8, valid_frac: 0.1, max_len: MAX_LEN_TMALL, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<LabeledSequence>,
    pub valid: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
    pub items: Vocabulary,
    pub users: Vocabulary,
    /// Consecutive-interaction pairs across all users' full histories.
    #[serde(default)]
    pub edges: usize,
}

impl SplitDataset {
    /// Total number of consecutive-interaction edges across all users' full
    /// sequences, used to pick `δ`.
    pub fn num_edges(&self) -> usize {
        self.edges
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

fn keep_recent(items: &[String], max_len: usize) -> Vec<String> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

/// Per user, the first `⌈train_frac·n⌉` interactions form the training pool
/// and the rest the test pool. Every position `s ≥ 1` yields the pair
/// (items before `s`, item `s`); test prefixes include the training history.
/// A seeded `valid_frac` share of training pairs is held out for validation.
pub fn chronological_split(log: &InteractionLog, config: &SplitConfig) -> Result<SplitDataset> {
    if !(config.train_frac > 0.0 && config.train_frac < 1.0) {
        return Err(Error::InvalidParameter(format!("train_frac must be in (0, 1), got {}", config.train_frac)));
    }
    if !(0.0..1.0).contains(&config.valid_frac) {
        return Err(Error::InvalidParameter(format!("valid_frac must be in [0, 1), got {}", config.valid_frac)));
    }
    if config.max_len == 0 {
        return Err(Error::InvalidParameter("max_len must be positive".into()));
    }

    let sequences = log.sequences();
    let mut split = SplitDataset::default();
    let mut train_cut = Vec::with_capacity(sequences.len());

    for (user, seq) in &sequences {
        // Guard against 0.8 * 10 = 8.000000000000002 style rounding.
        let n_train = ((config.train_frac * seq.len() as f64) - 1e-9).ceil() as usize;
        let n_train = n_train.clamp(1, seq.len());
        train_cut.push(n_train);
        split.users.insert(user);
        for item in &seq[..n_train] {
            split.items.insert(item);
        }
    }
    for ((_, seq), &n_train) in sequences.iter().zip(&train_cut) {
        for item in &seq[n_train..] {
            split.items.insert(item);
        }
    }

    let mut train = Vec::new();
    for ((user, seq), &n_train) in sequences.iter().zip(&train_cut) {
        split.edges += seq.len().saturating_sub(1);
        for s in 1..seq.len() {
            let pair = LabeledSequence {
                user: user.clone(),
                items: keep_recent(&seq[..s], config.max_len),
                label: seq[s].clone(),
            };
            if s < n_train {
                train.push(pair);
            } else {
                split.test.push(pair);
            }
        }
    }

    let n_valid = (config.valid_frac * train.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut is_valid = vec![false; train.len()];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    for (pair, v) in train.into_iter().zip(is_valid) {
        if v {
            split.valid.push(pair);
        } else {
            split.train.push(pair);
        }
    }
    Ok(split)
}

/// Directed weighted graph of one (sub)sequence over its own items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorGraph {
    /// Global item index of each local node, in order of first appearance.
    pub node_items: Vec<usize>,
    /// Local node index of every sequence position.
    pub positions: Vec<usize>,
    /// `a_out[i, j]` counts consecutive transitions `i → j`.
    pub a_out: Array2<u32>,
    /// Transpose of `a_out`.
    pub a_in: Array2<u32>,
}

impl BehaviorGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_items.len()
    }

    /// Transition counts keyed by global item pairs.
    pub fn transitions(&self) -> BTreeMap<(usize, usize), u32> {
        self.a_out
            .indexed_iter()
            .filter(|(_, &w)| w > 0)
            .map(|((i, j), &w)| ((self.node_items[i], self.node_items[j]), w))
            .collect()
    }
}

/// Builds the un-normalized count graph of a sequence of global item indices.
pub fn build_graph_from_indices(sequence: &[usize]) -> Result<BehaviorGraph> {
    if sequence.is_empty() {
        return Err(Error::InvalidParameter("cannot build a graph from an empty sequence".into()));
    }
    let mut node_items = Vec::new();
    let mut local: HashMap<usize, usize> = HashMap::new();
    let positions: Vec<usize> = sequence
        .iter()
        .map(|&item| {
            *local.entry(item).or_insert_with(|| {
                node_items.push(item);
                node_items.len() - 1
            })
        })
        .collect();
    let n = node_items.len();
    let mut a_out = Array2::<u32>::zeros((n, n));
    for w in positions.windows(2) {
        a_out[[w[0], w[1]]] += 1;
    }
    let a_in = a_out.t().to_owned();
    Ok(BehaviorGraph { node_items, positions, a_out, a_in })
}

pub fn build_graph(subsequence: &[String], vocab: &Vocabulary) -> Result<BehaviorGraph> {
    let indices = subsequence.iter().map(|id| vocab.index_of(id)).collect::<Result<Vec<_>>>()?;
    build_graph_from_indices(&indices)
}
