//! Mini-batch training with Adam and evaluation over sample sets.
//!
//! Per-sample noise streams are derived from `(seed, epoch, sample index)`
//! and gradients are summed in a fixed order, so results do not depend on
//! the number of worker threads.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{backward, draw_noise, forward, ForwardConfig, GraphInput};
use super::params::{Adam, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::eval::metrics::{label_rank, MetricAccumulator};

/// Samples handed to one worker; gradient sums are formed per chunk and then
/// added in chunk order.
const CHUNK: usize = 8;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_TRAIN_NOISE: u64 = 3;
pub(crate) const TAG_EVAL_NOISE: u64 = 4;

/// Independent, reproducible stream for `(seed, tag, index)`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// One (subsequence graph, next item) example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row of [`TrainingData::features`].
    pub user: usize,
    pub graph: GraphInput,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    /// Perturbed feature vector per user index.
    pub features: Vec<Vec<f64>>,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub item_dim: usize,
    pub user_dim: usize,
    pub forward: ForwardConfig,
    /// Aggregation noise; zero for EdgeRand and the non-private model.
    pub sigma: f64,
    pub ks: Vec<usize>,
    pub exclude_seen: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.forward.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.forward.embed_norm > 0.0) {
            return Err(Error::Config("embedding norm must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.ks.iter().any(|&k| k == 0) {
            return Err(Error::Config("every K must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// `recall@K` and `mrr@K` in percent.
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    pub wall_time: f64,
}

impl LogRecord {
    fn new(epoch: usize, split: &str, acc: &MetricAccumulator, wall_time: f64) -> Self {
        LogRecord { epoch, split: split.to_owned(), loss: acc.mean_loss(), metrics: metric_map(acc), wall_time }
    }
}

pub fn metric_map(acc: &MetricAccumulator) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for ((k, r), mrr) in acc.ks.iter().zip(acc.recall()).zip(acc.mrr()) {
        m.insert(format!("recall@{k}"), r);
        m.insert(format!("mrr@{k}"), mrr);
    }
    m
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRecord>,
    /// Forward passes that drew aggregation noise.
    pub noisy_passes: usize,
}

struct ChunkResult {
    grads: ModelParams,
    losses: Vec<f64>,
    ranks: Vec<Option<usize>>,
}

fn excluded_items(sample: &Sample, exclude_seen: bool) -> &[usize] {
    if exclude_seen { &sample.graph.node_items } else { &[] }
}

fn sample_features<'a>(data_features: &'a [Vec<f64>], sample: &Sample) -> Result<&'a [f64]> {
    data_features
        .get(sample.user)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Config(format!("no features for user index {}", sample.user)))
}

fn train_chunk(
    params: &ModelParams,
    data: &TrainingData,
    chunk: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<ChunkResult> {
    let mut grads = params.zeros_like();
    let mut losses = Vec::with_capacity(chunk.len());
    let mut ranks = Vec::with_capacity(chunk.len());
    let width = params.dims.joint_dim();
    for &idx in chunk {
        let sample = &data.train[idx];
        let features = sample_features(&data.features, sample)?;
        let mut rng = stream_rng(config.seed, TAG_TRAIN_NOISE + ((epoch as u64) << 8), idx as u64);
        let noise = draw_noise(sample.graph.num_nodes(), width, config.sigma, config.forward.steps, &mut rng);
        let trace = forward(params, features, &sample.graph, &noise, &config.forward)?;
        let loss = trace.loss(sample.label, config.forward.loss);
        losses.push(loss);
        ranks.push(label_rank(
            trace.logits.as_slice().expect("contiguous"),
            sample.label,
            excluded_items(sample, config.exclude_seen),
        )
        .unwrap_or(None));
        if loss.is_finite() {
            backward(params, features, &sample.graph, sample.label, &trace, &config.forward, &mut grads);
        }
    }
    Ok(ChunkResult { grads, losses, ranks })
}

/// Trains from a fresh seeded initialization.
pub fn train(data: &TrainingData, num_items: usize, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let feature_width = data.features.first().map_or(0, Vec::len);
    let dims = ModelDims { feature_width, num_items, item_dim: config.item_dim, user_dim: config.user_dim };
    let params = ModelParams::init(dims, &mut stream_rng(config.seed, TAG_INIT, 0))?;
    train_from(params, data, config)
}

/// Trains starting from `params`.
pub fn train_from(mut params: ModelParams, data: &TrainingData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = stream_rng(config.seed, TAG_SHUFFLE, 0);
    let mut log = Vec::new();
    let mut noisy_passes = 0;
    let start = Instant::now();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = MetricAccumulator::new(&config.ks);
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let results = batch
                .par_chunks(CHUNK)
                .map(|chunk| train_chunk(&params, data, chunk, config, epoch))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = params.zeros_like();
            for r in &results {
                for (&loss, &rank) in r.losses.iter().zip(&r.ranks) {
                    if !loss.is_finite() {
                        return Err(Error::Diverged { epoch, batch: batch_no, loss });
                    }
                    acc.add(rank, loss);
                }
                grads.add_assign(&r.grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &grads);
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no, loss: f64::NAN });
            }
        }
        if config.sigma > 0.0 {
            noisy_passes += data.train.len();
        }
        log.push(LogRecord::new(epoch, "train", &acc, start.elapsed().as_secs_f64()));
        if !data.valid.is_empty() {
            let valid = evaluate(&params, &data.features, &data.valid, config, config.seed ^ epoch as u64)?;
            if config.sigma > 0.0 {
                noisy_passes += data.valid.len();
            }
            log.push(LogRecord::new(epoch, "valid", &valid, start.elapsed().as_secs_f64()));
        }
    }
    Ok(TrainOutcome { params, log, noisy_passes })
}

/// Recall/MRR and mean loss over `samples`, with aggregation noise drawn
/// from streams keyed by `noise_seed`.
pub fn evaluate(
    params: &ModelParams,
    features: &[Vec<f64>],
    samples: &[Sample],
    config: &TrainConfig,
    noise_seed: u64,
) -> Result<MetricAccumulator> {
    let width = params.dims.joint_dim();
    let per_sample = samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let feats = sample_features(features, sample)?;
            let mut rng = stream_rng(noise_seed, TAG_EVAL_NOISE, i as u64);
            let noise = draw_noise(sample.graph.num_nodes(), width, config.sigma, config.forward.steps, &mut rng);
            let trace = forward(params, feats, &sample.graph, &noise, &config.forward)?;
            let rank = label_rank(
                trace.logits.as_slice().expect("contiguous"),
                sample.label,
                excluded_items(sample, config.exclude_seen),
            )?;
            Ok((rank, trace.loss(sample.label, config.forward.loss)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = MetricAccumulator::new(&config.ks);
    for (rank, loss) in per_sample {
        acc.add(rank, loss);
    }
    Ok(acc)
}
