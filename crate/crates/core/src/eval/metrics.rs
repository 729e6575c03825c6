use std::cmp::Ordering;

use crate::error::{Error, Result};

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    Ok(())
}

/// 1 if `label` is among the first `k` ranked items.
pub fn recall_at_k(ranked: &[usize], label: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(if ranked.iter().take(k).any(|&i| i == label) { 1.0 } else { 0.0 })
}

/// `1/rank` if `label` ranks within the first `k`, else 0.
pub fn mrr_at_k(ranked: &[usize], label: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(ranked.iter().take(k).position(|&i| i == label).map_or(0.0, |p| 1.0 / (p + 1) as f64))
}

fn descending(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

fn check_finite(scores: &[f64]) -> Result<()> {
    match scores.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteScore { index }),
        None => Ok(()),
    }
}

/// Item indices by descending score, ties by ascending index.
pub fn rank_items(scores: &[f64]) -> Result<Vec<usize>> {
    check_finite(scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| descending(scores, a, b));
    Ok(order)
}

/// 1-based rank `label` would get from [`rank_items`] without sorting.
///
/// Items in `excluded` are removed from the ranking; `None` means the label
/// itself was excluded.
pub fn label_rank(scores: &[f64], label: usize, excluded: &[usize]) -> Result<Option<usize>> {
    check_finite(scores)?;
    if label >= scores.len() {
        return Err(Error::InvalidParameter(format!("label {label} outside {} scores", scores.len())));
    }
    if excluded.contains(&label) {
        return Ok(None);
    }
    let ahead = (0..scores.len())
        .filter(|&j| descending(scores, j, label) == Ordering::Less)
        .filter(|j| !excluded.contains(j))
        .count();
    Ok(Some(ahead + 1))
}

/// Running Recall@K / MRR@K sums over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    pub ks: Vec<usize>,
    hits: Vec<f64>,
    reciprocal: Vec<f64>,
    loss: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn new(ks: &[usize]) -> Self {
        MetricAccumulator {
            ks: ks.to_vec(),
            hits: vec![0.0; ks.len()],
            reciprocal: vec![0.0; ks.len()],
            loss: 0.0,
            count: 0,
        }
    }

    pub fn add(&mut self, rank: Option<usize>, loss: f64) {
        if let Some(rank) = rank {
            for (i, &k) in self.ks.iter().enumerate() {
                if rank <= k {
                    self.hits[i] += 1.0;
                    self.reciprocal[i] += 1.0 / rank as f64;
                }
            }
        }
        self.loss += loss;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean_loss(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.loss / self.count as f64 }
    }

    /// Recall@K in percent, one per `k`.
    pub fn recall(&self) -> Vec<f64> {
        self.hits.iter().map(|h| self.percent(*h)).collect()
    }

    /// MRR@K in percent, one per `k`.
    pub fn mrr(&self) -> Vec<f64> {
        self.reciprocal.iter().map(|h| self.percent(*h)).collect()
    }

    fn percent(&self, total: f64) -> f64 {
        if self.count == 0 { 0.0 } else { 100.0 * total / self.count as f64 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recall_examples() {
        let ranked: Vec<usize> = (0..30).collect();
        assert_eq!(recall_at_k(&ranked, 0, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, 20, 20).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranked, 19, 20).unwrap(), 1.0);
        assert!(recall_at_k(&ranked, 0, 0).is_err());
    }

    #[test]
    fn mrr_examples() {
        let ranked: Vec<usize> = (0..30).collect();
        assert_eq!(mrr_at_k(&ranked, 1, 10).unwrap(), 0.5);
        assert_eq!(mrr_at_k(&ranked, 10, 10).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&ranked, 0, 10).unwrap(), 1.0);
        assert!(mrr_at_k(&ranked, 0, 0).is_err());
    }

    #[test]
    fn rank_ties_by_index() {
        assert_eq!(rank_items(&[0.1, 0.9, 0.9]).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_items(&[0.5; 4]).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(rank_items(&[0.1, f64::NAN]), Err(Error::NonFiniteScore { index: 1 })));
    }

    #[test]
    fn chance_level_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let trials = 10_000;
        for k in [5usize, 10, 20] {
            let mut hits = 0.0;
            for _ in 0..trials {
                let scores: Vec<f64> = (0..50).map(|_| rng.random()).collect();
                let label = rng.random_range(0..50);
                hits += recall_at_k(&rank_items(&scores).unwrap(), label, k).unwrap();
            }
            let p = k as f64 / 50.0;
            let mean = hits / trials as f64;
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((mean - p).abs() <= 3.0 * se, "k={k}: {mean}");
        }
    }

    #[test]
    fn excluded_items_are_skipped() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        assert_eq!(label_rank(&scores, 2, &[]).unwrap(), Some(3));
        assert_eq!(label_rank(&scores, 2, &[0]).unwrap(), Some(2));
        assert_eq!(label_rank(&scores, 2, &[2]).unwrap(), None);
    }

    #[test]
    fn accumulator_percentages() {
        let mut acc = MetricAccumulator::new(&[1, 5]);
        acc.add(Some(1), 1.0);
        acc.add(Some(4), 3.0);
        acc.add(None, 2.0);
        acc.add(Some(9), 2.0);
        assert_eq!(acc.recall(), vec![25.0, 50.0]);
        assert_eq!(acc.mrr(), vec![25.0, 31.25]);
        assert_eq!(acc.mean_loss(), 2.0);
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(scores in prop::collection::vec(-3i32..3, 1..40)) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let ranked = rank_items(&scores).unwrap();
            // Oracle: stable sort of (−score) keeps index order on ties.
            let mut oracle: Vec<usize> = (0..scores.len()).collect();
            oracle.sort_by_key(|&i| -(scores[i] as i64));
            prop_assert_eq!(&ranked, &oracle);
            for label in 0..scores.len() {
                let pos = ranked.iter().position(|&i| i == label).unwrap() + 1;
                prop_assert_eq!(label_rank(&scores, label, &[]).unwrap(), Some(pos));
                for k in [1usize, 3, 10] {
                    let r = recall_at_k(&ranked, label, k).unwrap();
                    let m = mrr_at_k(&ranked, label, k).unwrap();
                    prop_assert!(m <= r);
                    prop_assert_eq!(r, if pos <= k { 1.0 } else { 0.0 });
                }
            }
        }
    }
}
