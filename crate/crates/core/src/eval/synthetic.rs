//! Small generated datasets with a known next-item rule.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_pipeline::{Interaction, InteractionLog};
use crate::ldp_feature::{FeatureSchema, FeatureSpec, FeatureTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Items fall into `clusters` groups. Even positions are drawn from the
    /// group following that of the item two steps back with probability
    /// `follow_prob` (uniform otherwise); odd positions are uniform. Only the
    /// order of the last two items reveals which group comes next.
    PlantedMarkov,
    /// User `u` walks `u, u+1, u+2, …` modulo the item count.
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub users: usize,
    pub items: usize,
    /// Interactions per user.
    pub length: usize,
    pub follow_prob: f64,
    /// Number of item groups in the planted rule.
    pub clusters: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { kind: SyntheticKind::PlantedMarkov, users: 200, items: 50, length: 30, follow_prob: 0.8, clusters: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub log: InteractionLog,
    pub schema: FeatureSchema,
    pub features: FeatureTable,
}

/// Three user features (age, gender, occupation) unrelated to behavior.
pub fn feature_schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        FeatureSpec::numerical("age", 18.0, 65.0),
        FeatureSpec::categorical("gender", ["F", "M"]),
        FeatureSpec::categorical("occupation", ["a", "b", "c", "d", "e"]),
    ])
    .expect("static schema is valid")
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    if config.users == 0 || config.items < 2 || config.length < 2 {
        return Err(Error::Config(format!("synthetic dataset too small: {config:?}")));
    }
    if !(0.0..=1.0).contains(&config.follow_prob) {
        return Err(Error::Config(format!("follow_prob must be in [0, 1], got {}", config.follow_prob)));
    }
    if config.kind == SyntheticKind::PlantedMarkov && !(1..=config.items).contains(&config.clusters) {
        return Err(Error::Config(format!("clusters must be in 1..={}, got {}", config.items, config.clusters)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..config.items).collect();
    order.shuffle(&mut rng);
    let mut group_of = vec![0; config.items];
    let mut groups = vec![Vec::new(); config.clusters.max(1)];
    for (pos, &item) in order.iter().enumerate() {
        let g = pos % groups.len();
        group_of[item] = g;
        groups[g].push(item);
    }

    let mut records = Vec::with_capacity(config.users * config.length);
    let mut rows = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let user = format!("u{u}");
        let seq: Vec<usize> = match config.kind {
            SyntheticKind::Cycle => (0..config.length).map(|s| (u + s) % config.items).collect(),
            SyntheticKind::PlantedMarkov => {
                let mut seq = vec![rng.random_range(0..config.items), rng.random_range(0..config.items)];
                while seq.len() < config.length {
                    let t = seq.len();
                    let next = if t % 2 == 0 && rng.random_bool(config.follow_prob) {
                        let g = (group_of[seq[t - 2]] + 1) % groups.len();
                        *groups[g].choose(&mut rng).expect("groups are non-empty")
                    } else {
                        rng.random_range(0..config.items)
                    };
                    seq.push(next);
                }
                seq
            }
        };
        for (t, item) in seq.into_iter().enumerate() {
            records.push(Interaction { user: user.clone(), item: format!("i{item}"), timestamp: t as i64 });
        }
        let age = rng.random_range(18..=65).to_string();
        let gender = ["F", "M"][rng.random_range(0..2)].to_owned();
        let occupation = ["a", "b", "c", "d", "e"][rng.random_range(0..5)].to_owned();
        rows.push((user, vec![age, gender, occupation]));
    }
    Ok(SyntheticData { log: InteractionLog::new(records), schema: feature_schema(), features: FeatureTable { rows } })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_rule_holds_at_follow_rate() {
        let cfg = SyntheticConfig { users: 400, clusters: 5, ..SyntheticConfig::default() };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.log.len(), 400 * 30);
        // Count lag-2 co-occurrences at even and odd targets separately.
        let mut even = vec![vec![0usize; 50]; 50];
        let mut odd = vec![vec![0usize; 50]; 50];
        for (_, s) in data.log.sequences() {
            let idx: Vec<usize> = s.iter().map(|i| i[1..].parse().unwrap()).collect();
            for t in 2..idx.len() {
                let m = if t % 2 == 0 { &mut even } else { &mut odd };
                m[idx[t - 2]][idx[t]] += 1;
            }
        }
        // Share of mass on each row's 10 most frequent targets.
        let top_share = |m: &[Vec<usize>]| {
            let (mut top, mut total) = (0, 0);
            for row in m {
                let mut r = row.clone();
                r.sort_unstable_by(|a, b| b.cmp(a));
                top += r[..10].iter().sum::<usize>();
                total += r.iter().sum::<usize>();
            }
            top as f64 / total as f64
        };
        // 0.8 + 0.2 · 10/50 when the rule is planted.
        assert!((top_share(&even) - 0.84).abs() < 0.04, "{}", top_share(&even));
        assert!(top_share(&odd) < 0.5, "{}", top_share(&odd));
        assert_eq!(generate(&cfg).unwrap(), data);
    }

    #[test]
    fn cycle_is_deterministic() {
        let cfg = SyntheticConfig { kind: SyntheticKind::Cycle, users: 3, items: 4, length: 6, ..SyntheticConfig::default() };
        let data = generate(&cfg).unwrap();
        let seqs = data.log.sequences();
        assert_eq!(seqs[1].1, ["i1", "i2", "i3", "i0", "i1", "i2"]);
        for (_, row) in &data.features.rows {
            data.schema.encode(row).unwrap();
        }
    }

    #[test]
    fn rejects_degenerate() {
        assert!(generate(&SyntheticConfig { items: 1, ..SyntheticConfig::default() }).is_err());
        assert!(generate(&SyntheticConfig { follow_prob: 1.5, ..SyntheticConfig::default() }).is_err());
        assert!(generate(&SyntheticConfig { clusters: 0, ..SyntheticConfig::default() }).is_err());
    }
}
