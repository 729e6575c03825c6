//! Local differential privacy for user side features.
//!
//! Numerical features go through the piecewise mechanism, categorical
//! (one-hot) features through optimized unary encoding. A user's whole
//! feature vector is protected by sampling `k` features, spending `ε₁/k` on
//! each, and zeroing the rest.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature divisor in `k = max(1, min(n, ⌊ε₁ / 2.5⌋))`.
const BUDGET_PER_SELECTED_FEATURE: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    /// Min-max normalized into `[-1, 1]`. Missing bounds are fitted from
    /// training rows by [`FeatureSchema::fit_ranges`].
    Numerical {
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numerical(name: impl Into<String>, min: f64, max: f64) -> Self {
        FeatureSpec { name: name.into(), kind: FeatureKind::Numerical { min: Some(min), max: Some(max) } }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical { categories: categories.into_iter().map(Into::into).collect() },
        }
    }

    pub fn width(&self) -> usize {
        match &self.kind {
            FeatureKind::Numerical { .. } => 1,
            FeatureKind::Categorical { categories } => categories.len(),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.kind, FeatureKind::Numerical { .. })
    }
}

/// Ordered description of a user's `n` features and their encoded layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureSpec>", into = "Vec<FeatureSpec>")]
pub struct FeatureSchema {
    entries: Vec<FeatureSpec>,
    offsets: Vec<usize>,
}

impl TryFrom<Vec<FeatureSpec>> for FeatureSchema {
    type Error = Error;

    fn try_from(entries: Vec<FeatureSpec>) -> Result<Self> {
        FeatureSchema::new(entries)
    }
}

impl From<FeatureSchema> for Vec<FeatureSpec> {
    fn from(schema: FeatureSchema) -> Self {
        schema.entries
    }
}

impl FeatureSchema {
    pub fn new(entries: Vec<FeatureSpec>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("feature schema needs at least one entry".into()));
        }
        let mut offsets = Vec::with_capacity(entries.len() + 1);
        let mut width = 0;
        for spec in &entries {
            if let FeatureKind::Categorical { categories } = &spec.kind {
                if categories.len() < 2 {
                    return Err(Error::Config(format!(
                        "categorical feature `{}` needs at least 2 categories",
                        spec.name
                    )));
                }
            }
            offsets.push(width);
            width += spec.width();
        }
        offsets.push(width);
        Ok(FeatureSchema { entries, offsets })
    }

    /// Number of features `n`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Encoded width `d₀`.
    pub fn width(&self) -> usize {
        *self.offsets.last().expect("offsets has n + 1 entries")
    }

    pub fn entries(&self) -> &[FeatureSpec] {
        &self.entries
    }

    /// Column range of feature `i` in the encoded vector.
    pub fn block(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Fills in missing numeric bounds from raw training rows.
    pub fn fit_ranges<'a>(&mut self, rows: impl IntoIterator<Item = &'a [String]>) -> Result<()> {
        let mut seen: Vec<(f64, f64)> = vec![(f64::INFINITY, f64::NEG_INFINITY); self.len()];
        for row in rows {
            self.check_arity(row)?;
            for (i, spec) in self.entries.iter().enumerate() {
                if spec.is_numerical() {
                    let v = parse_number(&spec.name, &row[i])?;
                    seen[i].0 = seen[i].0.min(v);
                    seen[i].1 = seen[i].1.max(v);
                }
            }
        }
        for (spec, (lo, hi)) in self.entries.iter_mut().zip(seen) {
            if let FeatureKind::Numerical { min, max } = &mut spec.kind {
                if min.is_none() {
                    *min = lo.is_finite().then_some(lo);
                }
                if max.is_none() {
                    *max = hi.is_finite().then_some(hi);
                }
            }
        }
        Ok(())
    }

    /// Normalizes and one-hot encodes one raw row.
    pub fn encode(&self, row: &[String]) -> Result<FeatureVector> {
        self.check_arity(row)?;
        let mut values = vec![0.0; self.width()];
        for (i, spec) in self.entries.iter().enumerate() {
            let block = self.block(i);
            match &spec.kind {
                FeatureKind::Numerical { min, max } => {
                    let (Some(lo), Some(hi)) = (*min, *max) else {
                        return Err(Error::Config(format!("numeric feature `{}` has no fitted range", spec.name)));
                    };
                    let v = parse_number(&spec.name, &row[i])?;
                    values[block.start] = min_max_normalize(v, lo, hi);
                }
                FeatureKind::Categorical { categories } => {
                    let raw = row[i].trim();
                    let pos = categories.iter().position(|c| c == raw).ok_or_else(|| {
                        Error::Malformed(format!("`{raw}` is not a category of feature `{}`", spec.name))
                    })?;
                    values[block.start + pos] = 1.0;
                }
            }
        }
        FeatureVector::new(self, values)
    }

    fn check_arity(&self, row: &[String]) -> Result<()> {
        if row.len() != self.len() {
            return Err(Error::Malformed(format!("expected {} feature columns, got {}", self.len(), row.len())));
        }
        Ok(())
    }
}

fn parse_number(name: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Malformed(format!("feature `{name}`: `{raw}` is not a finite number")))
}

/// Maps `[lo, hi]` onto `[-1, 1]`, clamping values outside the fitted range.
pub fn min_max_normalize(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

/// A user's encoded features prior to perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(schema: &FeatureSchema, values: Vec<f64>) -> Result<Self> {
        if values.len() != schema.width() {
            return Err(Error::Shape(format!("feature width {} != schema width {}", values.len(), schema.width())));
        }
        for (i, spec) in schema.entries().iter().enumerate() {
            let block = &values[schema.block(i)];
            if spec.is_numerical() {
                if !(-1.0..=1.0).contains(&block[0]) {
                    return Err(Error::OutOfDomain { value: block[0] });
                }
            } else {
                check_one_hot(block)?;
            }
        }
        Ok(FeatureVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Output of [`perturb_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedFeatureVector {
    pub values: Vec<f64>,
    /// Indices of the `k` perturbed features, ascending.
    pub selected: Vec<usize>,
    pub budget_per_feature: f64,
}

impl PerturbedFeatureVector {
    /// All-zero vector, used when no features are available.
    pub fn zeros(width: usize) -> Self {
        PerturbedFeatureVector { values: vec![0.0; width], selected: Vec::new(), budget_per_feature: 0.0 }
    }
}

fn check_budget(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidBudget(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    Ok(())
}

/// Output half-range `C` of the piecewise mechanism,
/// `(e^{ε/2} + 1) / (e^{ε/2} − 1)`.
pub fn pm_range_constant(epsilon: f64) -> Result<f64> {
    check_budget(epsilon)?;
    // 1 + 2/(e^{ε/2} − 1) is the same quantity without overflow at large ε.
    Ok(1.0 + 2.0 / (epsilon / 2.0).exp_m1())
}

/// Piecewise mechanism for one number in `[-1, 1]`.
///
/// With probability `e^{ε/2}/(e^{ε/2}+1)` the output is uniform on the high
/// density band `[l(x), r(x)]`, otherwise uniform on the rest of `[-C, C]`.
/// The output is an unbiased estimate of `x`.
pub fn perturb_number<R: Rng + ?Sized>(x: f64, epsilon: f64, rng: &mut R) -> Result<f64> {
    let c = pm_range_constant(epsilon)?;
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::OutOfDomain { value: x });
    }
    let (l, r) = pm_band(x, c);
    let p_inside = 1.0 / (1.0 + (-epsilon / 2.0).exp());

    if rng.random::<f64>() < p_inside {
        return Ok(l + (r - l) * rng.random::<f64>());
    }
    // One draw over the concatenated outer segments picks a segment in
    // proportion to its length; a zero-length segment is never chosen.
    let left = l + c;
    let right = c - r;
    let u = (left + right) * rng.random::<f64>();
    Ok(if u < left { -c + u } else { c - (u - left) })
}

/// The high-probability band `[l(x), r(x)]` for range constant `c`.
pub fn pm_band(x: f64, c: f64) -> (f64, f64) {
    let l = (c + 1.0) / 2.0 * x - (c - 1.0) / 2.0;
    (l, l + c - 1.0)
}

fn check_one_hot(x: &[f64]) -> Result<()> {
    let ones = x.iter().filter(|&&v| v == 1.0).count();
    let zeros = x.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != x.len() {
        return Err(Error::Malformed(format!("not a one-hot vector: {x:?}")));
    }
    Ok(())
}

/// Optimized unary encoding: the hot bit survives with probability ½, each
/// cold bit flips on with probability `1/(e^ε + 1)`.
pub fn perturb_onehot<R: Rng + ?Sized>(x: &[f64], epsilon: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_budget(epsilon)?;
    if x.len() < 2 {
        return Err(Error::Malformed(format!("one-hot width must be at least 2, got {}", x.len())));
    }
    check_one_hot(x)?;
    let flip_up = 1.0 / (epsilon.exp() + 1.0);
    Ok(x.iter()
        .map(|&bit| {
            let p = if bit == 1.0 { 0.5 } else { flip_up };
            if rng.random::<f64>() < p { 1.0 } else { 0.0 }
        })
        .collect())
}

/// Number of features to perturb, `max(1, min(n, ⌊ε₁/2.5⌋))`.
pub fn select_k(n: usize, epsilon1: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidParameter("feature count must be at least 1".into()));
    }
    check_budget(epsilon1)?;
    let by_budget = (epsilon1 / BUDGET_PER_SELECTED_FEATURE).floor();
    Ok((by_budget.min(n as f64) as usize).max(1))
}

/// Perturbs a whole feature vector under `ε₁`-LDP.
///
/// Selected numerical outputs are scaled by `n/k`; categorical outputs are
/// left as 0/1 bits. Unselected blocks are zero.
pub fn perturb_features<R: Rng + ?Sized>(
    schema: &FeatureSchema,
    x: &FeatureVector,
    epsilon1: f64,
    rng: &mut R,
) -> Result<PerturbedFeatureVector> {
    if x.values.len() != schema.width() {
        return Err(Error::Shape(format!("feature width {} != schema width {}", x.values.len(), schema.width())));
    }
    let n = schema.len();
    let k = select_k(n, epsilon1)?;
    let budget = epsilon1 / k as f64;
    let mut selected = rand::seq::index::sample(rng, n, k).into_vec();
    selected.sort_unstable();

    let mut values = vec![0.0; schema.width()];
    for &i in &selected {
        let block = schema.block(i);
        if schema.entries[i].is_numerical() {
            let v = perturb_number(x.values[block.start], budget, rng)?;
            values[block.start] = v * n as f64 / k as f64;
        } else {
            let bits = perturb_onehot(&x.values[block.clone()], budget, rng)?;
            values[block].copy_from_slice(&bits);
        }
    }
    Ok(PerturbedFeatureVector { values, selected, budget_per_feature: budget })
}

/// Raw feature rows keyed by user id, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<(String, Vec<String>)>,
}

impl FeatureTable {
    pub fn by_user(&self) -> HashMap<&str, &[String]> {
        self.rows.iter().map(|(u, r)| (u.as_str(), r.as_slice())).collect()
    }
}

/// Reads `user_id, feature...` rows after a one-line header.
pub fn read_feature_file(path: &Path, delimiter: u8) -> Result<FeatureTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        let mut fields = record.iter().map(str::to_owned);
        let user = fields.next().ok_or_else(|| Error::parse(path, "empty feature row"))?;
        rows.push((user, fields.collect()));
    }
    Ok(FeatureTable { rows })
}

pub fn write_feature_file(path: &Path, schema: &FeatureSchema, table: &FeatureTable, delimiter: u8) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let header = std::iter::once("user_id").chain(schema.entries().iter().map(|s| s.name.as_str()));
    writer.write_record(header).map_err(|e| Error::parse(path, e))?;
    for (user, row) in &table.rows {
        writer
            .write_record(std::iter::once(user).chain(row.iter()))
            .map_err(|e| Error::parse(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
