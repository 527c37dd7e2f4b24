//! Sparse per-item aggregation.
//!
//! Each item embedding is an independent aggregation unit: the server
//! collects the gradients uploaded for item `j` this round, reduces them with
//! the configured aggregator and applies `v_j ← v_j − η·AGR(list_j)`. Items
//! nobody uploaded for are left untouched.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Embeddings, SparseGradient};
use crate::ClientId;

pub const DEFAULT_CLIP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    /// No gradients for the item; the caller skips it.
    #[error("no gradients to aggregate")]
    Empty,
    #[error("aggregator needs at least {required} gradients, got {len}")]
    Inapplicable { len: usize, required: usize },
    #[error("gradient dimensions differ ({expected} vs {found})")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    Mean,
    Median,
    TrimmedMean,
    Krum,
    NormClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    /// Values dropped from each side per coordinate (trimmed mean).
    pub trim_count: usize,
    /// Assumed number of Byzantine inputs (Krum).
    pub assumed_byzantine: usize,
    /// L2 threshold for norm clipping.
    pub clip_threshold: f64,
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind) -> Self {
        AggregatorSpec {
            kind,
            trim_count: 0,
            assumed_byzantine: 0,
            clip_threshold: DEFAULT_CLIP_THRESHOLD,
        }
    }

    /// Smallest per-item list the primary aggregator accepts.
    pub fn min_inputs(&self) -> usize {
        match self.kind {
            AggregatorKind::TrimmedMean => 2 * self.trim_count + 1,
            AggregatorKind::Krum => self.assumed_byzantine + 3,
            _ => 1,
        }
    }
}

/// Aggregator settings as configured. Unset trim count and Krum `f` take the
/// resolved number of malicious clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub trim_count: Option<usize>,
    pub assumed_byzantine: Option<usize>,
    pub clip_threshold: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kind: AggregatorKind::Mean,
            trim_count: None,
            assumed_byzantine: None,
            clip_threshold: DEFAULT_CLIP_THRESHOLD,
        }
    }
}

impl AggregatorConfig {
    pub fn resolve(&self, malicious_count: usize) -> AggregatorSpec {
        AggregatorSpec {
            kind: self.kind,
            trim_count: self.trim_count.unwrap_or(malicious_count),
            assumed_byzantine: self.assumed_byzantine.unwrap_or(malicious_count),
            clip_threshold: self.clip_threshold,
        }
    }
}

fn check_dims(grads: &[&[f64]]) -> Result<usize, AggregateError> {
    let first = grads.first().ok_or(AggregateError::Empty)?;
    let dim = first.len();
    for g in grads {
        if g.len() != dim {
            return Err(AggregateError::DimensionMismatch {
                expected: dim,
                found: g.len(),
            });
        }
    }
    Ok(dim)
}

/// Coordinate-wise arithmetic mean, summed in list order.
pub fn aggregate_item_mean(grads: &[&[f64]]) -> Result<Vec<f64>, AggregateError> {
    let dim = check_dims(grads)?;
    let mut sum = vec![0.0; dim];
    for g in grads {
        sum.iter_mut().zip(g.iter()).for_each(|(s, x)| *s += x);
    }
    let n = grads.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn sorted_column(grads: &[&[f64]], k: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(grads.iter().map(|g| g[k]));
    buf.sort_unstable_by(f64::total_cmp);
}

/// Coordinate-wise median; even counts take the midpoint of the two
/// central values.
pub fn aggregate_item_median(grads: &[&[f64]]) -> Result<Vec<f64>, AggregateError> {
    let dim = check_dims(grads)?;
    let n = grads.len();
    let mut buf = Vec::with_capacity(n);
    Ok((0..dim)
        .map(|k| {
            sorted_column(grads, k, &mut buf);
            if n % 2 == 1 {
                buf[n / 2]
            } else {
                (buf[n / 2 - 1] + buf[n / 2]) / 2.0
            }
        })
        .collect())
}

/// Drops the `trim_count` smallest and largest values of each coordinate and
/// averages the rest.
pub fn aggregate_item_trimmed_mean(
    grads: &[&[f64]],
    trim_count: usize,
) -> Result<Vec<f64>, AggregateError> {
    let dim = check_dims(grads)?;
    let n = grads.len();
    if n <= 2 * trim_count {
        return Err(AggregateError::Inapplicable {
            len: n,
            required: 2 * trim_count + 1,
        });
    }
    if trim_count == 0 {
        return aggregate_item_mean(grads);
    }
    let kept = (n - 2 * trim_count) as f64;
    let mut buf = Vec::with_capacity(n);
    Ok((0..dim)
        .map(|k| {
            sorted_column(grads, k, &mut buf);
            buf[trim_count..n - trim_count].iter().sum::<f64>() / kept
        })
        .collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the Krum choice: the input whose summed squared distance to its
/// `n − f − 2` nearest other inputs is smallest, first index on ties.
pub fn krum_select(grads: &[&[f64]], assumed_byzantine: usize) -> Result<usize, AggregateError> {
    check_dims(grads)?;
    let n = grads.len();
    if n < assumed_byzantine + 3 {
        return Err(AggregateError::Inapplicable {
            len: n,
            required: assumed_byzantine + 3,
        });
    }
    let neighbours = n - assumed_byzantine - 2;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(grads[i], grads[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut best = (f64::INFINITY, 0usize);
    let mut row = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| dist[i * n + j]));
        row.sort_unstable_by(f64::total_cmp);
        let score: f64 = row[..neighbours].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    Ok(best.1)
}

pub fn aggregate_item_krum(
    grads: &[&[f64]],
    assumed_byzantine: usize,
) -> Result<Vec<f64>, AggregateError> {
    krum_select(grads, assumed_byzantine).map(|i| grads[i].to_vec())
}

/// Scales each input to norm at most `threshold`, then averages.
pub fn aggregate_item_norm_clip(
    grads: &[&[f64]],
    threshold: f64,
) -> Result<Vec<f64>, AggregateError> {
    let dim = check_dims(grads)?;
    let mut sum = vec![0.0; dim];
    for g in grads {
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let factor = if norm > threshold { threshold / norm } else { 1.0 };
        sum.iter_mut().zip(g.iter()).for_each(|(s, x)| *s += x * factor);
    }
    let n = grads.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Result of aggregating one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemAggregate {
    pub value: Vec<f64>,
    /// Aggregator actually applied.
    pub used: AggregatorKind,
    pub fallback: bool,
}

/// Applies `spec` to one item's gradients. Trimmed mean and Krum fall back
/// to the median when the list is too short for them.
pub fn aggregate_item(spec: &AggregatorSpec, grads: &[&[f64]]) -> Result<ItemAggregate, AggregateError> {
    let primary = match spec.kind {
        AggregatorKind::Mean => aggregate_item_mean(grads),
        AggregatorKind::Median => aggregate_item_median(grads),
        AggregatorKind::TrimmedMean => aggregate_item_trimmed_mean(grads, spec.trim_count),
        AggregatorKind::Krum => aggregate_item_krum(grads, spec.assumed_byzantine),
        AggregatorKind::NormClip => aggregate_item_norm_clip(grads, spec.clip_threshold),
    };
    match primary {
        Ok(value) => Ok(ItemAggregate {
            value,
            used: spec.kind,
            fallback: false,
        }),
        Err(AggregateError::Inapplicable { .. }) => Ok(ItemAggregate {
            value: aggregate_item_median(grads)?,
            used: AggregatorKind::Median,
            fallback: true,
        }),
        Err(e) => Err(e),
    }
}

/// Gradients uploaded for one item, ordered by ascending client id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemUpdates {
    clients: Vec<ClientId>,
    values: Vec<f64>,
}

impl ItemUpdates {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn clients(&self) -> &[ClientId] {
        &self.clients
    }

    pub fn gradients(&self, dim: usize) -> Vec<&[f64]> {
        self.values.chunks_exact(dim).collect()
    }
}

/// All gradients of one round, grouped by item.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRoundUpdate {
    dim: usize,
    items: Vec<ItemUpdates>,
}

impl SparseRoundUpdate {
    pub fn new(n_items: usize, dim: usize) -> Self {
        SparseRoundUpdate {
            dim,
            items: vec![ItemUpdates::default(); n_items],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Adds a client's upload. Clients must be added in ascending id order
    /// and at most once per item.
    pub fn add_upload(&mut self, client: ClientId, upload: &SparseGradient) {
        assert_eq!(upload.dim(), self.dim, "upload dimension");
        for (item, g) in upload.iter() {
            self.push(item, client, g);
        }
    }

    pub fn push(&mut self, item: usize, client: ClientId, gradient: &[f64]) {
        assert_eq!(gradient.len(), self.dim, "gradient dimension");
        let slot = &mut self.items[item];
        assert!(
            slot.clients.last().is_none_or(|&last| last < client),
            "client ids must be unique and ascending per item"
        );
        slot.clients.push(client);
        slot.values.extend_from_slice(gradient);
    }

    pub fn item(&self, item: usize) -> &ItemUpdates {
        &self.items[item]
    }

    /// Items with at least one gradient, ascending.
    pub fn touched_items(&self) -> impl Iterator<Item = usize> + '_ {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, u)| !u.is_empty())
            .map(|(j, _)| j)
    }

    pub fn is_empty(&self) -> bool {
        self.items.iter().all(ItemUpdates::is_empty)
    }

    /// Coordinate-wise sum of the item's gradients in client order.
    pub fn item_sum(&self, item: usize) -> Option<Vec<f64>> {
        let updates = &self.items[item];
        if updates.is_empty() {
            return None;
        }
        let mut sum = vec![0.0; self.dim];
        for g in updates.values.chunks_exact(self.dim) {
            sum.iter_mut().zip(g).for_each(|(s, x)| *s += x);
        }
        Some(sum)
    }
}

/// Round log entry for one aggregated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLogEntry {
    pub item: usize,
    pub aggregator: AggregatorKind,
    pub fallback: bool,
    pub update_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AppliedRound {
    /// `(item, aggregated gradient)` for every touched item, ascending.
    pub aggregates: Vec<(usize, Vec<f64>)>,
    pub log: Vec<ItemLogEntry>,
}

/// Aggregates every touched item and applies `v_j ← v_j − η·AGR(list_j)`.
pub fn sparse_aggregate_and_apply(
    update: &SparseRoundUpdate,
    spec: &AggregatorSpec,
    items: &mut Embeddings,
    learning_rate: f64,
) -> Result<AppliedRound, AggregateError> {
    assert_eq!(update.dim(), items.dim(), "embedding dimension");
    let dim = update.dim();
    let touched: Vec<usize> = update.touched_items().collect();
    let results: Vec<Result<(usize, ItemAggregate, usize), AggregateError>> = touched
        .par_iter()
        .map(|&j| {
            let grads = update.item(j).gradients(dim);
            aggregate_item(spec, &grads).map(|agg| (j, agg, grads.len()))
        })
        .collect();

    let mut applied = AppliedRound::default();
    for result in results {
        let (item, agg, count) = result?;
        items
            .row_mut(item)
            .iter_mut()
            .zip(&agg.value)
            .for_each(|(v, g)| *v -= learning_rate * g);
        applied.log.push(ItemLogEntry {
            item,
            aggregator: agg.used,
            fallback: agg.fallback,
            update_count: count,
        });
        applied.aggregates.push((item, agg.value));
    }
    Ok(applied)
}
