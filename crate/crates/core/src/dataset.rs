//! Implicit-feedback interaction data.
//!
//! Only positive interactions are stored. Negative instances for the BPR
//! loss are sampled on demand from each user's non-interacted items.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, Purpose};

/// Number of sampled negatives the test item is ranked against.
pub const EVAL_NEGATIVES: usize = 100;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset contains no interactions")]
    Empty,
    #[error("user {user} has no non-interacted items to sample from")]
    NoCandidates { user: usize },
    #[error("user {user} has {available} non-interacted items, {required} required")]
    TooFewCandidates {
        user: usize,
        available: usize,
        required: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Deduplicated, densely indexed interactions before splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteractions {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions: Vec<Interaction>,
    /// Original user id for each dense index.
    pub user_ids: Vec<u64>,
    /// Original item id for each dense index.
    pub item_ids: Vec<u64>,
}

/// Leave-one-out split of an interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    /// Per user, training interactions ordered by `(timestamp, item)`.
    pub train: Vec<Vec<Interaction>>,
    /// Held-out latest interaction; `None` for users with a single interaction.
    pub test: Vec<Option<Interaction>>,
    /// Number of users with the item in their training list.
    pub degrees: Vec<usize>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    /// Sorted train ∪ test items per user.
    interacted: Vec<Vec<usize>>,
}

/// Parameters for a synthetic dataset whose item popularity follows a
/// power law over item rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions_per_user: usize,
    /// Item `j` (0-based) is drawn with weight `(j + 1)^(-exponent)`.
    pub exponent: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions: usize,
    pub sparsity: f64,
}

/// Reads a MovieLens-style rating file and splits it leave-one-out.
pub fn load_movielens(path: impl AsRef<Path>) -> Result<InteractionDataset, DatasetError> {
    Ok(leave_one_out_split(read_movielens(path)?))
}

pub fn read_movielens(path: impl AsRef<Path>) -> Result<RawInteractions, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_movielens(&text)
}

/// Parses `user item [rating [timestamp]]` lines separated by `::`, tabs or
/// spaces. Ratings are discarded; duplicate pairs keep the earliest
/// timestamp.
pub fn parse_movielens(text: &str) -> Result<RawInteractions, DatasetError> {
    let mut records: Vec<(u64, u64, i64)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if trimmed.contains("::") {
            trimmed.split("::").map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        if !(2..=4).contains(&fields.len()) {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("expected 2 to 4 fields, found {}", fields.len()),
            });
        }
        let id = |s: &str, what: &str| -> Result<u64, DatasetError> {
            match s.parse::<u64>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(DatasetError::Parse {
                    line: line_no,
                    message: format!("{what} id {s:?} is not a positive integer"),
                }),
            }
        };
        let user = id(fields[0], "user")?;
        let item = id(fields[1], "item")?;
        if let Some(rating) = fields.get(2) {
            rating.parse::<f64>().map_err(|_| DatasetError::Parse {
                line: line_no,
                message: format!("rating {rating:?} is not a number"),
            })?;
        }
        let timestamp = match fields.get(3) {
            Some(ts) => ts.parse::<i64>().map_err(|_| DatasetError::Parse {
                line: line_no,
                message: format!("timestamp {ts:?} is not an integer"),
            })?,
            None => 0,
        };
        records.push((user, item, timestamp));
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }

    let dense = |ids: &mut Vec<u64>| -> HashMap<u64, usize> {
        ids.sort_unstable();
        ids.dedup();
        ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    };
    let mut user_ids: Vec<u64> = records.iter().map(|r| r.0).collect();
    let mut item_ids: Vec<u64> = records.iter().map(|r| r.1).collect();
    let user_index = dense(&mut user_ids);
    let item_index = dense(&mut item_ids);

    let mut earliest: BTreeMap<(usize, usize), i64> = BTreeMap::new();
    for (user, item, ts) in records {
        let key = (user_index[&user], item_index[&item]);
        earliest
            .entry(key)
            .and_modify(|t| *t = (*t).min(ts))
            .or_insert(ts);
    }
    let interactions = earliest
        .into_iter()
        .map(|((user, item), timestamp)| Interaction {
            user,
            item,
            timestamp,
        })
        .collect();

    Ok(RawInteractions {
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        interactions,
        user_ids,
        item_ids,
    })
}

/// Holds out each user's latest interaction (ties go to the larger item
/// index). Users with a single interaction keep it for training.
pub fn leave_one_out_split(raw: RawInteractions) -> InteractionDataset {
    let RawInteractions {
        n_users,
        n_items,
        interactions,
        user_ids,
        item_ids,
    } = raw;

    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); n_users];
    let mut seen = HashSet::with_capacity(interactions.len());
    for it in interactions {
        assert!(it.user < n_users && it.item < n_items, "interaction out of range");
        if seen.insert((it.user, it.item)) {
            per_user[it.user].push(it);
        }
    }

    let mut train = Vec::with_capacity(n_users);
    let mut test = Vec::with_capacity(n_users);
    let mut interacted = Vec::with_capacity(n_users);
    let mut degrees = vec![0usize; n_items];
    for mut list in per_user {
        list.sort_by_key(|it| (it.timestamp, it.item));
        let mut items: Vec<usize> = list.iter().map(|it| it.item).collect();
        items.sort_unstable();
        interacted.push(items);
        let held_out = if list.len() >= 2 { list.pop() } else { None };
        for it in &list {
            degrees[it.item] += 1;
        }
        train.push(list);
        test.push(held_out);
    }

    InteractionDataset {
        n_users,
        n_items,
        train,
        test,
        degrees,
        user_ids,
        item_ids,
        interacted,
    }
}

impl InteractionDataset {
    /// Builds a dataset directly from dense-indexed interactions.
    pub fn from_interactions(
        n_users: usize,
        n_items: usize,
        interactions: Vec<Interaction>,
    ) -> InteractionDataset {
        leave_one_out_split(RawInteractions {
            n_users,
            n_items,
            interactions,
            user_ids: (1..=n_users as u64).collect(),
            item_ids: (1..=n_items as u64).collect(),
        })
    }

    pub fn train_items(&self, user: usize) -> Vec<usize> {
        self.train[user].iter().map(|it| it.item).collect()
    }

    /// Sorted items the user interacted with in train or test.
    pub fn interacted(&self, user: usize) -> &[usize] {
        &self.interacted[user]
    }

    pub fn interaction_count(&self) -> usize {
        self.train.iter().map(Vec::len).sum::<usize>() + self.test.iter().flatten().count()
    }

    /// Users that have a held-out test interaction.
    pub fn testable_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_users).filter(|&u| self.test[u].is_some())
    }

    /// Largest training-list length over users.
    pub fn max_train_len(&self) -> usize {
        self.train.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions = self.interaction_count();
        let cells = (self.n_users as f64) * (self.n_items as f64);
        DatasetStats {
            n_users: self.n_users,
            n_items: self.n_items,
            interactions,
            sparsity: 1.0 - interactions as f64 / cells,
        }
    }
}

/// Draws `count` items uniformly from `0..n_items` minus the sorted
/// `excluded` list, distinct within the call. If `count` exceeds the pool,
/// the pool is exhausted and drawing restarts over a fresh permutation.
pub fn sample_excluding<R: Rng + ?Sized>(
    n_items: usize,
    excluded: &[usize],
    count: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let pool_len = n_items - excluded.len();
    if pool_len == 0 {
        return None;
    }
    let mut out = Vec::with_capacity(count);
    if count * 2 <= pool_len {
        let mut taken = HashSet::with_capacity(count);
        while out.len() < count {
            let item = rng.random_range(0..n_items);
            if excluded.binary_search(&item).is_err() && taken.insert(item) {
                out.push(item);
            }
        }
        return Some(out);
    }
    let pool: Vec<usize> = (0..n_items)
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    while out.len() < count {
        let take = (count - out.len()).min(pool_len);
        let picks = rand::seq::index::sample(rng, pool_len, take);
        out.extend(picks.iter().map(|i| pool[i]));
    }
    Some(out)
}

/// Uniform negatives for BPR training, never touching train or test items.
pub fn sample_train_negatives<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    user: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DatasetError> {
    sample_excluding(dataset.n_items, dataset.interacted(user), count, rng)
        .ok_or(DatasetError::NoCandidates { user })
}

/// 100 distinct non-interacted items to rank the test item against.
pub fn sample_eval_negatives<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    user: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DatasetError> {
    let available = dataset.n_items - dataset.interacted(user).len();
    if available < EVAL_NEGATIVES {
        return Err(DatasetError::TooFewCandidates {
            user,
            available,
            required: EVAL_NEGATIVES,
        });
    }
    Ok(sample_excluding(dataset.n_items, dataset.interacted(user), EVAL_NEGATIVES, rng)
        .expect("pool is non-empty"))
}

/// Weighted sampling without replacement given natural-log weights.
///
/// Returns up to `k` indices in draw order. Entries with `-inf` log weight
/// (zero weight) are never selected. Uses exponential keys: index `i` gets
/// `ln E_i - log_weight_i` with `E_i ~ Exp(1)`, and ascending keys follow the
/// distribution of successive weighted draws.
pub fn weighted_draw_order<R: Rng + ?Sized>(
    log_weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = log_weights
        .iter()
        .enumerate()
        .map(|(i, &lw)| {
            // consume one draw per index regardless of weight, so that
            // streams stay aligned across slightly different inputs
            let u: f64 = rng.random();
            (lw, i, u)
        })
        .filter(|&(lw, _, _)| lw > f64::NEG_INFINITY)
        .map(|(lw, i, u)| {
            let e = -(1.0 - u).ln();
            (e.ln() - lw, i)
        })
        .collect();
    let k = k.min(keyed.len());
    if k == 0 {
        return Vec::new();
    }
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.truncate(k);
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Generates users whose items follow a power law over item rank.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<InteractionDataset, DatasetError> {
    if !(spec.exponent > 1.0) || !spec.exponent.is_finite() {
        return Err(DatasetError::InvalidSpec(format!(
            "exponent must be a finite value > 1, got {}",
            spec.exponent
        )));
    }
    if spec.n_users == 0 || spec.interactions_per_user == 0 {
        return Err(DatasetError::InvalidSpec(
            "n_users and interactions_per_user must be positive".into(),
        ));
    }
    if spec.interactions_per_user >= spec.n_items {
        return Err(DatasetError::InvalidSpec(format!(
            "interactions_per_user ({}) must be below n_items ({})",
            spec.interactions_per_user, spec.n_items
        )));
    }
    let log_weights: Vec<f64> = (0..spec.n_items)
        .map(|j| -spec.exponent * ((j + 1) as f64).ln())
        .collect();
    let mut interactions = Vec::with_capacity(spec.n_users * spec.interactions_per_user);
    for user in 0..spec.n_users {
        let mut rng = substream(spec.seed, Purpose::Synthetic, 0, user as u64);
        let drawn = weighted_draw_order(&log_weights, spec.interactions_per_user, &mut rng);
        interactions.extend(drawn.into_iter().enumerate().map(|(t, item)| Interaction {
            user,
            item,
            timestamp: t as i64,
        }));
    }
    Ok(InteractionDataset::from_interactions(
        spec.n_users,
        spec.n_items,
        interactions,
    ))
}
