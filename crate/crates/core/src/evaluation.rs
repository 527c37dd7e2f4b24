//! Leave-one-out ranking metrics: the held-out item is ranked against 100
//! sampled non-interacted items.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_eval_negatives, DatasetError, InteractionDataset};
use crate::model::{dot, Embeddings};
use crate::rng::{substream, Purpose};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("no user has a held-out test item")]
    NoTestableUsers,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Metrics averaged over the benign users with a test item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub hr5: f64,
    pub ndcg5: f64,
    pub hr10: f64,
    pub ndcg10: f64,
    pub evaluated_users: usize,
    pub diverged: bool,
}

/// 1-based rank of the test item among itself and the negatives. Negatives
/// scoring at least as high as the test item rank above it.
pub fn rank_test_item(user: &[f64], test_item: usize, negatives: &[usize], items: &Embeddings) -> usize {
    let target = dot(user, items.row(test_item));
    if target.is_nan() {
        return negatives.len() + 1;
    }
    1 + negatives
        .iter()
        .filter(|&&j| {
            let s = dot(user, items.row(j));
            s.is_nan() || s >= target
        })
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Test item and fixed negatives for each testable user.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSet {
    pub cases: Vec<EvalCase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub test_item: usize,
    pub negatives: Vec<usize>,
}

impl EvaluationSet {
    /// Samples each user's negatives from its own stream of `seed`, so the
    /// set is independent of training randomness and stable across epochs.
    pub fn build(dataset: &InteractionDataset, seed: u64) -> Result<Self, EvaluationError> {
        let cases = dataset
            .testable_users()
            .map(|user| {
                let mut rng = substream(seed, Purpose::EvalNegatives, 0, user as u64);
                let negatives = sample_eval_negatives(dataset, user, &mut rng)?;
                Ok(EvalCase {
                    user,
                    test_item: dataset.test[user].expect("testable").item,
                    negatives,
                })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        if cases.is_empty() {
            return Err(EvaluationError::NoTestableUsers);
        }
        Ok(EvaluationSet { cases })
    }

    /// Per-case ranks, in case order.
    pub fn ranks(&self, users: &Embeddings, items: &Embeddings) -> Vec<usize> {
        self.cases
            .par_iter()
            .map(|c| rank_test_item(users.row(c.user), c.test_item, &c.negatives, items))
            .collect()
    }

    pub fn evaluate(&self, epoch: usize, users: &Embeddings, items: &Embeddings) -> EpochReport {
        let ranks = self.ranks(users, items);
        let n = ranks.len() as f64;
        let avg = |f: fn(usize, usize) -> f64, k| ranks.iter().map(|&r| f(r, k)).sum::<f64>() / n;
        EpochReport {
            epoch,
            hr5: avg(hr_at_k, 5),
            ndcg5: avg(ndcg_at_k, 5),
            hr10: avg(hr_at_k, 10),
            ndcg10: avg(ndcg_at_k, 10),
            evaluated_users: ranks.len(),
            diverged: false,
        }
    }
}
