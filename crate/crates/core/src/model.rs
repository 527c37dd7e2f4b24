//! Dot-product matrix factorization trained with the BPR pairwise loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_INIT_STD: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{positives} positives but {negatives} negatives")]
    UnalignedPairs { positives: usize, negatives: usize },
}

/// Row-major `rows × dim` matrix of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Embeddings {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == dim), "ragged rows");
        Embeddings {
            rows: rows.len(),
            dim,
            data: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| {
            if x.is_nan() {
                f64::INFINITY
            } else {
                m.max(x.abs())
            }
        })
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }
}

/// User and item embedding tables plus the SGD step size.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub users: Embeddings,
    pub items: Embeddings,
    pub learning_rate: f64,
}

impl EmbeddingState {
    pub fn dim(&self) -> usize {
        self.items.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.users.as_slice().iter().all(|x| x.is_finite())
            && self.items.as_slice().iter().all(|x| x.is_finite())
    }
}

/// I.i.d. `Normal(0, std²)` entries.
pub fn init_embeddings<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Embeddings {
    let normal = Normal::new(0.0, std).expect("finite non-negative std");
    Embeddings {
        rows,
        dim,
        data: (0..rows * dim).map(|_| normal.sample(rng)).collect(),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn predict_score(user: &[f64], item: &[f64]) -> Result<f64, ModelError> {
    if user.len() != item.len() {
        return Err(ModelError::DimensionMismatch {
            left: user.len(),
            right: item.len(),
        });
    }
    Ok(dot(user, item))
}

/// Logistic sigmoid, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn score_margin(user: &[f64], pos: &[f64], neg: &[f64]) -> f64 {
    user.iter()
        .zip(pos.iter().zip(neg))
        .map(|(u, (p, n))| u * (p - n))
        .sum()
}

/// `-ln σ(u·v_pos − u·v_neg)`.
pub fn bpr_pair_loss(user: &[f64], pos: &[f64], neg: &[f64]) -> f64 {
    softplus(-score_margin(user, pos, neg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub user: Vec<f64>,
    pub pos_item: Vec<f64>,
    pub neg_item: Vec<f64>,
}

/// Gradients of [`bpr_pair_loss`]. With `x = u·(v_pos − v_neg)` and
/// `g = −σ(−x)`: `∂u = g(v_pos − v_neg)`, `∂v_pos = g·u`, `∂v_neg = −g·u`.
pub fn bpr_pair_gradient(user: &[f64], pos: &[f64], neg: &[f64]) -> PairGradient {
    let g = -sigmoid(-score_margin(user, pos, neg));
    PairGradient {
        user: pos.iter().zip(neg).map(|(p, n)| g * (p - n)).collect(),
        pos_item: user.iter().map(|u| g * u).collect(),
        neg_item: user.iter().map(|u| -(g * u)).collect(),
    }
}

/// Item gradients uploaded by one client: sorted item ids with one
/// `dim`-vector each, stored contiguously.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGradient {
    dim: usize,
    items: Vec<usize>,
    values: Vec<f64>,
}

impl SparseGradient {
    pub fn new(dim: usize) -> Self {
        SparseGradient {
            dim,
            items: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(item, vector)` entries; repeated items are summed in
    /// entry order.
    pub fn from_entries(dim: usize, mut entries: Vec<(usize, Vec<f64>)>) -> Self {
        entries.sort_by_key(|(item, _)| *item);
        let mut out = SparseGradient::new(dim);
        for (item, v) in entries {
            assert_eq!(v.len(), dim, "gradient dimension");
            if out.items.last() == Some(&item) {
                let start = out.values.len() - dim;
                out.values[start..].iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            } else {
                out.items.push(item);
                out.values.extend_from_slice(&v);
            }
        }
        out
    }

    /// Appends an entry; `item` must exceed every item already present.
    pub fn push(&mut self, item: usize, value: &[f64]) {
        assert_eq!(value.len(), self.dim, "gradient dimension");
        assert!(
            self.items.last().is_none_or(|&last| last < item),
            "items must be pushed in ascending order"
        );
        self.items.push(item);
        self.values.extend_from_slice(value);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn get(&self, item: usize) -> Option<&[f64]> {
        self.items
            .binary_search(&item)
            .ok()
            .map(|k| &self.values[k * self.dim..(k + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.items
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.dim.max(1)))
    }
}

/// One full-batch local step for a client.
///
/// Pair gradients are computed against the broadcast item embeddings and the
/// current user embedding. Returns the user embedding after one SGD step and
/// the summed item gradients, which only touch `positives ∪ negatives`.
pub fn client_local_step(
    user: &[f64],
    positives: &[usize],
    negatives: &[usize],
    items: &Embeddings,
    learning_rate: f64,
) -> Result<(Vec<f64>, SparseGradient), ModelError> {
    let dim = items.dim();
    if user.len() != dim {
        return Err(ModelError::DimensionMismatch {
            left: user.len(),
            right: dim,
        });
    }
    if positives.len() != negatives.len() {
        return Err(ModelError::UnalignedPairs {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let mut grad_user = vec![0.0; dim];
    let mut entries = Vec::with_capacity(2 * positives.len());
    for (&p, &n) in positives.iter().zip(negatives) {
        let (vp, vn) = (items.row(p), items.row(n));
        let g = -sigmoid(-score_margin(user, vp, vn));
        for k in 0..dim {
            grad_user[k] += g * (vp[k] - vn[k]);
        }
        entries.push((p, user.iter().map(|u| g * u).collect()));
        entries.push((n, user.iter().map(|u| -(g * u)).collect()));
    }
    let updated = user
        .iter()
        .zip(&grad_user)
        .map(|(u, g)| u - learning_rate * g)
        .collect();
    Ok((updated, SparseGradient::from_entries(dim, entries)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn score_examples() {
        assert_eq!(predict_score(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(predict_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(predict_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn score_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u = random_vec(&mut rng, 32, 1.0);
            let v = random_vec(&mut rng, 32, 1.0);
            let mut naive = 0.0;
            for k in 0..32 {
                naive += u[k] * v[k];
            }
            let got = predict_score(&u, &v).unwrap();
            assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1.0));
        }
    }

    #[test]
    fn loss_examples() {
        let u = [0.3, -0.2];
        let v = [1.0, 2.0];
        assert!((bpr_pair_loss(&u, &v, &v) - std::f64::consts::LN_2).abs() < 1e-15);
        // margin 50
        let loss = bpr_pair_loss(&[1.0], &[50.0], &[0.0]);
        assert!(loss.abs() < 1e-12);
        // finite far into both tails
        assert!(bpr_pair_loss(&[1.0], &[-1000.0], &[0.0]).is_finite());
        assert!((bpr_pair_loss(&[1.0], &[-1000.0], &[0.0]) - 1000.0).abs() < 1e-9);
        assert!(bpr_pair_loss(&[1.0], &[1000.0], &[0.0]) >= 0.0);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let u = random_vec(&mut rng, 8, 1.0);
            let p = random_vec(&mut rng, 8, 1.0);
            let n = random_vec(&mut rng, 8, 1.0);
            let x: f64 = (0..8).map(|k| u[k] * p[k] - u[k] * n[k]).sum();
            let direct = -(1.0 / (1.0 + (-x).exp())).ln();
            let got = bpr_pair_loss(&u, &p, &n);
            assert!(((got - direct) / direct).abs() < 1e-10, "{got} vs {direct}");
        }
    }

    #[test]
    fn gradient_identities() {
        let u = vec![0.5, -1.0, 2.0];
        let v = vec![0.1, 0.2, 0.3];
        let g = bpr_pair_gradient(&u, &v, &v);
        assert!(g.user.iter().all(|&x| x == 0.0));
        for k in 0..3 {
            assert_eq!(g.pos_item[k], -0.5 * u[k]);
            assert_eq!(g.pos_item[k], -g.neg_item[k]);
        }
        let zero = bpr_pair_gradient(&[0.0; 3], &[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
        assert!(zero.pos_item.iter().chain(&zero.neg_item).all(|&x| x == 0.0));
    }

    #[test]
    fn local_step_decreases_pair_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let items = Embeddings::from_rows(&[random_vec(&mut rng, 4, 1.0), random_vec(&mut rng, 4, 1.0)]);
            let user = random_vec(&mut rng, 4, 1.0);
            let lr = 1e-3;
            let before = bpr_pair_loss(&user, items.row(0), items.row(1));
            let (new_user, grads) = client_local_step(&user, &[0], &[1], &items, lr).unwrap();
            let mut new_items = items.clone();
            for (item, g) in grads.iter() {
                new_items.row_mut(item).iter_mut().zip(g).for_each(|(v, g)| *v -= lr * g);
            }
            let after = bpr_pair_loss(&new_user, new_items.row(0), new_items.row(1));
            assert!(after < before, "{after} !< {before}");
        }
    }

    #[test]
    fn local_step_equal_pair() {
        let items = Embeddings::from_rows(&[vec![0.2, 0.4], vec![0.2, 0.4]]);
        let user = vec![1.0, -3.0];
        let (updated, grads) = client_local_step(&user, &[0], &[1], &items, 0.1).unwrap();
        assert_eq!(updated, user);
        assert_eq!(grads.len(), 2);
        let (a, b) = (grads.get(0).unwrap(), grads.get(1).unwrap());
        assert_eq!(a, &[-0.5, 1.5]);
        assert!(a.iter().zip(b).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn local_step_errors() {
        let items = Embeddings::zeros(3, 2);
        assert!(matches!(
            client_local_step(&[0.0, 0.0], &[0, 1], &[2], &items, 0.1),
            Err(ModelError::UnalignedPairs { .. })
        ));
        let (u, g) = client_local_step(&[0.5, 0.5], &[], &[], &items, 0.1).unwrap();
        assert_eq!(u, vec![0.5, 0.5]);
        assert!(g.is_empty());
    }

    #[test]
    fn init_shape_and_determinism() {
        let a = init_embeddings(1, 1, 0.01, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((a.rows(), a.dim()), (1, 1));
        assert!(a.row(0)[0].is_finite());
        let b = init_embeddings(10, 4, 0.01, &mut ChaCha8Rng::seed_from_u64(2));
        let c = init_embeddings(10, 4, 0.01, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(b.as_slice(), c.as_slice());
    }

    #[test]
    fn sparse_gradient_merges_duplicates() {
        let g = SparseGradient::from_entries(2, vec![(3, vec![1.0, 1.0]), (1, vec![0.5, 0.0]), (3, vec![2.0, -1.0])]);
        assert_eq!(g.items(), &[1, 3]);
        assert_eq!(g.get(3).unwrap(), &[3.0, 0.0]);
        assert!(g.get(2).is_none());
    }
}
