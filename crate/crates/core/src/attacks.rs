//! Byzantine clients and the updates they upload.
//!
//! Model-poisoning attacks hold no training data and craft item gradients
//! directly:
//!
//! | kind          | reads benign round | items poisoned                |
//! |---------------|--------------------|-------------------------------|
//! | `SpattackOd`  | yes                | every item with a benign grad |
//! | `SpattackOs`  | yes                | fixed per-client list         |
//! | `SpattackLd`  | no                 | every item                    |
//! | `SpattackLs`  | no                 | fixed per-client list         |
//! | `Gaussian`, `Lie`, `Fang` | yes    | every item with a benign grad |
//!
//! `LabelFlip` and `FedAttack` poison data instead: injected users with a
//! synthetic profile run the honest local step on corrupted BPR pairs.
//!
//! Omniscient attacks negate the benign sum, so under a plain mean the item
//! receives a zero update; limited attacks upload one Gaussian vector per item
//! shared by all colluding clients, which a coordinate-wise median picks
//! whenever the colluders outnumber the item's benign uploads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::SparseRoundUpdate;
use crate::dataset::{sample_excluding, weighted_draw_order, InteractionDataset};
use crate::model::{dot, Embeddings, SparseGradient};
use crate::rng::{substream, Purpose};
use crate::ClientId;

pub const DEFAULT_NOISE_STD: f64 = 1.0;
pub const DEFAULT_LIE_SCALE: f64 = 0.1;
pub const DEFAULT_FANG_RANGE: [f64; 2] = [3.0, 4.0];

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("{field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum AttackKind {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "spattack-o-d")]
    SpattackOd,
    #[serde(rename = "spattack-o-s")]
    SpattackOs,
    #[serde(rename = "spattack-l-d")]
    SpattackLd,
    #[serde(rename = "spattack-l-s")]
    SpattackLs,
    #[serde(rename = "label-flip")]
    LabelFlip,
    #[serde(rename = "gaussian")]
    Gaussian,
    #[serde(rename = "lie")]
    Lie,
    #[serde(rename = "fang")]
    Fang,
    #[serde(rename = "fed-attack")]
    FedAttack,
}

impl AttackKind {
    /// Poisons per-client item lists rather than every item.
    pub fn is_sparse(self) -> bool {
        matches!(self, AttackKind::SpattackOs | AttackKind::SpattackLs)
    }

    /// Malicious clients run the honest local step on corrupted pairs.
    pub fn is_data_poisoning(self) -> bool {
        matches!(self, AttackKind::LabelFlip | AttackKind::FedAttack)
    }

    /// Needs per-client item lists (poisoned items or synthetic profiles).
    pub fn needs_item_lists(self) -> bool {
        self.is_sparse() || self.is_data_poisoning()
    }
}

/// Divisor used by the sparse omniscient attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OsNormalization {
    /// Divide by the number of colluders poisoning the item, so the item's
    /// malicious mass exactly cancels its benign sum.
    #[default]
    PerItem,
    /// Divide by the total number of malicious clients.
    Global,
}

/// Fixed malicious-client count for a `(n_users, ratio)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountOverride {
    pub n_users: usize,
    pub ratio: f64,
    pub count: usize,
}

/// Malicious-client counts used for ML100K, ML1M and Steam at
/// 1/3/5/10/15 % ratios.
pub fn published_counts() -> Vec<CountOverride> {
    let table: [(usize, [usize; 5]); 3] = [
        (943, [9, 29, 49, 105, 166]),
        (6040, [61, 186, 317, 671, 1066]),
        (3753, [37, 116, 197, 417, 662]),
    ];
    let ratios = [0.01, 0.03, 0.05, 0.10, 0.15];
    table
        .iter()
        .flat_map(|&(n_users, counts)| {
            ratios
                .iter()
                .zip(counts)
                .map(move |(&ratio, count)| CountOverride {
                    n_users,
                    ratio,
                    count,
                })
        })
        .collect()
}

/// Largest `ñ` with `ñ / (n + ñ) ≤ ρ`, unless an override matches.
pub fn plan_malicious_count(n_users: usize, ratio: f64, overrides: &[CountOverride]) -> usize {
    if let Some(o) = overrides
        .iter()
        .find(|o| o.n_users == n_users && (o.ratio - ratio).abs() < 1e-9)
    {
        return o.count;
    }
    if ratio <= 0.0 {
        return 0;
    }
    let bound = ratio * n_users as f64 / (1.0 - ratio);
    // absorb representation error when the bound is an exact integer
    (bound + 1e-9).floor() as usize
}

/// Attack settings as configured, before they are resolved against a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub malicious_ratio: f64,
    /// Explicit `ñ`; takes precedence over the ratio.
    pub malicious_count: Option<usize>,
    pub count_overrides: Vec<CountOverride>,
    pub start_epoch: usize,
    /// Defaults to the largest benign training list.
    pub max_poisoned_items: Option<usize>,
    pub noise_std: f64,
    pub lie_scale: f64,
    pub fang_scale_range: [f64; 2],
    pub os_normalization: OsNormalization,
    /// Reuse the first round's noise in every round instead of drawing
    /// fresh noise (limited attacks only).
    pub fixed_noise: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            malicious_ratio: 0.0,
            malicious_count: None,
            count_overrides: published_counts(),
            start_epoch: 0,
            max_poisoned_items: None,
            noise_std: DEFAULT_NOISE_STD,
            lie_scale: DEFAULT_LIE_SCALE,
            fang_scale_range: DEFAULT_FANG_RANGE,
            os_normalization: OsNormalization::PerItem,
            fixed_noise: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let invalid = |field, message: String| Err(AttackError::InvalidConfig { field, message });
        if !(0.0..1.0).contains(&self.malicious_ratio) {
            return invalid(
                "attack.malicious_ratio",
                format!("must lie in [0, 1), got {}", self.malicious_ratio),
            );
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return invalid("attack.noise_std", format!("must be finite and >= 0, got {}", self.noise_std));
        }
        if !self.lie_scale.is_finite() {
            return invalid("attack.lie_scale", format!("must be finite, got {}", self.lie_scale));
        }
        let [lo, hi] = self.fang_scale_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return invalid(
                "attack.fang_scale_range",
                format!("must satisfy 0 <= low <= high, got [{lo}, {hi}]"),
            );
        }
        if self.max_poisoned_items == Some(0) {
            return invalid("attack.max_poisoned_items", "must be at least 1".into());
        }
        for o in &self.count_overrides {
            if !(0.0..1.0).contains(&o.ratio) {
                return invalid(
                    "attack.count_overrides",
                    format!("ratio must lie in [0, 1), got {}", o.ratio),
                );
            }
        }
        Ok(())
    }
}

/// An attack resolved against a dataset: client ids, counts and the frozen
/// per-client item lists.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    pub kind: AttackKind,
    pub malicious_count: usize,
    pub malicious_ratio: f64,
    pub start_epoch: usize,
    pub max_poisoned_items: usize,
    pub noise_std: f64,
    pub lie_scale: f64,
    pub fang_scale_range: [f64; 2],
    pub os_normalization: OsNormalization,
    pub fixed_noise: bool,
    /// Sorted item list per malicious client: poisoned items for the sparse
    /// attacks, the synthetic interaction profile for data poisoning, empty
    /// otherwise.
    pub poisoned_items: Vec<Vec<usize>>,
    /// Id of the first malicious client (`n_users`).
    pub first_client: ClientId,
    pub seed: u64,
}

impl AttackPlan {
    pub fn resolve(
        config: &AttackConfig,
        dataset: &InteractionDataset,
        seed: u64,
    ) -> Result<AttackPlan, AttackError> {
        config.validate()?;
        let malicious_count = match (config.kind, config.malicious_count) {
            (AttackKind::None, _) => 0,
            (_, Some(count)) => count,
            (_, None) => plan_malicious_count(
                dataset.n_users,
                config.malicious_ratio,
                &config.count_overrides,
            ),
        };
        let max_poisoned_items = config
            .max_poisoned_items
            .unwrap_or_else(|| dataset.max_train_len())
            .max(1);
        let poisoned_items = if config.kind.needs_item_lists() {
            (0..malicious_count)
                .map(|k| {
                    let mut rng = substream(seed, Purpose::PoisonedItems, 0, k as u64);
                    let mut list = sample_poisoned_items(&dataset.degrees, max_poisoned_items, &mut rng);
                    list.sort_unstable();
                    list
                })
                .collect()
        } else {
            vec![Vec::new(); malicious_count]
        };
        Ok(AttackPlan {
            kind: config.kind,
            malicious_count,
            malicious_ratio: config.malicious_ratio,
            start_epoch: config.start_epoch,
            max_poisoned_items,
            noise_std: config.noise_std,
            lie_scale: config.lie_scale,
            fang_scale_range: config.fang_scale_range,
            os_normalization: config.os_normalization,
            fixed_noise: config.fixed_noise,
            poisoned_items,
            first_client: dataset.n_users,
            seed,
        })
    }

    /// A plan with no malicious clients.
    pub fn none(n_users: usize) -> AttackPlan {
        let c = AttackConfig::default();
        AttackPlan {
            kind: AttackKind::None,
            malicious_count: 0,
            malicious_ratio: 0.0,
            start_epoch: 0,
            max_poisoned_items: 1,
            noise_std: c.noise_std,
            lie_scale: c.lie_scale,
            fang_scale_range: c.fang_scale_range,
            os_normalization: c.os_normalization,
            fixed_noise: c.fixed_noise,
            poisoned_items: Vec::new(),
            first_client: n_users,
            seed: 0,
        }
    }

    pub fn clients(&self) -> Vec<ClientId> {
        (self.first_client..self.first_client + self.malicious_count).collect()
    }

    pub fn is_active(&self, epoch: usize) -> bool {
        self.kind != AttackKind::None && self.malicious_count > 0 && epoch >= self.start_epoch
    }

    /// Malicious uploads for a model-poisoning attack. Data-poisoning kinds
    /// and `None` produce nothing here.
    pub fn generate(&self, epoch: usize, benign: &SparseRoundUpdate) -> MaliciousRoundUpdate {
        let clients = self.clients();
        let epoch_key = epoch as u64;
        let noise_key = if self.fixed_noise { 0 } else { epoch_key };
        match self.kind {
            AttackKind::SpattackOd => spattack_od(benign, &clients),
            AttackKind::SpattackOs => spattack_os(benign, self),
            AttackKind::SpattackLd => {
                let mut rng = substream(self.seed, Purpose::AttackRound, noise_key, 0);
                spattack_ld(benign.n_items(), benign.dim(), &clients, self.noise_std, &mut rng)
            }
            AttackKind::SpattackLs => {
                let mut rng = substream(self.seed, Purpose::AttackRound, noise_key, 0);
                spattack_ls(self, benign.n_items(), benign.dim(), &mut rng)
            }
            AttackKind::Gaussian => baseline_gaussian(benign, &clients, self.seed, epoch_key),
            AttackKind::Lie => baseline_lie(benign, &clients, self.lie_scale),
            AttackKind::Fang => {
                baseline_fang(benign, &clients, self.fang_scale_range, self.seed, epoch_key)
            }
            AttackKind::None | AttackKind::LabelFlip | AttackKind::FedAttack => {
                MaliciousRoundUpdate::default()
            }
        }
    }
}

/// Uploads of the malicious clients in one round, ascending by client id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaliciousRoundUpdate {
    pub uploads: Vec<(ClientId, SparseGradient)>,
}

impl MaliciousRoundUpdate {
    fn shared(clients: &[ClientId], upload: SparseGradient) -> Self {
        MaliciousRoundUpdate {
            uploads: clients.iter().map(|&c| (c, upload.clone())).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.uploads.iter().all(|(_, g)| g.is_empty())
    }
}

/// Omniscient dense attack: every malicious client uploads `−S_j/ñ` for each
/// item whose benign sum `S_j` exists this round.
pub fn spattack_od(benign: &SparseRoundUpdate, clients: &[ClientId]) -> MaliciousRoundUpdate {
    if clients.is_empty() {
        return MaliciousRoundUpdate::default();
    }
    let share = clients.len() as f64;
    let mut upload = SparseGradient::new(benign.dim());
    for j in benign.touched_items() {
        let sum = benign.item_sum(j).expect("touched item");
        let g: Vec<f64> = sum.iter().map(|s| -s / share).collect();
        upload.push(j, &g);
    }
    MaliciousRoundUpdate::shared(clients, upload)
}

/// Omniscient sparse attack: client `k` only uploads for its own poisoned
/// items, negating the benign sum split across the colluders on that item.
pub fn spattack_os(benign: &SparseRoundUpdate, plan: &AttackPlan) -> MaliciousRoundUpdate {
    let mut poisoners = vec![0usize; benign.n_items()];
    for list in &plan.poisoned_items {
        for &j in list {
            poisoners[j] += 1;
        }
    }
    let sums: Vec<Option<Vec<f64>>> = (0..benign.n_items())
        .map(|j| {
            if poisoners[j] == 0 {
                None
            } else {
                benign.item_sum(j)
            }
        })
        .collect();
    let uploads = plan
        .poisoned_items
        .iter()
        .enumerate()
        .map(|(k, list)| {
            let mut upload = SparseGradient::new(benign.dim());
            for &j in list {
                if let Some(sum) = &sums[j] {
                    let share = match plan.os_normalization {
                        OsNormalization::PerItem => poisoners[j],
                        OsNormalization::Global => plan.malicious_count,
                    } as f64;
                    let g: Vec<f64> = sum.iter().map(|s| -s / share).collect();
                    upload.push(j, &g);
                }
            }
            (plan.first_client + k, upload)
        })
        .collect();
    MaliciousRoundUpdate { uploads }
}

/// Limited dense attack: one fresh `N(0, σ²)` vector per item, identical for
/// every colluder. Takes no benign gradients.
pub fn spattack_ld<R: Rng + ?Sized>(
    n_items: usize,
    dim: usize,
    clients: &[ClientId],
    noise_std: f64,
    rng: &mut R,
) -> MaliciousRoundUpdate {
    if clients.is_empty() {
        return MaliciousRoundUpdate::default();
    }
    let normal = Normal::new(0.0, noise_std).expect("validated noise std");
    let mut upload = SparseGradient::new(dim);
    let mut g = vec![0.0; dim];
    for j in 0..n_items {
        g.iter_mut().for_each(|x| *x = normal.sample(rng));
        upload.push(j, &g);
    }
    MaliciousRoundUpdate::shared(clients, upload)
}

/// Limited sparse attack: one shared `N(0, σ²)` vector per poisoned item,
/// uploaded by every client whose list contains the item.
pub fn spattack_ls<R: Rng + ?Sized>(
    plan: &AttackPlan,
    n_items: usize,
    dim: usize,
    rng: &mut R,
) -> MaliciousRoundUpdate {
    let normal = Normal::new(0.0, plan.noise_std).expect("validated noise std");
    let mut poisoned = vec![false; n_items];
    for list in &plan.poisoned_items {
        for &j in list {
            poisoned[j] = true;
        }
    }
    let noise: Vec<Option<Vec<f64>>> = poisoned
        .iter()
        .map(|&p| p.then(|| (0..dim).map(|_| normal.sample(rng)).collect()))
        .collect();
    let uploads = plan
        .poisoned_items
        .iter()
        .enumerate()
        .map(|(k, list)| {
            let mut upload = SparseGradient::new(dim);
            for &j in list {
                upload.push(j, noise[j].as_ref().expect("poisoned item"));
            }
            (plan.first_client + k, upload)
        })
        .collect();
    MaliciousRoundUpdate { uploads }
}

/// Up to `max_items` distinct items drawn without replacement with
/// probability proportional to degree. Degree-0 items are never drawn.
pub fn sample_poisoned_items<R: Rng + ?Sized>(
    degrees: &[usize],
    max_items: usize,
    rng: &mut R,
) -> Vec<usize> {
    let log_weights: Vec<f64> = degrees
        .iter()
        .map(|&d| if d == 0 { f64::NEG_INFINITY } else { (d as f64).ln() })
        .collect();
    weighted_draw_order(&log_weights, max_items, rng)
}

/// Per-coordinate mean and population standard deviation.
pub fn coordinate_moments(grads: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let dim = grads.first().map_or(0, |g| g.len());
    let n = grads.len() as f64;
    let mut mean = vec![0.0; dim];
    for g in grads {
        mean.iter_mut().zip(g.iter()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for g in grads {
        var.iter_mut()
            .zip(g.iter().zip(&mean))
            .for_each(|(v, (x, m))| *v += (x - m) * (x - m));
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    (mean, std)
}

fn benign_moments(benign: &SparseRoundUpdate) -> Vec<(usize, Vec<f64>, Vec<f64>)> {
    let dim = benign.dim();
    benign
        .touched_items()
        .map(|j| {
            let (mean, std) = coordinate_moments(&benign.item(j).gradients(dim));
            (j, mean, std)
        })
        .collect()
}

/// Each malicious client samples every coordinate from the Gaussian fitted
/// to that item's benign gradients.
pub fn baseline_gaussian(
    benign: &SparseRoundUpdate,
    clients: &[ClientId],
    seed: u64,
    epoch: u64,
) -> MaliciousRoundUpdate {
    let moments = benign_moments(benign);
    let dim = benign.dim();
    let uploads = clients
        .par_iter()
        .map(|&c| {
            let mut rng = substream(seed, Purpose::AttackClient, epoch, c as u64);
            let mut upload = SparseGradient::new(dim);
            let mut g = vec![0.0; dim];
            for (j, mean, std) in &moments {
                for k in 0..dim {
                    let normal = Normal::new(mean[k], std[k]).expect("finite moments");
                    g[k] = normal.sample(&mut rng);
                }
                upload.push(*j, &g);
            }
            (c, upload)
        })
        .collect();
    MaliciousRoundUpdate { uploads }
}

/// Every malicious client uploads `mean + z·std` of the benign gradients.
pub fn baseline_lie(benign: &SparseRoundUpdate, clients: &[ClientId], z: f64) -> MaliciousRoundUpdate {
    if clients.is_empty() {
        return MaliciousRoundUpdate::default();
    }
    let mut upload = SparseGradient::new(benign.dim());
    for (j, mean, std) in benign_moments(benign) {
        let g: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m + z * s).collect();
        upload.push(j, &g);
    }
    MaliciousRoundUpdate::shared(clients, upload)
}

/// Each malicious client uploads `−λ·mean(benign)`, with one
/// `λ ~ U[lo, hi]` per client per round.
pub fn baseline_fang(
    benign: &SparseRoundUpdate,
    clients: &[ClientId],
    scale_range: [f64; 2],
    seed: u64,
    epoch: u64,
) -> MaliciousRoundUpdate {
    let means: Vec<(usize, Vec<f64>)> = benign_moments(benign)
        .into_iter()
        .map(|(j, mean, _)| (j, mean))
        .collect();
    let dim = benign.dim();
    let uploads = clients
        .iter()
        .map(|&c| {
            let lambda = fang_scale(scale_range, seed, epoch, c);
            let mut upload = SparseGradient::new(dim);
            for (j, mean) in &means {
                let g: Vec<f64> = mean.iter().map(|m| -lambda * m).collect();
                upload.push(*j, &g);
            }
            (c, upload)
        })
        .collect();
    MaliciousRoundUpdate { uploads }
}

/// The scale a Fang client uses in a given round.
pub fn fang_scale(scale_range: [f64; 2], seed: u64, epoch: u64, client: ClientId) -> f64 {
    let [lo, hi] = scale_range;
    let u: f64 = substream(seed, Purpose::AttackClient, epoch, client as u64).random();
    lo + (hi - lo) * u
}

/// Label flipping: sampled negatives act as positives and vice versa.
pub fn baseline_labelflip(positives: &[usize], negatives: &[usize]) -> (Vec<usize>, Vec<usize>) {
    (negatives.to_vec(), positives.to_vec())
}

/// LabelFlip pairs for an injected client with the given sorted profile.
pub fn labelflip_pairs<R: Rng + ?Sized>(
    profile: &[usize],
    n_items: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let negatives = sample_excluding(n_items, profile, profile.len(), rng).unwrap_or_default();
    let positives = &profile[..negatives.len()];
    baseline_labelflip(positives, &negatives)
}

/// FedAttack pairs: the items scoring highest for the client's own
/// embedding (outside its profile) become negatives, the lowest-scoring
/// remaining items become positives.
pub fn baseline_fedattack(
    profile: &[usize],
    user: &[f64],
    items: &Embeddings,
) -> (Vec<usize>, Vec<usize>) {
    let n_items = items.rows();
    let mut ranked: Vec<(f64, usize)> = (0..n_items).map(|j| (dot(user, items.row(j)), j)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let k = profile
        .len()
        .min(n_items - profile.len())
        .min(n_items / 2);
    let negatives: Vec<usize> = ranked
        .iter()
        .map(|&(_, j)| j)
        .filter(|j| profile.binary_search(j).is_err())
        .take(k)
        .collect();
    let mut chosen = negatives.clone();
    chosen.sort_unstable();
    let positives: Vec<usize> = ranked
        .iter()
        .rev()
        .map(|&(_, j)| j)
        .filter(|j| chosen.binary_search(j).is_err())
        .take(k)
        .collect();
    (positives, negatives)
}
