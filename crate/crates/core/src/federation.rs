//! The simulated federated training loop.
//!
//! One round:
//! 1. every benign client takes a full-batch BPR step against the broadcast
//!    item embeddings `V^t` and produces a sparse item-gradient upload;
//! 2. once the attack has started, malicious clients produce their uploads
//!    (omniscient attacks see the collected benign round);
//! 3. all uploads are grouped per item in ascending client order;
//! 4. each item is aggregated on its own and `V^{t+1}` is applied;
//! 5. benign user embeddings take their local step.
//!
//! Rounds are sequential. Within a round client steps and item aggregations
//! run on the rayon pool; every random draw comes from a substream keyed by
//! `(seed, purpose, epoch, id)`, so results do not depend on the pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    sparse_aggregate_and_apply, AggregateError, AggregatorConfig, AggregatorKind, AggregatorSpec,
    ItemLogEntry, SparseRoundUpdate,
};
use crate::attacks::{
    baseline_fedattack, labelflip_pairs, AttackConfig, AttackError, AttackKind, AttackPlan,
};
use crate::dataset::{sample_train_negatives, DatasetError, InteractionDataset};
use crate::evaluation::{EpochReport, EvaluationError, EvaluationSet};
use crate::model::{
    client_local_step, init_embeddings, EmbeddingState, Embeddings, ModelError, SparseGradient,
    DEFAULT_DIM, DEFAULT_INIT_STD, DEFAULT_LEARNING_RATE,
};
use crate::rng::{substream, Purpose};
use crate::ClientId;

/// Any embedding coordinate beyond this magnitude marks the run diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
pub const DEFAULT_EPOCHS: usize = 200;
/// Aggregates shorter than this fraction of the benign mean gradient do not
/// count as moving an item.
const NEGLIGIBLE_AGGREGATE: f64 = 1e-9;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("{field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    /// Sampled negatives per training positive.
    pub negatives_per_positive: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: DEFAULT_DIM,
            learning_rate: DEFAULT_LEARNING_RATE,
            init_std: DEFAULT_INIT_STD,
            negatives_per_positive: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub aggregator: AggregatorConfig,
    pub attack: AttackConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            epochs: DEFAULT_EPOCHS,
            eval_every: 1,
            seed: 0,
            model: ModelConfig::default(),
            aggregator: AggregatorConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let invalid = |field, message: String| Err(FederationError::InvalidConfig { field, message });
        if self.epochs == 0 {
            return invalid("federation.epochs", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return invalid("federation.eval_every", "must be at least 1".into());
        }
        if self.model.dim == 0 {
            return invalid("model.dim", "must be at least 1".into());
        }
        if !(self.model.learning_rate > 0.0 && self.model.learning_rate.is_finite()) {
            return invalid(
                "model.learning_rate",
                format!("must be finite and > 0, got {}", self.model.learning_rate),
            );
        }
        if !(self.model.init_std >= 0.0 && self.model.init_std.is_finite()) {
            return invalid(
                "model.init_std",
                format!("must be finite and >= 0, got {}", self.model.init_std),
            );
        }
        if self.model.negatives_per_positive == 0 {
            return invalid("model.negatives_per_positive", "must be at least 1".into());
        }
        if !(self.aggregator.clip_threshold > 0.0 && self.aggregator.clip_threshold.is_finite()) {
            return invalid(
                "aggregator.clip_threshold",
                format!("must be finite and > 0, got {}", self.aggregator.clip_threshold),
            );
        }
        self.attack.validate()?;
        Ok(())
    }
}

/// Per-round attack bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackAudit {
    pub epoch: usize,
    pub malicious_clients: usize,
    /// Items that received at least one malicious gradient.
    pub attacked_items: usize,
    /// Items that received at least one benign gradient.
    pub benign_items: usize,
    /// Attacked items where malicious gradients outnumber benign ones.
    pub outnumbered_items: usize,
    /// Attacked items whose aggregate points against the benign sum, i.e.
    /// whose embedding moves in the malicious direction. Aggregates cancelled
    /// to rounding noise are not counted.
    pub reversed_items: usize,
    pub mean_norm: f64,
    pub max_norm: f64,
    /// Items where the aggregator fell back to the median.
    pub fallback_items: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub epoch: usize,
    pub diverged: bool,
    pub audit: AttackAudit,
    pub log: Vec<ItemLogEntry>,
    /// `(item, aggregated gradient)` for every item updated this round.
    pub aggregates: Vec<(usize, Vec<f64>)>,
}

/// Mutable training state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Index of the next round to run.
    pub epoch: usize,
    pub embeddings: EmbeddingState,
    /// Local embeddings of injected data-poisoning clients.
    pub malicious_users: Embeddings,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub reports: Vec<EpochReport>,
    pub audits: Vec<AttackAudit>,
    pub malicious_count: usize,
    pub max_poisoned_items: usize,
    pub aggregator: AggregatorSpec,
    pub diverged: bool,
}

impl ExperimentResult {
    pub fn final_report(&self) -> Option<&EpochReport> {
        self.reports.last()
    }
}

/// A dataset, a resolved configuration and the evolving training state.
pub struct Simulation<'a> {
    dataset: &'a InteractionDataset,
    config: FederationConfig,
    plan: AttackPlan,
    aggregator: AggregatorSpec,
    eval: EvaluationSet,
    state: RoundState,
    train_items: Vec<Vec<usize>>,
}

impl<'a> Simulation<'a> {
    /// Validates the configuration against the dataset and initializes
    /// embeddings.
    pub fn new(dataset: &'a InteractionDataset, config: FederationConfig) -> Result<Self, FederationError> {
        config.validate()?;
        let plan = AttackPlan::resolve(&config.attack, dataset, config.seed)?;
        let aggregator = config.aggregator.resolve(plan.malicious_count);
        let largest_list = dataset.n_users + plan.malicious_count;
        match aggregator.kind {
            AggregatorKind::TrimmedMean | AggregatorKind::Krum
                if aggregator.min_inputs() > largest_list =>
            {
                let field = if aggregator.kind == AggregatorKind::Krum {
                    "aggregator.assumed_byzantine"
                } else {
                    "aggregator.trim_count"
                };
                return Err(FederationError::InvalidConfig {
                    field,
                    message: format!(
                        "needs {} gradients per item but at most {largest_list} clients exist",
                        aggregator.min_inputs()
                    ),
                });
            }
            _ => {}
        }
        let eval = EvaluationSet::build(dataset, config.seed)?;
        let seed = config.seed;
        let model = &config.model;
        let users = init_embeddings(
            dataset.n_users,
            model.dim,
            model.init_std,
            &mut substream(seed, Purpose::UserInit, 0, 0),
        );
        let items = init_embeddings(
            dataset.n_items,
            model.dim,
            model.init_std,
            &mut substream(seed, Purpose::ItemInit, 0, 0),
        );
        let malicious_users = if plan.kind.is_data_poisoning() {
            init_embeddings(
                plan.malicious_count,
                model.dim,
                model.init_std,
                &mut substream(seed, Purpose::MaliciousInit, 0, 0),
            )
        } else {
            Embeddings::zeros(0, model.dim)
        };
        let train_items = (0..dataset.n_users).map(|u| dataset.train_items(u)).collect();
        Ok(Simulation {
            dataset,
            state: RoundState {
                epoch: 0,
                embeddings: EmbeddingState {
                    users,
                    items,
                    learning_rate: model.learning_rate,
                },
                malicious_users,
                diverged: false,
            },
            config,
            plan,
            aggregator,
            eval,
            train_items,
        })
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut RoundState {
        &mut self.state
    }

    pub fn plan(&self) -> &AttackPlan {
        &self.plan
    }

    pub fn aggregator(&self) -> &AggregatorSpec {
        &self.aggregator
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn evaluation_set(&self) -> &EvaluationSet {
        &self.eval
    }

    pub fn evaluate(&self) -> EpochReport {
        let emb = &self.state.embeddings;
        let mut report = self.eval.evaluate(self.state.epoch.saturating_sub(1), &emb.users, &emb.items);
        report.diverged = self.state.diverged;
        report
    }

    fn local_pairs(&self, positives: &[usize], negatives: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
        let ratio = self.config.model.negatives_per_positive;
        let pos = if ratio == 1 {
            positives.to_vec()
        } else {
            positives
                .iter()
                .flat_map(|&p| std::iter::repeat_n(p, ratio))
                .collect()
        };
        (pos, negatives)
    }

    /// Benign local steps: new user rows and uploads, in user order.
    fn benign_steps(&self, epoch: usize) -> Result<Vec<Option<(Vec<f64>, SparseGradient)>>, FederationError> {
        let emb = &self.state.embeddings;
        let ratio = self.config.model.negatives_per_positive;
        (0..self.dataset.n_users)
            .into_par_iter()
            .map(|user| {
                let positives = &self.train_items[user];
                if positives.is_empty() {
                    return Ok(None);
                }
                let mut rng = substream(self.config.seed, Purpose::TrainNegatives, epoch as u64, user as u64);
                let negatives =
                    sample_train_negatives(self.dataset, user, positives.len() * ratio, &mut rng)?;
                let (pos, neg) = self.local_pairs(positives, negatives);
                let step = client_local_step(emb.users.row(user), &pos, &neg, &emb.items, emb.learning_rate)?;
                Ok(Some(step))
            })
            .collect()
    }

    /// Local steps of injected data-poisoning clients on corrupted pairs.
    fn poisoned_data_steps(&self, epoch: usize) -> Result<Vec<(Vec<f64>, SparseGradient)>, FederationError> {
        let emb = &self.state.embeddings;
        let n_items = self.dataset.n_items;
        (0..self.plan.malicious_count)
            .into_par_iter()
            .map(|k| {
                let client = self.plan.first_client + k;
                let profile = &self.plan.poisoned_items[k];
                let user = self.state.malicious_users.row(k);
                let (pos, neg) = match self.plan.kind {
                    AttackKind::LabelFlip => {
                        let mut rng =
                            substream(self.config.seed, Purpose::TrainNegatives, epoch as u64, client as u64);
                        labelflip_pairs(profile, n_items, &mut rng)
                    }
                    _ => baseline_fedattack(profile, user, &emb.items),
                };
                Ok(client_local_step(user, &pos, &neg, &emb.items, emb.learning_rate)?)
            })
            .collect()
    }

    /// Runs one federated round.
    pub fn run_round(&mut self) -> Result<RoundOutcome, FederationError> {
        let epoch = self.state.epoch;
        let n_items = self.dataset.n_items;
        let dim = self.config.model.dim;

        let benign_steps = self.benign_steps(epoch)?;
        let mut round = SparseRoundUpdate::new(n_items, dim);
        for (user, step) in benign_steps.iter().enumerate() {
            if let Some((_, upload)) = step {
                round.add_upload(user, upload);
            }
        }
        let benign_counts: Vec<usize> = (0..n_items).map(|j| round.item(j).len()).collect();
        let benign_sums: Vec<Option<Vec<f64>>> = (0..n_items).map(|j| round.item_sum(j)).collect();

        let mut audit = AttackAudit {
            epoch,
            benign_items: benign_counts.iter().filter(|&&c| c > 0).count(),
            ..AttackAudit::default()
        };
        let mut malicious_rows = Vec::new();
        if self.plan.is_active(epoch) {
            let uploads: Vec<(ClientId, SparseGradient)> = if self.plan.kind.is_data_poisoning() {
                let steps = self.poisoned_data_steps(epoch)?;
                steps
                    .into_iter()
                    .enumerate()
                    .map(|(k, (row, upload))| {
                        malicious_rows.push(row);
                        (self.plan.first_client + k, upload)
                    })
                    .collect()
            } else {
                self.plan.generate(epoch, &round).uploads
            };
            audit.malicious_clients = uploads.len();
            let mut norm_sum = 0.0;
            let mut norm_count = 0usize;
            for (client, upload) in &uploads {
                for (_, g) in upload.iter() {
                    let n = norm(g);
                    norm_sum += n;
                    norm_count += 1;
                    audit.max_norm = audit.max_norm.max(n);
                }
                round.add_upload(*client, upload);
            }
            if norm_count > 0 {
                audit.mean_norm = norm_sum / norm_count as f64;
            }
        }

        let emb = &mut self.state.embeddings;
        let applied = sparse_aggregate_and_apply(&round, &self.aggregator, &mut emb.items, emb.learning_rate)?;

        for entry in &applied.log {
            let malicious = entry.update_count - benign_counts[entry.item];
            if entry.fallback {
                audit.fallback_items += 1;
            }
            if malicious == 0 {
                continue;
            }
            audit.attacked_items += 1;
            if malicious > benign_counts[entry.item] {
                audit.outnumbered_items += 1;
            }
        }
        for (item, agg) in &applied.aggregates {
            if round.item(*item).len() == benign_counts[*item] {
                continue;
            }
            if let Some(sum) = &benign_sums[*item] {
                let alignment: f64 = agg.iter().zip(sum).map(|(a, s)| a * s).sum();
                let benign_mean = norm(sum) / benign_counts[*item] as f64;
                // cancelled aggregates are rounding noise, not a direction
                if alignment < 0.0 && norm(agg) > NEGLIGIBLE_AGGREGATE * benign_mean {
                    audit.reversed_items += 1;
                }
            }
        }

        for (user, step) in benign_steps.into_iter().enumerate() {
            if let Some((row, _)) = step {
                emb.users.row_mut(user).copy_from_slice(&row);
            }
        }
        for (k, row) in malicious_rows.into_iter().enumerate() {
            self.state.malicious_users.row_mut(k).copy_from_slice(&row);
        }

        let diverged = !(emb.items.max_abs() <= DIVERGENCE_THRESHOLD
            && emb.users.max_abs() <= DIVERGENCE_THRESHOLD);
        self.state.diverged |= diverged;
        self.state.epoch += 1;
        Ok(RoundOutcome {
            epoch,
            diverged,
            audit,
            log: applied.log,
            aggregates: applied.aggregates,
        })
    }

    /// Runs every configured round, evaluating on the configured cadence and
    /// always after the last round.
    pub fn run(self) -> Result<ExperimentResult, FederationError> {
        self.run_with(|_, _| {})
    }

    /// Like [`Simulation::run`], calling `observer` after each round with the
    /// outcome and the report (if the round was evaluated).
    pub fn run_with(
        mut self,
        mut observer: impl FnMut(&RoundOutcome, Option<&EpochReport>),
    ) -> Result<ExperimentResult, FederationError> {
        let mut reports = Vec::new();
        let mut audits = Vec::new();
        let epochs = self.config.epochs;
        while self.state.epoch < epochs {
            let outcome = self.run_round()?;
            let e = outcome.epoch;
            let report = if (e + 1) % self.config.eval_every == 0 || e + 1 == epochs {
                let r = self.evaluate();
                reports.push(r);
                reports.last()
            } else {
                None
            };
            observer(&outcome, report);
            audits.push(outcome.audit);
        }
        Ok(ExperimentResult {
            reports,
            audits,
            malicious_count: self.plan.malicious_count,
            max_poisoned_items: self.plan.max_poisoned_items,
            aggregator: self.aggregator,
            diverged: self.state.diverged,
        })
    }
}

/// Runs a full experiment on the current rayon pool.
pub fn run_experiment(
    dataset: &InteractionDataset,
    config: FederationConfig,
) -> Result<ExperimentResult, FederationError> {
    Simulation::new(dataset, config)?.run()
}
