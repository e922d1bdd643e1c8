//! Federated experiment driver.
//!
//! One communication round:
//!
//! 1. sample `K` clients for the round;
//! 2. each selected client trains from the global parameters on its own data
//!    (with a proximal term under FedProx);
//! 3. under the trust-adaptive strategy the global model is scored once on a
//!    sampled set of evaluation contexts, every trained local model is scored
//!    on the same contexts, and the gap sets that client's blend weight;
//! 4. blended client vectors are averaged in ascending client-id order.
//!
//! FedAvg and FedProx take the same path with a blend weight of zero.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::metrics::{evaluate_generation, MetricReport};
use crate::model::{local_train, BigramModel, GreedyDecoder, Proximal, Responder, TokenSequence, TrainConfig};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from};
use crate::strategy::{adaptive_alpha, aggregate_by_client, blend_update, k_schedule, StrategyConfig};
use crate::trust::TrustEvaluator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub sampling: u64,
    pub training: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            sampling: 2,
            training: 3,
            eval: 4,
        }
    }
}

impl Seeds {
    /// Every stream derived from a single base seed.
    pub fn from_base(base: u64) -> Self {
        Self {
            data: derive_seed(base, &[0]),
            sampling: derive_seed(base, &[1]),
            training: derive_seed(base, &[2]),
            eval: derive_seed(base, &[3]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FederationConfig<T> {
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub strategy: StrategyConfig<T>,
    /// Local optimiser settings. The seed field is ignored; per-client seeds
    /// derive from `seeds.training`.
    pub train: TrainConfig<T>,
    pub trust_eval_samples: usize,
    pub max_response_len: usize,
    pub partition_skew: f64,
    pub seeds: Seeds,
}

impl<T: Scalar> Default for FederationConfig<T> {
    fn default() -> Self {
        Self {
            n_clients: 8,
            clients_per_round: 2,
            rounds: 100,
            strategy: StrategyConfig::FedDtre(Default::default()),
            train: TrainConfig::default(),
            trust_eval_samples: 100,
            max_response_len: 8,
            partition_skew: 0.0,
            seeds: Seeds::default(),
        }
    }
}

impl<T: Scalar> FederationConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(FedError::config("n_clients", "must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return Err(FedError::config(
                "clients_per_round",
                format!("must lie in 1..={} (n_clients)", self.n_clients),
            ));
        }
        if self.rounds == 0 {
            return Err(FedError::config("rounds", "must be at least 1"));
        }
        if self.trust_eval_samples == 0 {
            return Err(FedError::config("trust_eval_samples", "must be at least 1"));
        }
        if self.max_response_len == 0 {
            return Err(FedError::config("max_response_len", "must be at least 1"));
        }
        if !(self.partition_skew >= 0.0) || !self.partition_skew.is_finite() {
            return Err(FedError::config("partition_skew", "must be a finite non-negative number"));
        }
        self.strategy.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    /// Key used to derive this client's training seeds; defaults to the id.
    pub seed_key: u64,
    pub data: Vec<TokenSequence>,
}

/// Client dataset sizes: one sequence each, then the rest split in proportion
/// to `(rank + 1)^-skew` with largest-remainder rounding. Ranks are a seeded
/// permutation of the clients, so `skew = 0` is an even split.
fn allocate_sizes(total: usize, n_clients: usize, skew: f64, seed: u64) -> Vec<usize> {
    let mut ranks: Vec<usize> = (0..n_clients).collect();
    if skew > 0.0 {
        ranks.shuffle(&mut rng_from(seed, &[0x7369_7a65]));
    }
    let weights: Vec<f64> = ranks.iter().map(|&r| ((r + 1) as f64).powf(-skew)).collect();
    let wsum: f64 = weights.iter().sum();
    let rest = total - n_clients;
    let quotas: Vec<f64> = weights.iter().map(|w| rest as f64 * w / wsum).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = rest - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n_clients).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes.into_iter().map(|s| s + 1).collect()
}

/// Disjoint cover of `dataset` by `n_clients` non-empty partitions.
pub fn partition_data(
    dataset: &[TokenSequence],
    n_clients: usize,
    skew: f64,
    seed: u64,
) -> Result<Vec<ClientPartition>> {
    if n_clients == 0 {
        return Err(FedError::invalid("need at least one client"));
    }
    if dataset.len() < n_clients {
        return Err(FedError::invalid(format!(
            "dataset of {} sequences cannot cover {n_clients} clients",
            dataset.len()
        )));
    }
    if !(skew >= 0.0) || !skew.is_finite() {
        return Err(FedError::invalid("skew must be a finite non-negative number"));
    }
    let sizes = allocate_sizes(dataset.len(), n_clients, skew, seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_from(seed, &[0x7368_7566]));
    let mut cursor = 0;
    Ok(sizes
        .into_iter()
        .enumerate()
        .map(|(client_id, size)| {
            let data = order[cursor..cursor + size].iter().map(|&i| dataset[i].clone()).collect();
            cursor += size;
            ClientPartition {
                client_id,
                seed_key: client_id as u64,
                data,
            }
        })
        .collect())
}

/// `k` distinct client ids drawn uniformly for `round`, ascending.
pub fn sample_clients(n_clients: usize, k: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n_clients {
        return Err(FedError::invalid(format!("cannot sample {k} of {n_clients} clients")));
    }
    let mut rng = rng_from(seed, &[round as u64]);
    let mut ids = index::sample(&mut rng, n_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Mean trust score of a responder over `min(n_samples, |contexts|)` seeded
/// contexts. Calls that share `seed` see the same contexts.
pub fn evaluate_trust<T: Scalar, R: Responder + ?Sized>(
    responder: &R,
    evaluator: &TrustEvaluator<T>,
    contexts: &[TokenSequence],
    n_samples: usize,
    seed: u64,
) -> Result<T> {
    if contexts.is_empty() {
        return Err(FedError::invalid("no evaluation contexts"));
    }
    if n_samples == 0 {
        return Err(FedError::invalid("n_samples must be at least 1"));
    }
    let picks: Vec<usize> = if n_samples >= contexts.len() {
        (0..contexts.len()).collect()
    } else {
        let mut v = index::sample(&mut rng_from(seed, &[]), contexts.len(), n_samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut acc = T::zero();
    for &i in &picks {
        let response = responder.respond(&contexts[i])?;
        if !response.is_empty() {
            acc = acc + evaluator.score(&contexts[i], &response)?;
        }
    }
    Ok(acc / T::from_count(picks.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub s_l: Option<f64>,
    pub delta_s: Option<f64>,
    pub alpha: f64,
    pub pre_loss: f64,
    pub post_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Sigmoid steepness used this round (trust-adaptive strategy only).
    pub k: Option<f64>,
    pub s_g: Option<f64>,
    pub clients: Vec<ClientRecord>,
    pub aggregated_norm: f64,
    /// Loss of the post-round global model on the full training corpus.
    pub global_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FederationState<T> {
    pub round: usize,
    pub global: Params<T>,
    /// Per-client models, only kept by the no-federation baseline.
    pub personal: Option<Vec<Params<T>>>,
}

/// Output of one client's work in a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate<T> {
    pub trained: Params<T>,
    pub blended: Params<T>,
    pub record: ClientRecord,
}

pub struct Federation<'a, T: Scalar> {
    cfg: &'a FederationConfig<T>,
    vocab: usize,
    partitions: Vec<ClientPartition>,
    corpus: &'a [TokenSequence],
    evaluator: &'a TrustEvaluator<T>,
    trust_contexts: Vec<TokenSequence>,
}

fn tag_round(e: FedError, round: usize) -> FedError {
    match e {
        FedError::NumericFailure { detail, .. } => FedError::NumericFailure { round, detail },
        other => other,
    }
}

impl<'a, T: Scalar> Federation<'a, T> {
    pub fn new(
        cfg: &'a FederationConfig<T>,
        vocab: usize,
        corpus: &'a [TokenSequence],
        trust_contexts: Vec<TokenSequence>,
        evaluator: &'a TrustEvaluator<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let partitions = partition_data(corpus, cfg.n_clients, cfg.partition_skew, cfg.seeds.data)?;
        Self::with_partitions(cfg, vocab, corpus, partitions, trust_contexts, evaluator)
    }

    /// Uses caller-supplied partitions instead of [`partition_data`].
    pub fn with_partitions(
        cfg: &'a FederationConfig<T>,
        vocab: usize,
        corpus: &'a [TokenSequence],
        mut partitions: Vec<ClientPartition>,
        trust_contexts: Vec<TokenSequence>,
        evaluator: &'a TrustEvaluator<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if partitions.len() != cfg.n_clients {
            return Err(FedError::config("n_clients", "does not match the number of partitions"));
        }
        partitions.sort_by_key(|p| p.client_id);
        if partitions.iter().enumerate().any(|(i, p)| p.client_id != i || p.data.is_empty()) {
            return Err(FedError::invalid("partitions must be non-empty with ids 0..n_clients"));
        }
        if trust_contexts.is_empty() && matches!(cfg.strategy, StrategyConfig::FedDtre(_)) {
            return Err(FedError::invalid("trust-adaptive strategy needs evaluation contexts"));
        }
        if corpus.is_empty() {
            return Err(FedError::invalid("training corpus is empty"));
        }
        Ok(Self {
            cfg,
            vocab,
            partitions,
            corpus,
            evaluator,
            trust_contexts,
        })
    }

    pub fn partitions(&self) -> &[ClientPartition] {
        &self.partitions
    }

    pub fn initial_state(&self) -> FederationState<T> {
        let dim = self.vocab * self.vocab;
        FederationState {
            round: 0,
            global: Params::zeros(dim),
            personal: matches!(self.cfg.strategy, StrategyConfig::LocalOnly)
                .then(|| vec![Params::zeros(dim); self.cfg.n_clients]),
        }
    }

    pub fn corpus_loss(&self, params: &Params<T>) -> Result<T> {
        BigramModel::new(self.vocab, params.clone())?.forward_loss(self.corpus)
    }

    fn eval_seed(&self, round: usize) -> u64 {
        derive_seed(self.cfg.seeds.eval, &[round as u64])
    }

    fn trust_of(&self, params: &Params<T>, round: usize) -> Result<T> {
        let model = BigramModel::new(self.vocab, params.clone())?;
        let dec = GreedyDecoder {
            model: &model,
            max_len: self.cfg.max_response_len,
        };
        evaluate_trust(
            &dec,
            self.evaluator,
            &self.trust_contexts,
            self.cfg.trust_eval_samples,
            self.eval_seed(round),
        )
    }

    /// Local training, scoring and blending for one client.
    pub fn client_update(
        &self,
        state: &FederationState<T>,
        client_id: usize,
        s_g: Option<T>,
    ) -> Result<ClientUpdate<T>> {
        let part = self
            .partitions
            .get(client_id)
            .ok_or_else(|| FedError::invalid(format!("unknown client {client_id}")))?;
        let round = state.round;
        let start = match &state.personal {
            Some(models) => &models[client_id],
            None => &state.global,
        };
        let train = self
            .cfg
            .train
            .with_seed(derive_seed(self.cfg.seeds.training, &[round as u64, part.seed_key]));
        let prox = match &self.cfg.strategy {
            StrategyConfig::FedProx { mu } => Some(Proximal { mu: *mu, anchor: &state.global }),
            _ => None,
        };
        let trained = local_train(start, self.vocab, &part.data, &train, prox)?;

        let (alpha, s_l, gap) = match (&self.cfg.strategy, s_g) {
            (StrategyConfig::FedDtre(sched), Some(s_g)) => {
                let s_l = self.trust_of(&trained, round)?;
                let alpha = adaptive_alpha(s_g, s_l, sched, round);
                (alpha, Some(s_l), Some(s_g - s_l))
            }
            (StrategyConfig::FedDtre(_), None) => {
                return Err(FedError::invalid("global trust score missing for adaptive round"))
            }
            (StrategyConfig::FixedAlpha { alpha }, _) => (*alpha, None, None),
            _ => (T::zero(), None, None),
        };
        let blended = blend_update(&trained, &state.global, alpha)?;

        let pre = BigramModel::new(self.vocab, start.clone())?.forward_loss(&part.data)?;
        let post = BigramModel::new(self.vocab, trained.clone())?.forward_loss(&part.data)?;
        Ok(ClientUpdate {
            record: ClientRecord {
                client_id,
                s_l: s_l.map(Scalar::as_f64),
                delta_s: gap.map(Scalar::as_f64),
                alpha: alpha.as_f64(),
                pre_loss: pre.as_f64(),
                post_loss: post.as_f64(),
            },
            trained,
            blended,
        })
    }

    /// Runs a round with an explicit client selection.
    pub fn run_round_with(
        &self,
        state: &FederationState<T>,
        selected: &[usize],
    ) -> Result<(FederationState<T>, RoundRecord)> {
        let round = state.round;
        self.round_inner(state, selected).map_err(|e| tag_round(e, round))
    }

    pub fn run_round(&self, state: &FederationState<T>) -> Result<(FederationState<T>, RoundRecord)> {
        let selected = sample_clients(
            self.cfg.n_clients,
            self.cfg.clients_per_round,
            self.cfg.seeds.sampling,
            state.round,
        )?;
        self.run_round_with(state, &selected)
    }

    fn round_inner(
        &self,
        state: &FederationState<T>,
        selected: &[usize],
    ) -> Result<(FederationState<T>, RoundRecord)> {
        let round = state.round;
        let mut selected = selected.to_vec();
        selected.sort_unstable();
        if selected.is_empty() || selected.windows(2).any(|w| w[0] == w[1]) {
            return Err(FedError::invalid("selection must be a non-empty set of distinct clients"));
        }

        let (k, s_g) = match &self.cfg.strategy {
            StrategyConfig::FedDtre(sched) => (
                Some(k_schedule(sched, round).as_f64()),
                Some(self.trust_of(&state.global, round)?),
            ),
            _ => (None, None),
        };

        let updates = selected
            .par_iter()
            .map(|&id| self.client_update(state, id, s_g))
            .collect::<Result<Vec<_>>>()?;

        let mut next = FederationState {
            round: round + 1,
            global: state.global.clone(),
            personal: state.personal.clone(),
        };
        let global_loss;
        let aggregated_norm;
        if let Some(models) = next.personal.as_mut() {
            for (&id, u) in selected.iter().zip(&updates) {
                if !u.trained.is_finite() {
                    return Err(FedError::NumericFailure { round, detail: format!("client {id} diverged") });
                }
                models[id] = u.trained.clone();
            }
            let mut acc = T::zero();
            for m in models.iter() {
                acc = acc + self.corpus_loss(m)?;
            }
            global_loss = acc / T::from_count(models.len());
            aggregated_norm = T::zero();
        } else {
            let pairs: Vec<(usize, Params<T>)> =
                selected.iter().zip(&updates).map(|(&id, u)| (id, u.blended.clone())).collect();
            let global = aggregate_by_client(&pairs)?;
            if !global.is_finite() {
                return Err(FedError::NumericFailure {
                    round,
                    detail: "aggregated parameters are not finite".into(),
                });
            }
            global_loss = self.corpus_loss(&global)?;
            aggregated_norm = global.norm();
            next.global = global;
        }

        let record = RoundRecord {
            round,
            selected,
            k,
            s_g: s_g.map(Scalar::as_f64),
            clients: updates.into_iter().map(|u| u.record).collect(),
            aggregated_norm: aggregated_norm.as_f64(),
            global_loss: global_loss.as_f64(),
        };
        Ok((next, record))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExperimentResult<T> {
    pub strategy: String,
    pub rounds: Vec<RoundRecord>,
    pub initial_loss: T,
    pub final_loss: T,
    pub final_global: Params<T>,
    pub metrics: MetricReport<T>,
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "strategy", "seed", "T", "BLEU-1", "BLEU-4", "ROUGE-1", "ROUGE-2", "trust", "final_loss",
];

impl<T: Scalar> ExperimentResult<T> {
    /// Fields of one summary CSV row in [`SUMMARY_HEADER`] order.
    pub fn summary_row(&self, seed: u64) -> Vec<String> {
        let m = &self.metrics;
        let mut row = vec![self.strategy.clone(), seed.to_string(), self.rounds.len().to_string()];
        row.extend(
            [m.bleu_1, m.bleu_4, m.rouge_1, m.rouge_2, m.trust, self.final_loss]
                .iter()
                .map(|v| v.as_f64().to_string()),
        );
        row
    }
}

/// One JSON object per line.
pub fn write_rounds_jsonl<W: Write>(rounds: &[RoundRecord], mut out: W) -> std::io::Result<()> {
    for r in rounds {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Full run: partition, `cfg.rounds` rounds, then generation metrics on `eval_set`.
pub fn run_experiment<T: Scalar>(
    cfg: &FederationConfig<T>,
    vocab: usize,
    dataset: &[TokenSequence],
    eval_set: &[(TokenSequence, TokenSequence)],
    evaluator: &TrustEvaluator<T>,
) -> Result<ExperimentResult<T>> {
    let contexts = eval_set.iter().map(|(c, _)| c.clone()).collect();
    let fed = Federation::new(cfg, vocab, dataset, contexts, evaluator)?;
    run_federation(&fed, eval_set)
}

pub fn run_federation<T: Scalar>(
    fed: &Federation<'_, T>,
    eval_set: &[(TokenSequence, TokenSequence)],
) -> Result<ExperimentResult<T>> {
    let mut state = fed.initial_state();
    let initial_loss = fed.corpus_loss(&state.global)?;
    let mut rounds = Vec::with_capacity(fed.cfg.rounds);
    for _ in 0..fed.cfg.rounds {
        let (next, record) = fed.run_round(&state)?;
        rounds.push(record);
        state = next;
    }
    let max_len = fed.cfg.max_response_len;
    let (metrics, final_loss) = match &state.personal {
        Some(models) => {
            let mut reports = Vec::with_capacity(models.len());
            let mut loss = T::zero();
            for m in models {
                let model = BigramModel::new(fed.vocab, m.clone())?;
                reports.push(evaluate_generation(&GreedyDecoder { model: &model, max_len }, eval_set, fed.evaluator)?);
                loss = loss + fed.corpus_loss(m)?;
            }
            (MetricReport::mean(&reports)?, loss / T::from_count(models.len()))
        }
        None => {
            let model = BigramModel::new(fed.vocab, state.global.clone())?;
            let report = evaluate_generation(&GreedyDecoder { model: &model, max_len }, eval_set, fed.evaluator)?;
            (report, fed.corpus_loss(&state.global)?)
        }
    };
    Ok(ExperimentResult {
        strategy: fed.cfg.strategy.label(),
        rounds,
        initial_loss,
        final_loss,
        final_global: state.global,
        metrics,
    })
}
