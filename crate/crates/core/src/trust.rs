//! Trustworthiness scoring of (context, response) pairs.
//!
//! Scores come from greedy embedding matching: every context token is matched
//! to its most similar response token (recall side) and every response token
//! to its most similar context token (precision side). Embeddings are fixed
//! seeded unit vectors, and pairwise similarities are clamped to `[0, 1]` so
//! every score stays in the unit interval.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::{validate_tokens, Token, TokenSequence, TrainConfig};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::seed::rng_from;
use crate::strategy::aggregate_mean;

/// Number of pair features consumed by the learned scorer.
pub const PAIR_FEATURES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EmbeddingTable<T> {
    vocab: usize,
    dim: usize,
    vectors: Vec<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Gaussian directions normalised to unit length.
    pub fn random(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(FedError::invalid("embedding table needs positive vocab and dim"));
        }
        let mut rng = rng_from(seed, &[0x656d_6264]);
        let mut rows = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
                    rows.push(v.into_iter().map(T::lit).collect());
                    break;
                }
            }
        }
        Self::from_rows(rows)
    }

    /// Builds a table from explicit rows, normalising each to unit length.
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let vocab = rows.len();
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if vocab == 0 || dim == 0 {
            return Err(FedError::invalid("embedding table needs positive vocab and dim"));
        }
        let mut vectors = Vec::with_capacity(vocab * dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(FedError::Shape { expected: dim, found: row.len() });
            }
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(FedError::invalid(format!("embedding row {i} has zero or non-finite norm")));
            }
            vectors.extend(row.into_iter().map(|x| x / norm));
        }
        Ok(Self { vocab, dim, vectors })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn vector(&self, token: Token) -> &[T] {
        let t = token as usize;
        &self.vectors[t * self.dim..(t + 1) * self.dim]
    }

    /// Dot product clamped to `[0, 1]`.
    #[inline]
    pub fn similarity(&self, a: Token, b: Token) -> T {
        self.vector(a)
            .iter()
            .zip(self.vector(b))
            .map(|(&x, &y)| x * y)
            .sum::<T>()
            .clamp_unit()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore<T> {
    pub recall: T,
    pub precision: T,
    pub f1: T,
}

/// Greedy-matching recall, precision and F1 between `context` and `response`.
pub fn bert_f1<T: Scalar>(
    table: &EmbeddingTable<T>,
    context: &[Token],
    response: &[Token],
) -> Result<MatchScore<T>> {
    validate_tokens(context, table.vocab, "context")?;
    validate_tokens(response, table.vocab, "response")?;

    let mut col_max = vec![T::zero(); response.len()];
    let mut recall_sum = T::zero();
    for &x in context {
        let mut row_max = T::zero();
        for (j, &r) in response.iter().enumerate() {
            let s = table.similarity(x, r);
            row_max = row_max.max(s);
            col_max[j] = col_max[j].max(s);
        }
        recall_sum = recall_sum + row_max;
    }
    let recall = recall_sum / T::from_count(context.len());
    let precision = col_max.iter().copied().sum::<T>() / T::from_count(response.len());
    let denom = precision + recall;
    let f1 = if denom > T::zero() {
        (T::lit(2.0) * precision * recall / denom).clamp_unit()
    } else {
        T::zero()
    };
    Ok(MatchScore { recall, precision, f1 })
}

/// Feature vector for the learned scorer: recall, precision, f1, length ratio, bias.
pub fn pair_features<T: Scalar>(
    table: &EmbeddingTable<T>,
    context: &[Token],
    response: &[Token],
) -> Result<[T; PAIR_FEATURES]> {
    let m = bert_f1(table, context, response)?;
    let ratio = T::from_count(response.len()) / T::from_count(context.len());
    Ok([m.recall, m.precision, m.f1, ratio, T::one()])
}

/// Maps a (context, response) pair to a score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum TrustEvaluator<T> {
    DeterministicF1 {
        table: EmbeddingTable<T>,
    },
    LearnedLinear {
        table: EmbeddingTable<T>,
        weights: Params<T>,
    },
    /// Ignores its inputs. Useful for isolating the blend from the scores.
    Constant {
        value: T,
    },
}

impl<T: Scalar> TrustEvaluator<T> {
    pub fn score(&self, context: &[Token], response: &[Token]) -> Result<T> {
        match self {
            TrustEvaluator::DeterministicF1 { table } => Ok(bert_f1(table, context, response)?.f1.clamp_unit()),
            TrustEvaluator::LearnedLinear { table, weights } => {
                let f = pair_features(table, context, response)?;
                Ok(linear_logistic(weights.as_slice(), &f))
            }
            TrustEvaluator::Constant { value } => {
                if context.is_empty() || response.is_empty() {
                    return Err(FedError::invalid("context and response must be non-empty"));
                }
                Ok(value.clamp_unit())
            }
        }
    }
}

#[inline]
fn linear_logistic<T: Scalar>(w: &[T], f: &[T; PAIR_FEATURES]) -> T {
    w.iter().zip(f).map(|(&a, &b)| a * b).sum::<T>().logistic()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ScoredPair<T> {
    pub context: TokenSequence,
    pub response: TokenSequence,
    pub label: T,
}

impl<T: Scalar> ScoredPair<T> {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() || self.response.is_empty() {
            return Err(FedError::invalid("scored pair sequences must be non-empty"));
        }
        if !(self.label >= T::zero() && self.label <= T::one()) {
            return Err(FedError::invalid(format!("label {} outside [0, 1]", self.label)));
        }
        Ok(())
    }
}

pub fn write_pairs_jsonl<T: Scalar, W: Write>(pairs: &[ScoredPair<T>], mut out: W) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<T: Scalar, R: BufRead>(input: R) -> Result<Vec<ScoredPair<T>>> {
    let mut pairs = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| FedError::invalid(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: ScoredPair<T> =
            serde_json::from_str(&line).map_err(|e| FedError::invalid(format!("line {}: {e}", n + 1)))?;
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Random context/response pairs labelled by the deterministic scorer plus
/// Gaussian noise of standard deviation `noise`, clamped to `[0, 1]`.
///
/// Responses mix tokens copied from the context with fresh random tokens so
/// labels cover the whole range.
pub fn synth_trust_dataset<T: Scalar>(
    seed: u64,
    n: usize,
    table: &EmbeddingTable<T>,
    noise: T,
) -> Result<Vec<ScoredPair<T>>> {
    if n == 0 {
        return Err(FedError::invalid("n must be at least 1"));
    }
    let mut rng = rng_from(seed, &[0x7472_7573]);
    let vocab = table.vocab() as Token;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let clen = rng.random_range(1..=8usize);
        let rlen = rng.random_range(1..=8usize);
        let context: TokenSequence = (0..clen).map(|_| rng.random_range(0..vocab)).collect();
        let copy_rate: f64 = rng.random();
        let response: TokenSequence = (0..rlen)
            .map(|_| {
                if rng.random::<f64>() < copy_rate {
                    context[rng.random_range(0..clen)]
                } else {
                    rng.random_range(0..vocab)
                }
            })
            .collect();
        let f1 = bert_f1(table, &context, &response)?.f1;
        let eps: f64 = rng.sample(StandardNormal);
        let label = (f1 + noise * T::lit(eps)).clamp_unit();
        out.push(ScoredPair { context, response, label });
    }
    Ok(out)
}

/// Mean squared error of an evaluator's scores against the labels.
pub fn evaluator_mse<T: Scalar>(ev: &TrustEvaluator<T>, pairs: &[ScoredPair<T>]) -> Result<T> {
    if pairs.is_empty() {
        return Err(FedError::invalid("no pairs to score"));
    }
    let mut acc = T::zero();
    for p in pairs {
        let d = ev.score(&p.context, &p.response)? - p.label;
        acc = acc + d * d;
    }
    Ok(acc / T::from_count(pairs.len()))
}

struct FeatureSet<T> {
    features: Vec<[T; PAIR_FEATURES]>,
    labels: Vec<T>,
}

impl<T: Scalar> FeatureSet<T> {
    fn build(table: &EmbeddingTable<T>, pairs: &[ScoredPair<T>]) -> Result<Self> {
        let mut features = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for p in pairs {
            p.validate()?;
            features.push(pair_features(table, &p.context, &p.response)?);
            labels.push(p.label);
        }
        Ok(Self { features, labels })
    }
}

/// Local squared-error descent on the logistic-linear scorer. Returns new weights.
fn train_linear_local<T: Scalar>(start: &Params<T>, data: &FeatureSet<T>, cfg: &TrainConfig<T>) -> Params<T> {
    use rand::seq::SliceRandom;

    let n = data.labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(cfg.seed, &[]);
    order.shuffle(&mut rng);

    let mut w = start.as_slice().to_vec();
    let mut cursor = 0usize;
    let two = T::lit(2.0);
    let bs = T::from_count(cfg.batch_size);
    for _ in 0..cfg.local_steps {
        let mut g = [T::zero(); PAIR_FEATURES];
        for _ in 0..cfg.batch_size {
            let i = order[cursor];
            cursor = (cursor + 1) % n;
            let f = &data.features[i];
            let s = linear_logistic(&w, f);
            let coef = two * (s - data.labels[i]) * s * (T::one() - s);
            for (gj, &fj) in g.iter_mut().zip(f) {
                *gj = *gj + coef * fj;
            }
        }
        for (wj, gj) in w.iter_mut().zip(g) {
            *wj = *wj - cfg.learning_rate * gj / bs;
        }
    }
    Params::from_vec_unchecked(w)
}

/// Federated training of a [`TrustEvaluator::LearnedLinear`] scorer starting
/// from zero weights: each round every partition runs local descent from the
/// current global weights and the server averages the results.
pub fn train_trust_evaluator_federated<T: Scalar>(
    table: &EmbeddingTable<T>,
    partitions: &[Vec<ScoredPair<T>>],
    rounds: usize,
    cfg: &TrainConfig<T>,
) -> Result<TrustEvaluator<T>> {
    train_trust_evaluator_from(table, Params::zeros(PAIR_FEATURES), partitions, rounds, cfg)
}

pub fn train_trust_evaluator_from<T: Scalar>(
    table: &EmbeddingTable<T>,
    init: Params<T>,
    partitions: &[Vec<ScoredPair<T>>],
    rounds: usize,
    cfg: &TrainConfig<T>,
) -> Result<TrustEvaluator<T>> {
    cfg.validate()?;
    if partitions.is_empty() {
        return Err(FedError::invalid("need at least one evaluator training partition"));
    }
    if rounds == 0 {
        return Err(FedError::config("rounds", "must be at least 1"));
    }
    if init.dim() != PAIR_FEATURES {
        return Err(FedError::Shape { expected: PAIR_FEATURES, found: init.dim() });
    }
    let sets = partitions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.is_empty() {
                Err(FedError::invalid(format!("evaluator partition {i} is empty")))
            } else {
                FeatureSet::build(table, p)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut global = init;
    for round in 0..rounds {
        // Every client shares the round's sampling seed; their data differs.
        let round_seed = crate::seed::derive_seed(cfg.seed, &[round as u64]);
        let locals: Vec<Params<T>> = sets
            .iter()
            .map(|set| train_linear_local(&global, set, &cfg.with_seed(round_seed)))
            .collect();
        let refs: Vec<&Params<T>> = locals.iter().collect();
        global = aggregate_mean(&refs)?;
        if !global.is_finite() {
            return Err(FedError::NumericFailure {
                round,
                detail: "evaluator weights became non-finite".into(),
            });
        }
    }
    Ok(TrustEvaluator::LearnedLinear { table: table.clone(), weights: global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn hand_table() -> EmbeddingTable<f64> {
        EmbeddingTable::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    /// Double loop over every (context, response) pair, no shared state.
    fn brute_force(table: &EmbeddingTable<f64>, x: &[Token], r: &[Token]) -> (f64, f64, f64) {
        let sim = |a: Token, b: Token| {
            let d: f64 = table.vector(a).iter().zip(table.vector(b)).map(|(p, q)| p * q).sum();
            d.clamp(0.0, 1.0)
        };
        let mut rec = 0.0;
        for &a in x {
            let mut best = f64::NEG_INFINITY;
            for &b in r {
                best = best.max(sim(a, b));
            }
            rec += best;
        }
        rec /= x.len() as f64;
        let mut prec = 0.0;
        for &b in r {
            let mut best = f64::NEG_INFINITY;
            for &a in x {
                best = best.max(sim(a, b));
            }
            prec += best;
        }
        prec /= r.len() as f64;
        let f = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        (rec, prec, f)
    }

    #[test]
    fn table_rows_are_unit_norm_and_seeded() {
        let t = EmbeddingTable::<f64>::random(20, 6, 3).unwrap();
        for tok in 0..20 {
            let n: f64 = t.vector(tok).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(t, EmbeddingTable::random(20, 6, 3).unwrap());
        assert_ne!(t, EmbeddingTable::random(20, 6, 4).unwrap());
    }

    #[test]
    fn hand_example() {
        let m = bert_f1(&hand_table(), &[0, 1], &[0]).unwrap();
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let ev = TrustEvaluator::DeterministicF1 { table: hand_table() };
        assert!((ev.score(&[0, 1], &[0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_sequences_score_one() {
        let t = EmbeddingTable::<f64>::random(10, 4, 1).unwrap();
        let x = [3, 7, 7, 1];
        let m = bert_f1(&t, &x, &x).unwrap();
        assert!((m.recall - 1.0).abs() < 1e-12 && (m.precision - 1.0).abs() < 1e-12);
        assert!((m.f1 - 1.0).abs() < 1e-12);
        let ev = TrustEvaluator::DeterministicF1 { table: t };
        assert!((ev.score(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_out_of_range_inputs_fail() {
        let t = hand_table();
        assert!(matches!(bert_f1(&t, &[], &[0]), Err(FedError::InvalidInput(_))));
        assert!(matches!(bert_f1(&t, &[0], &[]), Err(FedError::InvalidInput(_))));
        assert!(bert_f1(&t, &[2], &[0]).is_err());
        assert!(TrustEvaluator::Constant { value: 0.3 }.score(&[], &[1]).is_err());
    }

    #[test]
    fn zero_weight_learned_scorer_is_half() {
        let ev = TrustEvaluator::LearnedLinear {
            table: EmbeddingTable::<f64>::random(6, 3, 0).unwrap(),
            weights: Params::zeros(PAIR_FEATURES),
        };
        assert_eq!(ev.score(&[1, 2], &[5]).unwrap(), 0.5);
        assert_eq!(ev.score(&[0], &[0, 0, 4]).unwrap(), 0.5);
    }

    #[test]
    fn orthogonal_tokens_give_zero_f1() {
        let m = bert_f1(&hand_table(), &[0, 0], &[1]).unwrap();
        assert_eq!((m.recall, m.precision, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = rng_from(2024, &[]);
        for case in 0..200 {
            let dim = rng.random_range(1..=4);
            let vocab = rng.random_range(1..=12);
            let t = EmbeddingTable::<f64>::random(vocab, dim, case).unwrap();
            let xl = rng.random_range(1..=8);
            let rl = rng.random_range(1..=8);
            let x: Vec<Token> = (0..xl).map(|_| rng.random_range(0..vocab as Token)).collect();
            let r: Vec<Token> = (0..rl).map(|_| rng.random_range(0..vocab as Token)).collect();
            let m = bert_f1(&t, &x, &r).unwrap();
            let (br, bp, bf) = brute_force(&t, &x, &r);
            assert!((m.recall - br).abs() < 1e-9);
            assert!((m.precision - bp).abs() < 1e-9);
            assert!((m.f1 - bf).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_dataset_contract() {
        let t = EmbeddingTable::<f64>::random(16, 4, 9).unwrap();
        let d = synth_trust_dataset(5, 5, &t, 0.1).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.iter().all(|p| (0.0..=1.0).contains(&p.label)));
        assert_eq!(d, synth_trust_dataset(5, 5, &t, 0.1).unwrap());
        assert!(synth_trust_dataset(5, 0, &t, 0.1).is_err());

        let clean = synth_trust_dataset(8, 50, &t, 0.0).unwrap();
        for p in &clean {
            let (_, _, f) = brute_force(&t, &p.context, &p.response);
            assert!((p.label - f).abs() < 1e-12);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let t = EmbeddingTable::<f64>::random(8, 3, 2).unwrap();
        let d = synth_trust_dataset(1, 4, &t, 0.05).unwrap();
        let mut buf = Vec::new();
        write_pairs_jsonl(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().starts_with("{\"context\":["));
        let back: Vec<ScoredPair<f64>> = read_pairs_jsonl(&buf[..]).unwrap();
        assert_eq!(back, d);
        assert!(read_pairs_jsonl::<f64, _>(&b"{\"context\":[1],\"response\":[2],\"label\":1.5}\n"[..]).is_err());
    }

    #[test]
    fn zero_residual_leaves_weights_unchanged() {
        let t = EmbeddingTable::<f64>::random(8, 3, 2).unwrap();
        let mut d = synth_trust_dataset(3, 10, &t, 0.0).unwrap();
        for p in &mut d {
            p.label = 0.5;
        }
        let cfg = TrainConfig { learning_rate: 0.5, local_steps: 5, batch_size: 4, seed: 1 };
        let ev = train_trust_evaluator_federated(&t, &[d], 1, &cfg).unwrap();
        match ev {
            TrustEvaluator::LearnedLinear { weights, .. } => assert_eq!(weights, Params::zeros(PAIR_FEATURES)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn identical_clients_match_single_client() {
        let t = EmbeddingTable::<f64>::random(8, 3, 2).unwrap();
        let d = synth_trust_dataset(3, 12, &t, 0.05).unwrap();
        let cfg = TrainConfig { learning_rate: 0.5, local_steps: 5, batch_size: 4, seed: 1 };
        let single = train_trust_evaluator_federated(&t, std::slice::from_ref(&d), 3, &cfg).unwrap();
        let pair = train_trust_evaluator_federated(&t, &[d.clone(), d], 3, &cfg).unwrap();
        assert_eq!(single, pair);
    }

    #[test]
    fn evaluator_training_errors_and_determinism() {
        let t = EmbeddingTable::<f64>::random(8, 3, 2).unwrap();
        let cfg = TrainConfig { learning_rate: 0.5, local_steps: 3, batch_size: 4, seed: 1 };
        assert!(train_trust_evaluator_federated::<f64>(&t, &[], 3, &cfg).is_err());
        assert!(train_trust_evaluator_federated(&t, &[vec![]], 3, &cfg).is_err());
        let bad = TrainConfig { learning_rate: 0.0, ..cfg.clone() };
        let d = synth_trust_dataset(3, 12, &t, 0.05).unwrap();
        assert!(train_trust_evaluator_federated(&t, std::slice::from_ref(&d), 3, &bad).is_err());
        let a = train_trust_evaluator_federated(&t, &[d.clone(), d.clone()], 4, &cfg).unwrap();
        let b = train_trust_evaluator_federated(&t, &[d.clone(), d], 4, &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn swapping_sides_swaps_recall_and_precision(
            seed in 0u64..1000,
            x in proptest::collection::vec(0u32..10, 1..8),
            r in proptest::collection::vec(0u32..10, 1..8),
        ) {
            let t = EmbeddingTable::<f64>::random(10, 3, seed).unwrap();
            let a = bert_f1(&t, &x, &r).unwrap();
            let b = bert_f1(&t, &r, &x).unwrap();
            prop_assert_eq!(a.recall, b.precision);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert!((0.0..=1.0).contains(&a.f1));
            prop_assert!((bert_f1(&t, &x, &x).unwrap().f1 - 1.0).abs() < 1e-12);
        }
    }
}
