//! Bigram next-token model.
//!
//! The parameter vector is a `V x V` logit table stored row-major: entry
//! `(a, b)` is the logit of token `b` following token `a`. Training minimises
//! the mean next-token cross-entropy over every adjacent pair in a batch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::seed::rng_from;
use crate::strategy::fedprox_penalty;

pub type Token = u32;
pub type TokenSequence = Vec<Token>;

/// Token id that terminates greedy decoding.
pub const END_TOKEN: Token = 0;

/// Checks that a sequence is non-empty and every id is below `vocab`.
pub fn validate_tokens(seq: &[Token], vocab: usize, what: &str) -> Result<()> {
    if seq.is_empty() {
        return Err(FedError::invalid(format!("{what} must be non-empty")));
    }
    if let Some(&t) = seq.iter().find(|&&t| t as usize >= vocab) {
        return Err(FedError::invalid(format!(
            "{what} contains token id {t} outside vocabulary of size {vocab}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub local_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(0.1),
            local_steps: 5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return Err(FedError::config("learning_rate", "must be a finite positive number"));
        }
        if self.local_steps == 0 {
            return Err(FedError::config("local_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(FedError::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Proximal anchor added to the local objective: `(mu / 2) * ||w - anchor||^2`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a, T> {
    pub mu: T,
    pub anchor: &'a Params<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramModel<T> {
    vocab: usize,
    params: Params<T>,
}

impl<T: Scalar> BigramModel<T> {
    pub fn new(vocab: usize, params: Params<T>) -> Result<Self> {
        if vocab == 0 {
            return Err(FedError::invalid("vocabulary size must be positive"));
        }
        if params.dim() != vocab * vocab {
            return Err(FedError::Shape {
                expected: vocab * vocab,
                found: params.dim(),
            });
        }
        Ok(Self { vocab, params })
    }

    pub fn zeros(vocab: usize) -> Self {
        Self {
            vocab,
            params: Params::zeros(vocab * vocab),
        }
    }

    #[inline]
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    #[inline]
    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn into_params(self) -> Params<T> {
        self.params
    }

    #[inline]
    pub fn row(&self, token: Token) -> &[T] {
        let a = token as usize;
        &self.params.as_slice()[a * self.vocab..(a + 1) * self.vocab]
    }

    /// Mean next-token cross-entropy over every adjacent pair in `batch`.
    pub fn forward_loss(&self, batch: &[TokenSequence]) -> Result<T> {
        let counts = PairCounts::collect(batch, self.vocab)?;
        let total = T::from_count(counts.total);
        let mut acc = T::zero();
        for a in 0..self.vocab {
            let n_a = counts.row_total[a];
            if n_a == 0 {
                continue;
            }
            let row = self.row(a as Token);
            let lse = log_sum_exp(row);
            let mut row_loss = T::from_count(n_a) * lse;
            for (b, &logit) in row.iter().enumerate() {
                let c = counts.get(a, b);
                if c > 0 {
                    row_loss = row_loss - T::from_count(c) * logit;
                }
            }
            acc = acc + row_loss;
        }
        Ok((acc / total).max(T::zero()))
    }

    /// Analytic gradient of [`forward_loss`](Self::forward_loss) with respect
    /// to the logit table. Rows for tokens that never appear as a context are
    /// exactly zero.
    pub fn grad(&self, batch: &[TokenSequence]) -> Result<Params<T>> {
        let counts = PairCounts::collect(batch, self.vocab)?;
        let total = T::from_count(counts.total);
        let mut g = vec![T::zero(); self.vocab * self.vocab];
        let mut probs = vec![T::zero(); self.vocab];
        for a in 0..self.vocab {
            let n_a = counts.row_total[a];
            if n_a == 0 {
                continue;
            }
            softmax_into(self.row(a as Token), &mut probs);
            let n_a = T::from_count(n_a);
            for b in 0..self.vocab {
                let c = T::from_count(counts.get(a, b));
                g[a * self.vocab + b] = (n_a * probs[b] - c) / total;
            }
        }
        Ok(Params::from_vec_unchecked(g))
    }

    /// Greedy decoding from the last context token. Emits the argmax of the
    /// current row (lowest id on ties) until [`END_TOKEN`] or `max_len` tokens.
    pub fn generate(&self, context: &[Token], max_len: usize) -> Result<TokenSequence> {
        validate_tokens(context, self.vocab, "context")?;
        if max_len == 0 {
            return Err(FedError::invalid("max_len must be positive"));
        }
        let mut out = Vec::with_capacity(max_len);
        let mut current = *context.last().expect("non-empty context");
        while out.len() < max_len {
            let next = argmax_lowest(self.row(current)) as Token;
            out.push(next);
            if next == END_TOKEN {
                break;
            }
            current = next;
        }
        Ok(out)
    }
}

/// Runs `cfg.local_steps` steps of plain gradient descent from `start` on the
/// sequences in `data`, optionally with a proximal term. Minibatches are drawn
/// from one seeded permutation of `data`, read cyclically.
///
/// Divergence is reported as [`FedError::NumericFailure`] with `round = 0`;
/// the federation driver fills in the actual round.
pub fn local_train<T: Scalar>(
    start: &Params<T>,
    vocab: usize,
    data: &[TokenSequence],
    cfg: &TrainConfig<T>,
    prox: Option<Proximal<'_, T>>,
) -> Result<Params<T>> {
    cfg.validate()?;
    if start.dim() != vocab * vocab {
        return Err(FedError::Shape {
            expected: vocab * vocab,
            found: start.dim(),
        });
    }
    if let Some(p) = &prox {
        start.ensure_same_dim(p.anchor)?;
        if !(p.mu > T::zero()) {
            return Err(FedError::config("mu", "proximal coefficient must be positive"));
        }
    }
    if data.is_empty() {
        return Err(FedError::invalid("local dataset is empty"));
    }
    PairCounts::collect(data, vocab)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_from(cfg.seed, &[]);
    order.shuffle(&mut rng);

    let mut model = BigramModel::new(vocab, start.clone())?;
    let mut cursor = 0usize;
    let mut batch: Vec<TokenSequence> = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.local_steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(data[order[cursor]].clone());
            cursor = (cursor + 1) % order.len();
        }
        let mut g = model.grad(&batch)?.into_vec();
        if let Some(p) = &prox {
            let (_, pg) = fedprox_penalty(&model.params, p.anchor, p.mu)?;
            for (gi, pi) in g.iter_mut().zip(pg.as_slice()) {
                *gi = *gi + *pi;
            }
        }
        let next: Vec<T> = model
            .params
            .as_slice()
            .iter()
            .zip(&g)
            .map(|(&w, &gi)| w - cfg.learning_rate * gi)
            .collect();
        if next.iter().any(|w| !w.is_finite()) {
            return Err(FedError::NumericFailure {
                round: 0,
                detail: format!("parameters became non-finite at local step {step}"),
            });
        }
        model.params = Params::from_vec_unchecked(next);
    }
    Ok(model.params)
}

/// Anything that maps a context to a response.
pub trait Responder: Sync {
    fn respond(&self, context: &[Token]) -> Result<TokenSequence>;
}

/// Greedy decoder over a borrowed bigram model.
#[derive(Debug, Clone, Copy)]
pub struct GreedyDecoder<'a, T> {
    pub model: &'a BigramModel<T>,
    pub max_len: usize,
}

impl<T: Scalar> Responder for GreedyDecoder<'_, T> {
    fn respond(&self, context: &[Token]) -> Result<TokenSequence> {
        self.model.generate(context, self.max_len)
    }
}

struct PairCounts {
    vocab: usize,
    counts: Vec<usize>,
    row_total: Vec<usize>,
    total: usize,
}

impl PairCounts {
    fn collect(batch: &[TokenSequence], vocab: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(FedError::invalid("batch must contain at least one sequence"));
        }
        let mut counts = vec![0usize; vocab * vocab];
        let mut row_total = vec![0usize; vocab];
        let mut total = 0usize;
        for seq in batch {
            if seq.len() < 2 {
                return Err(FedError::invalid("every training sequence needs at least 2 tokens"));
            }
            validate_tokens(seq, vocab, "training sequence")?;
            for w in seq.windows(2) {
                let (a, b) = (w[0] as usize, w[1] as usize);
                counts[a * vocab + b] += 1;
                row_total[a] += 1;
                total += 1;
            }
        }
        Ok(Self {
            vocab,
            counts,
            row_total,
            total,
        })
    }

    #[inline]
    fn get(&self, a: usize, b: usize) -> usize {
        self.counts[a * self.vocab + b]
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_model(vocab: usize, seed: u64) -> BigramModel<f64> {
        let mut rng = rng_from(seed, &[]);
        let v = (0..vocab * vocab).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        BigramModel::new(vocab, Params::new(v).unwrap()).unwrap()
    }

    /// Per-pair softmax cross-entropy, written without the count table.
    fn straight_line_loss(model: &BigramModel<f64>, batch: &[TokenSequence]) -> f64 {
        let v = model.vocab();
        let w = model.params().as_slice();
        let mut sum = 0.0;
        let mut n = 0usize;
        for seq in batch {
            for i in 0..seq.len() - 1 {
                let a = seq[i] as usize;
                let b = seq[i + 1] as usize;
                let row = &w[a * v..a * v + v];
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                let p = (row[b] - m).exp() / z;
                sum += -p.ln();
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn zero_params_give_log_vocab_loss() {
        let m = BigramModel::<f64>::zeros(4);
        let batch = vec![vec![1, 2, 3], vec![0, 0, 1, 3]];
        let loss = m.forward_loss(&batch).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let v = 4;
        let mut w = vec![0.0f64; v * v];
        // deterministic chain 0->1->2->3->0
        for a in 0..v {
            w[a * v + (a + 1) % v] = 1e6;
        }
        let m = BigramModel::new(v, Params::new(w).unwrap()).unwrap();
        let batch = vec![vec![0, 1, 2, 3, 0], vec![2, 3]];
        assert!(m.forward_loss(&batch).unwrap() < 1e-6);
    }

    #[test]
    fn loss_matches_straight_line_recomputation() {
        let m = random_model(6, 7);
        let batch = vec![vec![0, 5, 3, 3, 1], vec![2, 4], vec![1, 1, 0, 5, 2, 2]];
        let got = m.forward_loss(&batch).unwrap();
        let want = straight_line_loss(&m, &batch);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn invalid_batches_are_rejected() {
        let m = BigramModel::<f64>::zeros(3);
        assert!(matches!(m.forward_loss(&[]), Err(FedError::InvalidInput(_))));
        assert!(matches!(m.forward_loss(&[vec![0, 3]]), Err(FedError::InvalidInput(_))));
        assert!(matches!(m.forward_loss(&[vec![1]]), Err(FedError::InvalidInput(_))));
        assert!(m.grad(&[vec![4, 1]]).is_err());
    }

    #[test]
    fn gradient_vanishes_when_softmax_matches_data() {
        let v = 4u32;
        let m = BigramModel::<f64>::zeros(v as usize);
        let batch: Vec<TokenSequence> = (0..v).flat_map(|a| (0..v).map(move |b| vec![a, b])).collect();
        let g = m.grad(&batch).unwrap();
        assert!(g.as_slice().iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn gradient_rows_for_absent_contexts_are_zero() {
        let m = random_model(5, 3);
        let batch = vec![vec![1, 2, 1], vec![2, 4]];
        let g = m.grad(&batch).unwrap();
        for a in [0usize, 3, 4] {
            assert!(g.as_slice()[a * 5..a * 5 + 5].iter().all(|&x| x == 0.0));
        }
        assert!(g.as_slice()[5..10].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = random_model(5, 21);
        let batch = vec![vec![0, 1, 2, 3, 4], vec![4, 4, 2], vec![3, 0, 1]];
        let g = m.grad(&batch).unwrap();
        let h = 1e-5;
        for i in 0..25 {
            let mut plus = m.params().clone().into_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = BigramModel::new(5, Params::new(plus).unwrap()).unwrap().forward_loss(&batch).unwrap();
            let lm = BigramModel::new(5, Params::new(minus).unwrap()).unwrap().forward_loss(&batch).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(err < 1e-4 || (fd - g[i]).abs() < 1e-9, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn generate_stops_on_end_token() {
        let v = 5;
        let mut w = vec![0.0f64; v * v];
        w[3 * v] = 2.0;
        let m = BigramModel::new(v, Params::new(w).unwrap()).unwrap();
        assert_eq!(m.generate(&[3], 10).unwrap(), vec![0]);
        assert_eq!(BigramModel::<f64>::zeros(4).generate(&[2, 1], 5).unwrap(), vec![0]);
        assert!(m.generate(&[], 3).is_err());
    }

    #[test]
    fn generate_matches_manual_argmax_trace() {
        let m = random_model(8, 11);
        let got = m.generate(&[2, 5], 6).unwrap();

        let w = m.params().as_slice();
        let mut trace = Vec::new();
        let mut cur = 5usize;
        for _ in 0..6 {
            let row = &w[cur * 8..cur * 8 + 8];
            let mut best = 0;
            for j in 0..8 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            trace.push(best as Token);
            if best == 0 {
                break;
            }
            cur = best;
        }
        assert_eq!(got, trace);
        assert!(got.len() <= 6);
    }

    #[test]
    fn local_train_zero_gradient_is_fixed_point() {
        let v = 4u32;
        let data: Vec<TokenSequence> = (0..v).flat_map(|a| (0..v).map(move |b| vec![a, b])).collect();
        let start = Params::<f64>::zeros(16);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            local_steps: 5,
            batch_size: data.len(),
            seed: 1,
        };
        let out = local_train(&start, 4, &data, &cfg, None).unwrap();
        assert_eq!(out, start);
    }

    #[test]
    fn local_train_rejects_bad_config_and_shapes() {
        let data = vec![vec![0u32, 1]];
        let start = Params::<f64>::zeros(4);
        let cfg = TrainConfig::<f64> { learning_rate: 0.0, ..Default::default() };
        assert!(matches!(
            local_train(&start, 2, &data, &cfg, None),
            Err(FedError::Config { .. })
        ));
        let cfg = TrainConfig::<f64>::default();
        assert!(matches!(
            local_train(&Params::zeros(5), 2, &data, &cfg, None),
            Err(FedError::Shape { .. })
        ));
        let anchor = Params::zeros(3);
        let prox = Proximal { mu: 0.1, anchor: &anchor };
        assert!(matches!(
            local_train(&start, 2, &data, &cfg, Some(prox)),
            Err(FedError::Shape { .. })
        ));
    }

    #[test]
    fn proximal_term_vanishes_at_anchor() {
        let m = random_model(4, 2);
        let (loss, g) = fedprox_penalty(m.params(), m.params(), 3.7).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));

        // one step with prox anchored at start equals one plain step
        let data = vec![vec![0u32, 1, 2, 3], vec![3, 2, 1]];
        let cfg = TrainConfig { learning_rate: 0.1, local_steps: 1, batch_size: 2, seed: 4 };
        let plain = local_train(m.params(), 4, &data, &cfg, None).unwrap();
        let prox = local_train(
            m.params(),
            4,
            &data,
            &cfg,
            Some(Proximal { mu: 5.0, anchor: m.params() }),
        )
        .unwrap();
        assert_eq!(plain, prox);
    }

    #[test]
    fn local_train_descends_and_is_pure() {
        let data: Vec<TokenSequence> = vec![
            vec![1, 2, 3, 1, 2, 3],
            vec![2, 3, 1, 2],
            vec![3, 1, 2, 3, 0],
            vec![1, 2, 3, 0],
        ];
        let start = Params::<f64>::zeros(16);
        let cfg = TrainConfig { learning_rate: 0.1, local_steps: 5, batch_size: 2, seed: 17 };
        let before = start.clone();
        let out = local_train(&start, 4, &data, &cfg, None).unwrap();
        assert_eq!(start, before);
        assert_eq!(out, local_train(&start, 4, &data, &cfg, None).unwrap());

        let m0 = BigramModel::new(4, start).unwrap();
        let m1 = BigramModel::new(4, out).unwrap();
        let l0 = m0.forward_loss(&data).unwrap();
        let l1 = m1.forward_loss(&data).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
        // regression fixture
        assert!((l0 - 4f64.ln()).abs() < 1e-12);
        assert!((l1 - FIXTURE_LOSS_AFTER_5_STEPS).abs() < 1e-9, "loss after 5 steps: {l1:.12}");
    }

    const FIXTURE_LOSS_AFTER_5_STEPS: f64 = 1.294_315_585_738;

    #[test]
    fn works_in_f32() {
        let m = BigramModel::<f32>::zeros(3);
        let loss = m.forward_loss(&[vec![0, 1, 2]]).unwrap();
        assert!((loss - 3f32.ln()).abs() < 1e-6);
    }
}
