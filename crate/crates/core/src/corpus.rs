//! Seeded Markov-chain corpus with learnable bigram structure.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::{Token, TokenSequence, END_TOKEN};
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub n_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of possible successors of each content token.
    pub branching: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            n_sequences: 600,
            min_len: 6,
            max_len: 12,
            branching: 2,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(FedError::config("vocab_size", "must be at least 3"));
        }
        if self.n_sequences == 0 {
            return Err(FedError::config("n_sequences", "must be at least 1"));
        }
        if self.min_len < 4 {
            return Err(FedError::config("min_len", "must be at least 4"));
        }
        if self.max_len < self.min_len {
            return Err(FedError::config("max_len", "must be >= min_len"));
        }
        if self.branching == 0 || self.branching > self.vocab_size - 1 {
            return Err(FedError::config("branching", "must lie in 1..vocab_size"));
        }
        Ok(())
    }
}

/// Sequences of content tokens `1..V` drawn from a random sparse transition
/// table, each terminated by [`END_TOKEN`].
pub fn markov_corpus(cfg: &CorpusConfig) -> Result<Vec<TokenSequence>> {
    cfg.validate()?;
    let content = cfg.vocab_size - 1;
    let mut rng = rng_from(cfg.seed, &[0x6d61_726b]);

    let mut successors: Vec<Vec<(Token, f64)>> = Vec::with_capacity(content);
    for _ in 0..content {
        let picks = index::sample(&mut rng, content, cfg.branching);
        let raw: Vec<f64> = (0..cfg.branching).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut cum = 0.0;
        let row = picks
            .iter()
            .zip(raw)
            .map(|(i, w)| {
                cum += w / total;
                (i as Token + 1, cum)
            })
            .collect();
        successors.push(row);
    }

    let mut out = Vec::with_capacity(cfg.n_sequences);
    for _ in 0..cfg.n_sequences {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut seq = Vec::with_capacity(len);
        let mut cur = rng.random_range(1..=content as Token);
        seq.push(cur);
        while seq.len() < len - 1 {
            let u: f64 = rng.random();
            let row = &successors[cur as usize - 1];
            cur = row.iter().find(|(_, c)| u < *c).unwrap_or(row.last().expect("branching > 0")).0;
            seq.push(cur);
        }
        seq.push(END_TOKEN);
        out.push(seq);
    }
    Ok(out)
}

/// A (context, reference) evaluation pair.
pub type DialoguePair = (TokenSequence, TokenSequence);

/// Splits the last `n_eval` sequences off as (context, reference) pairs, cut
/// at the midpoint. Returns `(training sequences, evaluation pairs)`.
pub fn dialogue_split(
    mut corpus: Vec<TokenSequence>,
    n_eval: usize,
) -> Result<(Vec<TokenSequence>, Vec<DialoguePair>)> {
    if n_eval == 0 || n_eval >= corpus.len() {
        return Err(FedError::config("eval_pairs", "must lie in 1..n_sequences"));
    }
    let eval = corpus.split_off(corpus.len() - n_eval);
    let pairs = eval
        .into_iter()
        .map(|s| {
            let mid = s.len() / 2;
            (s[..mid].to_vec(), s[mid..].to_vec())
        })
        .collect::<Vec<_>>();
    if pairs.iter().any(|(c, r)| c.is_empty() || r.len() < 2) {
        return Err(FedError::invalid("evaluation sequences need at least 4 tokens"));
    }
    Ok((corpus, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_well_formed() {
        let cfg = CorpusConfig::default();
        let a = markov_corpus(&cfg).unwrap();
        assert_eq!(a, markov_corpus(&cfg).unwrap());
        assert_eq!(a.len(), cfg.n_sequences);
        for s in &a {
            assert!(s.len() >= cfg.min_len && s.len() <= cfg.max_len);
            assert_eq!(*s.last().unwrap(), END_TOKEN);
            assert!(s[..s.len() - 1].iter().all(|&t| t >= 1 && (t as usize) < cfg.vocab_size));
        }
        let other = markov_corpus(&CorpusConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn transitions_respect_branching() {
        let cfg = CorpusConfig { branching: 2, ..CorpusConfig::default() };
        let corpus = markov_corpus(&cfg).unwrap();
        let mut seen = vec![std::collections::BTreeSet::new(); cfg.vocab_size];
        for s in &corpus {
            for w in s[..s.len() - 1].windows(2) {
                seen[w[0] as usize].insert(w[1]);
            }
        }
        assert!(seen.iter().all(|s| s.len() <= 2));
    }

    #[test]
    fn split_shapes() {
        let corpus = markov_corpus(&CorpusConfig::default()).unwrap();
        let (train, eval) = dialogue_split(corpus, 50).unwrap();
        assert_eq!(train.len(), 550);
        assert_eq!(eval.len(), 50);
        assert!(eval.iter().all(|(c, r)| !c.is_empty() && r.len() >= 2));
        assert!(dialogue_split(vec![vec![1, 2, 3, 0]], 1).is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad = CorpusConfig { min_len: 3, ..CorpusConfig::default() };
        assert!(markov_corpus(&bad).is_err());
        let bad = CorpusConfig { branching: 16, ..CorpusConfig::default() };
        assert!(markov_corpus(&bad).is_err());
    }
}
